#include "triage/evaluation.hpp"

#include <cmath>
#include <numeric>
#include <set>

#include <fmt/format.h>

#include "triage/error.hpp"

namespace triage {

std::size_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0}) +
         std::accumulate(unparseable.begin(), unparseable.end(), std::size_t{0});
}

std::size_t ConfusionMatrix::support(std::size_t truth) const {
  std::size_t sum = unparseable[truth];
  for (std::size_t p = 0; p < num_classes; ++p) sum += at(truth, p);
  return sum;
}

ConfusionMatrix confusion_matrix(const std::vector<ClassId>& truth,
                                 const std::vector<Prediction>& predicted,
                                 std::size_t num_classes) {
  if (truth.size() != predicted.size()) {
    throw Error(fmt::format("confusion_matrix: length mismatch ({} truths, {} predictions)",
                            truth.size(), predicted.size()));
  }
  ConfusionMatrix matrix;
  matrix.num_classes = num_classes;
  matrix.counts.assign(num_classes * num_classes, 0);
  matrix.unparseable.assign(num_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const std::size_t t = truth[i].value;
    if (t >= num_classes) throw Error(fmt::format("true label {} out of range", t));
    if (!predicted[i]) {
      ++matrix.unparseable[t];
      continue;
    }
    const std::size_t p = predicted[i]->value;
    if (p >= num_classes) throw Error(fmt::format("predicted label {} out of range", p));
    ++matrix.counts[t * num_classes + p];
  }
  return matrix;
}

ConfusionMatrix confusion_matrix(const std::vector<ClassId>& truth,
                                 const std::vector<ClassId>& predicted, std::size_t num_classes) {
  return confusion_matrix(truth, std::vector<Prediction>(predicted.begin(), predicted.end()),
                          num_classes);
}

std::vector<double> per_class_f1(const ConfusionMatrix& matrix) {
  const std::size_t k = matrix.num_classes;
  std::vector<double> f1(k, 0.0);
  // 2tp / (2tp + fp + fn): integer counts, a single rounding
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t tp = matrix.at(c, c);
    std::size_t predicted = 0;
    for (std::size_t t = 0; t < k; ++t) predicted += matrix.at(t, c);
    const std::size_t fp = predicted - tp;
    const std::size_t fn = matrix.support(c) - tp;
    if (tp > 0) f1[c] = static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
  }
  return f1;
}

double weighted_f1(const ConfusionMatrix& matrix) {
  const std::size_t n = matrix.total();
  if (n == 0) throw Error("weighted_f1: empty input");
  const auto f1 = per_class_f1(matrix);
  double sum = 0.0;
  for (std::size_t c = 0; c < matrix.num_classes; ++c) {
    sum += static_cast<double>(matrix.support(c)) * f1[c];
  }
  return sum / static_cast<double>(n);
}

double weighted_f1(const std::vector<ClassId>& truth, const std::vector<Prediction>& predicted,
                   std::size_t num_classes) {
  if (truth.empty()) throw Error("weighted_f1: empty input");
  return weighted_f1(confusion_matrix(truth, predicted, num_classes));
}

double weighted_f1(const std::vector<ClassId>& truth, const std::vector<ClassId>& predicted,
                   std::size_t num_classes) {
  if (truth.empty()) throw Error("weighted_f1: empty input");
  return weighted_f1(confusion_matrix(truth, predicted, num_classes));
}

EvalReport evaluate(const std::vector<ClassId>& truth, const std::vector<Prediction>& predicted,
                    std::size_t num_classes) {
  if (truth.empty()) throw Error("evaluate: empty input");
  EvalReport report;
  report.confusion = confusion_matrix(truth, predicted, num_classes);
  report.per_class_f1 = per_class_f1(report.confusion);
  report.weighted_f1 = weighted_f1(report.confusion);
  report.n = truth.size();
  std::size_t correct = 0;
  for (std::size_t c = 0; c < num_classes; ++c) correct += report.confusion.at(c, c);
  report.accuracy = static_cast<double>(correct) / static_cast<double>(report.n);
  return report;
}

namespace {

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd out;
  if (values.empty()) return out;
  const double n = static_cast<double>(values.size());
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double squares = 0.0;
  for (double v : values) squares += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(squares / n);
  return out;
}

}  // namespace

RunAggregate aggregate_runs(const std::vector<EvalReport>& reports,
                            const std::vector<std::uint64_t>& seeds) {
  if (reports.empty()) throw Error("aggregate_runs: no reports");
  if (!seeds.empty() && seeds.size() != reports.size()) {
    throw Error(fmt::format("aggregate_runs: {} reports but {} seeds", reports.size(),
                            seeds.size()));
  }
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw Error("aggregate_runs: seeds must be distinct");
  }
  const std::size_t k = reports.front().per_class_f1.size();
  RunAggregate aggregate;
  aggregate.seeds = seeds;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> values;
    for (const auto& report : reports) values.push_back(report.per_class_f1.at(c));
    aggregate.per_class.push_back(mean_std(values));
  }
  std::vector<double> weighted;
  for (const auto& report : reports) weighted.push_back(report.weighted_f1);
  aggregate.weighted = mean_std(weighted);
  return aggregate;
}

std::string format_mean_std(const MeanStd& value) {
  return fmt::format("{:.2f}±{:.2f}", 100.0 * value.mean, 100.0 * value.std);
}

nlohmann::json report_to_json(const EvalReport& report, const Taxonomy& taxonomy) {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < report.per_class_f1.size(); ++c) {
    const auto& label = taxonomy.at(ClassId{c});
    per_class.push_back({{"letter", std::string(1, label.letter)},
                         {"class", label.name},
                         {"support", report.confusion.support(c)},
                         {"f1", report.per_class_f1[c]}});
  }
  nlohmann::json grid = nlohmann::json::array();
  for (std::size_t t = 0; t < report.confusion.num_classes; ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t p = 0; p < report.confusion.num_classes; ++p) {
      row.push_back(report.confusion.at(t, p));
    }
    grid.push_back(row);
  }
  return {{"n", report.n},
          {"weighted_f1", report.weighted_f1},
          {"accuracy", report.accuracy},
          {"per_class", per_class},
          {"confusion", grid},
          {"unparseable", report.confusion.unparseable}};
}

nlohmann::json aggregate_to_json(const RunAggregate& aggregate, const Taxonomy& taxonomy) {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < aggregate.per_class.size(); ++c) {
    const auto& label = taxonomy.at(ClassId{c});
    per_class.push_back({{"class", label.name},
                         {"mean", aggregate.per_class[c].mean},
                         {"std", aggregate.per_class[c].std},
                         {"formatted", format_mean_std(aggregate.per_class[c])}});
  }
  return {{"seeds", aggregate.seeds},
          {"std_estimator", "population"},
          {"per_class", per_class},
          {"weighted",
           {{"mean", aggregate.weighted.mean},
            {"std", aggregate.weighted.std},
            {"formatted", format_mean_std(aggregate.weighted)}}}};
}

std::string render_aggregate_table(const RunAggregate& aggregate, const Taxonomy& taxonomy,
                                   const std::string& column_title) {
  std::string out = fmt::format("| Class | {} |\n|---|---|\n", column_title);
  for (std::size_t c = 0; c < aggregate.per_class.size(); ++c) {
    out += fmt::format("| {} | {} |\n", taxonomy.at(ClassId{c}).name,
                       format_mean_std(aggregate.per_class[c]));
  }
  out += fmt::format("| F1 Weighted Average | {} |\n", format_mean_std(aggregate.weighted));
  return out;
}

std::string confusion_to_csv(const ConfusionMatrix& matrix, const Taxonomy& taxonomy) {
  const bool any_unparseable =
      std::accumulate(matrix.unparseable.begin(), matrix.unparseable.end(), std::size_t{0}) > 0;
  std::string out = "true\\pred";
  for (std::size_t p = 0; p < matrix.num_classes; ++p) {
    out += ',';
    out += taxonomy.at(ClassId{p}).letter;
  }
  if (any_unparseable) out += ",UNPARSEABLE";
  out += '\n';
  for (std::size_t t = 0; t < matrix.num_classes; ++t) {
    out += taxonomy.at(ClassId{t}).letter;
    for (std::size_t p = 0; p < matrix.num_classes; ++p) out += fmt::format(",{}", matrix.at(t, p));
    if (any_unparseable) out += fmt::format(",{}", matrix.unparseable[t]);
    out += '\n';
  }
  out += "\n# legend\n";
  for (const auto& label : taxonomy.canonical_order()) {
    out += fmt::format("# {} = {}\n", label.letter, label.name);
  }
  return out;
}

}  // namespace triage
