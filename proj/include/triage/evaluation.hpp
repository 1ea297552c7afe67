#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "triage/taxonomy.hpp"

namespace triage {

/// A prediction is a class or the reserved "unparseable" outcome, which
/// never matches any true label.
using Prediction = std::optional<ClassId>;

/// Rows are true classes, columns predicted classes, both in canonical
/// order. Unparseable predictions are counted per true class in a
/// separate column so the grid itself stays square.
struct ConfusionMatrix {
  std::size_t num_classes = 0;
  std::vector<std::size_t> counts;       // row-major num_classes x num_classes
  std::vector<std::size_t> unparseable;  // per true class

  std::size_t at(std::size_t truth, std::size_t predicted) const {
    return counts[truth * num_classes + predicted];
  }
  std::size_t total() const;
  std::size_t support(std::size_t truth) const;
};

ConfusionMatrix confusion_matrix(const std::vector<ClassId>& truth,
                                 const std::vector<Prediction>& predicted,
                                 std::size_t num_classes);
ConfusionMatrix confusion_matrix(const std::vector<ClassId>& truth,
                                 const std::vector<ClassId>& predicted, std::size_t num_classes);

/// Per-class F1 = 2PR/(P+R), 0 when P+R = 0.
std::vector<double> per_class_f1(const ConfusionMatrix& matrix);

/// Per-class F1 averaged with weights proportional to true-class support.
double weighted_f1(const ConfusionMatrix& matrix);
double weighted_f1(const std::vector<ClassId>& truth, const std::vector<Prediction>& predicted,
                   std::size_t num_classes);
double weighted_f1(const std::vector<ClassId>& truth, const std::vector<ClassId>& predicted,
                   std::size_t num_classes);

struct EvalReport {
  ConfusionMatrix confusion;
  std::vector<double> per_class_f1;
  double weighted_f1 = 0.0;
  double accuracy = 0.0;
  std::size_t n = 0;
};

EvalReport evaluate(const std::vector<ClassId>& truth, const std::vector<Prediction>& predicted,
                    std::size_t num_classes);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Cross-seed aggregate. Standard deviations are population (divide by n).
struct RunAggregate {
  std::vector<MeanStd> per_class;
  MeanStd weighted;
  std::vector<std::uint64_t> seeds;
};

RunAggregate aggregate_runs(const std::vector<EvalReport>& reports,
                            const std::vector<std::uint64_t>& seeds);

/// "84.48±0.69": both values as percentages with two decimals.
std::string format_mean_std(const MeanStd& value);

nlohmann::json report_to_json(const EvalReport& report, const Taxonomy& taxonomy);
nlohmann::json aggregate_to_json(const RunAggregate& aggregate, const Taxonomy& taxonomy);

/// Markdown table: one row per class in canonical order, then the
/// weighted average row.
std::string render_aggregate_table(const RunAggregate& aggregate, const Taxonomy& taxonomy,
                                   const std::string& column_title);

/// CSV count grid with a header row of class letters; an extra
/// "UNPARSEABLE" column appears when any prediction was unparseable.
std::string confusion_to_csv(const ConfusionMatrix& matrix, const Taxonomy& taxonomy);

}  // namespace triage
