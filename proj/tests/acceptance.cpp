// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Tolerances and budgets are fixed below.

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "support.hpp"
#include "triage/error.hpp"
#include "triage/annotation.hpp"
#include "triage/classifiers.hpp"
#include "triage/corpus.hpp"
#include "triage/topics.hpp"
#include "triage/trends.hpp"
#include "triage/util/io.hpp"
#include "triage/zeroshot.hpp"

using namespace triage;
using namespace triage::testing;

namespace {

constexpr double kKappaTol = 1e-9;
constexpr double kGoldenTol = 1e-9;
constexpr double kHandCaseTol = 1e-12;
constexpr double kGradTol = 1e-4;
constexpr double kGradAbsFloor = 1e-8;
constexpr double kKappaBudgetSeconds = 30.0;
constexpr double kGradBudgetSeconds = 60.0;
constexpr double kMinTrainAccuracy = 0.95;
constexpr double kMinGnbAccuracy = 0.95;
constexpr double kMinTopicAgreement = 0.95;

// Collects failed checks; a criterion passes when none were recorded.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) failures_.push_back(what);
  }
  void near(double got, double want, double tol, const std::string& what) {
    expect(std::abs(got - want) <= tol, fmt::format("{}: got {:.17g}, want {:.17g}", what, got, want));
  }
  void note(std::string text) { notes_.push_back(std::move(text)); }
  bool ok() const { return failures_.empty(); }
  const std::vector<std::string>& failures() const { return failures_; }
  const std::vector<std::string>& notes() const { return notes_; }

 private:
  std::vector<std::string> failures_;
  std::vector<std::string> notes_;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

json read_json(const fs::path& path) { return json::parse(read_file(path)); }

std::vector<EncoderInput> inputs_of(const std::vector<Sample>& samples) {
  std::vector<EncoderInput> out;
  for (const auto& s : samples) out.push_back(s.input);
  return out;
}

// ---- 1 ----------------------------------------------------------------------

void kappa_oracles(Check& c) {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(1001);
  const std::size_t k = 13;
  double worst = 0.0;
  for (int table = 0; table < 1000; ++table) {
    const std::size_t items = 2 + rng.below(299);
    // skew the label distribution per table so agreement varies
    const std::size_t effective = 1 + rng.below(k);
    const double copy_rate = rng.uniform();
    std::vector<std::vector<std::size_t>> rows(items, std::vector<std::size_t>(3));
    for (auto& row : rows) {
      row[0] = rng.below(effective);
      for (std::size_t a = 1; a < 3; ++a) row[a] = rng.uniform() < copy_rate ? row[0] : rng.below(k);
    }
    std::vector<std::vector<std::size_t>> columns(3, std::vector<std::size_t>(items));
    std::vector<std::vector<ClassId>> table_ids(items);
    for (std::size_t i = 0; i < items; ++i) {
      for (std::size_t a = 0; a < 3; ++a) columns[a][i] = rows[i][a];
      table_ids[i] = to_ids(rows[i]);
    }
    for (std::size_t a = 0; a < 3; ++a) {
      for (std::size_t b = a + 1; b < 3; ++b) {
        const double got = cohen_kappa(to_ids(columns[a]), to_ids(columns[b]));
        const double want = oracle_cohen(columns[a], columns[b], k);
        worst = std::max(worst, std::abs(got - want));
        c.near(got, want, kKappaTol, fmt::format("table {} cohen {}-{}", table, a + 1, b + 1));
      }
    }
    const double got = fleiss_kappa(table_ids);
    const double want = oracle_fleiss(rows, k);
    worst = std::max(worst, std::abs(got - want));
    c.near(got, want, kKappaTol, fmt::format("table {} fleiss", table));
  }
  const double elapsed = seconds_since(start);
  c.expect(elapsed < kKappaBudgetSeconds, fmt::format("runtime {:.2f}s over budget", elapsed));
  c.note(fmt::format("1000 tables, max |diff| {:.2e}, {:.2f}s", worst, elapsed));
}

// ---- 2 ----------------------------------------------------------------------

void agreement_table(Check& c) {
  TempDir dir;
  write_file(dir / "c.json",
             dump_json({{"agree", {{"annotations", fixture("annotations_synthetic.jsonl").string()}}}}));
  const auto r = run_cli({"agree", "--config", (dir / "c.json").string(), "--out",
                          (dir / "out").string()});
  c.expect(r.exit_code == 0, "agree exited with " + std::to_string(r.exit_code) + ": " + r.err);
  if (r.exit_code != 0) return;
  const json got = read_json(dir / "out" / "agreement.json");
  const json golden = read_json(fixture("agreement_golden.json"));
  const auto& rows = got.at("rows");
  c.expect(rows.size() == golden.at("rows").size(), "row count");
  for (std::size_t i = 0; i < std::min(rows.size(), golden["rows"].size()); ++i) {
    const auto name = golden["rows"][i]["metric"].get<std::string>();
    c.expect(rows[i]["metric"] == name, "row name " + name);
    c.near(rows[i]["value"].get<double>(), golden["rows"][i]["value"].get<double>(), kGoldenTol,
           name);
  }
  std::size_t adjudicated = 0;
  for_each_line(dir / "out" / "adjudicated.jsonl", [&](std::size_t line, const std::string& text) {
    const json j = json::parse(text);
    c.expect(j.at("label") == golden["adjudicated"][line - 1]["label"],
             "adjudicated label line " + std::to_string(line));
    ++adjudicated;
  });
  c.expect(adjudicated == golden.at("adjudicated").size(), "adjudicated count");

  Rng rng(2002);
  std::size_t violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t items = 1 + rng.below(300);
    const std::size_t k = 1 + rng.below(13);
    std::vector<AnnotationSet> sets(items);
    for (std::size_t i = 0; i < items; ++i) {
      sets[i].post_id = std::to_string(i);
      for (int a = 0; a < 3; ++a) {
        sets[i].votes.push_back({"ann" + std::to_string(a + 1), ClassId{rng.below(k)}});
      }
    }
    const auto report = agreement_report(sets);
    violations += report.majority_rate < report.full_rate;
  }
  c.expect(violations == 0, fmt::format("majority < full on {} inputs", violations));
  c.note(fmt::format("{} rows, 1000 random panels", rows.size()));
}

// ---- 3 ----------------------------------------------------------------------

void metric_oracles(Check& c) {
  Rng rng(3003);
  const std::size_t k = 13;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(500);
    std::vector<std::size_t> truth(n), predicted(n);
    for (auto& t : truth) t = rng.below(k);
    std::vector<Prediction> preds;
    for (auto& p : predicted) {
      // about one in ten predictions unparseable
      p = rng.below(10) == 0 ? k : rng.below(k);
      preds.push_back(p == k ? Prediction{} : Prediction{ClassId{p}});
    }
    const auto matrix = confusion_matrix(to_ids(truth), preds, k);
    const auto oracle = oracle_confusion(truth, predicted, k);
    bool same = true;
    for (std::size_t r = 0; r < k; ++r) {
      for (std::size_t col = 0; col < k; ++col) same &= matrix.at(r, col) == oracle[r][col];
      same &= matrix.unparseable[r] == oracle[r][k];
    }
    c.expect(same, fmt::format("confusion differs on pair {}", trial));
    const double got = weighted_f1(to_ids(truth), preds, k);
    const double want = oracle_weighted_f1(truth, predicted, k);
    c.expect(got == want, fmt::format("weighted F1 pair {}: {:.17g} vs {:.17g}", trial, got, want));
    c.expect(weighted_f1(to_ids(truth), to_ids(truth), k) == 1.0, "f1(t, t) != 1");
  }
  c.near(weighted_f1(to_ids({0, 0, 1, 1}), to_ids({0, 1, 1, 1}), k), 11.0 / 15.0, kHandCaseTol,
         "hand case");
  c.note("500 pairs exact");
}

// ---- 4 ----------------------------------------------------------------------

void query_strings(Check& c) {
  const json golden = read_json(fixture("queries_golden.json"));
  std::size_t checked = 0;
  for (const auto& row : golden.at("labeled")) {
    QuerySpec spec;
    spec.hashtags = row.at("hashtags").get<std::vector<std::string>>();
    c.expect(build_query(spec) == row.at("expected").get<std::string>(), "labeled query");
    ++checked;
  }
  for (const auto& row : golden.at("trend")) {
    QuerySpec spec;
    spec.year = row.at("year").get<int>();
    spec.hashtags = row.at("hashtags").get<std::vector<std::string>>();
    c.expect(build_query(spec) == row.at("expected").get<std::string>(),
             fmt::format("trend query {}", spec.year));
    ++checked;
  }
  // the built-in lists produce the same strings
  std::map<int, std::string> labeled;
  for (const auto& row : golden.at("labeled")) {
    for (const auto& year : row.at("years")) labeled[year.get<int>()] = row.at("expected");
  }
  for (const auto& spec : labeled_collection_queries()) {
    c.expect(labeled.count(spec.year) && build_query(spec) == labeled[spec.year],
             fmt::format("built-in labeled query {}", spec.year));
  }
  const auto trend = trend_collection_queries();
  c.expect(trend.size() == golden.at("trend").size(), "trend query count");
  for (std::size_t i = 0; i < std::min(trend.size(), golden["trend"].size()); ++i) {
    c.expect(build_query(trend[i]) == golden["trend"][i]["expected"].get<std::string>(),
             fmt::format("built-in trend query {}", trend[i].year));
  }
  c.note(fmt::format("{} golden strings", checked));
}

// ---- 5 ----------------------------------------------------------------------

void architecture(Check& c) {
  auto f = separable_fixture();
  const FusionModelConfig defaults;
  c.expect(defaults.proj_dim == 512 && defaults.fusion_layers == 2 && defaults.heads == 8 &&
               defaults.ffn_dim == 2048 && defaults.dropout == 0.2 && defaults.head_hidden == 256 &&
               defaults.num_classes == 13 && defaults.fusion == FusionKind::transformer,
           "default config values");
  auto model = build_fusion_model(defaults, f.text, f.image, 1);
  std::map<std::string, ParameterShape> shapes;
  for (const auto& s : model->parameter_shapes()) shapes[s.name] = s;
  auto expect_shape = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    const auto it = shapes.find(name);
    c.expect(it != shapes.end() && it->second.rows == rows && it->second.cols == cols,
             fmt::format("shape of {}", name));
  };
  expect_shape("text_proj.weight", 768, 512);
  expect_shape("image_proj.weight", 768, 512);
  for (int layer = 0; layer < 2; ++layer) {
    const auto p = fmt::format("fusion.layers.{}.", layer);
    expect_shape(p + "attn.q_proj.weight", 512, 512);
    expect_shape(p + "linear1.weight", 512, 2048);
    expect_shape(p + "linear2.weight", 2048, 512);
  }
  c.expect(shapes.count("fusion.layers.2.linear1.weight") == 0, "exactly two fusion layers");
  expect_shape("head.hidden.weight", 512, 256);
  expect_shape("head.out.weight", 256, 13);

  const auto inputs = inputs_of(f.samples);
  const std::span<const EncoderInput> batch(inputs.data(), 7);
  const nn::Context eval{false, nullptr};
  for (const char* fusion : {"transformer", "concat", "cross_attention", "none"}) {
    const auto cfg = fusion_config_from_json({{"fusion", fusion}});
    auto m = build_fusion_model(cfg, f.text, f.image, 2);
    const auto logits = m->forward(batch, eval)->value;
    c.expect(logits.rows() == 7 && logits.cols() == 13, fmt::format("logits shape for {}", fusion));
  }
  // ablations from config alone
  auto linear = build_fusion_model(fusion_config_from_json({{"head", "linear"}}), f.text, f.image, 3);
  std::set<std::string> names;
  for (const auto& s : linear->parameter_shapes()) names.insert(s.name);
  c.expect(names.count("head.hidden.weight") == 0 && names.count("head.out.weight") == 1,
           "linear head ablation");
  auto none = build_fusion_model(fusion_config_from_json({{"fusion", "none"}}), f.text, f.image, 4);
  bool fusion_params = false;
  for (const auto& s : none->parameter_shapes()) fusion_params |= s.name.rfind("fusion.", 0) == 0;
  c.expect(!fusion_params, "no-fusion ablation has fusion parameters");
  c.expect(none->forward(batch, eval)->value.cols() == 13, "no-fusion logits");
  c.note(fmt::format("{} parameters in the default model", model->parameter_count()));
}

// ---- 6 ----------------------------------------------------------------------

void gradients(Check& c) {
  const auto start = std::chrono::steady_clock::now();
  std::string summary;
  for (auto kind : {FusionKind::transformer, FusionKind::concat, FusionKind::cross_attention}) {
    const auto g = gradient_check(kind, kGradTol, kGradAbsFloor);
    c.expect(g.checked > 0 && g.failed == 0,
             fmt::format("{}: {} of {} entries failed (worst {} at {:.2e})", to_string(kind),
                         g.failed, g.checked, g.worst_parameter, g.worst_relative));
    summary += fmt::format("{} worst {:.1e}; ", to_string(kind), g.worst_relative);
  }
  const double elapsed = seconds_since(start);
  c.expect(elapsed < kGradBudgetSeconds, fmt::format("runtime {:.2f}s over budget", elapsed));
  c.note(summary + fmt::format("{:.2f}s", elapsed));
}

// ---- 7 ----------------------------------------------------------------------

void training(Check& c) {
  auto f = separable_fixture();
  c.expect(f.samples.size() == 26, "fixture size");
  auto model = build_fusion_model({}, f.text, f.image, 11);
  TrainConfig config;
  config.epochs = 30;
  train(*model, f.samples, f.samples, config);
  const double acc = accuracy(*model, f.samples);
  c.expect(acc >= kMinTrainAccuracy, fmt::format("train accuracy {:.3f}", acc));

  auto frozen_lr = build_fusion_model({}, f.text, f.image, 12);
  const auto before = parameter_values(frozen_lr->parameters());
  TrainConfig zero;
  zero.learning_rate = 0.0;
  zero.epochs = 3;
  train(*frozen_lr, f.samples, f.samples, zero);
  c.expect(parameter_values(frozen_lr->parameters()) == before, "lr=0 changed parameters");

  std::shared_ptr<Encoder> text = make_encoder(tiny_local_config(Modality::text), 1);
  std::shared_ptr<Encoder> image = make_encoder(tiny_local_config(Modality::image), 2);
  std::vector<Sample> samples;
  for (int i = 0; i < 6; ++i) {
    Sample s;
    s.input.id = std::to_string(i);
    s.input.text = i % 2 ? "smoke over kelowna" : "evacuation order for jasper";
    s.input.image_path = fixture("images") / fmt::format("img{}.png", i);
    s.label = ClassId{static_cast<std::size_t>(i % 2)};
    samples.push_back(s);
  }
  FusionModelConfig small;
  small.proj_dim = 16;
  small.heads = 2;
  small.ffn_dim = 32;
  small.head_hidden = 8;
  auto local = build_fusion_model(small, text, image, 3);
  const auto text_before = parameter_values(text->parameters());
  const auto image_before = parameter_values(image->parameters());
  const auto head_before = parameter_values(local->fusion_parameters());
  TrainConfig freeze;
  freeze.epochs = 2;
  freeze.batch_size = 3;
  freeze.learning_rate = 1e-3;
  freeze.freeze_encoders = true;
  train(*local, samples, samples, freeze);
  c.expect(!text_before.empty() && parameter_values(text->parameters()) == text_before,
           "text encoder changed while frozen");
  c.expect(parameter_values(image->parameters()) == image_before,
           "image encoder changed while frozen");
  c.expect(parameter_values(local->fusion_parameters()) != head_before,
           "fusion parameters did not train");
  c.note(fmt::format("train accuracy {:.3f} after 30 epochs", acc));
}

// ---- 8 ----------------------------------------------------------------------

struct Blobs {
  nn::Matrix x;
  std::vector<std::size_t> y;
};

Blobs blobs(std::size_t classes, std::size_t per_class, Eigen::Index width, double spread,
            std::uint64_t seed) {
  Rng rng(seed);
  nn::Matrix centres(static_cast<Eigen::Index>(classes), width);
  for (Eigen::Index i = 0; i < centres.size(); ++i) centres.data()[i] = 3.0 * rng.normal();
  Blobs b;
  b.x.resize(static_cast<Eigen::Index>(classes * per_class), width);
  Eigen::Index row = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i, ++row) {
      for (Eigen::Index j = 0; j < width; ++j) {
        b.x(row, j) = centres(static_cast<Eigen::Index>(c), j) + spread * rng.normal();
      }
      b.y.push_back(c);
    }
  }
  return b;
}

double agreement(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < a.size(); ++i) hit += a[i] == b[i];
  return static_cast<double>(hit) / static_cast<double>(a.size());
}

void baselines(Check& c) {
  // concatenated text + image width
  const Eigen::Index width = 2 * static_cast<Eigen::Index>(kEncoderWidth);
  const auto train_set = blobs(13, 22, width, 1.0, 8);
  BaselineConfig knn;
  knn.kind = BaselineKind::KNN;
  const double knn_acc = agreement(fit_baseline(train_set.x, train_set.y, knn, 13)->predict(train_set.x),
                                   train_set.y);
  c.expect(knn_acc == 1.0, fmt::format("1-NN self accuracy {:.3f}", knn_acc));

  BaselineConfig svm;
  svm.kind = BaselineKind::SVM;
  const auto svm_model = fit_baseline(train_set.x, train_set.y, svm, 13);
  c.expect(svm_model->transformed_width() == 250,
           fmt::format("SVM width {}", svm_model->transformed_width()));

  const auto gnb_train = blobs(6, 50, 20, 1.0, 9);
  const auto gnb_test = blobs(6, 30, 20, 1.0, 9);
  BaselineConfig gnb;
  gnb.kind = BaselineKind::GNB;
  const double gnb_acc =
      agreement(fit_baseline(gnb_train.x, gnb_train.y, gnb, 6)->predict(gnb_test.x), gnb_test.y);
  c.expect(gnb_acc >= kMinGnbAccuracy, fmt::format("GNB accuracy {:.3f}", gnb_acc));
  c.note(fmt::format("1-NN {:.3f}, SVM width {}, GNB {:.3f}", knn_acc,
                     svm_model->transformed_width(), gnb_acc));
}

// ---- 9 ----------------------------------------------------------------------

void zeroshot(Check& c) {
  const auto prompt = build_prompt();
  c.expect(prompt.system == read_file(fixture("prompt_system.txt")), "system prompt differs");
  c.expect(prompt.user == read_file(fixture("prompt_user.txt")), "user prompt differs");
  const auto& taxonomy = Taxonomy::wildfire();
  for (const auto& cls : taxonomy.canonical_order()) {
    const auto parsed = parse_response(std::string(1, cls.letter));
    c.expect(parsed && *parsed == cls.id && taxonomy.letter_from_label(*parsed) == cls.letter,
             fmt::format("letter {} round trip", cls.letter));
  }
  const auto posts = load_posts(fixture("zeroshot_posts.jsonl")).posts;
  c.expect(posts.size() == 50, "fixture has 50 posts");
  RecordedClient client(fixture("zeroshot_responses.jsonl"));
  const auto results = classify_zeroshot(posts, client, VlmSettings{});
  const json expected = read_json(fixture("zeroshot_expected.json"));
  c.expect(results.size() == expected.at("results").size(), "result count");
  std::size_t unparseable = 0, mismatched = 0;
  for (std::size_t i = 0; i < std::min(results.size(), expected["results"].size()); ++i) {
    const auto& e = expected["results"][i];
    const std::optional<char> want =
        e.at("label").is_null() ? std::nullopt
                                : std::optional<char>(e.at("label").get<std::string>()[0]);
    const std::optional<char> got =
        results[i].label ? std::optional<char>(taxonomy.letter_from_label(*results[i].label))
                         : std::nullopt;
    mismatched += got != want || results[i].retries != e.at("retries").get<std::size_t>() ||
                  results[i].error.has_value() != e.at("error").get<bool>();
    unparseable += !results[i].label.has_value();
  }
  c.expect(mismatched == 0, fmt::format("{} results differ from expected", mismatched));
  c.expect(unparseable == expected.at("unparseable").get<std::size_t>(),
           fmt::format("unparseable {}", unparseable));
  c.note(fmt::format("50 posts, {} unparseable", unparseable));
}

// ---- 10 ---------------------------------------------------------------------

void topic_pipeline(Check& c) {
  const auto posts = load_posts(fixture("topics_posts.jsonl")).posts;
  RecordedEmbedder embedder(fixture("topics_embeddings.jsonl"));
  const auto embedded = embed_posts(posts, embedder);
  c.expect(embedded.errors.empty(), "embedding errors");
  std::vector<Document> docs;
  for (auto row : embedded.rows) docs.push_back({posts[row].id, posts[row].text});
  const auto model = fit_topics(embedded.embeddings, docs, TopicModelConfig{});
  std::map<std::string, int> truth;
  for_each_line(fixture("topics_truth.jsonl"), [&](std::size_t, const std::string& line) {
    const json j = json::parse(line);
    truth[j.at("post_id").get<std::string>()] = j.at("cluster").get<int>();
  });
  c.expect(model.topics.size() == 2, fmt::format("{} topics", model.topics.size()));
  std::size_t agree = 0;
  bool planted = false;
  for (const auto& topic : model.topics) {
    std::map<int, std::size_t> counts;
    for (const auto& id : topic.member_ids) ++counts[truth.at(id)];
    int best_cluster = -1;
    std::size_t best = 0;
    for (const auto& [cluster, n] : counts) {
      if (n > best) {
        best = n;
        best_cluster = cluster;
      }
    }
    agree += best;
    if (best_cluster == 0) {
      const auto& kw = topic.keywords;
      const auto end = kw.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(10, kw.size()));
      planted |= std::find(kw.begin(), end, "smoke") != end;
    }
  }
  const double rate = static_cast<double>(agree) / static_cast<double>(truth.size());
  c.expect(rate >= kMinTopicAgreement, fmt::format("membership agreement {:.3f}", rate));
  c.expect(planted, "\"smoke\" missing from its topic's top-10 keywords");

  std::size_t before = 0;
  for (const auto& t : model.topics) before += t.member_ids.size();
  const auto reduced = reduce_topics(model, 1);
  std::size_t after = 0;
  for (const auto& t : reduced.topics) after += t.member_ids.size();
  c.expect(reduced.topics.size() == 1 && after == before &&
               reduced.outlier_count() == model.outlier_count(),
           "reduce_topics changed membership totals");
  c.note(fmt::format("{} topics, agreement {:.3f}, {} outliers", model.topics.size(), rate,
                     model.outlier_count()));
}

// ---- 11 ---------------------------------------------------------------------

void trends(Check& c) {
  const auto& taxonomy = Taxonomy::wildfire();
  std::vector<ClassId> all;
  for (const auto& cls : taxonomy.canonical_order()) all.push_back(cls.id);
  auto check_partition = [&](const std::vector<std::pair<Post, ClassId>>& predicted, int year,
                             const std::string& label) {
    std::vector<Post> posts;
    for (const auto& [p, cls] : predicted) posts.push_back(p);
    const auto total = weekly_counts(posts, year);
    const auto series = class_trend_series(predicted, year, all);
    bool ok = true;
    for (std::size_t w = 0; w < total.buckets.size(); ++w) {
      std::size_t sum = 0;
      for (const auto& s : series) sum += s.buckets[w].second;
      ok &= sum == total.buckets[w].second;
    }
    c.expect(ok, "class series do not sum to weekly totals on " + label);
    return series;
  };

  const auto posts = load_posts(fixture("trends_posts.jsonl")).posts;
  std::map<std::string, ClassId> predictions;
  for_each_line(fixture("trends_predictions.jsonl"), [&](std::size_t, const std::string& line) {
    const json j = json::parse(line);
    predictions[j.at("id").get<std::string>()] =
        taxonomy.label_from_letter(j.at("predicted").get<std::string>()[0]).id;
  });
  std::vector<std::pair<Post, ClassId>> predicted;
  for (const auto& p : posts) predicted.emplace_back(p, predictions.at(p.id));
  const json expected = read_json(fixture("trends_expected.json"));
  const auto series = check_partition(predicted, 2023, "trends fixture");
  const auto spike_class = *taxonomy.find(expected.at("spike_class").get<std::string>());
  const auto& spike = series[spike_class.value];
  const auto spike_week = format_date(spike.buckets[spike.argmax()].first);
  c.expect(spike_week == expected.at("spike_week").get<std::string>(), "spike week " + spike_week);

  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    std::vector<std::pair<Post, ClassId>> random;
    const auto start = std::chrono::sys_days{std::chrono::year{2022} / 11 / 1};
    for (int i = 0; i < 400; ++i) {
      Post p;
      p.id = std::to_string(i);
      p.created_at = std::chrono::time_point_cast<std::chrono::seconds>(start) +
                     std::chrono::seconds{rng.below(86400ull * 450)};
      random.emplace_back(p, ClassId{rng.below(13)});
    }
    check_partition(random, 2023, fmt::format("random fixture {}", seed));
  }

  const auto dist = province_distribution(posts, Gazetteer::load(fixture("gazetteer.csv")));
  std::size_t total = 0;
  for (const auto& [key, n] : dist) total += n;
  c.expect(total == posts.size(), "province distribution does not partition the input");
  c.expect(json(dist) == expected.at("provinces"), "province counts differ from expected");

  std::ifstream table(fixture("class_counts.csv"));
  std::string line;
  std::getline(table, line);
  std::size_t sum = 0;
  while (std::getline(table, line)) sum += std::stoul(line.substr(line.rfind(',') + 1));
  c.expect(sum == 4688, fmt::format("table counts sum to {}", sum));
  c.expect(taxonomy.total_reference_count() == 4688, "taxonomy reference counts");
  c.note(fmt::format("spike {}, {} posts partitioned, class total {}", spike_week, total, sum));
}

// ---- 12 ---------------------------------------------------------------------

// Runs `command`, reruns it from the written manifest into a second
// directory and compares every recorded output byte for byte.
void rerun_identical(Check& c, const std::string& command, const fs::path& config,
                     const fs::path& root, const std::vector<std::string>& extra = {}) {
  const fs::path first = root / (command + "_a");
  const fs::path second = root / (command + "_b");
  std::vector<std::string> args{command, "--config", config.string(), "--out", first.string()};
  args.insert(args.end(), extra.begin(), extra.end());
  const auto r1 = run_cli(args);
  c.expect(r1.exit_code == 0, command + " failed: " + r1.err);
  if (r1.exit_code != 0) return;
  const auto r2 = run_cli({command, "--config", (first / "manifest.json").string(), "--out",
                           second.string()});
  c.expect(r2.exit_code == 0, command + " rerun failed: " + r2.err);
  if (r2.exit_code != 0) return;
  const json m1 = read_json(first / "manifest.json");
  const json m2 = read_json(second / "manifest.json");
  c.expect(m1 == m2, command + ": manifests differ");
  for (const auto& [rel, hash] : m1.at("outputs").items()) {
    c.expect(read_file(first / rel) == read_file(second / rel), command + ": " + rel + " differs");
  }
}

void reproducibility(Check& c) {
  TempDir dir;
  auto config = [&](const std::string& name, const json& body) {
    write_file(dir / name, dump_json(body));
    return dir / name;
  };
  rerun_identical(c, "ingest",
                  config("ingest.json", {{"ingest",
                                          {{"inputs", {fixture("posts_duplicates.jsonl").string(),
                                                       fixture("posts_bad_timestamp.jsonl").string()}}}}}),
                  dir.path());
  rerun_identical(c, "agree",
                  config("agree.json",
                         {{"agree", {{"annotations", fixture("annotations_synthetic.jsonl").string()}}}}),
                  dir.path());
  rerun_identical(c, "topics",
                  config("topics.json", {{"topics",
                                          {{"posts", fixture("topics_posts.jsonl").string()},
                                           {"embeddings", fixture("topics_embeddings.jsonl").string()}}}}),
                  dir.path());
  rerun_identical(c, "zeroshot",
                  config("zeroshot.json",
                         {{"zeroshot",
                           {{"posts", fixture("zeroshot_posts.jsonl").string()},
                            {"responses", fixture("zeroshot_responses.jsonl").string()},
                            {"labels", fixture("zeroshot_labels.jsonl").string()}}}}),
                  dir.path());
  rerun_identical(c, "trends",
                  config("trends.json", {{"trends",
                                          {{"posts", fixture("trends_posts.jsonl").string()},
                                           {"predictions", fixture("trends_predictions.jsonl").string()},
                                           {"gazetteer", fixture("gazetteer.csv").string()}}}}),
                  dir.path());

  const fs::path corpus = dir / "corpus";
  write_training_corpus(corpus);
  rerun_identical(c, "train", corpus / "config.json", dir.path(), {"--seed", "8,12,14"});
  const fs::path a = dir / "train_a";
  const fs::path b = dir / "train_b";
  if (!fs::exists(b / "aggregate.json")) return;

  // checkpoints load to equal parameters
  for (int seed : {8, 12, 14}) {
    const auto ckpt = fmt::format("seed_{}/checkpoint.bin", seed);
    const json header = read_checkpoint_header(a / ckpt);
    auto cache = std::make_shared<const FeatureCache>(FeatureCache::read(corpus / "features.bin"));
    std::shared_ptr<Encoder> text = make_cached_encoder(cache, Modality::text);
    std::shared_ptr<Encoder> image = make_cached_encoder(cache, Modality::image);
    const auto cfg = fusion_config_from_json(header.at("model"));
    auto m1 = build_fusion_model(cfg, text, image, 1);
    auto m2 = build_fusion_model(cfg, text, image, 2);
    load_checkpoint(a / ckpt, *m1);
    load_checkpoint(b / ckpt, *m2);
    c.expect(parameter_values(m1->parameters()) == parameter_values(m2->parameters()),
             "checkpoint parameters differ for seed " + std::to_string(seed));
  }

  // eval from checkpoints, rerun from its manifest too
  const json eval_body = {
      {"eval",
       {{"posts", (corpus / "posts.jsonl").string()},
        {"labels", (corpus / "labels.jsonl").string()},
        {"feature_cache", (corpus / "features.bin").string()},
        {"runs", {{{"seed", 8}, {"checkpoint", (a / "seed_8/checkpoint.bin").string()}},
                  {{"seed", 12}, {"checkpoint", (a / "seed_12/checkpoint.bin").string()}},
                  {{"seed", 14}, {"checkpoint", (a / "seed_14/checkpoint.bin").string()}}}}}}};
  rerun_identical(c, "eval", config("eval.json", eval_body), dir.path());

  // aggregate format and population std
  const json aggregate = read_json(a / "aggregate.json");
  std::vector<double> f1;
  for (int seed : {8, 12, 14}) {
    f1.push_back(read_json(a / fmt::format("seed_{}/report.json", seed)).at("weighted_f1").get<double>());
  }
  const double mean = (f1[0] + f1[1] + f1[2]) / 3.0;
  double var = 0.0;
  for (double v : f1) var += (v - mean) * (v - mean);
  const double population_std = std::sqrt(var / 3.0);
  c.expect(aggregate.value("std_estimator", "") == "population", "std estimator not population");
  const auto& weighted = aggregate.at("weighted");
  c.near(weighted.at("mean").get<double>(), mean, 1e-12, "aggregate mean");
  c.near(weighted.at("std").get<double>(), population_std, 1e-12, "aggregate std");
  const std::string formatted = format_mean_std({mean, population_std});
  const std::regex shape(R"(\d+\.\d{2}±\d+\.\d{2})");
  c.expect(std::regex_match(formatted, shape), "format " + formatted);
  const std::string table = read_file(a / "aggregate.md");
  c.expect(table.find(formatted) != std::string::npos, "aggregate table lacks " + formatted);
  c.note("weighted F1 " + formatted + " over seeds 8, 12, 14");
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Check&)>>> criteria{
      {"agreement oracle equivalence", kappa_oracles},
      {"agreement table reproduction", agreement_table},
      {"metric oracle equivalence", metric_oracles},
      {"query byte-exactness", query_strings},
      {"architecture conformance", architecture},
      {"gradient correctness", gradients},
      {"training sanity", training},
      {"baseline conformance", baselines},
      {"zero-shot harness", zeroshot},
      {"topic pipeline", topic_pipeline},
      {"trends", trends},
      {"reproducibility", reproducibility},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Check check;
    const auto start = std::chrono::steady_clock::now();
    try {
      criteria[i].second(check);
    } catch (const std::exception& e) {
      check.expect(false, std::string("exception: ") + e.what());
    }
    const double elapsed = seconds_since(start);
    std::string detail;
    for (const auto& n : check.notes()) detail += (detail.empty() ? "" : "; ") + n;
    std::cout << fmt::format("{} {:2} {} ({:.2f}s){}\n", check.ok() ? "PASS" : "FAIL", i + 1,
                             criteria[i].first, elapsed, detail.empty() ? "" : " - " + detail);
    for (std::size_t k = 0; k < std::min<std::size_t>(check.failures().size(), 10); ++k) {
      std::cout << "       " << check.failures()[k] << "\n";
    }
    if (check.failures().size() > 10) {
      std::cout << fmt::format("       ... {} more\n", check.failures().size() - 10);
    }
    failed += !check.ok();
  }
  std::cout << fmt::format("{} of {} criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
