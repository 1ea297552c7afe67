#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <stdexcept>

#include <sys/wait.h>

#include <fmt/format.h>

#include "triage/corpus.hpp"
#include "triage/util/io.hpp"

namespace triage::testing {

namespace fs = std::filesystem;

fs::path fixture(const std::string& name) { return fs::path(TRIAGE_FIXTURE_DIR) / name; }

fs::path cli_binary() { return fs::path(TRIAGE_CLI_PATH); }

TempDir::TempDir() {
  std::string tmpl = (fs::temp_directory_path() / "triage-test-XXXXXX").string();
  if (::mkdtemp(tmpl.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
  path_ = tmpl;
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

double oracle_cohen(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b,
                    std::size_t k) {
  std::vector<std::vector<double>> table(k, std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) table[a[i]][b[i]] += 1.0;
  const double n = static_cast<double>(a.size());
  double observed = 0.0;
  for (std::size_t c = 0; c < k; ++c) observed += table[c][c];
  observed /= n;
  double expected = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    double row = 0.0, col = 0.0;
    for (std::size_t d = 0; d < k; ++d) {
      row += table[c][d];
      col += table[d][c];
    }
    expected += (row / n) * (col / n);
  }
  if (expected == 1.0) return 1.0;
  return (observed - expected) / (1.0 - expected);
}

double oracle_fleiss(const std::vector<std::vector<std::size_t>>& table, std::size_t k) {
  const double items = static_cast<double>(table.size());
  const double raters = static_cast<double>(table.front().size());
  std::vector<double> totals(k, 0.0);
  double p_bar = 0.0;
  for (const auto& row : table) {
    std::vector<double> counts(k, 0.0);
    for (std::size_t label : row) counts[label] += 1.0;
    double agree = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      agree += counts[c] * (counts[c] - 1.0);
      totals[c] += counts[c];
    }
    p_bar += agree / (raters * (raters - 1.0));
  }
  p_bar /= items;
  double p_e = 0.0;
  for (double t : totals) p_e += (t / (items * raters)) * (t / (items * raters));
  if (p_e == 1.0) return 1.0;
  return (p_bar - p_e) / (1.0 - p_e);
}

std::vector<std::vector<std::size_t>> oracle_confusion(const std::vector<std::size_t>& truth,
                                                       const std::vector<std::size_t>& predicted,
                                                       std::size_t k) {
  std::vector<std::vector<std::size_t>> m(k, std::vector<std::size_t>(k + 1, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (std::size_t r = 0; r < k; ++r) {
      for (std::size_t c = 0; c <= k; ++c) {
        if (truth[i] == r && predicted[i] == c) ++m[r][c];
      }
    }
  }
  return m;
}

double oracle_weighted_f1(const std::vector<std::size_t>& truth,
                          const std::vector<std::size_t>& predicted, std::size_t k) {
  double total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    double tp = 0, fp = 0, fn = 0, support = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const bool t = truth[i] == c;
      const bool p = predicted[i] == c;
      tp += t && p;
      fp += !t && p;
      fn += t && !p;
      support += t;
    }
    const double f1 = tp == 0 ? 0.0 : 2.0 * tp / (2.0 * tp + fp + fn);
    total += support * f1;
  }
  return total / static_cast<double>(truth.size());
}

std::vector<ClassId> to_ids(const std::vector<std::size_t>& v) {
  std::vector<ClassId> out;
  out.reserve(v.size());
  for (std::size_t x : v) out.push_back(ClassId{x});
  return out;
}

namespace {

SeparableFixture wrap(std::vector<FeatureRecord> records, std::vector<Sample> samples) {
  SeparableFixture f;
  f.cache = std::make_shared<const FeatureCache>(
      FeatureCacheHeader{"fixture-text", "fixture-image", Pooling::cls, Pooling::cls,
                         kEncoderWidth},
      std::move(records));
  f.samples = std::move(samples);
  f.text = make_cached_encoder(f.cache, Modality::text);
  f.image = make_cached_encoder(f.cache, Modality::image);
  return f;
}

}  // namespace

SeparableFixture separable_fixture(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t classes = 13;
  std::vector<std::vector<double>> text_proto(classes, std::vector<double>(kEncoderWidth));
  auto image_proto = text_proto;
  for (auto* protos : {&text_proto, &image_proto}) {
    for (auto& v : *protos) {
      for (auto& x : v) x = 0.5 * rng.normal();
    }
  }
  std::vector<FeatureRecord> records;
  std::vector<Sample> samples;
  for (std::size_t c = 0; c < classes; ++c) {
    for (int k = 0; k < 2; ++k) {
      FeatureRecord r;
      r.post_id = std::to_string(c * 2 + static_cast<std::size_t>(k));
      r.text_vec = text_proto[c];
      r.image_vec = image_proto[c];
      for (auto& x : r.text_vec) x += 0.1 * rng.normal();
      for (auto& x : r.image_vec) x += 0.1 * rng.normal();
      Sample s;
      s.input.id = r.post_id;
      s.label = ClassId{c};
      records.push_back(std::move(r));
      samples.push_back(std::move(s));
    }
  }
  return wrap(std::move(records), std::move(samples));
}

SeparableFixture random_feature_fixture(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<FeatureRecord> records;
  std::vector<Sample> samples;
  for (std::size_t i = 0; i < count; ++i) {
    FeatureRecord r;
    r.post_id = "g" + std::to_string(i);
    r.text_vec.resize(kEncoderWidth);
    r.image_vec.resize(kEncoderWidth);
    for (auto& x : r.text_vec) x = rng.normal();
    for (auto& x : r.image_vec) x = rng.normal();
    Sample s;
    s.input.id = r.post_id;
    s.label = ClassId{rng.below(13)};
    records.push_back(std::move(r));
    samples.push_back(std::move(s));
  }
  return wrap(std::move(records), std::move(samples));
}

EncoderConfig tiny_local_config(Modality modality) {
  EncoderConfig c =
      modality == Modality::text ? EncoderConfig::text_default() : EncoderConfig::image_default();
  c.backend = EncoderBackend::local;
  c.max_text_length = 8;
  c.image_size = {16, 16, 3};
  c.backbone.layers = 2;
  c.backbone.heads = 2;
  c.backbone.ffn_dim = 64;
  c.backbone.patch_size = 8;
  c.backbone.vocab_size = 64;
  return c;
}

double accuracy(const FusionModel& model, const std::vector<Sample>& samples) {
  std::vector<EncoderInput> inputs;
  for (const auto& s : samples) inputs.push_back(s.input);
  const auto predicted = model.predict(inputs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) correct += predicted[i] == samples[i].label;
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

GradCheck gradient_check(FusionKind fusion, double tolerance, double abs_floor,
                         std::size_t per_parameter) {
  SeparableFixture f = random_feature_fixture(4, 21);
  FusionModelConfig config;
  config.proj_dim = 8;
  config.heads = 2;
  config.ffn_dim = 16;
  config.head_hidden = 6;
  config.fusion = fusion;
  auto model = build_fusion_model(config, f.text, f.image, 17);

  std::vector<EncoderInput> batch;
  std::vector<std::size_t> targets;
  for (const auto& s : f.samples) {
    batch.push_back(s.input);
    targets.push_back(s.label.value);
  }
  const nn::Context eval{false, nullptr};
  auto loss_value = [&] {
    return nn::cross_entropy(model->forward(batch, eval), targets)->value(0, 0);
  };

  const auto params = model->fusion_parameters();
  for (auto* p : params) p->zero_grad();
  nn::backward(nn::cross_entropy(model->forward(batch, eval), targets));

  GradCheck result;
  Rng pick(3);
  // five-point stencil: O(h^4) truncation, roundoff near eps * loss / h
  const double h = 1e-5;
  for (auto* p : params) {
    const auto size = static_cast<std::size_t>(p->value.size());
    for (std::size_t s = 0; s < std::min(per_parameter, size); ++s) {
      const std::size_t idx = pick.below(size);
      double& v = p->value.data()[idx];
      const double saved = v;
      auto at = [&](double offset) {
        v = saved + offset;
        return loss_value();
      };
      const double numeric = (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h);
      v = saved;
      const double analytic = p->grad.data()[idx];
      const double scale = std::max(std::abs(numeric), std::abs(analytic));
      const double rel = scale == 0.0 ? 0.0 : std::abs(numeric - analytic) / scale;
      ++result.checked;
      const bool ok = rel <= tolerance || scale < abs_floor;
      if (!ok) ++result.failed;
      if (scale >= abs_floor && rel > result.worst_relative) {
        result.worst_relative = rel;
        result.worst_parameter = p->name;
      }
    }
  }
  return result;
}

std::vector<std::vector<double>> parameter_values(const std::vector<nn::Parameter*>& params) {
  std::vector<std::vector<double>> out;
  for (const auto* p : params) {
    out.emplace_back(p->value.data(), p->value.data() + p->value.size());
  }
  return out;
}

namespace {

std::string quote(const std::string& arg) {
  std::string out = "'";
  for (char c : arg) {
    if (c == '\'') {
      out += "'\\''";
    } else {
      out += c;
    }
  }
  return out + "'";
}

}  // namespace

CliResult run_cli(const std::vector<std::string>& args) {
  TempDir capture;
  std::string command = quote(cli_binary().string());
  for (const auto& a : args) command += " " + quote(a);
  command += " >" + quote((capture / "out").string()) + " 2>" + quote((capture / "err").string());
  const int status = std::system(command.c_str());
  CliResult result;
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  result.out = read_file(capture / "out");
  result.err = read_file(capture / "err");
  return result;
}

void write_training_corpus(const fs::path& dir, std::size_t per_class, std::uint64_t seed) {
  fs::create_directories(dir);
  Rng rng(seed);
  const auto& taxonomy = Taxonomy::wildfire();
  std::vector<json> posts, labels;
  std::vector<FeatureRecord> records;
  for (const auto& cls : taxonomy.canonical_order()) {
    std::vector<double> text_proto(kEncoderWidth), image_proto(kEncoderWidth);
    for (auto& x : text_proto) x = 0.5 * rng.normal();
    for (auto& x : image_proto) x = 0.5 * rng.normal();
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::string id = fmt::format("{}{:02}", cls.letter, i);
      Post post;
      post.id = id;
      post.text = fmt::format("post {} about {}", i, cls.name);
      post.created_at = *parse_timestamp(fmt::format("2023-06-{:02}T12:00:00Z", 1 + i % 28));
      post.source_year = 2023;
      posts.push_back(post_to_json(post));
      labels.push_back({{"id", id}, {"label", cls.name}});
      FeatureRecord r;
      r.post_id = id;
      r.text_vec = text_proto;
      r.image_vec = image_proto;
      for (auto& x : r.text_vec) x += 0.1 * rng.normal();
      for (auto& x : r.image_vec) x += 0.1 * rng.normal();
      records.push_back(std::move(r));
    }
  }
  write_jsonl(dir / "posts.jsonl", posts);
  write_jsonl(dir / "labels.jsonl", labels);
  FeatureCache(cache_header_for(EncoderConfig::text_default(), EncoderConfig::image_default()),
               std::move(records))
      .write(dir / "features.bin");
  const json config = {
      {"seeds", {8, 12, 14}},
      {"train",
       {{"posts", "posts.jsonl"},
        {"labels", "labels.jsonl"},
        {"feature_cache", "features.bin"},
        {"model", {{"proj_dim", 32}, {"heads", 4}, {"ffn_dim", 64}, {"head_hidden", 16}}},
        {"training", {{"epochs", 5}, {"learning_rate", 1e-3}}}}}};
  write_file(dir / "config.json", dump_json(config));
}

}  // namespace triage::testing
