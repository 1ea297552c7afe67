#include "triage/classifiers.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

#include <fmt/format.h>

#include "triage/error.hpp"
#include "triage/evaluation.hpp"
#include "triage/util/io.hpp"
#include "triage/util/rng.hpp"

namespace triage {

using nn::Matrix;
using nn::Var;

std::string to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::transformer:
      return "transformer";
    case FusionKind::concat:
      return "concat";
    case FusionKind::cross_attention:
      return "cross_attention";
    case FusionKind::none:
      break;
  }
  return "none";
}

std::string to_string(HeadKind kind) { return kind == HeadKind::mlp ? "mlp" : "linear"; }

FusionKind parse_fusion(const std::string& text) {
  if (text == "transformer") return FusionKind::transformer;
  if (text == "concat") return FusionKind::concat;
  if (text == "cross_attention") return FusionKind::cross_attention;
  if (text == "none") return FusionKind::none;
  throw Error(fmt::format(
      "unknown fusion \"{}\" (expected transformer, concat, cross_attention or none)", text));
}

HeadKind parse_head(const std::string& text) {
  if (text == "mlp") return HeadKind::mlp;
  if (text == "linear") return HeadKind::linear;
  throw Error(fmt::format("unknown head \"{}\" (expected mlp or linear)", text));
}

void validate(const FusionModelConfig& c) {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw Error(fmt::format("model.{} must be positive", name));
  };
  positive(c.input_dim, "input_dim");
  positive(c.proj_dim, "proj_dim");
  positive(c.num_classes, "num_classes");
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw Error("model.dropout must be in [0, 1)");
  if (c.head == HeadKind::mlp) positive(c.head_hidden, "head_hidden");
  if (c.fusion == FusionKind::transformer || c.fusion == FusionKind::cross_attention) {
    positive(c.fusion_layers, "fusion_layers");
    positive(c.heads, "heads");
    positive(c.ffn_dim, "ffn_dim");
    if (c.proj_dim % c.heads != 0) {
      throw Error(fmt::format("model.proj_dim {} is not divisible by model.heads {}", c.proj_dim,
                              c.heads));
    }
  }
}

nlohmann::json to_json(const FusionModelConfig& c) {
  return {{"input_dim", c.input_dim},         {"proj_dim", c.proj_dim},
          {"fusion", to_string(c.fusion)},    {"fusion_layers", c.fusion_layers},
          {"heads", c.heads},                 {"ffn_dim", c.ffn_dim},
          {"dropout", c.dropout},             {"head_hidden", c.head_hidden},
          {"num_classes", c.num_classes},     {"head", to_string(c.head)}};
}

FusionModelConfig fusion_config_from_json(const nlohmann::json& j) {
  FusionModelConfig c;
  c.input_dim = j.value("input_dim", c.input_dim);
  c.proj_dim = j.value("proj_dim", c.proj_dim);
  if (j.contains("fusion")) c.fusion = parse_fusion(j.at("fusion").get<std::string>());
  c.fusion_layers = j.value("fusion_layers", c.fusion_layers);
  c.heads = j.value("heads", c.heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.dropout = j.value("dropout", c.dropout);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.num_classes = j.value("num_classes", c.num_classes);
  if (j.contains("head")) c.head = parse_head(j.at("head").get<std::string>());
  validate(c);
  return c;
}

// ---- model ----------------------------------------------------------------

FusionModel::FusionModel(FusionModelConfig config, std::shared_ptr<Encoder> text,
                         std::shared_ptr<Encoder> image, std::uint64_t seed)
    : config_(config),
      text_(std::move(text)),
      image_(std::move(image)),
      store_(std::make_unique<nn::ParameterStore>()) {
  validate(config_);
  if (!text_ || !image_) throw Error("fusion model needs both encoders");
  if (text_->config().modality != Modality::text) throw Error("text encoder has image modality");
  if (image_->config().modality != Modality::image) throw Error("image encoder has text modality");
  Rng rng(seed);
  text_proj_ = nn::Linear(*store_, "text_proj", config_.input_dim, config_.proj_dim, rng);
  image_proj_ = nn::Linear(*store_, "image_proj", config_.input_dim, config_.proj_dim, rng);
  if (config_.fusion == FusionKind::transformer || config_.fusion == FusionKind::cross_attention) {
    for (std::size_t l = 0; l < config_.fusion_layers; ++l) {
      fusion_layers_.emplace_back(*store_, fmt::format("fusion.layers.{}", l), config_.proj_dim,
                                  config_.heads, config_.ffn_dim, config_.dropout, rng);
    }
  }
  if (config_.head == HeadKind::mlp) {
    head_hidden_ = nn::Linear(*store_, "head.hidden", head_input_dim(), config_.head_hidden, rng);
    head_out_ = nn::Linear(*store_, "head.out", config_.head_hidden, config_.num_classes, rng);
  } else {
    head_out_ = nn::Linear(*store_, "head.out", head_input_dim(), config_.num_classes, rng);
  }
}

std::size_t FusionModel::head_input_dim() const {
  return config_.fusion == FusionKind::concat ? 2 * config_.proj_dim : config_.proj_dim;
}

Var FusionModel::forward(std::span<const EncoderInput> batch, const nn::Context& ctx) const {
  if (batch.empty()) throw Error("forward needs a non-empty batch");
  const Var t = text_->forward(batch, ctx);
  const Var v = image_->forward(batch, ctx);
  if (static_cast<std::size_t>(t->value.cols()) != config_.input_dim) {
    throw Error(fmt::format("text features have width {}, model expects {}", t->value.cols(),
                            config_.input_dim));
  }
  if (static_cast<std::size_t>(v->value.cols()) != config_.input_dim) {
    throw Error(fmt::format("image features have width {}, model expects {}", v->value.cols(),
                            config_.input_dim));
  }
  const Var pt = text_proj_(t);
  const Var pv = image_proj_(v);
  const std::size_t n = batch.size();

  Var fused;
  switch (config_.fusion) {
    case FusionKind::transformer: {
      std::vector<std::size_t> order;
      std::vector<nn::Segment> segments;
      for (std::size_t i = 0; i < n; ++i) {
        order.push_back(i);      // text token
        order.push_back(n + i);  // image token
        segments.push_back({2 * i, 2});
      }
      Var seq = nn::gather_rows(nn::concat_rows({pt, pv}), order);
      for (const auto& layer : fusion_layers_) seq = layer(seq, segments, ctx);
      fused = nn::segment_mean(seq, segments);
      break;
    }
    case FusionKind::cross_attention: {
      std::vector<nn::Segment> segments;
      for (std::size_t i = 0; i < n; ++i) segments.push_back({i, 1});
      Var x = pv;
      for (const auto& layer : fusion_layers_) x = layer(x, segments, ctx, pt, segments);
      fused = x;
      break;
    }
    case FusionKind::concat:
      fused = nn::concat_cols(pt, pv);
      break;
    case FusionKind::none:
      fused = nn::scale(nn::add(pt, pv), 0.5);
      break;
  }

  if (config_.head == HeadKind::mlp) {
    Var h = nn::dropout(nn::relu(head_hidden_(fused)), config_.dropout, ctx);
    return head_out_(h);
  }
  return head_out_(fused);
}

Matrix FusionModel::logits(std::span<const EncoderInput> inputs, std::size_t batch_size) const {
  Matrix out(static_cast<Eigen::Index>(inputs.size()),
             static_cast<Eigen::Index>(config_.num_classes));
  const nn::Context ctx;
  for (std::size_t start = 0; start < inputs.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, inputs.size() - start);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) =
        forward(inputs.subspan(start, n), ctx)->value;
  }
  return out;
}

std::vector<ClassId> FusionModel::predict(std::span<const EncoderInput> inputs,
                                          std::size_t batch_size) const {
  const Matrix l = logits(inputs, batch_size);
  std::vector<ClassId> out;
  for (Eigen::Index r = 0; r < l.rows(); ++r) {
    Eigen::Index best = 0;
    l.row(r).maxCoeff(&best);
    out.push_back(ClassId{static_cast<std::size_t>(best)});
  }
  return out;
}

std::vector<nn::Parameter*> FusionModel::fusion_parameters() const { return store_->all(); }

std::vector<nn::Parameter*> FusionModel::parameters() const {
  auto out = store_->all();
  for (auto* p : text_->parameters()) out.push_back(p);
  for (auto* p : image_->parameters()) out.push_back(p);
  return out;
}

std::vector<ParameterShape> FusionModel::parameter_shapes() const {
  std::vector<ParameterShape> out;
  auto add = [&](const std::string& prefix, const std::vector<nn::Parameter*>& params) {
    for (const auto* p : params) {
      out.push_back({prefix + p->name, static_cast<std::size_t>(p->value.rows()),
                     static_cast<std::size_t>(p->value.cols())});
    }
  };
  add("", store_->all());
  add("text_encoder.", text_->parameters());
  add("image_encoder.", image_->parameters());
  return out;
}

std::size_t FusionModel::parameter_count() const {
  std::size_t total = 0;
  for (const auto& s : parameter_shapes()) total += s.rows * s.cols;
  return total;
}

std::vector<Matrix> FusionModel::snapshot() const {
  std::vector<Matrix> out;
  for (const auto* p : parameters()) out.push_back(p->value);
  return out;
}

void FusionModel::restore(const std::vector<Matrix>& values) {
  auto params = parameters();
  if (values.size() != params.size()) throw Error("restore: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

std::unique_ptr<FusionModel> build_fusion_model(const FusionModelConfig& config,
                                                std::shared_ptr<Encoder> text,
                                                std::shared_ptr<Encoder> image,
                                                std::uint64_t seed) {
  return std::make_unique<FusionModel>(config, std::move(text), std::move(image), seed);
}

// ---- training -------------------------------------------------------------

nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"loss", "cross_entropy"},
          {"selection_metric", "weighted_f1"},
          {"optimizer",
           {{"name", "adam"},
            {"beta1", c.adam_beta1},
            {"beta2", c.adam_beta2},
            {"eps", c.adam_eps},
            {"weight_decay_mode", "l2"}}},
          {"freeze_encoders", c.freeze_encoders}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    c.adam_beta1 = o.value("beta1", c.adam_beta1);
    c.adam_beta2 = o.value("beta2", c.adam_beta2);
    c.adam_eps = o.value("eps", c.adam_eps);
  }
  c.freeze_encoders = j.value("freeze_encoders", c.freeze_encoders);
  if (c.batch_size == 0) throw Error("train.batch_size must be positive");
  if (c.learning_rate < 0.0) throw Error("train.learning_rate must not be negative");
  if (c.weight_decay < 0.0) throw Error("train.weight_decay must not be negative");
  return c;
}

nlohmann::json to_json(const TrainResult& result) {
  json history = json::array();
  for (const auto& e : result.history) {
    history.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"val_weighted_f1", e.val_weighted_f1}});
  }
  return {{"history", history},
          {"best_epoch", result.best_epoch},
          {"best_val_weighted_f1", result.best_val_weighted_f1}};
}

TrainResult train(FusionModel& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set, const TrainConfig& config) {
  if (train_set.empty()) throw Error("training set is empty");
  if (val_set.empty()) throw Error("validation set is empty");
  if (config.batch_size == 0) throw Error("batch_size must be positive");
  const std::size_t num_classes = model.config().num_classes;
  for (const auto* set : {&train_set, &val_set}) {
    for (const auto& s : *set) {
      if (s.label.value >= num_classes) {
        throw Error(fmt::format("sample {} has label index {} outside [0, {})", s.input.id,
                                s.label.value, num_classes));
      }
    }
  }
  if (config.freeze_encoders) {
    model.text_encoder().freeze_all();
    model.image_encoder().freeze_all();
  }

  nn::Adam optimizer(model.parameters(), {config.learning_rate, config.weight_decay,
                                          config.adam_beta1, config.adam_beta2, config.adam_eps});
  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
  Rng dropout_rng(derive_seed(config.seed, "dropout"));
  const nn::Context train_ctx{true, &dropout_rng};

  std::vector<EncoderInput> val_inputs;
  std::vector<ClassId> val_truth;
  for (const auto& s : val_set) {
    val_inputs.push_back(s.input);
    val_truth.push_back(s.label);
  }

  TrainResult result;
  std::vector<Matrix> best;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      std::vector<EncoderInput> inputs;
      std::vector<std::size_t> targets;
      for (std::size_t k = start; k < start + n; ++k) {
        inputs.push_back(train_set[order[k]].input);
        targets.push_back(train_set[order[k]].label.value);
      }
      optimizer.zero_grad();
      const Var loss = nn::cross_entropy(model.forward(inputs, train_ctx), targets);
      nn::backward(loss);
      optimizer.step();
      loss_sum += loss->value(0, 0);
      ++batches;
    }
    const auto predicted = model.predict(val_inputs);
    EpochRecord record{epoch, loss_sum / static_cast<double>(batches),
                       weighted_f1(val_truth, predicted, num_classes)};
    result.history.push_back(record);
    if (result.best_epoch == 0 || record.val_weighted_f1 > result.best_val_weighted_f1) {
      result.best_epoch = epoch;
      result.best_val_weighted_f1 = record.val_weighted_f1;
      best = model.snapshot();
    }
  }
  if (!best.empty()) model.restore(best);
  return result;
}

// ---- checkpoint -----------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoints assume little endian");
constexpr char kCheckpointMagic[4] = {'T', 'R', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointFile {
  json header;
  std::vector<std::vector<double>> values;
};

CheckpointFile read_checkpoint_file(const std::filesystem::path& path, bool with_values) {
  const std::string data = read_file(path);
  std::size_t pos = 0;
  auto take = [&](void* dst, std::size_t n) {
    if (pos + n > data.size()) throw FormatError(fmt::format("{}: truncated checkpoint", path.string()));
    std::memcpy(dst, data.data() + pos, n);
    pos += n;
  };
  char magic[4];
  take(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw FormatError(fmt::format("{}: not a checkpoint", path.string()));
  }
  std::uint32_t version = 0;
  take(&version, sizeof(version));
  if (version != kCheckpointVersion) {
    throw FormatError(fmt::format("{}: unsupported checkpoint version {}", path.string(), version));
  }
  std::uint64_t header_size = 0;
  take(&header_size, sizeof(header_size));
  std::string header_text(header_size, '\0');
  take(header_text.data(), header_text.size());
  CheckpointFile file;
  try {
    file.header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("{}: bad checkpoint header: {}", path.string(), e.what()));
  }
  if (!with_values) return file;
  for (const auto& p : file.header.at("parameters")) {
    std::vector<double> values(p.at("rows").get<std::size_t>() * p.at("cols").get<std::size_t>());
    take(values.data(), values.size() * sizeof(double));
    file.values.push_back(std::move(values));
  }
  if (pos != data.size()) throw FormatError(fmt::format("{}: trailing bytes", path.string()));
  return file;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const FusionModel& model,
                     const nlohmann::json& metadata) {
  json params = json::array();
  for (const auto& s : model.parameter_shapes()) {
    params.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
  }
  json header = {{"model", to_json(model.config())},
                 {"text_encoder", to_json(model.text_encoder().config())},
                 {"image_encoder", to_json(model.image_encoder().config())},
                 {"metadata", metadata},
                 {"parameters", params}};
  std::string out(kCheckpointMagic, 4);
  out.append(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof(kCheckpointVersion));
  const std::string header_text = header.dump();
  const std::uint64_t header_size = header_text.size();
  out.append(reinterpret_cast<const char*>(&header_size), sizeof(header_size));
  out += header_text;
  for (const auto* p : model.parameters()) {
    out.append(reinterpret_cast<const char*>(p->value.data()),
               static_cast<std::size_t>(p->value.size()) * sizeof(double));
  }
  write_file(path, out);
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  return read_checkpoint_file(path, false).header;
}

nlohmann::json load_checkpoint(const std::filesystem::path& path, FusionModel& model) {
  CheckpointFile file = read_checkpoint_file(path, true);
  const auto shapes = model.parameter_shapes();
  const auto& stored = file.header.at("parameters");
  if (stored.size() != shapes.size()) {
    throw FormatError(fmt::format("{}: checkpoint has {} parameters, model has {}", path.string(),
                                  stored.size(), shapes.size()));
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const ParameterShape s{stored[i].at("name").get<std::string>(),
                           stored[i].at("rows").get<std::size_t>(),
                           stored[i].at("cols").get<std::size_t>()};
    if (!(s == shapes[i])) {
      throw FormatError(fmt::format("{}: parameter {} ({}x{}) does not match model {} ({}x{})",
                                    path.string(), s.name, s.rows, s.cols, shapes[i].name,
                                    shapes[i].rows, shapes[i].cols));
    }
  }
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::memcpy(params[i]->value.data(), file.values[i].data(),
                file.values[i].size() * sizeof(double));
  }
  return file.header.value("metadata", json::object());
}

}  // namespace triage
