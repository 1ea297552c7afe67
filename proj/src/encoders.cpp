#include "triage/encoders.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <unordered_map>

#include <fmt/format.h>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "triage/error.hpp"
#include "triage/util/io.hpp"
#include "triage/util/rng.hpp"

namespace triage {

using nn::Matrix;
using nn::Var;

std::string to_string(Modality m) { return m == Modality::text ? "text" : "image"; }
std::string to_string(Pooling p) { return p == Pooling::cls ? "cls" : "mean"; }
std::string to_string(EncoderBackend b) {
  switch (b) {
    case EncoderBackend::stub:
      return "stub";
    case EncoderBackend::recorded:
      return "recorded";
    case EncoderBackend::local:
      break;
  }
  return "local";
}

Modality parse_modality(const std::string& text) {
  if (text == "text") return Modality::text;
  if (text == "image") return Modality::image;
  throw Error(fmt::format("unknown modality \"{}\" (expected text or image)", text));
}

Pooling parse_pooling(const std::string& text) {
  if (text == "cls") return Pooling::cls;
  if (text == "mean") return Pooling::mean;
  throw Error(fmt::format("unknown pooling \"{}\" (expected cls or mean)", text));
}

EncoderBackend parse_backend(const std::string& text) {
  if (text == "stub") return EncoderBackend::stub;
  if (text == "recorded") return EncoderBackend::recorded;
  if (text == "local") return EncoderBackend::local;
  throw Error(fmt::format("unknown encoder backend \"{}\" (expected stub, recorded or local)", text));
}

EncoderConfig EncoderConfig::text_default() { return EncoderConfig{}; }

EncoderConfig EncoderConfig::image_default() {
  EncoderConfig config;
  config.modality = Modality::image;
  config.checkpoint = "google/vit-base-patch16-384";
  return config;
}

nlohmann::json to_json(const EncoderConfig& c) {
  return {{"modality", to_string(c.modality)},
          {"checkpoint", c.checkpoint},
          {"pooling", to_string(c.pooling)},
          {"freeze_half", c.freeze_half},
          {"max_text_length", c.max_text_length},
          {"image_size", {c.image_size.height, c.image_size.width, c.image_size.channels}},
          {"backend", to_string(c.backend)},
          {"recorded_path", c.recorded_path.string()},
          {"backbone",
           {{"layers", c.backbone.layers},
            {"heads", c.backbone.heads},
            {"ffn_dim", c.backbone.ffn_dim},
            {"patch_size", c.backbone.patch_size},
            {"vocab_size", c.backbone.vocab_size},
            {"dropout", c.backbone.dropout}}}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j, Modality modality) {
  EncoderConfig c =
      modality == Modality::text ? EncoderConfig::text_default() : EncoderConfig::image_default();
  if (j.contains("modality") && parse_modality(j.at("modality").get<std::string>()) != modality) {
    throw Error(fmt::format("encoder config declares modality {} where {} is expected",
                            j.at("modality").get<std::string>(), to_string(modality)));
  }
  c.checkpoint = j.value("checkpoint", c.checkpoint);
  if (j.contains("pooling")) c.pooling = parse_pooling(j.at("pooling").get<std::string>());
  c.freeze_half = j.value("freeze_half", c.freeze_half);
  c.max_text_length = j.value("max_text_length", c.max_text_length);
  if (j.contains("image_size")) {
    const auto& size = j.at("image_size");
    if (!size.is_array() || size.size() != 3) throw Error("image_size must be [height, width, 3]");
    c.image_size = {size[0].get<int>(), size[1].get<int>(), size[2].get<int>()};
  }
  if (j.contains("backend")) c.backend = parse_backend(j.at("backend").get<std::string>());
  if (j.contains("recorded_path") && !j.at("recorded_path").is_null()) {
    c.recorded_path = j.at("recorded_path").get<std::string>();
  }
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    c.backbone.layers = b.value("layers", c.backbone.layers);
    c.backbone.heads = b.value("heads", c.backbone.heads);
    c.backbone.ffn_dim = b.value("ffn_dim", c.backbone.ffn_dim);
    c.backbone.patch_size = b.value("patch_size", c.backbone.patch_size);
    c.backbone.vocab_size = b.value("vocab_size", c.backbone.vocab_size);
    c.backbone.dropout = b.value("dropout", c.backbone.dropout);
  }
  if (c.max_text_length < 1) throw Error("max_text_length must be at least 1");
  if (c.image_size.channels != 3 || c.image_size.height < 1 || c.image_size.width < 1) {
    throw Error("image_size must be positive with 3 channels");
  }
  return c;
}

// ---- images ---------------------------------------------------------------

namespace {

cv::Mat to_mat(const Image& image) {
  cv::Mat mat(image.height, image.width, CV_32FC3);
  std::memcpy(mat.data, image.data.data(), image.data.size() * sizeof(float));
  return mat;
}

Image from_mat(const cv::Mat& mat) {
  Image image;
  image.height = mat.rows;
  image.width = mat.cols;
  image.data.resize(static_cast<std::size_t>(mat.rows) * static_cast<std::size_t>(mat.cols) * 3);
  cv::Mat continuous = mat.isContinuous() ? mat : mat.clone();
  std::memcpy(image.data.data(), continuous.data, image.data.size() * sizeof(float));
  return image;
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(fmt::format("image not found: {}", path.string()));
  }
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (raw.empty()) throw Error(fmt::format("cannot decode image: {}", path.string()));
  cv::Mat rgb;
  cv::cvtColor(raw, rgb, cv::COLOR_BGR2RGB);
  cv::Mat as_float;
  rgb.convertTo(as_float, CV_32FC3, 1.0 / 255.0);
  return from_mat(as_float);
}

Image resize_bilinear(const Image& image, int height, int width) {
  if (image.height == height && image.width == width) return image;
  cv::Mat out;
  cv::resize(to_mat(image), out, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  return from_mat(out);
}

void save_image(const std::filesystem::path& path, const Image& image) {
  cv::Mat bytes;
  to_mat(image).convertTo(bytes, CV_8UC3, 255.0);
  cv::Mat bgr;
  cv::cvtColor(bytes, bgr, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) {
    throw Error(fmt::format("cannot write image: {}", path.string()));
  }
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  for (unsigned char c : text) {
    if (c >= 0x80 || std::isalnum(c)) {
      current.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

std::vector<std::string> truncate_tokens(const std::string& text, std::size_t max_length) {
  auto tokens = tokenize(text);
  const std::size_t keep = max_length > 0 ? max_length - 1 : 0;
  if (tokens.size() > keep) tokens.resize(keep);
  return tokens;
}

void Encoder::freeze_all() {
  for (auto* p : parameters()) p->frozen = true;
}

Encoder& freeze_half(Encoder& encoder) {
  encoder.freeze_layers(encoder.num_layers() / 2);
  return encoder;
}

namespace {

std::shared_ptr<const Image> image_for(const EncoderInput& input, const ImageSize& size) {
  std::shared_ptr<const Image> image = input.image;
  if (!image) image = std::make_shared<Image>(load_image(input.image_path));
  if (image->height != size.height || image->width != size.width) {
    image = std::make_shared<Image>(resize_bilinear(*image, size.height, size.width));
  }
  return image;
}

Matrix random_row(std::uint64_t seed) {
  Rng rng(seed);
  Matrix row(1, static_cast<Eigen::Index>(kEncoderWidth));
  const double s = 1.0 / std::sqrt(static_cast<double>(kEncoderWidth));
  for (Eigen::Index i = 0; i < row.size(); ++i) row(0, i) = rng.normal() * s;
  return row;
}

/// Parameter-free text features: every token maps to a fixed pseudo-random
/// vector; the sequence-start vector is keyed by the whole kept sequence.
class StubTextEncoder final : public Encoder {
 public:
  explicit StubTextEncoder(EncoderConfig config)
      : Encoder(std::move(config)), base_seed_(derive_seed(0, config_.checkpoint)) {}

  Var forward(std::span<const EncoderInput> batch, const nn::Context&) override {
    Matrix out(static_cast<Eigen::Index>(batch.size()), static_cast<Eigen::Index>(kEncoderWidth));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto tokens = truncate_tokens(batch[i].text, config_.max_text_length);
      std::string joined;
      for (const auto& t : tokens) joined += t + " ";
      Matrix pooled = token_vector("cls:" + joined);
      if (config_.pooling == Pooling::mean) {
        for (const auto& t : tokens) pooled += token_vector("tok:" + t);
        pooled /= static_cast<double>(tokens.size() + 1);
      }
      out.row(static_cast<Eigen::Index>(i)) = pooled;
    }
    return nn::constant(std::move(out));
  }

 private:
  Matrix token_vector(const std::string& key) {
    std::lock_guard lock(mutex_);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, random_row(derive_seed(base_seed_, key))).first;
    return it->second;
  }

  std::uint64_t base_seed_;
  std::mutex mutex_;
  std::unordered_map<std::string, Matrix> cache_;
};

/// Parameter-free image features: area-pooled 16x16x3 colour grids of the
/// whole image (sequence start) and of its four quadrants, mapped to [-1, 1].
class StubImageEncoder final : public Encoder {
 public:
  using Encoder::Encoder;

  Var forward(std::span<const EncoderInput> batch, const nn::Context&) override {
    Matrix out(static_cast<Eigen::Index>(batch.size()), static_cast<Eigen::Index>(kEncoderWidth));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto image = image_for(batch[i], config_.image_size);
      const cv::Mat mat = to_mat(*image);
      Matrix pooled = grid(mat);
      if (config_.pooling == Pooling::mean) {
        const int h2 = std::max(mat.rows / 2, 1);
        const int w2 = std::max(mat.cols / 2, 1);
        for (int qy = 0; qy < 2; ++qy) {
          for (int qx = 0; qx < 2; ++qx) {
            const int y0 = std::min(qy * h2, mat.rows - 1);
            const int x0 = std::min(qx * w2, mat.cols - 1);
            const cv::Rect rect(x0, y0, std::min(w2, mat.cols - x0), std::min(h2, mat.rows - y0));
            pooled += grid(mat(rect));
          }
        }
        pooled /= 5.0;
      }
      out.row(static_cast<Eigen::Index>(i)) = pooled;
    }
    return nn::constant(std::move(out));
  }

 private:
  static Matrix grid(const cv::Mat& region) {
    cv::Mat small;
    cv::resize(region, small, cv::Size(16, 16), 0, 0, cv::INTER_AREA);
    Matrix row(1, static_cast<Eigen::Index>(kEncoderWidth));
    Eigen::Index k = 0;
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) {
        const auto& px = small.at<cv::Vec3f>(y, x);
        for (int c = 0; c < 3; ++c) row(0, k++) = 2.0 * static_cast<double>(px[c]) - 1.0;
      }
    }
    return row;
  }
};

/// Vectors stored as JSONL {key, pooling, vector}; text inputs are keyed by
/// their text, images by their path (or file name).
class RecordedEncoder final : public Encoder {
 public:
  explicit RecordedEncoder(EncoderConfig config) : Encoder(std::move(config)) {
    for_each_line(config_.recorded_path, [&](std::size_t line, const std::string& text) {
      json record;
      try {
        record = json::parse(text);
      } catch (const json::exception& e) {
        throw Error(fmt::format("{}:{}: {}", config_.recorded_path.string(), line, e.what()));
      }
      if (parse_pooling(record.value("pooling", "cls")) != config_.pooling) return;
      auto vec = record.at("vector").get<std::vector<double>>();
      if (vec.size() != kEncoderWidth) {
        throw Error(fmt::format("{}:{}: vector width {} is not {}", config_.recorded_path.string(),
                                line, vec.size(), kEncoderWidth));
      }
      vectors_[record.at("key").get<std::string>()] = std::move(vec);
    });
  }

  Var forward(std::span<const EncoderInput> batch, const nn::Context&) override {
    Matrix out(static_cast<Eigen::Index>(batch.size()), static_cast<Eigen::Index>(kEncoderWidth));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& vec = lookup(batch[i]);
      out.row(static_cast<Eigen::Index>(i)) =
          Eigen::Map<const Eigen::RowVectorXd>(vec.data(), static_cast<Eigen::Index>(vec.size()));
    }
    return nn::constant(std::move(out));
  }

 private:
  const std::vector<double>& lookup(const EncoderInput& input) const {
    if (config_.modality == Modality::text) {
      if (auto it = vectors_.find(input.text); it != vectors_.end()) return it->second;
      throw Error(fmt::format("no recorded text vector for input \"{}\"", input.id));
    }
    if (auto it = vectors_.find(input.image_path.generic_string()); it != vectors_.end()) {
      return it->second;
    }
    if (auto it = vectors_.find(input.image_path.filename().string()); it != vectors_.end()) {
      return it->second;
    }
    throw Error(fmt::format("no recorded image vector for {}", input.image_path.string()));
  }

  std::unordered_map<std::string, std::vector<double>> vectors_;
};

/// Trainable transformer over hashed word pieces (text) or image patches.
class LocalBackbone final : public Encoder {
 public:
  LocalBackbone(EncoderConfig config, std::uint64_t seed) : Encoder(std::move(config)) {
    const auto& b = config_.backbone;
    if (b.layers == 0) throw Error("local backbone needs at least one layer");
    Rng rng(seed);
    const auto dim = static_cast<Eigen::Index>(kEncoderWidth);
    auto normal_matrix = [&](Eigen::Index rows, Eigen::Index cols) {
      Matrix m(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 0.02 * rng.normal();
      return m;
    };
    std::size_t positions = 0;
    if (config_.modality == Modality::text) {
      if (b.vocab_size < 3) throw Error("vocab_size must be at least 3");
      token_embedding_ = &store_.create("embeddings.token",
                                        normal_matrix(static_cast<Eigen::Index>(b.vocab_size), dim));
      positions = config_.max_text_length;
    } else {
      const auto& size = config_.image_size;
      if (b.patch_size == 0 || size.height % static_cast<int>(b.patch_size) != 0 ||
          size.width % static_cast<int>(b.patch_size) != 0) {
        throw Error(fmt::format("image size {}x{} is not divisible by patch size {}",
                                size.height, size.width, b.patch_size));
      }
      grid_h_ = static_cast<std::size_t>(size.height) / b.patch_size;
      grid_w_ = static_cast<std::size_t>(size.width) / b.patch_size;
      patch_embedding_ =
          nn::Linear(store_, "embeddings.patch", b.patch_size * b.patch_size * 3, kEncoderWidth, rng);
      cls_ = &store_.create("embeddings.cls", normal_matrix(1, dim));
      positions = grid_h_ * grid_w_ + 1;
    }
    position_embedding_ =
        &store_.create("embeddings.position", normal_matrix(static_cast<Eigen::Index>(positions), dim));
    embedding_norm_ = nn::LayerNorm(store_, "embeddings.norm", kEncoderWidth);
    for (std::size_t l = 0; l < b.layers; ++l) {
      layers_.emplace_back(store_, fmt::format("layers.{}", l), kEncoderWidth, b.heads, b.ffn_dim,
                           b.dropout, rng);
    }
  }

  Var forward(std::span<const EncoderInput> batch, const nn::Context& ctx) override {
    if (batch.empty()) return nn::constant(Matrix(0, static_cast<Eigen::Index>(kEncoderWidth)));
    std::vector<nn::Segment> segments;
    Var x = config_.modality == Modality::text ? embed_text(batch, segments)
                                               : embed_images(batch, segments);
    x = nn::dropout(embedding_norm_(x), config_.backbone.dropout, ctx);
    for (const auto& layer : layers_) x = layer(x, segments, ctx);
    if (config_.pooling == Pooling::mean) return nn::segment_mean(x, segments);
    std::vector<std::size_t> starts;
    for (const auto& s : segments) starts.push_back(s.start);
    return nn::gather_rows(x, starts);
  }

  std::vector<nn::Parameter*> parameters() override { return store_.all(); }
  std::size_t num_layers() const override { return layers_.size(); }

  void freeze_layers(std::size_t count) override {
    for (std::size_t l = 0; l < std::min(count, layers_.size()); ++l) {
      for (auto* p : layers_[l].parameters()) p->frozen = true;
    }
  }

 private:
  Var embed_text(std::span<const EncoderInput> batch, std::vector<nn::Segment>& segments) {
    std::vector<std::size_t> ids;
    std::vector<std::size_t> positions;
    const std::size_t vocab = config_.backbone.vocab_size;
    for (const auto& input : batch) {
      const auto tokens = truncate_tokens(input.text, config_.max_text_length);
      segments.push_back({ids.size(), tokens.size() + 1});
      ids.push_back(0);  // sequence start
      positions.push_back(0);
      for (std::size_t t = 0; t < tokens.size(); ++t) {
        ids.push_back(2 + derive_seed(0, tokens[t]) % (vocab - 2));
        positions.push_back(t + 1);
      }
    }
    return nn::add(nn::embedding(*token_embedding_, ids),
                   nn::embedding(*position_embedding_, positions));
  }

  Var embed_images(std::span<const EncoderInput> batch, std::vector<nn::Segment>& segments) {
    const std::size_t p = config_.backbone.patch_size;
    const std::size_t patches = grid_h_ * grid_w_;
    Matrix flat(static_cast<Eigen::Index>(batch.size() * patches),
                static_cast<Eigen::Index>(p * p * 3));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto image = image_for(batch[i], config_.image_size);
      for (std::size_t gy = 0; gy < grid_h_; ++gy) {
        for (std::size_t gx = 0; gx < grid_w_; ++gx) {
          const auto row = static_cast<Eigen::Index>(i * patches + gy * grid_w_ + gx);
          Eigen::Index col = 0;
          for (std::size_t y = gy * p; y < (gy + 1) * p; ++y) {
            for (std::size_t x = gx * p; x < (gx + 1) * p; ++x) {
              for (std::size_t c = 0; c < 3; ++c) {
                const float v = image->data[(y * static_cast<std::size_t>(image->width) + x) * 3 + c];
                flat(row, col++) = (static_cast<double>(v) - 0.5) / 0.5;
              }
            }
          }
        }
      }
    }
    Var embedded = nn::concat_rows({nn::param(*cls_), patch_embedding_(nn::constant(std::move(flat)))});
    std::vector<std::size_t> order;
    std::vector<std::size_t> positions;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      segments.push_back({order.size(), patches + 1});
      order.push_back(0);
      positions.push_back(0);
      for (std::size_t k = 0; k < patches; ++k) {
        order.push_back(1 + i * patches + k);
        positions.push_back(k + 1);
      }
    }
    return nn::add(nn::gather_rows(embedded, order), nn::embedding(*position_embedding_, positions));
  }

  nn::ParameterStore store_;
  nn::Parameter* token_embedding_ = nullptr;
  nn::Parameter* position_embedding_ = nullptr;
  nn::Parameter* cls_ = nullptr;
  nn::Linear patch_embedding_;
  nn::LayerNorm embedding_norm_;
  std::vector<nn::TransformerLayer> layers_;
  std::size_t grid_h_ = 0;
  std::size_t grid_w_ = 0;
};

class CachedEncoder final : public Encoder {
 public:
  CachedEncoder(std::shared_ptr<const FeatureCache> cache, EncoderConfig config)
      : Encoder(std::move(config)), cache_(std::move(cache)) {}

  Var forward(std::span<const EncoderInput> batch, const nn::Context&) override {
    Matrix out(static_cast<Eigen::Index>(batch.size()), static_cast<Eigen::Index>(kEncoderWidth));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto* record = cache_->find(batch[i].id);
      if (record == nullptr) {
        throw Error(fmt::format("feature cache has no record for post {}", batch[i].id));
      }
      const auto& vec = config_.modality == Modality::text ? record->text_vec : record->image_vec;
      out.row(static_cast<Eigen::Index>(i)) =
          Eigen::Map<const Eigen::RowVectorXd>(vec.data(), static_cast<Eigen::Index>(vec.size()));
    }
    return nn::constant(std::move(out));
  }

 private:
  std::shared_ptr<const FeatureCache> cache_;
};

}  // namespace

std::unique_ptr<Encoder> make_encoder(const EncoderConfig& config, std::uint64_t seed) {
  std::unique_ptr<Encoder> encoder;
  switch (config.backend) {
    case EncoderBackend::stub:
      if (config.modality == Modality::text) {
        encoder = std::make_unique<StubTextEncoder>(config);
      } else {
        encoder = std::make_unique<StubImageEncoder>(config);
      }
      break;
    case EncoderBackend::recorded:
      encoder = std::make_unique<RecordedEncoder>(config);
      break;
    case EncoderBackend::local:
      encoder = std::make_unique<LocalBackbone>(config, seed);
      break;
  }
  if (config.freeze_half) freeze_half(*encoder);
  return encoder;
}

nn::Matrix encode_text(const std::vector<std::string>& texts, Encoder& encoder,
                       std::size_t batch_size) {
  if (encoder.config().modality != Modality::text) throw Error("encode_text needs a text encoder");
  Matrix out(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(kEncoderWidth));
  std::vector<EncoderInput> inputs;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    inputs.push_back({std::to_string(i), texts[i], {}, nullptr});
  }
  const nn::Context ctx;
  for (std::size_t start = 0; start < inputs.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, inputs.size() - start);
    Var rows = encoder.forward(std::span(inputs).subspan(start, n), ctx);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) = rows->value;
  }
  return out;
}

EncodeResult encode_image(const std::vector<std::filesystem::path>& paths, Encoder& encoder,
                          std::size_t batch_size) {
  if (encoder.config().modality != Modality::image) {
    throw Error("encode_image needs an image encoder");
  }
  EncodeResult result;
  std::vector<EncoderInput> inputs;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    try {
      auto image = std::make_shared<Image>(load_image(paths[i]));
      inputs.push_back({std::to_string(i), {}, paths[i], std::move(image)});
      result.rows.push_back(i);
    } catch (const Error& e) {
      result.errors.push_back({i, e.what()});
    }
  }
  result.features.resize(static_cast<Eigen::Index>(inputs.size()),
                         static_cast<Eigen::Index>(kEncoderWidth));
  const nn::Context ctx;
  for (std::size_t start = 0; start < inputs.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, inputs.size() - start);
    Var rows = encoder.forward(std::span(inputs).subspan(start, n), ctx);
    result.features.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) =
        rows->value;
  }
  return result;
}

// ---- feature cache --------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "feature cache assumes little endian");

constexpr char kCacheMagic[4] = {'T', 'R', 'F', 'C'};
constexpr std::uint32_t kCacheVersion = 1;

template <class T>
void put(std::string& out, const T& value) {
  out.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& data, const std::filesystem::path& path) : data_(data), path_(path) {}

  template <class T>
  T get() {
    T value;
    take(&value, sizeof(T));
    return value;
  }

  void take(void* dst, std::size_t n) {
    if (pos_ + n > data_.size()) {
      throw FormatError(fmt::format("{}: truncated file", path_.string()));
    }
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  const std::filesystem::path& path_;
  std::size_t pos_ = 0;
};

json header_json(const FeatureCacheHeader& h) {
  return {{"text_checkpoint", h.text_checkpoint},
          {"image_checkpoint", h.image_checkpoint},
          {"text_pooling", to_string(h.text_pooling)},
          {"image_pooling", to_string(h.image_pooling)},
          {"dim", h.dim}};
}

}  // namespace

FeatureCacheHeader cache_header_for(const EncoderConfig& text, const EncoderConfig& image) {
  return {text.checkpoint, image.checkpoint, text.pooling, image.pooling, kEncoderWidth};
}

FeatureCache::FeatureCache(FeatureCacheHeader header, std::vector<FeatureRecord> records)
    : header_(std::move(header)), records_(std::move(records)) {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    auto& r = records_[i];
    if (r.text_vec.size() != header_.dim || r.image_vec.size() != header_.dim) {
      throw Error(fmt::format("feature record {} does not have width {}", r.post_id, header_.dim));
    }
    for (double v : r.text_vec) {
      if (!std::isfinite(v)) throw Error(fmt::format("feature record {} is not finite", r.post_id));
    }
    for (double v : r.image_vec) {
      if (!std::isfinite(v)) throw Error(fmt::format("feature record {} is not finite", r.post_id));
    }
    r.text_pooling = header_.text_pooling;
    r.image_pooling = header_.image_pooling;
    if (!index_.emplace(r.post_id, i).second) {
      throw Error(fmt::format("duplicate feature record {}", r.post_id));
    }
  }
}

void FeatureCache::write(const std::filesystem::path& path) const {
  std::string out(kCacheMagic, sizeof(kCacheMagic));
  put(out, kCacheVersion);
  const std::string header = header_json(header_).dump();
  put(out, static_cast<std::uint64_t>(header.size()));
  out += header;
  put(out, static_cast<std::uint64_t>(records_.size()));
  for (const auto& r : records_) {
    put(out, static_cast<std::uint32_t>(r.post_id.size()));
    out += r.post_id;
    out.append(reinterpret_cast<const char*>(r.text_vec.data()), r.text_vec.size() * sizeof(double));
    out.append(reinterpret_cast<const char*>(r.image_vec.data()),
               r.image_vec.size() * sizeof(double));
  }
  auto tmp = path;
  tmp += ".tmp";
  write_file(tmp, out);
  std::filesystem::rename(tmp, path);
}

FeatureCache FeatureCache::read(const std::filesystem::path& path,
                                const std::optional<FeatureCacheHeader>& expected) {
  const std::string data = read_file(path);
  Reader in(data, path);
  char magic[4];
  in.take(magic, sizeof(magic));
  if (std::memcmp(magic, kCacheMagic, sizeof(magic)) != 0) {
    throw FormatError(fmt::format("{}: not a feature cache", path.string()));
  }
  const auto version = in.get<std::uint32_t>();
  if (version != kCacheVersion) {
    throw FormatError(fmt::format("{}: unsupported feature cache version {}", path.string(), version));
  }
  std::string header_text(in.get<std::uint64_t>(), '\0');
  in.take(header_text.data(), header_text.size());
  FeatureCacheHeader header;
  try {
    const auto j = json::parse(header_text);
    header.text_checkpoint = j.at("text_checkpoint").get<std::string>();
    header.image_checkpoint = j.at("image_checkpoint").get<std::string>();
    header.text_pooling = parse_pooling(j.at("text_pooling").get<std::string>());
    header.image_pooling = parse_pooling(j.at("image_pooling").get<std::string>());
    header.dim = j.at("dim").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("{}: bad header: {}", path.string(), e.what()));
  }
  if (expected && !(*expected == header)) {
    throw FormatError(fmt::format(
        "{}: stale feature cache (stored {}, expected {})", path.string(),
        header_json(header).dump(), header_json(*expected).dump()));
  }
  std::vector<FeatureRecord> records(in.get<std::uint64_t>());
  for (auto& r : records) {
    r.post_id.assign(in.get<std::uint32_t>(), '\0');
    in.take(r.post_id.data(), r.post_id.size());
    r.text_vec.resize(header.dim);
    r.image_vec.resize(header.dim);
    in.take(r.text_vec.data(), header.dim * sizeof(double));
    in.take(r.image_vec.data(), header.dim * sizeof(double));
  }
  if (!in.done()) throw FormatError(fmt::format("{}: trailing bytes", path.string()));
  return FeatureCache(std::move(header), std::move(records));
}

const FeatureRecord* FeatureCache::find(const std::string& post_id) const {
  auto it = index_.find(post_id);
  return it == index_.end() ? nullptr : &records_[it->second];
}

std::vector<FeatureRecord> extract_features(const std::vector<EncoderInput>& inputs,
                                            Encoder& text, Encoder& image,
                                            std::size_t batch_size) {
  std::vector<FeatureRecord> records;
  const nn::Context ctx;
  for (std::size_t start = 0; start < inputs.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, inputs.size() - start);
    const auto chunk = std::span(inputs).subspan(start, n);
    const Var t = text.forward(chunk, ctx);
    const Var v = image.forward(chunk, ctx);
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      FeatureRecord record;
      record.post_id = chunk[i].id;
      record.text_vec.assign(t->value.row(r).data(), t->value.row(r).data() + t->value.cols());
      record.image_vec.assign(v->value.row(r).data(), v->value.row(r).data() + v->value.cols());
      record.text_pooling = text.config().pooling;
      record.image_pooling = image.config().pooling;
      records.push_back(std::move(record));
    }
  }
  return records;
}

std::unique_ptr<Encoder> make_cached_encoder(std::shared_ptr<const FeatureCache> cache,
                                             Modality modality) {
  EncoderConfig config =
      modality == Modality::text ? EncoderConfig::text_default() : EncoderConfig::image_default();
  config.checkpoint = modality == Modality::text ? cache->header().text_checkpoint
                                                 : cache->header().image_checkpoint;
  config.pooling =
      modality == Modality::text ? cache->header().text_pooling : cache->header().image_pooling;
  return std::make_unique<CachedEncoder>(std::move(cache), std::move(config));
}

}  // namespace triage
