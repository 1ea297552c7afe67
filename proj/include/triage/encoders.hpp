#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "triage/nn.hpp"

namespace triage {

inline constexpr std::size_t kEncoderWidth = 768;

enum class Modality { text, image };
enum class Pooling { cls, mean };
/// stub: deterministic parameter-free features; recorded: vectors looked up
/// in a JSONL file; local: trainable transformer backbone.
enum class EncoderBackend { stub, recorded, local };

std::string to_string(Modality m);
std::string to_string(Pooling p);
std::string to_string(EncoderBackend b);
Modality parse_modality(const std::string& text);
Pooling parse_pooling(const std::string& text);
EncoderBackend parse_backend(const std::string& text);

struct ImageSize {
  int height = 384;
  int width = 384;
  int channels = 3;
};

/// Shape of the local backbone. The hidden width is always kEncoderWidth.
struct BackboneConfig {
  std::size_t layers = 12;
  std::size_t heads = 12;
  std::size_t ffn_dim = 3072;
  std::size_t patch_size = 16;
  std::size_t vocab_size = 8192;
  double dropout = 0.1;
};

struct EncoderConfig {
  Modality modality = Modality::text;
  std::string checkpoint = "roberta-base";
  Pooling pooling = Pooling::cls;
  bool freeze_half = false;
  std::size_t max_text_length = 144;
  ImageSize image_size;
  EncoderBackend backend = EncoderBackend::stub;
  std::filesystem::path recorded_path;
  BackboneConfig backbone;

  static EncoderConfig text_default();
  static EncoderConfig image_default();
};

nlohmann::json to_json(const EncoderConfig& config);
EncoderConfig encoder_config_from_json(const nlohmann::json& j, Modality modality);

/// RGB, row-major height x width x 3, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;
};

/// Throws triage::Error when the file is missing or not a decodable image.
Image load_image(const std::filesystem::path& path);
Image resize_bilinear(const Image& image, int height, int width);
/// Writes an 8-bit image; used to build fixtures.
void save_image(const std::filesystem::path& path, const Image& image);

struct EncoderInput {
  std::string id;
  std::string text;
  std::filesystem::path image_path;
  std::shared_ptr<const Image> image;  // loaded lazily from image_path when null
};

/// Lowercased alphanumeric runs; bytes above 0x7f count as word characters.
std::vector<std::string> tokenize(const std::string& text);

class Encoder {
 public:
  explicit Encoder(EncoderConfig config) : config_(std::move(config)) {}
  virtual ~Encoder() = default;
  Encoder(const Encoder&) = delete;
  Encoder& operator=(const Encoder&) = delete;

  const EncoderConfig& config() const { return config_; }

  /// batch.size() x kEncoderWidth pooled final hidden states.
  virtual nn::Var forward(std::span<const EncoderInput> batch, const nn::Context& ctx) = 0;

  virtual std::vector<nn::Parameter*> parameters() { return {}; }
  virtual std::size_t num_layers() const { return 0; }
  /// Excludes layers [0, count) from gradient updates.
  virtual void freeze_layers(std::size_t /*count*/) {}
  /// Excludes every parameter, embeddings included.
  void freeze_all();

 protected:
  EncoderConfig config_;
};

std::unique_ptr<Encoder> make_encoder(const EncoderConfig& config, std::uint64_t seed);

/// Freezes the first floor(n/2) layers.
Encoder& freeze_half(Encoder& encoder);

/// Tokens kept for one text: at most max_length - 1 so the CLS position fits.
std::vector<std::string> truncate_tokens(const std::string& text, std::size_t max_length);

struct ItemError {
  std::size_t index = 0;
  std::string message;
};

struct EncodeResult {
  nn::Matrix features;            // one row per successful input
  std::vector<std::size_t> rows;  // input index of each row
  std::vector<ItemError> errors;
};

nn::Matrix encode_text(const std::vector<std::string>& texts, Encoder& encoder,
                       std::size_t batch_size = 32);
EncodeResult encode_image(const std::vector<std::filesystem::path>& paths, Encoder& encoder,
                          std::size_t batch_size = 32);

// ---- feature cache --------------------------------------------------------

struct FeatureRecord {
  std::string post_id;
  std::vector<double> text_vec;
  std::vector<double> image_vec;
  Pooling text_pooling = Pooling::cls;
  Pooling image_pooling = Pooling::cls;

  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

struct FeatureCacheHeader {
  std::string text_checkpoint;
  std::string image_checkpoint;
  Pooling text_pooling = Pooling::cls;
  Pooling image_pooling = Pooling::cls;
  std::size_t dim = kEncoderWidth;

  friend bool operator==(const FeatureCacheHeader&, const FeatureCacheHeader&) = default;
};

FeatureCacheHeader cache_header_for(const EncoderConfig& text, const EncoderConfig& image);

/// Keyed binary store of feature records. Read-only after loading.
class FeatureCache {
 public:
  FeatureCache() = default;
  FeatureCache(FeatureCacheHeader header, std::vector<FeatureRecord> records);

  /// Whole-file write through a temporary file and rename.
  void write(const std::filesystem::path& path) const;
  /// Throws FormatError on bad magic/version, or when `expected` is given
  /// and the stored header differs from it.
  static FeatureCache read(const std::filesystem::path& path,
                           const std::optional<FeatureCacheHeader>& expected = std::nullopt);

  const FeatureCacheHeader& header() const { return header_; }
  const std::vector<FeatureRecord>& records() const { return records_; }
  const FeatureRecord* find(const std::string& post_id) const;

 private:
  FeatureCacheHeader header_;
  std::vector<FeatureRecord> records_;
  std::map<std::string, std::size_t> index_;
};

/// Runs both encoders in eval mode over the inputs.
std::vector<FeatureRecord> extract_features(const std::vector<EncoderInput>& inputs,
                                            Encoder& text, Encoder& image,
                                            std::size_t batch_size = 32);

/// Serves vectors from a feature cache by post id.
std::unique_ptr<Encoder> make_cached_encoder(std::shared_ptr<const FeatureCache> cache,
                                             Modality modality);

}  // namespace triage
