#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "triage/encoders.hpp"
#include "triage/nn.hpp"
#include "triage/taxonomy.hpp"

namespace triage {

enum class FusionKind { transformer, concat, cross_attention, none };
enum class HeadKind { mlp, linear };

std::string to_string(FusionKind kind);
std::string to_string(HeadKind kind);
FusionKind parse_fusion(const std::string& text);
HeadKind parse_head(const std::string& text);

struct FusionModelConfig {
  std::size_t input_dim = kEncoderWidth;
  std::size_t proj_dim = 512;
  FusionKind fusion = FusionKind::transformer;
  std::size_t fusion_layers = 2;
  std::size_t heads = 8;
  std::size_t ffn_dim = 2048;
  double dropout = 0.2;
  std::size_t head_hidden = 256;
  std::size_t num_classes = 13;
  HeadKind head = HeadKind::mlp;
};

/// Throws triage::Error naming the offending field.
void validate(const FusionModelConfig& config);
nlohmann::json to_json(const FusionModelConfig& config);
FusionModelConfig fusion_config_from_json(const nlohmann::json& j);

struct ParameterShape {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  friend bool operator==(const ParameterShape&, const ParameterShape&) = default;
};

/// Two encoders, per-modality projections, a fusion module over the two
/// projected tokens and a classification head.
///
/// transformer: post-norm encoder layers over the 2-token sequence; the head
///   sees the mean of the two output tokens.
/// cross_attention: the image token queries the text token through the same
///   layer layout; the head sees the attended image token.
/// concat: the head sees both projections side by side (2 * proj_dim).
/// none: the head sees the mean of the two projections.
class FusionModel {
 public:
  FusionModel(FusionModelConfig config, std::shared_ptr<Encoder> text,
              std::shared_ptr<Encoder> image, std::uint64_t seed);

  /// batch.size() x num_classes logits.
  nn::Var forward(std::span<const EncoderInput> batch, const nn::Context& ctx) const;
  /// Eval-mode logits, computed in chunks of `batch_size`.
  nn::Matrix logits(std::span<const EncoderInput> inputs, std::size_t batch_size = 32) const;
  std::vector<ClassId> predict(std::span<const EncoderInput> inputs,
                               std::size_t batch_size = 32) const;

  /// Fusion and head parameters followed by encoder parameters.
  std::vector<nn::Parameter*> parameters() const;
  std::vector<nn::Parameter*> fusion_parameters() const;
  std::vector<ParameterShape> parameter_shapes() const;
  std::size_t parameter_count() const;
  std::size_t head_input_dim() const;

  std::vector<nn::Matrix> snapshot() const;
  void restore(const std::vector<nn::Matrix>& values);

  const FusionModelConfig& config() const { return config_; }
  Encoder& text_encoder() const { return *text_; }
  Encoder& image_encoder() const { return *image_; }

 private:
  FusionModelConfig config_;
  std::shared_ptr<Encoder> text_;
  std::shared_ptr<Encoder> image_;
  std::unique_ptr<nn::ParameterStore> store_;
  nn::Linear text_proj_;
  nn::Linear image_proj_;
  std::vector<nn::TransformerLayer> fusion_layers_;
  nn::Linear head_hidden_;
  nn::Linear head_out_;
};

std::unique_ptr<FusionModel> build_fusion_model(const FusionModelConfig& config,
                                                std::shared_ptr<Encoder> text,
                                                std::shared_ptr<Encoder> image,
                                                std::uint64_t seed);

// ---- training -------------------------------------------------------------

struct Sample {
  EncoderInput input;
  ClassId label;
};

struct TrainConfig {
  std::size_t batch_size = 8;
  double learning_rate = 1e-5;
  double weight_decay = 0.01;
  std::size_t epochs = 10;
  std::uint64_t seed = 8;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool freeze_encoders = false;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean over batches
  double val_weighted_f1 = 0.0;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0 when no epoch ran
  double best_val_weighted_f1 = 0.0;
};

nlohmann::json to_json(const TrainResult& result);

/// Adam over cross-entropy with per-epoch shuffling. After every epoch the
/// validation weighted F1 is computed; the parameters of the first epoch
/// reaching the maximum are restored at the end. Shuffling and dropout draw
/// from streams derived from config.seed.
TrainResult train(FusionModel& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set, const TrainConfig& config);

/// Binary checkpoint: magic, version, JSON header (model config, encoder
/// configs, extra metadata, parameter names and shapes), raw doubles.
void save_checkpoint(const std::filesystem::path& path, const FusionModel& model,
                     const nlohmann::json& metadata);
/// Loads parameter values into `model`; throws FormatError when names or
/// shapes differ. Returns the stored metadata.
nlohmann::json load_checkpoint(const std::filesystem::path& path, FusionModel& model);
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

// ---- baselines --------------------------------------------------------------

enum class BaselineKind { DT, GNB, KNN, SVM };

std::string to_string(BaselineKind kind);
BaselineKind parse_baseline(const std::string& text);

struct BaselineConfig {
  BaselineKind kind = BaselineKind::KNN;
  std::size_t knn_k = 1;
  bool dt_class_weight_balanced = true;
  std::size_t pca_components = 250;
  double svm_c = 1.0;
  double svm_tol = 1e-3;
};

nlohmann::json to_json(const BaselineConfig& config);

/// Principal components of the centred data, largest variance first, each
/// component's sign fixed so its largest-magnitude entry is positive.
struct Pca {
  Eigen::RowVectorXd mean;
  nn::Matrix components;  // input width x k

  static Pca fit(const nn::Matrix& x, std::size_t k);
  nn::Matrix transform(const nn::Matrix& x) const;
};

class Baseline {
 public:
  virtual ~Baseline() = default;
  virtual std::vector<std::size_t> predict(const nn::Matrix& features) const = 0;
  /// Width of the features the classifier itself consumes.
  virtual std::size_t transformed_width() const = 0;
  virtual BaselineKind kind() const = 0;
};

/// Features are concatenated text and image vectors, one row per sample;
/// labels are class indices below num_classes.
std::unique_ptr<Baseline> fit_baseline(const nn::Matrix& features,
                                       const std::vector<std::size_t>& labels,
                                       const BaselineConfig& config, std::size_t num_classes);

}  // namespace triage
