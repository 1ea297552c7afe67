#pragma once

// Small reverse-mode autodiff over dense row-major matrices, plus the few
// layers the fusion classifier and the local encoder backbone need.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "triage/util/rng.hpp"

namespace triage::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool frozen = false;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Owns parameters at stable addresses.
class ParameterStore {
 public:
  Parameter& create(std::string name, Matrix value);
  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t size() const { return params_.size(); }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward;
};

/// Forward-pass settings. Dropout draws from `rng` when training.
struct Context {
  bool training = false;
  Rng* rng = nullptr;
};

Var constant(Matrix value);
/// Leaf bound to a parameter; gradients flow into `param.grad` unless frozen.
Var param(Parameter& p);

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
/// Adds a 1 x n row to every row of `a`.
Var add_row(const Var& a, const Var& row);
Var scale(const Var& a, double s);
Var relu(const Var& a);
Var dropout(const Var& a, double p, const Context& ctx);
/// Per-row normalization; gamma and beta are 1 x n.
Var layer_norm(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5);
Var concat_cols(const Var& a, const Var& b);
Var concat_rows(const std::vector<Var>& parts);
/// Output row i is input row indices[i]; gradients scatter-add back.
Var gather_rows(const Var& a, const std::vector<std::size_t>& indices);
/// Rows of a parameter table, read in place (the table is not copied).
Var embedding(Parameter& table, const std::vector<std::size_t>& indices);

struct Segment {
  std::size_t start = 0;
  std::size_t length = 0;
};

/// Mean over the rows of each segment: one output row per segment.
Var segment_mean(const Var& a, const std::vector<Segment>& segments);

/// Scaled dot-product attention with `heads` column blocks. Query segment s
/// attends only to key segment s. Dropout applies to attention weights.
Var attention(const Var& q, const Var& k, const Var& v, const std::vector<Segment>& q_segments,
              const std::vector<Segment>& k_segments, std::size_t heads, double dropout_p,
              const Context& ctx);

/// Mean softmax cross-entropy of `logits` (B x C) against class indices.
Var cross_entropy(const Var& logits, const std::vector<std::size_t>& targets);

/// Runs reverse-mode accumulation from a 1 x 1 output.
void backward(const Var& output);

Matrix softmax_rows(const Matrix& logits);

// ---- layers ---------------------------------------------------------------

struct Linear {
  Parameter* weight = nullptr;  // in x out
  Parameter* bias = nullptr;    // 1 x out

  Linear() = default;
  /// PyTorch default init: both weight and bias ~ U(-1/sqrt(in), 1/sqrt(in)).
  Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
  Var operator()(const Var& x) const;
  std::size_t in_features() const { return static_cast<std::size_t>(weight->value.rows()); }
  std::size_t out_features() const { return static_cast<std::size_t>(weight->value.cols()); }
};

struct LayerNorm {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;

  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, std::size_t dim);
  Var operator()(const Var& x) const;
};

struct MultiheadAttention {
  Linear q_proj, k_proj, v_proj, out_proj;
  std::size_t heads = 1;
  double dropout = 0.0;

  MultiheadAttention() = default;
  MultiheadAttention(ParameterStore& store, const std::string& name, std::size_t dim,
                     std::size_t heads, double dropout, Rng& rng);
  Var operator()(const Var& query, const Var& key_value, const std::vector<Segment>& q_segments,
                 const std::vector<Segment>& kv_segments, const Context& ctx) const;
};

/// Post-norm encoder layer with ReLU feed-forward, the PyTorch default
/// layout: x = norm1(x + drop(attn(x))); x = norm2(x + drop(ffn(x))).
struct TransformerLayer {
  MultiheadAttention attn;
  Linear linear1, linear2;
  LayerNorm norm1, norm2;
  double dropout = 0.0;

  TransformerLayer() = default;
  TransformerLayer(ParameterStore& store, const std::string& name, std::size_t dim,
                   std::size_t heads, std::size_t ffn_dim, double dropout, Rng& rng);
  /// Self-attention when `memory` is null, otherwise queries attend to memory.
  Var operator()(const Var& x, const std::vector<Segment>& segments, const Context& ctx,
                 const Var& memory = nullptr,
                 const std::vector<Segment>& memory_segments = {}) const;
  std::vector<Parameter*> parameters() const;
};

// ---- optimizer ------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with L2 weight decay folded into the gradient. Frozen parameters
/// are skipped entirely.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig config);
  void zero_grad();
  void step();
  const AdamConfig& config() const { return config_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Matrix> m_, v_;
  AdamConfig config_;
  std::uint64_t t_ = 0;
};

}  // namespace triage::nn
