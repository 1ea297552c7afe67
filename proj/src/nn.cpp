#include "triage/nn.hpp"

#include <cmath>
#include <unordered_set>

#include <fmt/format.h>

#include "triage/error.hpp"

namespace triage::nn {

Parameter& ParameterStore::create(std::string name, Matrix value) {
  auto p = std::make_unique<Parameter>();
  p->name = std::move(name);
  p->value = std::move(value);
  p->zero_grad();
  params_.push_back(std::move(p));
  return *params_.back();
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

namespace {

Var make_node(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p->requires_grad;
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward = std::move(backward_fn);
  }
  return node;
}

void accumulate(const Var& target, const Matrix& g) {
  if (!target->requires_grad) return;
  if (target->grad.size() == 0) {
    target->grad = g;
  } else {
    target->grad += g;
  }
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(fmt::format("{}: shape mismatch {}x{} vs {}x{}", op, a.rows(), a.cols(), b.rows(),
                            b.cols()));
  }
}

Var affine(const Var& x, const Var& w, const Var& b) {
  if (x->value.cols() != w->value.rows()) {
    throw Error(fmt::format("linear: input width {} does not match weight rows {}",
                            x->value.cols(), w->value.rows()));
  }
  Matrix out = x->value * w->value;
  out.rowwise() += b->value.row(0);
  return make_node(std::move(out), {x, w, b}, [](Node& n) {
    const auto& x = n.parents[0];
    const auto& w = n.parents[1];
    const auto& b = n.parents[2];
    if (x->requires_grad) accumulate(x, n.grad * w->value.transpose());
    if (w->requires_grad) accumulate(w, x->value.transpose() * n.grad);
    if (b->requires_grad) accumulate(b, n.grad.colwise().sum());
  });
}

}  // namespace

Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return node;
}

Var param(Parameter& p) {
  auto node = std::make_shared<Node>();
  node->value = p.value;
  node->requires_grad = !p.frozen;
  if (node->requires_grad) {
    Parameter* target = &p;
    node->backward = [target](Node& n) {
      if (target->grad.size() == 0) target->zero_grad();
      target->grad += n.grad;
    };
  }
  return node;
}

Var matmul(const Var& a, const Var& b) {
  if (a->value.cols() != b->value.rows()) {
    throw Error(fmt::format("matmul: {}x{} times {}x{}", a->value.rows(), a->value.cols(),
                            b->value.rows(), b->value.cols()));
  }
  return make_node(a->value * b->value, {a, b}, [](Node& n) {
    const auto& a = n.parents[0];
    const auto& b = n.parents[1];
    if (a->requires_grad) accumulate(a, n.grad * b->value.transpose());
    if (b->requires_grad) accumulate(b, a->value.transpose() * n.grad);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "add");
  return make_node(a->value + b->value, {a, b}, [](Node& n) {
    accumulate(n.parents[0], n.grad);
    accumulate(n.parents[1], n.grad);
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row->value.rows() != 1 || row->value.cols() != a->value.cols()) {
    throw Error("add_row: row must be 1 x cols");
  }
  Matrix out = a->value;
  out.rowwise() += row->value.row(0);
  return make_node(std::move(out), {a, row}, [](Node& n) {
    accumulate(n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) accumulate(n.parents[1], n.grad.colwise().sum());
  });
}

Var scale(const Var& a, double s) {
  return make_node(a->value * s, {a}, [s](Node& n) { accumulate(n.parents[0], n.grad * s); });
}

Var relu(const Var& a) {
  Matrix out = a->value.cwiseMax(0.0);
  return make_node(std::move(out), {a}, [](Node& n) {
    const auto& x = n.parents[0];
    Matrix g = (x->value.array() > 0.0).select(n.grad, 0.0);
    accumulate(x, g);
  });
}

Var dropout(const Var& a, double p, const Context& ctx) {
  if (!ctx.training || p <= 0.0) return a;
  if (ctx.rng == nullptr) throw Error("dropout in training mode needs an rng");
  if (p >= 1.0) throw Error("dropout probability must be below 1");
  const double keep_scale = 1.0 / (1.0 - p);
  Matrix mask(a->value.rows(), a->value.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = ctx.rng->uniform() < p ? 0.0 : keep_scale;
  }
  Matrix out = a->value.cwiseProduct(mask);
  return make_node(std::move(out), {a}, [mask = std::move(mask)](Node& n) {
    accumulate(n.parents[0], n.grad.cwiseProduct(mask));
  });
}

Var layer_norm(const Var& a, const Var& gamma, const Var& beta, double eps) {
  const Eigen::Index rows = a->value.rows();
  const Eigen::Index cols = a->value.cols();
  if (gamma->value.cols() != cols || beta->value.cols() != cols) {
    throw Error("layer_norm: affine parameters do not match width");
  }
  Matrix xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto row = a->value.row(r);
    const double mean = row.mean();
    const double var = (row.array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (row.array() - mean) * inv_std(r);
  }
  Matrix out = xhat.array().rowwise() * gamma->value.row(0).array();
  out.rowwise() += beta->value.row(0);
  return make_node(std::move(out), {a, gamma, beta},
                   [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                     const auto& x = n.parents[0];
                     const auto& gamma = n.parents[1];
                     const auto& beta = n.parents[2];
                     if (gamma->requires_grad) {
                       accumulate(gamma, n.grad.cwiseProduct(xhat).colwise().sum());
                     }
                     if (beta->requires_grad) accumulate(beta, n.grad.colwise().sum());
                     if (!x->requires_grad) return;
                     Matrix dxhat = n.grad.array().rowwise() * gamma->value.row(0).array();
                     Matrix dx(dxhat.rows(), dxhat.cols());
                     for (Eigen::Index r = 0; r < dx.rows(); ++r) {
                       const double m1 = dxhat.row(r).mean();
                       const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                       dx.row(r) = inv_std(r) *
                                   (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                     }
                     accumulate(x, dx);
                   });
}

Var concat_cols(const Var& a, const Var& b) {
  if (a->value.rows() != b->value.rows()) throw Error("concat_cols: row count mismatch");
  Matrix out(a->value.rows(), a->value.cols() + b->value.cols());
  out << a->value, b->value;
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const auto ca = n.parents[0]->value.cols();
    const auto cb = n.parents[1]->value.cols();
    if (n.parents[0]->requires_grad) accumulate(n.parents[0], n.grad.leftCols(ca));
    if (n.parents[1]->requires_grad) accumulate(n.parents[1], n.grad.rightCols(cb));
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_rows: no inputs");
  const auto cols = parts.front()->value.cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p->value.cols() != cols) throw Error("concat_rows: column count mismatch");
    rows += p->value.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleRows(offset, p->value.rows()) = p->value;
    offset += p->value.rows();
  }
  return make_node(std::move(out), parts, [](Node& n) {
    Eigen::Index offset = 0;
    for (const auto& p : n.parents) {
      if (p->requires_grad) accumulate(p, n.grad.middleRows(offset, p->value.rows()));
      offset += p->value.rows();
    }
  });
}

Var gather_rows(const Var& a, const std::vector<std::size_t>& indices) {
  Matrix out(static_cast<Eigen::Index>(indices.size()), a->value.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= static_cast<std::size_t>(a->value.rows())) {
      throw Error(fmt::format("gather_rows: index {} out of range", indices[i]));
    }
    out.row(static_cast<Eigen::Index>(i)) = a->value.row(static_cast<Eigen::Index>(indices[i]));
  }
  return make_node(std::move(out), {a}, [indices](Node& n) {
    const auto& a = n.parents[0];
    Matrix g = Matrix::Zero(a->value.rows(), a->value.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      g.row(static_cast<Eigen::Index>(indices[i])) += n.grad.row(static_cast<Eigen::Index>(i));
    }
    accumulate(a, g);
  });
}

Var embedding(Parameter& table, const std::vector<std::size_t>& indices) {
  Matrix out(static_cast<Eigen::Index>(indices.size()), table.value.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= static_cast<std::size_t>(table.value.rows())) {
      throw Error(fmt::format("embedding: index {} out of range", indices[i]));
    }
    out.row(static_cast<Eigen::Index>(i)) = table.value.row(static_cast<Eigen::Index>(indices[i]));
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(out);
  node->requires_grad = !table.frozen;
  if (node->requires_grad) {
    Parameter* target = &table;
    node->backward = [target, indices](Node& n) {
      if (target->grad.size() == 0) target->zero_grad();
      for (std::size_t i = 0; i < indices.size(); ++i) {
        target->grad.row(static_cast<Eigen::Index>(indices[i])) +=
            n.grad.row(static_cast<Eigen::Index>(i));
      }
    };
  }
  return node;
}

Var segment_mean(const Var& a, const std::vector<Segment>& segments) {
  Matrix out(static_cast<Eigen::Index>(segments.size()), a->value.cols());
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    if (seg.length == 0) throw Error("segment_mean: empty segment");
    out.row(static_cast<Eigen::Index>(s)) =
        a->value
            .middleRows(static_cast<Eigen::Index>(seg.start), static_cast<Eigen::Index>(seg.length))
            .colwise()
            .mean();
  }
  return make_node(std::move(out), {a}, [segments](Node& n) {
    const auto& a = n.parents[0];
    Matrix g = Matrix::Zero(a->value.rows(), a->value.cols());
    for (std::size_t s = 0; s < segments.size(); ++s) {
      const auto& seg = segments[s];
      const auto row = n.grad.row(static_cast<Eigen::Index>(s)) / static_cast<double>(seg.length);
      for (std::size_t r = 0; r < seg.length; ++r) {
        g.row(static_cast<Eigen::Index>(seg.start + r)) += row;
      }
    }
    accumulate(a, g);
  });
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double max = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - max).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Var attention(const Var& q, const Var& k, const Var& v, const std::vector<Segment>& q_segments,
              const std::vector<Segment>& k_segments, std::size_t heads, double dropout_p,
              const Context& ctx) {
  const Eigen::Index dim = q->value.cols();
  if (k->value.cols() != dim || v->value.cols() != dim) {
    throw Error("attention: q, k, v widths differ");
  }
  if (k->value.rows() != v->value.rows()) throw Error("attention: k and v row counts differ");
  if (q_segments.size() != k_segments.size()) throw Error("attention: segment count mismatch");
  if (heads == 0 || dim % static_cast<Eigen::Index>(heads) != 0) {
    throw Error(fmt::format("attention: width {} not divisible by {} heads", dim, heads));
  }
  const bool use_dropout = ctx.training && dropout_p > 0.0;
  if (use_dropout && ctx.rng == nullptr) throw Error("attention dropout needs an rng");
  const Eigen::Index dh = dim / static_cast<Eigen::Index>(heads);
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));

  struct Cache {
    Matrix probs;    // softmax output
    Matrix dropped;  // probs after dropout (what multiplies V)
  };
  auto caches = std::make_shared<std::vector<Cache>>();
  caches->reserve(q_segments.size() * heads);

  Matrix out = Matrix::Zero(q->value.rows(), dim);
  for (std::size_t s = 0; s < q_segments.size(); ++s) {
    const auto qs = static_cast<Eigen::Index>(q_segments[s].start);
    const auto ql = static_cast<Eigen::Index>(q_segments[s].length);
    const auto ks = static_cast<Eigen::Index>(k_segments[s].start);
    const auto kl = static_cast<Eigen::Index>(k_segments[s].length);
    if (kl == 0) throw Error("attention: empty key segment");
    for (std::size_t h = 0; h < heads; ++h) {
      const Eigen::Index c = static_cast<Eigen::Index>(h) * dh;
      Matrix scores =
          q->value.block(qs, c, ql, dh) * k->value.block(ks, c, kl, dh).transpose() * scale_factor;
      Cache cache;
      cache.probs = softmax_rows(scores);
      cache.dropped = cache.probs;
      if (use_dropout) {
        const double keep_scale = 1.0 / (1.0 - dropout_p);
        for (Eigen::Index i = 0; i < cache.dropped.size(); ++i) {
          cache.dropped.data()[i] *= ctx.rng->uniform() < dropout_p ? 0.0 : keep_scale;
        }
      }
      out.block(qs, c, ql, dh) = cache.dropped * v->value.block(ks, c, kl, dh);
      caches->push_back(std::move(cache));
    }
  }

  return make_node(
      std::move(out), {q, k, v},
      [caches, q_segments, k_segments, heads, dh, scale_factor, dropout_p, use_dropout](Node& n) {
        const auto& q = n.parents[0];
        const auto& k = n.parents[1];
        const auto& v = n.parents[2];
        Matrix dq = Matrix::Zero(q->value.rows(), q->value.cols());
        Matrix dk = Matrix::Zero(k->value.rows(), k->value.cols());
        Matrix dv = Matrix::Zero(v->value.rows(), v->value.cols());
        std::size_t idx = 0;
        for (std::size_t s = 0; s < q_segments.size(); ++s) {
          const auto qs = static_cast<Eigen::Index>(q_segments[s].start);
          const auto ql = static_cast<Eigen::Index>(q_segments[s].length);
          const auto ks = static_cast<Eigen::Index>(k_segments[s].start);
          const auto kl = static_cast<Eigen::Index>(k_segments[s].length);
          for (std::size_t h = 0; h < heads; ++h, ++idx) {
            const auto& cache = (*caches)[idx];
            const Eigen::Index c = static_cast<Eigen::Index>(h) * dh;
            const Matrix dout = n.grad.block(qs, c, ql, dh);
            dv.block(ks, c, kl, dh) += cache.dropped.transpose() * dout;
            Matrix dp = dout * v->value.block(ks, c, kl, dh).transpose();
            if (use_dropout) {
              // dropped = probs * mask, so d(probs) = d(dropped) * mask
              const double keep_scale = 1.0 / (1.0 - dropout_p);
              for (Eigen::Index i = 0; i < dp.size(); ++i) {
                dp.data()[i] *= cache.dropped.data()[i] == 0.0 ? 0.0 : keep_scale;
              }
            }
            Matrix ds(ql, kl);
            for (Eigen::Index r = 0; r < ql; ++r) {
              const double dot = dp.row(r).dot(cache.probs.row(r));
              ds.row(r) = cache.probs.row(r).array() * (dp.row(r).array() - dot);
            }
            ds *= scale_factor;
            dq.block(qs, c, ql, dh) += ds * k->value.block(ks, c, kl, dh);
            dk.block(ks, c, kl, dh) += ds.transpose() * q->value.block(qs, c, ql, dh);
          }
        }
        accumulate(q, dq);
        accumulate(k, dk);
        accumulate(v, dv);
      });
}

Var cross_entropy(const Var& logits, const std::vector<std::size_t>& targets) {
  const Eigen::Index batch = logits->value.rows();
  if (static_cast<std::size_t>(batch) != targets.size() || batch == 0) {
    throw Error("cross_entropy: target count does not match batch");
  }
  Matrix probs = softmax_rows(logits->value);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < batch; ++r) {
    const auto t = static_cast<Eigen::Index>(targets[static_cast<std::size_t>(r)]);
    if (t >= logits->value.cols()) throw Error("cross_entropy: target out of range");
    const double max = logits->value.row(r).maxCoeff();
    const double lse = max + std::log((logits->value.row(r).array() - max).exp().sum());
    loss += lse - logits->value(r, t);
  }
  Matrix out(1, 1);
  out(0, 0) = loss / static_cast<double>(batch);
  return make_node(std::move(out), {logits}, [probs = std::move(probs), targets](Node& n) {
    Matrix g = probs;
    for (std::size_t r = 0; r < targets.size(); ++r) {
      g(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(targets[r])) -= 1.0;
    }
    g *= n.grad(0, 0) / static_cast<double>(targets.size());
    accumulate(n.parents[0], g);
  });
}

void backward(const Var& output) {
  if (output->value.rows() != 1 || output->value.cols() != 1) {
    throw Error("backward: output must be a scalar");
  }
  if (!output->requires_grad) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{output.get(), 0}};
  visited.insert(output.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  output->grad = Matrix::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->grad.size() == 0 || !node->backward) continue;
    node->backward(*node);
  }
}

// ---- layers ---------------------------------------------------------------

Linear::Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
               Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Matrix w(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
  Matrix b(1, static_cast<Eigen::Index>(out));
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = rng.uniform(-bound, bound);
  weight = &store.create(name + ".weight", std::move(w));
  bias = &store.create(name + ".bias", std::move(b));
}

Var Linear::operator()(const Var& x) const { return affine(x, param(*weight), param(*bias)); }

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, std::size_t dim) {
  gamma = &store.create(name + ".weight", Matrix::Ones(1, static_cast<Eigen::Index>(dim)));
  beta = &store.create(name + ".bias", Matrix::Zero(1, static_cast<Eigen::Index>(dim)));
}

Var LayerNorm::operator()(const Var& x) const {
  return layer_norm(x, param(*gamma), param(*beta));
}

MultiheadAttention::MultiheadAttention(ParameterStore& store, const std::string& name,
                                       std::size_t dim, std::size_t heads_, double dropout_,
                                       Rng& rng)
    : q_proj(store, name + ".q_proj", dim, dim, rng),
      k_proj(store, name + ".k_proj", dim, dim, rng),
      v_proj(store, name + ".v_proj", dim, dim, rng),
      out_proj(store, name + ".out_proj", dim, dim, rng),
      heads(heads_),
      dropout(dropout_) {
  if (heads == 0 || dim % heads != 0) {
    throw Error(fmt::format("attention width {} is not divisible by {} heads", dim, heads));
  }
}

Var MultiheadAttention::operator()(const Var& query, const Var& key_value,
                                   const std::vector<Segment>& q_segments,
                                   const std::vector<Segment>& kv_segments,
                                   const Context& ctx) const {
  Var q = q_proj(query);
  Var k = k_proj(key_value);
  Var v = v_proj(key_value);
  return out_proj(attention(q, k, v, q_segments, kv_segments, heads, dropout, ctx));
}

TransformerLayer::TransformerLayer(ParameterStore& store, const std::string& name,
                                   std::size_t dim, std::size_t heads, std::size_t ffn_dim,
                                   double dropout_, Rng& rng)
    : attn(store, name + ".attn", dim, heads, dropout_, rng),
      linear1(store, name + ".linear1", dim, ffn_dim, rng),
      linear2(store, name + ".linear2", ffn_dim, dim, rng),
      norm1(store, name + ".norm1", dim),
      norm2(store, name + ".norm2", dim),
      dropout(dropout_) {}

Var TransformerLayer::operator()(const Var& x, const std::vector<Segment>& segments,
                                 const Context& ctx, const Var& memory,
                                 const std::vector<Segment>& memory_segments) const {
  Var attended = memory ? attn(x, memory, segments, memory_segments, ctx)
                        : attn(x, x, segments, segments, ctx);
  Var h = norm1(add(x, nn::dropout(attended, dropout, ctx)));
  Var ff = linear2(nn::dropout(relu(linear1(h)), dropout, ctx));
  return norm2(add(h, nn::dropout(ff, dropout, ctx)));
}

std::vector<Parameter*> TransformerLayer::parameters() const {
  return {attn.q_proj.weight,  attn.q_proj.bias,   attn.k_proj.weight, attn.k_proj.bias,
          attn.v_proj.weight,  attn.v_proj.bias,   attn.out_proj.weight, attn.out_proj.bias,
          linear1.weight,      linear1.bias,       linear2.weight,     linear2.bias,
          norm1.gamma,         norm1.beta,         norm2.gamma,        norm2.beta};
}

// ---- optimizer ------------------------------------------------------------

Adam::Adam(std::vector<Parameter*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (auto* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (p.frozen) continue;
    double* value = p.value.data();
    const double* grad = p.grad.data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    const Eigen::Index size = p.value.size();
    for (Eigen::Index k = 0; k < size; ++k) {
      const double g = grad[k] + config_.weight_decay * value[k];
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g;
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g * g;
      value[k] -= config_.learning_rate * ((m[k] / bc1) / (std::sqrt(v[k] / bc2) + config_.eps));
    }
  }
}

}  // namespace triage::nn
