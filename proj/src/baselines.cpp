#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include <fmt/format.h>

#include "triage/classifiers.hpp"
#include "triage/error.hpp"

namespace triage {

using nn::Matrix;

std::string to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::DT:
      return "DT";
    case BaselineKind::GNB:
      return "GNB";
    case BaselineKind::KNN:
      return "KNN";
    case BaselineKind::SVM:
      break;
  }
  return "SVM";
}

BaselineKind parse_baseline(const std::string& text) {
  if (text == "DT") return BaselineKind::DT;
  if (text == "GNB") return BaselineKind::GNB;
  if (text == "KNN") return BaselineKind::KNN;
  if (text == "SVM") return BaselineKind::SVM;
  throw Error(fmt::format("unknown baseline \"{}\" (expected DT, GNB, KNN or SVM)", text));
}

nlohmann::json to_json(const BaselineConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"knn_k", c.knn_k},
          {"dt_class_weight", c.dt_class_weight_balanced ? "balanced" : "none"},
          {"pca_components", c.pca_components},
          {"svm_c", c.svm_c},
          {"svm_kernel", "rbf"},
          {"svm_gamma", "scale"},
          {"svm_tol", c.svm_tol}};
}

Pca Pca::fit(const Matrix& x, std::size_t k) {
  const auto width = static_cast<std::size_t>(x.cols());
  if (k >= width) {
    throw Error(fmt::format("pca_components {} must be below the feature width {}", k, width));
  }
  if (k > static_cast<std::size_t>(x.rows())) {
    throw Error(fmt::format("pca_components {} exceeds the {} training rows", k, x.rows()));
  }
  Pca pca;
  pca.mean = x.colwise().mean();
  const Matrix centred = x.rowwise() - pca.mean;
  const Eigen::MatrixXd cov = (centred.transpose() * centred) / static_cast<double>(x.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw Error("PCA eigendecomposition failed");
  pca.components.resize(static_cast<Eigen::Index>(width), static_cast<Eigen::Index>(k));
  for (std::size_t c = 0; c < k; ++c) {
    // eigenvalues come in ascending order
    Eigen::VectorXd v = solver.eigenvectors().col(static_cast<Eigen::Index>(width - 1 - c));
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    pca.components.col(static_cast<Eigen::Index>(c)) = v;
  }
  return pca;
}

Matrix Pca::transform(const Matrix& x) const {
  if (x.cols() != mean.size()) throw Error("PCA input width does not match the fitted width");
  return (x.rowwise() - mean) * components;
}

namespace {

void check_inputs(const Matrix& x, const std::vector<std::size_t>& y, std::size_t num_classes) {
  if (x.rows() == 0) throw Error("baseline needs at least one training row");
  if (static_cast<std::size_t>(x.rows()) != y.size()) {
    throw Error("baseline features and labels differ in length");
  }
  if (!x.allFinite()) throw Error("baseline features must be finite");
  for (auto label : y) {
    if (label >= num_classes) throw Error(fmt::format("label {} outside [0, {})", label, num_classes));
  }
}

class KnnBaseline final : public Baseline {
 public:
  KnnBaseline(Matrix x, std::vector<std::size_t> y, std::size_t k, std::size_t num_classes)
      : x_(std::move(x)), y_(std::move(y)), k_(k), num_classes_(num_classes) {
    if (k_ == 0) throw Error("knn_k must be positive");
    norms_ = x_.rowwise().squaredNorm();
  }

  std::vector<std::size_t> predict(const Matrix& features) const override {
    std::vector<std::size_t> out;
    const std::size_t k = std::min(k_, y_.size());
    std::vector<std::size_t> order(y_.size());
    for (Eigen::Index r = 0; r < features.rows(); ++r) {
      const Eigen::VectorXd dist =
          (norms_.array() - 2.0 * (x_ * features.row(r).transpose()).array() +
           features.row(r).squaredNorm())
              .matrix();
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return dist(static_cast<Eigen::Index>(a)) < dist(static_cast<Eigen::Index>(b)); });
      std::vector<std::size_t> votes(num_classes_, 0);
      for (std::size_t i = 0; i < k; ++i) ++votes[y_[order[i]]];
      out.push_back(static_cast<std::size_t>(
          std::max_element(votes.begin(), votes.end()) - votes.begin()));
    }
    return out;
  }

  std::size_t transformed_width() const override { return static_cast<std::size_t>(x_.cols()); }
  BaselineKind kind() const override { return BaselineKind::KNN; }

 private:
  Matrix x_;
  std::vector<std::size_t> y_;
  Eigen::VectorXd norms_;
  std::size_t k_;
  std::size_t num_classes_;
};

class GnbBaseline final : public Baseline {
 public:
  GnbBaseline(const Matrix& x, const std::vector<std::size_t>& y, std::size_t num_classes) {
    const Eigen::Index d = x.cols();
    const Eigen::RowVectorXd overall_mean = x.colwise().mean();
    const double max_var =
        ((x.rowwise() - overall_mean).array().square().colwise().sum() / static_cast<double>(x.rows()))
            .maxCoeff();
    const double epsilon = 1e-9 * max_var;
    for (std::size_t c = 0; c < num_classes; ++c) {
      std::vector<Eigen::Index> rows;
      for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] == c) rows.push_back(static_cast<Eigen::Index>(i));
      }
      if (rows.empty()) continue;
      Matrix members(static_cast<Eigen::Index>(rows.size()), d);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        members.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
      }
      ClassStats stats;
      stats.label = c;
      stats.mean = members.colwise().mean();
      stats.var = (members.rowwise() - stats.mean).array().square().colwise().sum() /
                      static_cast<double>(rows.size()) +
                  epsilon;
      stats.log_prior = std::log(static_cast<double>(rows.size()) / static_cast<double>(y.size()));
      stats.log_norm = -0.5 * (2.0 * M_PI * stats.var.array()).log().sum();
      classes_.push_back(std::move(stats));
    }
    width_ = static_cast<std::size_t>(d);
  }

  std::vector<std::size_t> predict(const Matrix& features) const override {
    std::vector<std::size_t> out;
    for (Eigen::Index r = 0; r < features.rows(); ++r) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t label = classes_.front().label;
      for (const auto& c : classes_) {
        const double jll = c.log_prior + c.log_norm -
                           0.5 * ((features.row(r) - c.mean).array().square() / c.var.array()).sum();
        if (jll > best) {
          best = jll;
          label = c.label;
        }
      }
      out.push_back(label);
    }
    return out;
  }

  std::size_t transformed_width() const override { return width_; }
  BaselineKind kind() const override { return BaselineKind::GNB; }

 private:
  struct ClassStats {
    std::size_t label = 0;
    Eigen::RowVectorXd mean;
    Eigen::RowVectorXd var;
    double log_prior = 0.0;
    double log_norm = 0.0;
  };
  std::vector<ClassStats> classes_;
  std::size_t width_ = 0;
};

/// CART with Gini impurity, grown until leaves are pure or unsplittable.
class TreeBaseline final : public Baseline {
 public:
  TreeBaseline(const Matrix& x, const std::vector<std::size_t>& y, std::size_t num_classes,
               bool balanced)
      : num_classes_(num_classes), width_(static_cast<std::size_t>(x.cols())) {
    class_weight_.assign(num_classes, 1.0);
    if (balanced) {
      std::vector<std::size_t> counts(num_classes, 0);
      for (auto label : y) ++counts[label];
      std::size_t present = 0;
      for (auto c : counts) present += c > 0 ? 1 : 0;
      for (std::size_t c = 0; c < num_classes; ++c) {
        if (counts[c] > 0) {
          class_weight_[c] = static_cast<double>(y.size()) /
                             (static_cast<double>(present) * static_cast<double>(counts[c]));
        }
      }
    }
    std::vector<std::size_t> rows(y.size());
    std::iota(rows.begin(), rows.end(), 0);
    build(x, y, rows);
  }

  std::vector<std::size_t> predict(const Matrix& features) const override {
    std::vector<std::size_t> out;
    for (Eigen::Index r = 0; r < features.rows(); ++r) {
      std::size_t node = 0;
      while (!nodes_[node].leaf) {
        node = features(r, static_cast<Eigen::Index>(nodes_[node].feature)) <= nodes_[node].threshold
                   ? nodes_[node].left
                   : nodes_[node].right;
      }
      out.push_back(nodes_[node].label);
    }
    return out;
  }

  std::size_t transformed_width() const override { return width_; }
  BaselineKind kind() const override { return BaselineKind::DT; }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    bool leaf = true;
    std::size_t feature = 0;
    double threshold = 0.0;
    std::size_t left = 0;
    std::size_t right = 0;
    std::size_t label = 0;
  };

  static double gini(const std::vector<double>& w, double total) {
    if (total <= 0.0) return 0.0;
    double sum_sq = 0.0;
    for (double v : w) sum_sq += v * v;
    return 1.0 - sum_sq / (total * total);
  }

  std::size_t build(const Matrix& x, const std::vector<std::size_t>& y,
                    std::vector<std::size_t> rows) {
    const std::size_t index = nodes_.size();
    nodes_.emplace_back();
    std::vector<double> weights(num_classes_, 0.0);
    for (auto r : rows) weights[y[r]] += class_weight_[y[r]];
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    nodes_[index].label =
        static_cast<std::size_t>(std::max_element(weights.begin(), weights.end()) - weights.begin());
    const double impurity = gini(weights, total);
    if (rows.size() < 2 || impurity <= 1e-7) return index;

    double best_score = std::numeric_limits<double>::infinity();
    std::size_t best_feature = 0;
    double best_threshold = 0.0;
    bool found = false;
    std::vector<std::size_t> sorted = rows;
    std::vector<double> left_w(num_classes_);
    std::vector<double> right_w(num_classes_);
    for (std::size_t f = 0; f < width_; ++f) {
      const auto col = static_cast<Eigen::Index>(f);
      std::sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) {
        return x(static_cast<Eigen::Index>(a), col) < x(static_cast<Eigen::Index>(b), col);
      });
      std::fill(left_w.begin(), left_w.end(), 0.0);
      right_w = weights;
      double left_total = 0.0;
      for (std::size_t i = 0; i + 1 < sorted.size(); ++i) {
        const std::size_t label = y[sorted[i]];
        left_w[label] += class_weight_[label];
        right_w[label] -= class_weight_[label];
        left_total += class_weight_[label];
        const double here = x(static_cast<Eigen::Index>(sorted[i]), col);
        const double next = x(static_cast<Eigen::Index>(sorted[i + 1]), col);
        if (next <= here) continue;
        const double right_total = total - left_total;
        // weighted child impurity; the parent term is constant per node
        const double score =
            left_total * gini(left_w, left_total) + right_total * gini(right_w, right_total);
        if (score < best_score) {
          best_score = score;
          best_feature = f;
          best_threshold = here + (next - here) / 2.0;
          if (best_threshold == next) best_threshold = here;
          found = true;
        }
      }
    }
    if (!found) return index;

    std::vector<std::size_t> left_rows, right_rows;
    for (auto r : rows) {
      (x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(best_feature)) <= best_threshold
           ? left_rows
           : right_rows)
          .push_back(r);
    }
    rows.clear();
    rows.shrink_to_fit();
    nodes_[index].leaf = false;
    nodes_[index].feature = best_feature;
    nodes_[index].threshold = best_threshold;
    const std::size_t left = build(x, y, std::move(left_rows));
    const std::size_t right = build(x, y, std::move(right_rows));
    nodes_[index].left = left;
    nodes_[index].right = right;
    return index;
  }

  std::size_t num_classes_;
  std::size_t width_;
  std::vector<double> class_weight_;
  std::vector<Node> nodes_;
};

/// Binary soft-margin SVM dual solved by SMO with second-order working set
/// selection; the positive class is the first of the pair.
struct BinarySvm {
  std::vector<Eigen::Index> support;  // rows into the training matrix
  std::vector<double> coef;           // alpha_i * y_i
  double rho = 0.0;
};

BinarySvm solve_binary(const Matrix& kernel, const std::vector<Eigen::Index>& rows,
                       const std::vector<double>& y, double c, double tol) {
  const std::size_t n = rows.size();
  std::vector<double> alpha(n, 0.0);
  std::vector<double> grad(n, -1.0);
  auto q = [&](std::size_t i, std::size_t j) { return y[i] * y[j] * kernel(rows[i], rows[j]); };
  const double tau = 1e-12;
  const std::size_t max_iter = std::max<std::size_t>(10000000, 100 * n);
  auto in_up = [&](std::size_t t) {
    return (y[t] > 0 && alpha[t] < c) || (y[t] < 0 && alpha[t] > 0);
  };
  auto in_low = [&](std::size_t t) {
    return (y[t] > 0 && alpha[t] > 0) || (y[t] < 0 && alpha[t] < c);
  };

  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    double gmax = -std::numeric_limits<double>::infinity();
    std::size_t i = n;
    for (std::size_t t = 0; t < n; ++t) {
      if (in_up(t) && -y[t] * grad[t] >= gmax) {
        gmax = -y[t] * grad[t];
        i = t;
      }
    }
    if (i == n) break;
    double gmin = std::numeric_limits<double>::infinity();
    double best_obj = std::numeric_limits<double>::infinity();
    std::size_t j = n;
    for (std::size_t t = 0; t < n; ++t) {
      if (!in_low(t)) continue;
      const double yg = -y[t] * grad[t];
      gmin = std::min(gmin, yg);
      const double b = gmax - yg;
      if (b > 0) {
        double a = q(i, i) + q(t, t) - 2.0 * y[i] * y[t] * q(i, t);
        if (a <= 0) a = tau;
        const double obj = -(b * b) / a;
        if (obj <= best_obj) {
          best_obj = obj;
          j = t;
        }
      }
    }
    if (j == n || gmax - gmin < tol) break;

    const double old_i = alpha[i];
    const double old_j = alpha[j];
    const double qii = q(i, i), qjj = q(j, j), qij = q(i, j);
    if (y[i] != y[j]) {
      double quad = qii + qjj + 2.0 * qij;
      if (quad <= 0) quad = tau;
      const double delta = (-grad[i] - grad[j]) / quad;
      const double diff = alpha[i] - alpha[j];
      alpha[i] += delta;
      alpha[j] += delta;
      if (diff > 0) {
        if (alpha[j] < 0) {
          alpha[j] = 0;
          alpha[i] = diff;
        }
      } else if (alpha[i] < 0) {
        alpha[i] = 0;
        alpha[j] = -diff;
      }
      if (diff > 0) {
        if (alpha[i] > c) {
          alpha[i] = c;
          alpha[j] = c - diff;
        }
      } else if (alpha[j] > c) {
        alpha[j] = c;
        alpha[i] = c + diff;
      }
    } else {
      double quad = qii + qjj - 2.0 * qij;
      if (quad <= 0) quad = tau;
      const double delta = (grad[i] - grad[j]) / quad;
      const double sum = alpha[i] + alpha[j];
      alpha[i] -= delta;
      alpha[j] += delta;
      if (sum > c) {
        if (alpha[i] > c) {
          alpha[i] = c;
          alpha[j] = sum - c;
        }
      } else if (alpha[j] < 0) {
        alpha[j] = 0;
        alpha[i] = sum;
      }
      if (sum > c) {
        if (alpha[j] > c) {
          alpha[j] = c;
          alpha[i] = sum - c;
        }
      } else if (alpha[i] < 0) {
        alpha[i] = 0;
        alpha[j] = sum;
      }
    }
    const double di = alpha[i] - old_i;
    const double dj = alpha[j] - old_j;
    for (std::size_t t = 0; t < n; ++t) grad[t] += q(t, i) * di + q(t, j) * dj;
  }

  // bias from free vectors, else the midpoint of the feasible interval
  double ub = std::numeric_limits<double>::infinity();
  double lb = -std::numeric_limits<double>::infinity();
  double sum_free = 0.0;
  std::size_t free = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double yg = y[t] * grad[t];
    if (alpha[t] >= c) {
      if (y[t] < 0) ub = std::min(ub, yg); else lb = std::max(lb, yg);
    } else if (alpha[t] <= 0) {
      if (y[t] > 0) ub = std::min(ub, yg); else lb = std::max(lb, yg);
    } else {
      ++free;
      sum_free += yg;
    }
  }
  BinarySvm svm;
  svm.rho = free > 0 ? sum_free / static_cast<double>(free) : (ub + lb) / 2.0;
  for (std::size_t t = 0; t < n; ++t) {
    if (alpha[t] > 0) {
      svm.support.push_back(rows[t]);
      svm.coef.push_back(alpha[t] * y[t]);
    }
  }
  return svm;
}

/// PCA to pca_components, then an RBF C-SVC (gamma = 1 / (width * var(X)))
/// trained one-vs-one with majority voting.
class SvmBaseline final : public Baseline {
 public:
  SvmBaseline(const Matrix& x, const std::vector<std::size_t>& y, const BaselineConfig& config,
              std::size_t num_classes)
      : pca_(Pca::fit(x, config.pca_components)), num_classes_(num_classes) {
    train_ = pca_.transform(x);
    const double mean = train_.mean();
    const double var = (train_.array() - mean).square().mean();
    gamma_ = var > 0 ? 1.0 / (static_cast<double>(train_.cols()) * var) : 1.0;
    norms_ = train_.rowwise().squaredNorm();

    std::map<std::size_t, std::vector<Eigen::Index>> by_class;
    for (std::size_t i = 0; i < y.size(); ++i) by_class[y[i]].push_back(static_cast<Eigen::Index>(i));
    for (const auto& [label, rows] : by_class) labels_.push_back(label);

    const Matrix kernel = rbf(train_, train_, norms_, norms_);
    for (std::size_t a = 0; a < labels_.size(); ++a) {
      for (std::size_t b = a + 1; b < labels_.size(); ++b) {
        std::vector<Eigen::Index> rows = by_class[labels_[a]];
        std::vector<double> sign(rows.size(), 1.0);
        for (auto r : by_class[labels_[b]]) {
          rows.push_back(r);
          sign.push_back(-1.0);
        }
        pairs_.push_back({a, b, solve_binary(kernel, rows, sign, config.svm_c, config.svm_tol)});
      }
    }
  }

  std::vector<std::size_t> predict(const Matrix& features) const override {
    const Matrix z = pca_.transform(features);
    const Eigen::VectorXd z_norms = z.rowwise().squaredNorm();
    const Matrix kernel = rbf(z, train_, z_norms, norms_);
    std::vector<std::size_t> out;
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      std::vector<std::size_t> votes(labels_.size(), 0);
      for (const auto& pair : pairs_) {
        double decision = -pair.svm.rho;
        for (std::size_t s = 0; s < pair.svm.support.size(); ++s) {
          decision += pair.svm.coef[s] * kernel(r, pair.svm.support[s]);
        }
        ++votes[decision > 0 ? pair.a : pair.b];
      }
      const auto best = std::max_element(votes.begin(), votes.end()) - votes.begin();
      out.push_back(labels_.empty() ? 0 : labels_[static_cast<std::size_t>(best)]);
    }
    return out;
  }

  std::size_t transformed_width() const override { return static_cast<std::size_t>(train_.cols()); }
  BaselineKind kind() const override { return BaselineKind::SVM; }

 private:
  Matrix rbf(const Matrix& a, const Matrix& b, const Eigen::VectorXd& a_norms,
             const Eigen::VectorXd& b_norms) const {
    Matrix d2 = -2.0 * a * b.transpose();
    d2.colwise() += a_norms;
    d2.rowwise() += b_norms.transpose();
    return (-gamma_ * d2.array().max(0.0)).exp().matrix();
  }

  struct Pair {
    std::size_t a;
    std::size_t b;
    BinarySvm svm;
  };

  Pca pca_;
  Matrix train_;
  Eigen::VectorXd norms_;
  double gamma_ = 1.0;
  std::size_t num_classes_;
  std::vector<std::size_t> labels_;
  std::vector<Pair> pairs_;
};

}  // namespace

std::unique_ptr<Baseline> fit_baseline(const Matrix& features,
                                       const std::vector<std::size_t>& labels,
                                       const BaselineConfig& config, std::size_t num_classes) {
  check_inputs(features, labels, num_classes);
  switch (config.kind) {
    case BaselineKind::KNN:
      return std::make_unique<KnnBaseline>(features, labels, config.knn_k, num_classes);
    case BaselineKind::GNB:
      return std::make_unique<GnbBaseline>(features, labels, num_classes);
    case BaselineKind::DT:
      return std::make_unique<TreeBaseline>(features, labels, num_classes,
                                            config.dt_class_weight_balanced);
    case BaselineKind::SVM:
      break;
  }
  return std::make_unique<SvmBaseline>(features, labels, config, num_classes);
}

}  // namespace triage
