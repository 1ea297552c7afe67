#include "triage/topics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <unordered_set>

#include <fmt/format.h>

#include "triage/error.hpp"
#include "triage/util/io.hpp"
#include "triage/util/rng.hpp"

namespace triage {

using nn::Matrix;

void validate(const TopicModelConfig& c) {
  if (c.reduced_dims < 2) throw Error("topics.reduced_dims must be at least 2");
  if (c.neighborhood_size < 2) throw Error("topics.neighborhood_size must be at least 2");
  if (c.ngram_min < 1 || c.ngram_max < c.ngram_min) {
    throw Error("topics.ngram_range must satisfy 1 <= min <= max");
  }
  if (c.min_cluster_size < 2) throw Error("topics.min_cluster_size must be at least 2");
  if (c.target_topics && *c.target_topics < 1) throw Error("topics.target_topics must be positive");
}

nlohmann::json to_json(const TopicModelConfig& c) {
  json j = {{"reduced_dims", c.reduced_dims},
            {"neighborhood_size", c.neighborhood_size},
            {"ngram_range", {c.ngram_min, c.ngram_max}},
            {"stopword_removal", c.stopword_removal},
            {"min_cluster_size", c.min_cluster_size},
            {"top_keywords", c.top_keywords},
            {"representatives", c.representatives},
            {"embedder_checkpoint", c.embedder_checkpoint}};
  j["target_topics"] = c.target_topics ? json(*c.target_topics) : json(nullptr);
  return j;
}

TopicModelConfig topic_config_from_json(const nlohmann::json& j) {
  TopicModelConfig c;
  c.reduced_dims = j.value("reduced_dims", c.reduced_dims);
  c.neighborhood_size = j.value("neighborhood_size", c.neighborhood_size);
  if (j.contains("ngram_range")) {
    const auto& r = j.at("ngram_range");
    if (!r.is_array() || r.size() != 2) throw Error("topics.ngram_range must be [min, max]");
    c.ngram_min = r[0].get<std::size_t>();
    c.ngram_max = r[1].get<std::size_t>();
  }
  c.stopword_removal = j.value("stopword_removal", c.stopword_removal);
  if (j.contains("target_topics") && !j.at("target_topics").is_null()) {
    c.target_topics = j.at("target_topics").get<std::size_t>();
  }
  c.min_cluster_size = j.value("min_cluster_size", c.min_cluster_size);
  c.top_keywords = j.value("top_keywords", c.top_keywords);
  c.representatives = j.value("representatives", c.representatives);
  c.embedder_checkpoint = j.value("embedder_checkpoint", c.embedder_checkpoint);
  validate(c);
  return c;
}

// ---- embedding ------------------------------------------------------------

RecordedEmbedder::RecordedEmbedder(const std::filesystem::path& path) {
  for_each_line(path, [&](std::size_t line, const std::string& text) {
    json record;
    try {
      record = json::parse(text);
    } catch (const json::exception& e) {
      throw Error(fmt::format("{}:{}: {}", path.string(), line, e.what()));
    }
    Entry entry;
    entry.text = record.at("text_vector").get<std::vector<double>>();
    if (record.contains("image_vector") && !record.at("image_vector").is_null()) {
      entry.image = record.at("image_vector").get<std::vector<double>>();
      if (entry.image.size() != entry.text.size()) {
        throw Error(fmt::format("{}:{}: text and image vectors differ in width", path.string(), line));
      }
    }
    if (width_ == 0) width_ = entry.text.size();
    if (entry.text.size() != width_ || width_ == 0) {
      throw Error(fmt::format("{}:{}: vector width {} differs from {}", path.string(), line,
                              entry.text.size(), width_));
    }
    entries_[record.at("post_id").get<std::string>()] = std::move(entry);
  });
}

std::vector<double> RecordedEmbedder::embed(const Post& post) {
  auto it = entries_.find(post.id);
  if (it == entries_.end()) throw Error(fmt::format("no recorded embedding for post {}", post.id));
  if (it->second.image.empty()) return it->second.text;
  std::vector<double> out(width_);
  for (std::size_t i = 0; i < width_; ++i) out[i] = (it->second.text[i] + it->second.image[i]) / 2.0;
  return out;
}

EmbedResult embed_posts(const std::vector<Post>& posts, Embedder& embedder) {
  EmbedResult result;
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < posts.size(); ++i) {
    try {
      auto vec = embedder.embed(posts[i]);
      if (!rows.empty() && vec.size() != rows.front().size()) {
        throw Error(fmt::format("embedding width {} differs from {}", vec.size(), rows.front().size()));
      }
      rows.push_back(std::move(vec));
      result.rows.push_back(i);
    } catch (const Error& e) {
      result.errors.push_back({i, e.what()});
    }
  }
  const auto width = rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size());
  result.embeddings.resize(static_cast<Eigen::Index>(rows.size()), width);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    result.embeddings.row(static_cast<Eigen::Index>(r)) =
        Eigen::Map<const Eigen::RowVectorXd>(rows[r].data(), width);
  }
  return result;
}

// ---- terms ----------------------------------------------------------------

namespace {

const std::unordered_set<std::string>& stopwords() {
  static const std::unordered_set<std::string> words = {
      "a", "about", "above", "across", "after", "afterwards", "again", "against", "all", "almost",
      "alone", "along", "already", "also", "although", "always", "am", "among", "amongst",
      "amoungst", "amount", "an", "and", "another", "any", "anyhow", "anyone", "anything",
      "anyway", "anywhere", "are", "around", "as", "at", "back", "be", "became", "because",
      "become", "becomes", "becoming", "been", "before", "beforehand", "behind", "being", "below",
      "beside", "besides", "between", "beyond", "bill", "both", "bottom", "but", "by", "call",
      "can", "cannot", "cant", "co", "con", "could", "couldnt", "cry", "de", "describe", "detail",
      "do", "done", "down", "due", "during", "each", "eg", "eight", "either", "eleven", "else",
      "elsewhere", "empty", "enough", "etc", "even", "ever", "every", "everyone", "everything",
      "everywhere", "except", "few", "fifteen", "fifty", "fill", "find", "fire", "first", "five",
      "for", "former", "formerly", "forty", "found", "four", "from", "front", "full", "further",
      "get", "give", "go", "had", "has", "hasnt", "have", "he", "hence", "her", "here",
      "hereafter", "hereby", "herein", "hereupon", "hers", "herself", "him", "himself", "his",
      "how", "however", "hundred", "i", "ie", "if", "in", "inc", "indeed", "interest", "into",
      "is", "it", "its", "itself", "keep", "last", "latter", "latterly", "least", "less", "ltd",
      "made", "many", "may", "me", "meanwhile", "might", "mill", "mine", "more", "moreover",
      "most", "mostly", "move", "much", "must", "my", "myself", "name", "namely", "neither",
      "never", "nevertheless", "next", "nine", "no", "nobody", "none", "noone", "nor", "not",
      "nothing", "now", "nowhere", "of", "off", "often", "on", "once", "one", "only", "onto",
      "or", "other", "others", "otherwise", "our", "ours", "ourselves", "out", "over", "own",
      "part", "per", "perhaps", "please", "put", "rather", "re", "same", "see", "seem", "seemed",
      "seeming", "seems", "serious", "several", "she", "should", "show", "side", "since",
      "sincere", "six", "sixty", "so", "some", "somehow", "someone", "something", "sometime",
      "sometimes", "somewhere", "still", "such", "system", "take", "ten", "than", "that", "the",
      "their", "them", "themselves", "then", "thence", "there", "thereafter", "thereby",
      "therefore", "therein", "thereupon", "these", "they", "thick", "thin", "third", "this",
      "those", "though", "three", "through", "throughout", "thru", "thus", "to", "together",
      "too", "top", "toward", "towards", "twelve", "twenty", "two", "un", "under", "until", "up",
      "upon", "us", "very", "via", "was", "we", "well", "were", "what", "whatever", "when",
      "whence", "whenever", "where", "whereafter", "whereas", "whereby", "wherein", "whereupon",
      "wherever", "whether", "which", "while", "whither", "who", "whoever", "whole", "whom",
      "whose", "why", "will", "with", "within", "without", "would", "yet", "you", "your", "yours",
      "yourself", "yourselves"};
  return words;
}

std::size_t code_points(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80 ? 1 : 0;
  return n;
}

}  // namespace

bool is_stopword(const std::string& token) { return stopwords().count(token) > 0; }

std::vector<std::string> extract_terms(const std::string& text, std::size_t ngram_min,
                                       std::size_t ngram_max, bool remove_stopwords) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (code_points(current) >= 2 && !(remove_stopwords && is_stopword(current))) {
      tokens.push_back(current);
    }
    current.clear();
  };
  for (unsigned char c : text) {
    if (c >= 0x80 || std::isalnum(c) || c == '_') {
      current.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    } else {
      flush();
    }
  }
  flush();
  std::vector<std::string> terms;
  for (std::size_t n = ngram_min; n <= ngram_max; ++n) {
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
      std::string term = tokens[i];
      for (std::size_t k = 1; k < n; ++k) term += " " + tokens[i + k];
      terms.push_back(std::move(term));
    }
  }
  return terms;
}

// ---- reduction ------------------------------------------------------------

namespace {

/// Rows grouped by exact equality: unique row per group plus the group of
/// every input row.
struct UniqueRows {
  Matrix rows;
  std::vector<std::size_t> group;
};

UniqueRows unique_rows(const Matrix& x) {
  std::map<std::vector<double>, std::size_t> seen;
  UniqueRows out;
  std::vector<Eigen::Index> firsts;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    std::vector<double> key(x.row(r).data(), x.row(r).data() + x.cols());
    auto [it, inserted] = seen.emplace(std::move(key), firsts.size());
    if (inserted) firsts.push_back(r);
    out.group.push_back(it->second);
  }
  out.rows.resize(static_cast<Eigen::Index>(firsts.size()), x.cols());
  for (std::size_t i = 0; i < firsts.size(); ++i) out.rows.row(static_cast<Eigen::Index>(i)) = x.row(firsts[i]);
  return out;
}

}  // namespace

namespace {

// Stochastic layout refinement of the spectral coordinates: attraction along
// graph edges, repulsion from randomly drawn points. Curve parameters fit
// 1/(1+a d^2b) to a zero minimum distance.
void optimize_layout(Matrix& coords, const Matrix& graph) {
  constexpr double a = 1.93280839734315;
  constexpr double b = 0.7904949732233831;
  constexpr int epochs = 500;
  constexpr double negative_rate = 5.0;
  const auto n = static_cast<std::size_t>(coords.rows());
  const auto dims = static_cast<std::size_t>(coords.cols());

  const double max_w = graph.maxCoeff();
  if (!(max_w > 0)) return;
  struct Edge {
    std::size_t head, tail;
    double per_sample, next_sample, per_negative, next_negative;
  };
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double w = graph(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (i == j || w < max_w / epochs || w <= 0) continue;
      const double per = max_w / w;
      edges.push_back({i, j, per, per, per / negative_rate, per / negative_rate});
    }
  }

  Rng rng(derive_seed(0, "layout"));
  auto clip = [](double g) { return std::clamp(g, -4.0, 4.0); };
  double alpha = 1.0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (auto& e : edges) {
      if (e.next_sample > epoch) continue;
      auto hd = coords.row(static_cast<Eigen::Index>(e.head));
      auto tl = coords.row(static_cast<Eigen::Index>(e.tail));
      double dist_sq = (hd - tl).squaredNorm();
      double coeff = 0.0;
      if (dist_sq > 0) {
        coeff = -2.0 * a * b * std::pow(dist_sq, b - 1.0) / (a * std::pow(dist_sq, b) + 1.0);
      }
      for (std::size_t d = 0; d < dims; ++d) {
        const auto di = static_cast<Eigen::Index>(d);
        const double g = clip(coeff * (hd(di) - tl(di)));
        hd(di) += g * alpha;
        tl(di) -= g * alpha;
      }
      e.next_sample += e.per_sample;

      const auto negatives = static_cast<int>((epoch - e.next_negative) / e.per_negative);
      for (int p = 0; p < negatives; ++p) {
        const std::size_t k = rng.below(n);
        if (k == e.head) continue;
        auto other = coords.row(static_cast<Eigen::Index>(k));
        dist_sq = (hd - other).squaredNorm();
        coeff = dist_sq > 0 ? 2.0 * b / ((0.001 + dist_sq) * (a * std::pow(dist_sq, b) + 1.0)) : 0.0;
        for (std::size_t d = 0; d < dims; ++d) {
          const auto di = static_cast<Eigen::Index>(d);
          const double g = coeff > 0 ? clip(coeff * (hd(di) - other(di))) : 4.0;
          hd(di) += g * alpha;
        }
      }
      e.next_negative += negatives * e.per_negative;
    }
    alpha = 1.0 - static_cast<double>(epoch + 1) / epochs;
  }
}

}  // namespace

Matrix reduce_dimensions(const Matrix& embeddings, std::size_t dims, std::size_t neighborhood_size) {
  const UniqueRows unique = unique_rows(embeddings);
  const auto n = static_cast<std::size_t>(unique.rows.rows());
  Matrix coords = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dims));
  if (n > dims + 1) {
    // cosine distances between unique rows
    Matrix normed = unique.rows;
    for (Eigen::Index r = 0; r < normed.rows(); ++r) {
      const double norm = normed.row(r).norm();
      if (norm > 0) normed.row(r) /= norm;
    }
    Matrix dist = (1.0 - (normed * normed.transpose()).array()).max(0.0).matrix();
    for (std::size_t i = 0; i < n; ++i) dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = 0.0;

    // neighbour lists include the point itself, as the neighbourhood size does
    const std::size_t k = std::min(neighborhood_size, n);
    const double target = std::log2(static_cast<double>(k));
    const double mean_all = dist.mean();
    Matrix w = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = dist.row(static_cast<Eigen::Index>(i));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (a == i) return b != i;
        if (b == i) return false;
        return row(static_cast<Eigen::Index>(a)) < row(static_cast<Eigen::Index>(b));
      });
      std::vector<double> d;
      for (std::size_t j = 1; j < k; ++j) d.push_back(row(static_cast<Eigen::Index>(order[j])));
      double rho = 0.0;
      for (double v : d) {
        if (v > 0) {
          rho = v;
          break;
        }
      }
      double lo = 0.0, hi = std::numeric_limits<double>::infinity(), sigma = 1.0;
      for (int iter = 0; iter < 64; ++iter) {
        double psum = 0.0;
        for (double v : d) psum += std::exp(-std::max(0.0, v - rho) / sigma);
        if (std::abs(psum - target) < 1e-5) break;
        if (psum > target) {
          hi = sigma;
          sigma = (lo + hi) / 2.0;
        } else {
          lo = sigma;
          sigma = std::isinf(hi) ? sigma * 2.0 : (lo + hi) / 2.0;
        }
      }
      const double mean_d = d.empty() ? 0.0 : std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
      sigma = std::max(sigma, 1e-3 * (rho > 0 ? mean_d : mean_all));
      for (std::size_t j = 1; j < k; ++j) {
        w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(order[j])) =
            std::exp(-std::max(0.0, d[j - 1] - rho) / sigma);
      }
    }
    const Matrix wt = w.transpose();
    const Matrix sym = (w + wt - w.cwiseProduct(wt));
    const Eigen::VectorXd degree = sym.rowwise().sum();
    Eigen::VectorXd inv_sqrt(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < inv_sqrt.size(); ++i) {
      inv_sqrt(i) = degree(i) > 0 ? 1.0 / std::sqrt(degree(i)) : 0.0;
    }
    Eigen::MatrixXd laplacian = -(inv_sqrt.asDiagonal() * sym * inv_sqrt.asDiagonal());
    laplacian.diagonal().array() += 1.0;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(laplacian);
    if (solver.info() != Eigen::Success) throw Error("spectral embedding failed to converge");
    for (std::size_t c = 0; c < dims; ++c) {
      Eigen::VectorXd v = solver.eigenvectors().col(static_cast<Eigen::Index>(c + 1));
      Eigen::Index arg = 0;
      v.cwiseAbs().maxCoeff(&arg);
      if (v(arg) < 0) v = -v;
      coords.col(static_cast<Eigen::Index>(c)) = v;
    }
    for (Eigen::Index c = 0; c < coords.cols(); ++c) {
      const double lo = coords.col(c).minCoeff();
      const double span = coords.col(c).maxCoeff() - lo;
      if (span > 0) coords.col(c) = (coords.col(c).array() - lo) * (10.0 / span);
    }
    optimize_layout(coords, sym);
  }
  Matrix out(embeddings.rows(), static_cast<Eigen::Index>(dims));
  for (std::size_t r = 0; r < unique.group.size(); ++r) {
    out.row(static_cast<Eigen::Index>(r)) = coords.row(static_cast<Eigen::Index>(unique.group[r]));
  }
  return out;
}

// ---- density clustering ---------------------------------------------------

std::vector<int> hdbscan(const Matrix& points, std::size_t min_cluster_size) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (n == 0) return {};
  if (n < min_cluster_size) return std::vector<int>(n, -1);

  auto distance = [&](std::size_t a, std::size_t b) {
    return (points.row(static_cast<Eigen::Index>(a)) - points.row(static_cast<Eigen::Index>(b))).norm();
  };

  // core distance: distance to the min_cluster_size-th neighbour, self included
  std::vector<double> core(n);
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) row[j] = distance(i, j);
    std::nth_element(row.begin(), row.begin() + static_cast<long>(min_cluster_size - 1), row.end());
    core[i] = row[min_cluster_size - 1];
  }

  // Prim's minimum spanning tree over mutual reachability distances
  struct Edge {
    std::size_t a, b;
    double w;
  };
  std::vector<Edge> edges;
  std::vector<bool> in_tree(n, false);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> from(n, 0);
  std::size_t current = 0;
  in_tree[0] = true;
  for (std::size_t step = 1; step < n; ++step) {
    for (std::size_t j = 0; j < n; ++j) {
      if (in_tree[j]) continue;
      const double mr = std::max({core[current], core[j], distance(current, j)});
      if (mr < best[j]) {
        best[j] = mr;
        from[j] = current;
      }
    }
    std::size_t next = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (!in_tree[j] && (next == n || best[j] < best[next])) next = j;
    }
    edges.push_back({from[next], next, best[next]});
    in_tree[next] = true;
    current = next;
  }
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& x, const Edge& y) { return x.w < y.w; });

  // single-linkage dendrogram: node ids n.. for merges
  std::vector<std::size_t> parent(2 * n - 1);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  struct Merge {
    std::size_t left, right;
    double dist;
    std::size_t size;
  };
  std::vector<Merge> merges;
  std::vector<std::size_t> size(2 * n - 1, 1);
  for (const auto& e : edges) {
    const std::size_t ra = find(e.a), rb = find(e.b);
    const std::size_t node = n + merges.size();
    merges.push_back({ra, rb, e.w, size[ra] + size[rb]});
    size[node] = size[ra] + size[rb];
    parent[ra] = node;
    parent[rb] = node;
  }
  auto lambda_of = [](double d) { return 1.0 / std::max(d, 1e-10); };
  auto children = [&](std::size_t node) { return std::pair{merges[node - n].left, merges[node - n].right}; };
  auto leaves_of = [&](std::size_t node, std::vector<std::size_t>& out) {
    std::vector<std::size_t> stack{node};
    while (!stack.empty()) {
      const std::size_t x = stack.back();
      stack.pop_back();
      if (x < n) {
        out.push_back(x);
      } else {
        auto [l, r] = children(x);
        stack.push_back(l);
        stack.push_back(r);
      }
    }
  };

  // condensed tree
  struct Condensed {
    std::size_t parent;
    std::size_t child;  // point index (< n) or cluster id (>= n)
    double lambda;
    std::size_t size;
  };
  std::vector<Condensed> tree;
  const std::size_t root = 2 * n - 2;
  std::size_t next_label = n;
  std::vector<std::size_t> relabel(2 * n - 1, 0);
  relabel[root] = next_label++;
  std::vector<std::size_t> queue{root};
  for (std::size_t qi = 0; qi < queue.size(); ++qi) {
    const std::size_t node = queue[qi];
    if (node < n) continue;
    auto [left, right] = children(node);
    const double lambda = lambda_of(merges[node - n].dist);
    const std::size_t ls = size[left], rs = size[right];
    if (ls >= min_cluster_size && rs >= min_cluster_size) {
      relabel[left] = next_label++;
      tree.push_back({relabel[node], relabel[left], lambda, ls});
      relabel[right] = next_label++;
      tree.push_back({relabel[node], relabel[right], lambda, rs});
      queue.push_back(left);
      queue.push_back(right);
    } else if (ls < min_cluster_size && rs < min_cluster_size) {
      std::vector<std::size_t> pts;
      leaves_of(left, pts);
      leaves_of(right, pts);
      for (auto p : pts) tree.push_back({relabel[node], p, lambda, 1});
    } else {
      const std::size_t small = ls < min_cluster_size ? left : right;
      const std::size_t big = small == left ? right : left;
      std::vector<std::size_t> pts;
      leaves_of(small, pts);
      for (auto p : pts) tree.push_back({relabel[node], p, lambda, 1});
      relabel[big] = relabel[node];
      queue.push_back(big);
    }
  }

  const std::size_t clusters = next_label - n;
  std::vector<double> birth(clusters, 0.0);
  std::vector<std::size_t> cluster_parent(clusters, 0);
  std::vector<std::vector<std::size_t>> cluster_children(clusters);
  for (const auto& t : tree) {
    if (t.child >= n) {
      birth[t.child - n] = t.lambda;
      cluster_parent[t.child - n] = t.parent - n;
      cluster_children[t.parent - n].push_back(t.child - n);
    }
  }
  std::vector<double> stability(clusters, 0.0);
  for (const auto& t : tree) {
    stability[t.parent - n] += (t.lambda - birth[t.parent - n]) * static_cast<double>(t.size);
  }

  // excess of mass; the root is never selected
  std::vector<bool> selected(clusters, false);
  for (std::size_t c = clusters; c-- > 1;) {
    double child_sum = 0.0;
    for (auto ch : cluster_children[c]) child_sum += stability[ch];
    if (!cluster_children[c].empty() && child_sum > stability[c]) {
      stability[c] = child_sum;
    } else {
      selected[c] = true;
      std::vector<std::size_t> stack = cluster_children[c];
      while (!stack.empty()) {
        const auto x = stack.back();
        stack.pop_back();
        selected[x] = false;
        for (auto ch : cluster_children[x]) stack.push_back(ch);
      }
    }
  }

  std::vector<int> cluster_label(clusters, -1);
  int label_count = 0;
  for (std::size_t c = 1; c < clusters; ++c) {
    if (selected[c]) cluster_label[c] = label_count++;
  }
  std::vector<int> labels(n, -1);
  for (const auto& t : tree) {
    if (t.child >= n) continue;
    std::size_t c = t.parent - n;
    while (true) {
      if (selected[c]) {
        labels[t.child] = cluster_label[c];
        break;
      }
      if (c == 0) break;
      c = cluster_parent[c];
    }
  }
  return labels;
}

// ---- keywords -------------------------------------------------------------

std::vector<std::vector<std::string>> topic_keywords(const std::vector<Document>& documents,
                                                     const std::vector<int>& assignment,
                                                     std::size_t topic_count,
                                                     const TopicModelConfig& config) {
  std::vector<std::map<std::string, double>> counts(topic_count);
  std::map<std::string, double> frequency;
  double total = 0.0;
  for (std::size_t i = 0; i < documents.size(); ++i) {
    if (assignment[i] < 0) continue;
    for (auto& term : extract_terms(documents[i].text, config.ngram_min, config.ngram_max,
                                    config.stopword_removal)) {
      counts[static_cast<std::size_t>(assignment[i])][term] += 1.0;
      frequency[term] += 1.0;
      total += 1.0;
    }
  }
  const double average = topic_count > 0 ? total / static_cast<double>(topic_count) : 0.0;
  std::vector<std::vector<std::string>> out(topic_count);
  for (std::size_t t = 0; t < topic_count; ++t) {
    double topic_total = 0.0;
    for (const auto& [term, c] : counts[t]) topic_total += c;
    std::vector<std::pair<double, std::string>> scored;
    for (const auto& [term, c] : counts[t]) {
      const double score = (c / topic_total) * std::log(1.0 + average / frequency[term]);
      scored.emplace_back(score, term);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (std::size_t k = 0; k < std::min(config.top_keywords, scored.size()); ++k) {
      out[t].push_back(scored[k].second);
    }
  }
  return out;
}

// ---- model ----------------------------------------------------------------

std::size_t TopicModel::outlier_count() const {
  return static_cast<std::size_t>(std::count(assignment.begin(), assignment.end(), -1));
}

namespace {

/// Renumbers clusters by descending size (ties: earliest first member) and
/// fills keywords and representatives.
void finalize(TopicModel& model, const std::vector<int>& raw_labels) {
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < raw_labels.size(); ++i) {
    if (raw_labels[i] >= 0) members[raw_labels[i]].push_back(i);
  }
  std::vector<std::vector<std::size_t>> groups;
  for (auto& [label, rows] : members) groups.push_back(std::move(rows));
  std::stable_sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) {
    return a.size() != b.size() ? a.size() > b.size() : a.front() < b.front();
  });
  model.assignment.assign(raw_labels.size(), -1);
  for (std::size_t t = 0; t < groups.size(); ++t) {
    for (auto r : groups[t]) model.assignment[r] = static_cast<int>(t);
  }
  const auto keywords = topic_keywords(model.documents, model.assignment, groups.size(), model.config);
  model.topics.clear();
  for (std::size_t t = 0; t < groups.size(); ++t) {
    Topic topic;
    topic.topic_id = static_cast<int>(t);
    for (auto r : groups[t]) topic.member_ids.push_back(model.documents[r].id);
    topic.keywords = keywords[t];
    Eigen::RowVectorXd centroid = Eigen::RowVectorXd::Zero(model.reduced.cols());
    for (auto r : groups[t]) centroid += model.reduced.row(static_cast<Eigen::Index>(r));
    centroid /= static_cast<double>(groups[t].size());
    std::vector<std::size_t> order = groups[t];
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return (model.reduced.row(static_cast<Eigen::Index>(a)) - centroid).squaredNorm() <
             (model.reduced.row(static_cast<Eigen::Index>(b)) - centroid).squaredNorm();
    });
    for (std::size_t k = 0; k < std::min(model.config.representatives, order.size()); ++k) {
      topic.representatives.push_back(model.documents[order[k]].id);
    }
    model.topics.push_back(std::move(topic));
  }
}

}  // namespace

TopicModel fit_topics(const Matrix& embeddings, const std::vector<Document>& documents,
                      const TopicModelConfig& config) {
  validate(config);
  if (static_cast<std::size_t>(embeddings.rows()) != documents.size()) {
    throw Error("fit_topics: one document per embedding row is required");
  }
  if (static_cast<std::size_t>(embeddings.rows()) <= config.neighborhood_size) {
    throw Error(fmt::format(
        "fit_topics needs more rows than neighborhood_size ({} rows, neighborhood_size {})",
        embeddings.rows(), config.neighborhood_size));
  }
  if (!embeddings.allFinite()) throw Error("fit_topics: embeddings must be finite");
  TopicModel model;
  model.config = config;
  model.documents = documents;
  model.reduced = reduce_dimensions(embeddings, config.reduced_dims, config.neighborhood_size);

  std::vector<int> labels;
  const bool degenerate =
      (model.reduced.rowwise() - model.reduced.row(0)).cwiseAbs().maxCoeff() == 0.0;
  if (!degenerate) labels = hdbscan(model.reduced, config.min_cluster_size);
  if (degenerate || std::all_of(labels.begin(), labels.end(), [](int l) { return l < 0; })) {
    labels.assign(documents.size(), 0);
  }
  finalize(model, labels);
  if (config.target_topics && *config.target_topics < model.topics.size()) {
    return reduce_topics(model, *config.target_topics);
  }
  return model;
}

TopicModel reduce_topics(const TopicModel& model, std::size_t target) {
  const std::size_t count = model.topics.size();
  if (target < 1 || target > count) {
    throw Error(fmt::format("reduce_topics target {} must be in [1, {}]", target, count));
  }
  std::vector<int> labels = model.assignment;
  std::size_t current = count;
  while (current > target) {
    std::map<int, std::pair<Eigen::RowVectorXd, std::size_t>> centroids;
    for (std::size_t r = 0; r < labels.size(); ++r) {
      if (labels[r] < 0) continue;
      auto [it, inserted] = centroids.try_emplace(
          labels[r], Eigen::RowVectorXd::Zero(model.reduced.cols()), 0);
      it->second.first += model.reduced.row(static_cast<Eigen::Index>(r));
      ++it->second.second;
    }
    for (auto& [label, c] : centroids) c.first /= static_cast<double>(c.second);
    int keep = -1, absorb = -1;
    double best = std::numeric_limits<double>::infinity();
    for (auto a = centroids.begin(); a != centroids.end(); ++a) {
      for (auto b = std::next(a); b != centroids.end(); ++b) {
        const double d = (a->second.first - b->second.first).norm();
        if (d < best) {
          best = d;
          keep = a->first;
          absorb = b->first;
        }
      }
    }
    for (auto& l : labels) {
      if (l == absorb) l = keep;
    }
    --current;
  }
  TopicModel out = model;
  finalize(out, labels);
  return out;
}

nlohmann::json topics_to_json(const TopicModel& model) {
  json topics = json::array();
  for (const auto& t : model.topics) {
    topics.push_back({{"topic_id", t.topic_id},
                      {"size", t.member_ids.size()},
                      {"keywords", t.keywords},
                      {"representatives", t.representatives},
                      {"member_ids", t.member_ids}});
  }
  std::vector<std::string> outliers;
  for (std::size_t r = 0; r < model.assignment.size(); ++r) {
    if (model.assignment[r] < 0) outliers.push_back(model.documents[r].id);
  }
  return {{"config", to_json(model.config)},
          {"topic_count", model.topics.size()},
          {"outlier_ids", outliers},
          {"topics", topics}};
}

}  // namespace triage
