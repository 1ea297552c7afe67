#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "triage/corpus.hpp"
#include "triage/encoders.hpp"
#include "triage/nn.hpp"

namespace triage {

struct TopicModelConfig {
  std::size_t reduced_dims = 5;
  std::size_t neighborhood_size = 15;
  std::size_t ngram_min = 1;
  std::size_t ngram_max = 2;
  bool stopword_removal = true;
  std::optional<std::size_t> target_topics;
  std::size_t min_cluster_size = 10;
  std::size_t top_keywords = 10;
  std::size_t representatives = 3;
  std::string embedder_checkpoint = "clip-ViT-B-32";
};

/// Throws naming the offending field.
void validate(const TopicModelConfig& config);
nlohmann::json to_json(const TopicModelConfig& config);
TopicModelConfig topic_config_from_json(const nlohmann::json& j);

struct Topic {
  int topic_id = 0;
  std::vector<std::string> member_ids;  // input order
  std::vector<std::string> keywords;    // best first
  std::vector<std::string> representatives;
};

/// Joint text-image embedding backend. Throws on failure for one post.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::vector<double> embed(const Post& post) = 0;
};

/// Vectors stored as JSONL {post_id, text_vector, image_vector?}. A post's
/// embedding is the mean of its text and image vectors, or the text vector
/// alone when no image vector is stored.
class RecordedEmbedder final : public Embedder {
 public:
  explicit RecordedEmbedder(const std::filesystem::path& path);
  std::vector<double> embed(const Post& post) override;

 private:
  struct Entry {
    std::vector<double> text;
    std::vector<double> image;  // empty when the post has no image vector
  };
  std::unordered_map<std::string, Entry> entries_;
  std::size_t width_ = 0;
};

struct EmbedResult {
  nn::Matrix embeddings;         // one row per embedded post
  std::vector<std::size_t> rows; // input index of each row
  std::vector<ItemError> errors;
};

EmbedResult embed_posts(const std::vector<Post>& posts, Embedder& embedder);

struct Document {
  std::string id;
  std::string text;
};

/// Lowercased tokens of two or more word characters, stopwords dropped when
/// requested, then n-grams over what remains.
std::vector<std::string> extract_terms(const std::string& text, std::size_t ngram_min,
                                       std::size_t ngram_max, bool remove_stopwords);
bool is_stopword(const std::string& token);

struct TopicModel {
  TopicModelConfig config;
  std::vector<Document> documents;
  nn::Matrix reduced;            // rows x reduced_dims
  std::vector<int> assignment;   // topic id per row, -1 for outliers
  std::vector<Topic> topics;     // ordered by id; ids 0..k-1 by descending size

  std::size_t outlier_count() const;
};

/// Fuzzy k-nearest-neighbour graph (cosine distance) -> spectral layout to
/// reduced_dims refined by edge sampling -> HDBSCAN (excess of mass) -> class-based TF-IDF.
/// Identical embedding rows receive identical reduced coordinates. When the
/// density clustering selects no cluster, all rows form a single topic.
TopicModel fit_topics(const nn::Matrix& embeddings, const std::vector<Document>& documents,
                      const TopicModelConfig& config);

/// Repeatedly merges the two topics with the closest centroids in the
/// reduced space until `target` remain; keywords are recomputed.
TopicModel reduce_topics(const TopicModel& model, std::size_t target);

/// Top keywords of every topic given row assignments.
std::vector<std::vector<std::string>> topic_keywords(const std::vector<Document>& documents,
                                                     const std::vector<int>& assignment,
                                                     std::size_t topic_count,
                                                     const TopicModelConfig& config);

/// Labels from density clustering: cluster index per row or -1.
std::vector<int> hdbscan(const nn::Matrix& points, std::size_t min_cluster_size);

/// Coordinates from the spectral decomposition of the fuzzy kNN graph, then
/// refined by attraction along edges and sampled repulsion. Deterministic.
nn::Matrix reduce_dimensions(const nn::Matrix& embeddings, std::size_t dims,
                             std::size_t neighborhood_size);

nlohmann::json topics_to_json(const TopicModel& model);

}  // namespace triage
