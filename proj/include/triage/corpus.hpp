#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "triage/taxonomy.hpp"

namespace triage {

using Timestamp = std::chrono::sys_seconds;

/// Parses ISO-8601 ("2023-06-03T17:04:00Z", "+02:00" offsets, optional
/// fractional seconds, space or 'T' separator) and the legacy platform
/// format ("Wed Oct 10 20:19:24 +0000 2018"). Result is UTC.
std::optional<Timestamp> parse_timestamp(std::string_view text);

/// "YYYY-MM-DDTHH:MM:SSZ"
std::string format_timestamp(Timestamp ts);

/// "YYYY-MM-DD"
std::string format_date(std::chrono::sys_days day);

struct Post {
  std::string id;
  std::string text;
  std::string image_path;
  Timestamp created_at{};
  std::optional<std::string> author_location_raw;
  int source_year = 0;

  friend bool operator==(const Post&, const Post&) = default;
};

struct RecordError {
  std::size_t line = 0;
  std::string id;
  std::string message;
};

struct LoadOptions {
  std::filesystem::path image_root;
  /// Inclusive bounds on created_at's calendar year.
  std::optional<std::pair<int, int>> year_range;
  /// When set, a non-empty image reference must exist under image_root.
  bool require_images = false;
};

struct PostLoadResult {
  std::vector<Post> posts;
  std::vector<RecordError> errors;
};

/// Reads a line-delimited post file with fields
/// {id, text, image, created_at, location, year}.
/// A missing file throws; bad records land in `errors` with their line.
PostLoadResult load_posts(const std::filesystem::path& path, const LoadOptions& options = {});

nlohmann::json post_to_json(const Post& post);
void write_posts(const std::filesystem::path& path, const std::vector<Post>& posts);

/// Collection query for one year: OR-joined hashtags and the fixed filter
/// suffix, optionally with a separate keyword clause.
struct QuerySpec {
  int year = 0;
  std::vector<std::string> hashtags;
  std::optional<std::string> keywords;
  std::string filters = std::string(kFilterSuffix);

  static constexpr std::string_view kFilterSuffix =
      " -has:videos has:images lang:en -is:retweet -is:quote -is:reply";
};

/// "(#a OR #b) -has:videos has:images lang:en -is:retweet -is:quote -is:reply"
std::string build_query(const QuerySpec& spec);

/// Keyword clause followed by the filter suffix. Throws when the spec
/// carries no keyword clause.
std::string build_keyword_query(const QuerySpec& spec);

/// Queries used for the labeled 2022-2024 collection (two rows: 2022/2023, 2024).
std::vector<QuerySpec> labeled_collection_queries();

/// Hashtag + keyword queries used for the 2018-2024 unlabeled collection.
std::vector<QuerySpec> trend_collection_queries();

/// Keeps the first post for each id; order otherwise preserved.
std::vector<Post> dedupe(const std::vector<Post>& posts);

struct LabeledPost {
  Post post;
  ClassId label;
};

struct LabelLoadResult {
  std::vector<std::pair<std::string, ClassId>> labels;
  std::vector<RecordError> errors;
};

/// Reads {id, label} lines; labels resolved through the taxonomy.
LabelLoadResult load_labels(const std::filesystem::path& path, const Taxonomy& taxonomy);

/// Joins posts with labels by id, in post order. Posts without a label are
/// skipped; labels without a post are reported.
std::vector<LabeledPost> join_labels(const std::vector<Post>& posts,
                                     const std::vector<std::pair<std::string, ClassId>>& labels,
                                     std::vector<RecordError>* unmatched = nullptr);

enum class SplitStrategy { stratified };

struct SplitSpec {
  std::uint64_t seed = 8;
  double train_fraction = 0.8;
  SplitStrategy strategy = SplitStrategy::stratified;

  static constexpr std::uint64_t kCanonicalSeeds[] = {8, 12, 14};
};

struct Split {
  std::vector<LabeledPost> train;
  std::vector<LabeledPost> test;
};

/// Per-class test counts for a stratified split: the total is
/// ceil(n * (1 - train_fraction)) and classes get floor shares plus
/// largest-remainder top-ups. Exposed for tests and reporting.
std::vector<std::size_t> stratified_test_counts(const std::vector<std::size_t>& class_counts,
                                                double train_fraction);

/// Deterministic stratified split. Every class needs at least two samples.
Split stratified_split(const std::vector<LabeledPost>& labeled, const SplitSpec& spec);

}  // namespace triage
