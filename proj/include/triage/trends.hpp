#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "triage/corpus.hpp"
#include "triage/taxonomy.hpp"

namespace triage {

/// Province and territory codes.
inline constexpr std::string_view kProvinceCodes[] = {"AB", "BC", "MB", "NB", "NL", "NS", "NT",
                                                      "NU", "ON", "PE", "QC", "SK", "YT"};

bool is_province_code(std::string_view code);

/// Casefold, trim, turn punctuation into spaces and collapse runs of spaces.
std::string normalize_place(std::string_view raw);

struct GazetteerEntry {
  std::string name;  // normalized
  std::set<std::string> aliases;
  std::string province;  // empty outside Canada
  std::string country;
};

class Gazetteer {
 public:
  Gazetteer() = default;
  explicit Gazetteer(std::vector<GazetteerEntry> entries);

  /// Delimited text with header name,aliases,province,country; aliases are
  /// separated by ';'. Fields may be double-quoted.
  static Gazetteer load(const std::filesystem::path& path);

  const GazetteerEntry* lookup(std::string_view normalized) const;
  const std::vector<GazetteerEntry>& entries() const { return entries_; }
  std::size_t longest_name_words() const { return longest_words_; }

 private:
  std::vector<GazetteerEntry> entries_;
  std::map<std::string, std::size_t> index_;
  std::size_t longest_words_ = 1;
};

struct LocationResolution {
  enum class Kind { province, not_found, not_canada };
  Kind kind = Kind::not_found;
  std::string province;

  /// "BC", "NOT_FOUND" or "NOT_CANADA".
  std::string key() const;
  friend bool operator==(const LocationResolution&, const LocationResolution&) = default;
};

/// Tries the whole normalized string, then each comma-separated part, then
/// the longest word n-gram found in the gazetteer.
LocationResolution resolve_location(const std::optional<std::string>& raw,
                                    const Gazetteer& gazetteer);

struct TrendSeries {
  int year = 0;
  std::optional<ClassId> cls;
  std::vector<std::pair<std::chrono::sys_days, std::size_t>> buckets;

  std::size_t total() const;
  /// Index of the first bucket with the largest count.
  std::size_t argmax() const;
};

/// Monday on or before January 1st of `year`.
std::chrono::sys_days week_anchor(int year);

/// Consecutive Monday-anchored 7-day bins covering the whole year. Only
/// posts whose UTC timestamp falls inside the year are counted.
TrendSeries weekly_counts(const std::vector<Post>& posts, int year);

/// One series per requested class, from (post, predicted class) pairs.
/// Throws on a class outside the taxonomy.
std::vector<TrendSeries> class_trend_series(
    const std::vector<std::pair<Post, ClassId>>& predicted, int year,
    const std::vector<ClassId>& classes, const Taxonomy& taxonomy = Taxonomy::wildfire());

std::map<std::string, std::size_t> province_distribution(const std::vector<Post>& posts,
                                                         const Gazetteer& gazetteer);

/// "week_start,count" CSV with ISO-8601 dates.
std::string series_to_csv(const TrendSeries& series);

/// Minimal SVG line chart of several series sharing week axes.
std::string render_series_svg(const std::vector<TrendSeries>& series,
                              const std::vector<std::string>& names, const std::string& title);

}  // namespace triage
