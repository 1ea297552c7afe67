#include "triage/trends.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include <fmt/format.h>

#include "triage/error.hpp"
#include "triage/util/io.hpp"

namespace triage {

using namespace std::chrono;

bool is_province_code(std::string_view code) {
  return std::find(std::begin(kProvinceCodes), std::end(kProvinceCodes), code) !=
         std::end(kProvinceCodes);
}

std::string normalize_place(std::string_view raw) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : raw) {
    const bool separator = std::isspace(c) || (c < 0x80 && std::ispunct(c));
    if (separator) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
  }
  return out;
}

namespace {

std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  fields.push_back(std::move(field));
  return fields;
}

std::size_t word_count(const std::string& text) {
  if (text.empty()) return 0;
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), ' ')) + 1;
}

std::string trim_copy(std::string_view text) {
  auto begin = text.find_first_not_of(" \t");
  if (begin == std::string_view::npos) return {};
  auto end = text.find_last_not_of(" \t");
  return std::string(text.substr(begin, end - begin + 1));
}

}  // namespace

Gazetteer::Gazetteer(std::vector<GazetteerEntry> entries) : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto& entry = entries_[i];
    entry.name = normalize_place(entry.name);
    const bool canadian = normalize_place(entry.country) == "canada";
    if (canadian && !is_province_code(entry.province)) {
      throw Error(fmt::format("gazetteer entry \"{}\" has invalid province \"{}\"", entry.name,
                              entry.province));
    }
    if (!index_.emplace(entry.name, i).second) {
      throw Error(fmt::format("gazetteer name \"{}\" is not unique", entry.name));
    }
    longest_words_ = std::max(longest_words_, word_count(entry.name));
    std::set<std::string> normalized;
    for (const auto& alias : entry.aliases) normalized.insert(normalize_place(alias));
    entry.aliases = std::move(normalized);
    for (const auto& alias : entry.aliases) {
      index_.emplace(alias, i);  // names win over aliases
      longest_words_ = std::max(longest_words_, word_count(alias));
    }
  }
}

Gazetteer Gazetteer::load(const std::filesystem::path& path) {
  std::vector<GazetteerEntry> entries;
  bool header_seen = false;
  std::size_t col_name = 0, col_aliases = 1, col_province = 2, col_country = 3;
  for_each_line(path, [&](std::size_t line, const std::string& text) {
    auto fields = parse_csv_line(text);
    for (auto& f : fields) f = trim_copy(f);
    if (!header_seen) {
      header_seen = true;
      auto find = [&](const char* name) {
        auto it = std::find(fields.begin(), fields.end(), name);
        if (it == fields.end()) {
          throw Error(fmt::format("{}: header lacks column \"{}\"", path.string(), name));
        }
        return static_cast<std::size_t>(it - fields.begin());
      };
      col_name = find("name");
      col_aliases = find("aliases");
      col_province = find("province");
      col_country = find("country");
      return;
    }
    const std::size_t needed = std::max({col_name, col_aliases, col_province, col_country}) + 1;
    if (fields.size() < needed) {
      throw Error(fmt::format("{}:{}: expected {} fields, got {}", path.string(), line, needed,
                              fields.size()));
    }
    GazetteerEntry entry;
    entry.name = fields[col_name];
    std::stringstream aliases(fields[col_aliases]);
    for (std::string alias; std::getline(aliases, alias, ';');) {
      alias = trim_copy(alias);
      if (!alias.empty()) entry.aliases.insert(alias);
    }
    entry.province = fields[col_province];
    std::transform(entry.province.begin(), entry.province.end(), entry.province.begin(),
                   [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    entry.country = fields[col_country];
    entries.push_back(std::move(entry));
  });
  return Gazetteer(std::move(entries));
}

const GazetteerEntry* Gazetteer::lookup(std::string_view normalized) const {
  auto it = index_.find(std::string(normalized));
  return it == index_.end() ? nullptr : &entries_[it->second];
}

std::string LocationResolution::key() const {
  switch (kind) {
    case Kind::province:
      return province;
    case Kind::not_canada:
      return "NOT_CANADA";
    case Kind::not_found:
      break;
  }
  return "NOT_FOUND";
}

LocationResolution resolve_location(const std::optional<std::string>& raw,
                                    const Gazetteer& gazetteer) {
  if (!raw) return {};
  auto resolve = [](const GazetteerEntry& entry) {
    if (normalize_place(entry.country) == "canada") {
      return LocationResolution{LocationResolution::Kind::province, entry.province};
    }
    return LocationResolution{LocationResolution::Kind::not_canada, {}};
  };

  const std::string whole = normalize_place(*raw);
  if (whole.empty()) return {};
  if (const auto* entry = gazetteer.lookup(whole)) return resolve(*entry);

  std::stringstream parts(*raw);
  for (std::string part; std::getline(parts, part, ',');) {
    const std::string normalized = normalize_place(part);
    if (normalized.empty()) continue;
    if (const auto* entry = gazetteer.lookup(normalized)) return resolve(*entry);
  }

  std::vector<std::string> words;
  std::stringstream tokens(whole);
  for (std::string word; tokens >> word;) words.push_back(word);
  for (std::size_t n = std::min(gazetteer.longest_name_words(), words.size()); n >= 1; --n) {
    for (std::size_t start = 0; start + n <= words.size(); ++start) {
      std::string gram = words[start];
      for (std::size_t k = 1; k < n; ++k) gram += " " + words[start + k];
      if (const auto* entry = gazetteer.lookup(gram)) return resolve(*entry);
    }
  }
  return {};
}

std::size_t TrendSeries::total() const {
  std::size_t sum = 0;
  for (const auto& [week, count] : buckets) sum += count;
  return sum;
}

std::size_t TrendSeries::argmax() const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < buckets.size(); ++i) {
    if (buckets[i].second > buckets[best].second) best = i;
  }
  return best;
}

sys_days week_anchor(int year_value) {
  const sys_days jan1{year{year_value} / January / 1};
  const weekday wd{jan1};
  // iso_encoding: Monday = 1 ... Sunday = 7
  return jan1 - days{wd.iso_encoding() - 1};
}

namespace {

TrendSeries empty_series(int year_value) {
  TrendSeries series;
  series.year = year_value;
  const sys_days anchor = week_anchor(year_value);
  const sys_days dec31{year{year_value} / December / 31};
  const auto weeks = (dec31 - anchor).count() / 7 + 1;
  for (long w = 0; w < weeks; ++w) series.buckets.emplace_back(anchor + days{7 * w}, 0);
  return series;
}

std::optional<std::size_t> bucket_of(Timestamp ts, int year_value) {
  const sys_days day = floor<days>(ts);
  if (static_cast<int>(year_month_day{day}.year()) != year_value) return std::nullopt;
  return static_cast<std::size_t>((day - week_anchor(year_value)).count() / 7);
}

}  // namespace

TrendSeries weekly_counts(const std::vector<Post>& posts, int year_value) {
  TrendSeries series = empty_series(year_value);
  for (const auto& post : posts) {
    if (auto bucket = bucket_of(post.created_at, year_value)) ++series.buckets[*bucket].second;
  }
  return series;
}

std::vector<TrendSeries> class_trend_series(
    const std::vector<std::pair<Post, ClassId>>& predicted, int year_value,
    const std::vector<ClassId>& classes, const Taxonomy& taxonomy) {
  std::map<ClassId, std::size_t> slot;
  std::vector<TrendSeries> out;
  for (ClassId cls : classes) {
    if (cls.value >= taxonomy.size()) {
      throw Error(fmt::format("unknown class index {} in trend request", cls.value));
    }
    TrendSeries series = empty_series(year_value);
    series.cls = cls;
    slot.emplace(cls, out.size());
    out.push_back(std::move(series));
  }
  for (const auto& [post, cls] : predicted) {
    auto it = slot.find(cls);
    if (it == slot.end()) continue;
    if (auto bucket = bucket_of(post.created_at, year_value)) {
      ++out[it->second].buckets[*bucket].second;
    }
  }
  return out;
}

std::map<std::string, std::size_t> province_distribution(const std::vector<Post>& posts,
                                                         const Gazetteer& gazetteer) {
  std::map<std::string, std::size_t> counts;
  for (const auto& post : posts) ++counts[resolve_location(post.author_location_raw, gazetteer).key()];
  return counts;
}

std::string series_to_csv(const TrendSeries& series) {
  std::string out = "week_start,count\n";
  for (const auto& [week, count] : series.buckets) {
    out += fmt::format("{},{}\n", format_date(week), count);
  }
  return out;
}

std::string render_series_svg(const std::vector<TrendSeries>& series,
                              const std::vector<std::string>& names, const std::string& title) {
  constexpr double kWidth = 900, kHeight = 420, kMargin = 50;
  static constexpr const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                            "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                                            "#bcbd22", "#17becf", "#393b79", "#637939",
                                            "#8c6d31"};
  std::size_t max_count = 1;
  std::size_t max_len = 1;
  for (const auto& s : series) {
    max_len = std::max(max_len, s.buckets.size());
    for (const auto& [week, count] : s.buckets) max_count = std::max(max_count, count);
  }
  std::string svg = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n"
      "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
      kWidth, kHeight, kMargin, title);
  const double plot_w = kWidth - 2 * kMargin;
  const double plot_h = kHeight - 2 * kMargin;
  for (std::size_t i = 0; i < series.size(); ++i) {
    std::string points;
    for (std::size_t b = 0; b < series[i].buckets.size(); ++b) {
      const double x = kMargin + plot_w * static_cast<double>(b) /
                                     static_cast<double>(std::max<std::size_t>(max_len - 1, 1));
      const double y = kHeight - kMargin -
                       plot_h * static_cast<double>(series[i].buckets[b].second) /
                           static_cast<double>(max_count);
      points += fmt::format("{:.1f},{:.1f} ", x, y);
    }
    const char* color = kColors[i % std::size(kColors)];
    svg += fmt::format("<polyline fill=\"none\" stroke=\"{}\" points=\"{}\"/>\n", color, points);
    svg += fmt::format(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{}\">{}</text>\n",
        kWidth - kMargin - 180, kMargin + 14 * static_cast<double>(i), color,
        i < names.size() ? names[i] : "");
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace triage
