#include "triage/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>

#include "triage/error.hpp"
#include "triage/util/io.hpp"
#include "triage/util/rng.hpp"

namespace triage {

namespace {

using namespace std::chrono;

bool read_int(std::string_view text, std::size_t& pos, std::size_t digits, int& out) {
  if (pos + digits > text.size()) return false;
  int value = 0;
  for (std::size_t i = 0; i < digits; ++i) {
    const char c = text[pos + i];
    if (c < '0' || c > '9') return false;
    value = value * 10 + (c - '0');
  }
  pos += digits;
  out = value;
  return true;
}

bool expect(std::string_view text, std::size_t& pos, char c) {
  if (pos < text.size() && text[pos] == c) {
    ++pos;
    return true;
  }
  return false;
}

std::optional<Timestamp> make_timestamp(int y, int mo, int d, int h, int mi, int s,
                                        int offset_minutes) {
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)},
                           day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || s > 60) return std::nullopt;
  const sys_seconds local = sys_days{ymd} + hours{h} + minutes{mi} + seconds{s};
  return local - minutes{offset_minutes};
}

std::optional<Timestamp> parse_iso(std::string_view text) {
  std::size_t pos = 0;
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  if (!read_int(text, pos, 4, y) || !expect(text, pos, '-') || !read_int(text, pos, 2, mo) ||
      !expect(text, pos, '-') || !read_int(text, pos, 2, d)) {
    return std::nullopt;
  }
  if (pos == text.size()) return make_timestamp(y, mo, d, 0, 0, 0, 0);
  if (!(expect(text, pos, 'T') || expect(text, pos, 't') || expect(text, pos, ' '))) {
    return std::nullopt;
  }
  if (!read_int(text, pos, 2, h) || !expect(text, pos, ':') || !read_int(text, pos, 2, mi)) {
    return std::nullopt;
  }
  if (expect(text, pos, ':') && !read_int(text, pos, 2, s)) return std::nullopt;
  if (expect(text, pos, '.')) {
    const std::size_t start = pos;
    while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) ++pos;
    if (pos == start) return std::nullopt;
  }
  int offset = 0;
  if (pos < text.size()) {
    const char zone = text[pos];
    if (zone == 'Z' || zone == 'z') {
      ++pos;
    } else if (zone == '+' || zone == '-') {
      ++pos;
      int oh = 0, om = 0;
      if (!read_int(text, pos, 2, oh)) return std::nullopt;
      expect(text, pos, ':');
      if (!read_int(text, pos, 2, om)) return std::nullopt;
      offset = (zone == '-' ? -1 : 1) * (oh * 60 + om);
    } else {
      return std::nullopt;
    }
  }
  if (pos != text.size()) return std::nullopt;
  return make_timestamp(y, mo, d, h, mi, s, offset);
}

// "Wed Oct 10 20:19:24 +0000 2018"
std::optional<Timestamp> parse_legacy(std::string_view text) {
  static constexpr std::string_view kMonths[] = {"Jan", "Feb", "Mar", "Apr", "May", "Jun",
                                                 "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"};
  if (text.size() != 30 || text[3] != ' ' || text[7] != ' ' || text[10] != ' ' ||
      text[19] != ' ' || text[25] != ' ') {
    return std::nullopt;
  }
  const auto month_name = text.substr(4, 3);
  const auto it = std::find(std::begin(kMonths), std::end(kMonths), month_name);
  if (it == std::end(kMonths)) return std::nullopt;
  const int mo = static_cast<int>(it - std::begin(kMonths)) + 1;
  std::size_t pos = 8;
  int d = 0, h = 0, mi = 0, s = 0, oh = 0, om = 0, y = 0;
  if (!read_int(text, pos, 2, d) || !expect(text, pos, ' ') || !read_int(text, pos, 2, h) ||
      !expect(text, pos, ':') || !read_int(text, pos, 2, mi) || !expect(text, pos, ':') ||
      !read_int(text, pos, 2, s) || !expect(text, pos, ' ')) {
    return std::nullopt;
  }
  const char sign = text[pos++];
  if (sign != '+' && sign != '-') return std::nullopt;
  if (!read_int(text, pos, 2, oh) || !read_int(text, pos, 2, om) || !expect(text, pos, ' ') ||
      !read_int(text, pos, 4, y)) {
    return std::nullopt;
  }
  return make_timestamp(y, mo, d, h, mi, s, (sign == '-' ? -1 : 1) * (oh * 60 + om));
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace

std::optional<Timestamp> parse_timestamp(std::string_view text) {
  while (!text.empty() && std::isspace(static_cast<unsigned char>(text.front()))) {
    text.remove_prefix(1);
  }
  while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) {
    text.remove_suffix(1);
  }
  if (auto ts = parse_iso(text)) return ts;
  return parse_legacy(text);
}

std::string format_timestamp(Timestamp ts) {
  const auto day = floor<days>(ts);
  const year_month_day ymd{day};
  const hh_mm_ss tod{ts - day};
  return fmt::format("{:04}-{:02}-{:02}T{:02}:{:02}:{:02}Z", static_cast<int>(ymd.year()),
                     static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                     tod.hours().count(), tod.minutes().count(), tod.seconds().count());
}

std::string format_date(sys_days day) {
  const year_month_day ymd{day};
  return fmt::format("{:04}-{:02}-{:02}", static_cast<int>(ymd.year()),
                     static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
}

PostLoadResult load_posts(const fs::path& path, const LoadOptions& options) {
  if (!fs::exists(path)) throw Error(fmt::format("post file not found: {}", path.string()));
  PostLoadResult result;
  std::unordered_set<std::string> seen;
  for_each_line(path, [&](std::size_t line, const std::string& text) {
    auto fail = [&](std::string id, std::string message) {
      result.errors.push_back({line, std::move(id), std::move(message)});
    };
    json record;
    try {
      record = json::parse(text);
    } catch (const json::parse_error& e) {
      fail("", fmt::format("invalid JSON: {}", e.what()));
      return;
    }
    if (!record.is_object()) {
      fail("", "record is not an object");
      return;
    }
    Post post;
    try {
      const auto& id = record.at("id");
      post.id = id.is_string() ? id.get<std::string>() : id.dump();
      post.text = record.value("text", "");
      if (auto it = record.find("image"); it != record.end() && !it->is_null()) {
        post.image_path = it->get<std::string>();
      }
      if (auto it = record.find("location"); it != record.end() && !it->is_null()) {
        post.author_location_raw = it->get<std::string>();
      }
      const std::string created = record.at("created_at").get<std::string>();
      auto ts = parse_timestamp(created);
      if (!ts) {
        fail(post.id, fmt::format("unparseable timestamp: \"{}\"", created));
        return;
      }
      post.created_at = *ts;
      if (auto it = record.find("year"); it != record.end() && !it->is_null()) {
        post.source_year = it->get<int>();
      } else {
        post.source_year = static_cast<int>(year_month_day{floor<days>(*ts)}.year());
      }
    } catch (const json::exception& e) {
      fail(post.id, fmt::format("malformed record: {}", e.what()));
      return;
    }
    if (post.id.empty()) {
      fail("", "empty id");
      return;
    }
    if (options.year_range) {
      const int y = static_cast<int>(year_month_day{floor<days>(post.created_at)}.year());
      if (y < options.year_range->first || y > options.year_range->second) {
        fail(post.id, fmt::format("created_at year {} outside [{}, {}]", y,
                                  options.year_range->first, options.year_range->second));
        return;
      }
    }
    if (options.require_images && !post.image_path.empty() &&
        !fs::exists(options.image_root / post.image_path)) {
      fail(post.id, fmt::format("image not found under root: {}", post.image_path));
      return;
    }
    if (!seen.insert(post.id).second) {
      fail(post.id, "duplicate id");
      return;
    }
    result.posts.push_back(std::move(post));
  });
  return result;
}

json post_to_json(const Post& post) {
  json location = post.author_location_raw ? json(*post.author_location_raw) : json(nullptr);
  return {{"id", post.id},
          {"text", post.text},
          {"image", post.image_path},
          {"created_at", format_timestamp(post.created_at)},
          {"location", location},
          {"year", post.source_year}};
}

void write_posts(const fs::path& path, const std::vector<Post>& posts) {
  std::vector<json> records;
  records.reserve(posts.size());
  for (const auto& post : posts) records.push_back(post_to_json(post));
  write_jsonl(path, records);
}

std::string build_query(const QuerySpec& spec) {
  if (spec.hashtags.empty()) {
    throw Error(fmt::format("query for year {} has no hashtags", spec.year));
  }
  return "(" + join(spec.hashtags, " OR ") + ")" + spec.filters;
}

std::string build_keyword_query(const QuerySpec& spec) {
  if (!spec.keywords || spec.keywords->empty()) {
    throw Error(fmt::format("query for year {} has no keyword clause", spec.year));
  }
  return *spec.keywords + spec.filters;
}

std::vector<QuerySpec> labeled_collection_queries() {
  const std::vector<std::string> base = {"#BCwildfire", "#BCfire", "#ABWildfire",
                                         "#albertawildfire", "#ABFire"};
  std::vector<std::string> jasper = base;
  for (const char* tag : {"#JasperStrong", "#JasperWildfire", "#JasperAB"}) jasper.push_back(tag);
  return {QuerySpec{2022, base, std::nullopt}, QuerySpec{2023, base, std::nullopt},
          QuerySpec{2024, jasper, std::nullopt}};
}

std::vector<QuerySpec> trend_collection_queries() {
  const std::string fire = " (wildfire OR forest fire)";
  return {
      {2018,
       {"#BCwildfire", "#britishcolumbiawildfire", "#BCfire", "#ABWildfire", "#albertawildfire",
        "#ABFire"},
       "(alberta OR british columbia OR Prince George OR Grande Praire OR Waterton OR Bulkley "
       "Nechako OR Nadina Lake OR Kootenay OR Crowsnest Pass OR Medicine Lake OR Comstock Lake OR "
       "Tugwell Creek OR Sooke OR Nanaimo Lakes OR Tweedsmuir OR Johnny Creek OR Alkali Lake OR "
       "Lutz Creek OR Shovel Lake OR Nadina Lake OR Verdun Mountain OR Silver Lake OR Tommy Lakes "
       "OR Island Lake OR Chutanli Lake)" +
           fire},
      {2019,
       {"#ABWildfire", "#albertawildfire", "#ABFire"},
       "(alberta OR calgary OR edson OR Fort McMurray OR Grande Prairie OR High Level OR Lac La "
       "Biche OR Whitecourt OR Steen River OR Chuckegg Creek OR Peace River OR Slave Lake OR Wood "
       "Buffalo National Park)" +
           fire},
      {2020,
       {"#BCwildfire", "#britishcolumbiawildfire", "#BCfire", "#ABwildfire", "#albertawildfire",
        "#ABFire", "#SKwildfire", "#sasksatchewanwildfire", "#SKfire", "#YTwildfire",
        "#yukonwildfire", "#YTfire", "#NTwildfire", "#northwestterritorieswildfire", "#NTfire",
        "#NWTwildfire", "#NWTfire", "#MBwildfire", "#manitobawildfire", "#MBfire", "#ONwildfire",
        "#ontariowildfire", "#QCwildfire", "#quebecwildfire", "#QCfire"},
       "(british columbia OR alberta OR sasksatchewan OR yukon OR northwest territories OR "
       "manitoba OR ontario OR quebec)" +
           fire},
      {2021,
       {"#MBwildfire", "#manitobawildfire", "#MBfire", "#ONwildfire", "#ontariowildfire",
        "#SKwildfire", "#sasksatchewanwildfire", "#SKfire", "#pafire", "#ontariofire",
        "#manitobafire", "#sasksatchewanfire"},
       "(manitoba OR ontario OR sasksatchewan OR british columbia)" + fire},
      {2022,
       {"#YTwildfire", "#yukonwildfire", "#YTfire", "#yukonforestfire", "#NTwildfire",
        "#northwestterritorieswildfire", "#NTfire", "#NWTwildfire", "#NWTfire",
        "#nwtforestfire"},
       "(#yzf OR #nwt OR #Yellowknife OR Yukon OR Northwest Territories OR Whitehorse OR "
       "Yellowknife OR Dawson City OR Great Slave Lake OR Norman Wells OR Inuvik OR Watson Lake OR "
       "Hay River OR Fort Smith OR Tuktoyaktuk OR Behchoko)" +
           fire + " (-alaska -Eielson -CityofNorthPole)"},
      {2023,
       {"#BCwildfire", "#britishcolumbiawildfire", "#BCfire", "#ABwildfire", "#albertawildfire",
        "#ABFire", "#SKwildfire", "#sasksatchewanwildfire", "#SKfire", "#YTwildfire",
        "#yukonwildfire", "#YTfire", "#NTwildfire", "#northwestterritorieswildfire", "#NTfire",
        "#NWTwildfire", "#NWTfire", "#MBwildfire", "#manitobawildfire", "#MBfire", "#ONwildfire",
        "#ontariowildfire", "#QCwildfire", "#quebecwildfire", "#QCfire", "#CanadaOnFire",
        "#CanadaWildfire", "#CanadaFires", "#CanadaIsOnFire"},
       "(ontario OR quebec OR sasksatchewan OR british columbia OR manitoba OR northwest "
       "territories OR yukon OR alberta)" +
           fire},
      {2024,
       {"#JasperStrong", "#JasperWildfire", "#JasperAB", "#BCwildfire",
        "#britishcolumbiawildfire", "#BCfire", "#ABwildfire", "#albertawildfire", "#ABFire",
        "#CanadaOnFire", "#CanadaWildfire", "#CanadaFires", "#CanadaIsOnFire"},
       "(canada OR ontario OR quebec OR sasksatchewan OR manitoba OR northwest territories OR "
       "yukon OR british columbia OR alberta OR jasper)" +
           fire},
  };
}

std::vector<Post> dedupe(const std::vector<Post>& posts) {
  std::vector<Post> out;
  out.reserve(posts.size());
  std::unordered_set<std::string> seen;
  for (const auto& post : posts) {
    if (seen.insert(post.id).second) out.push_back(post);
  }
  return out;
}

LabelLoadResult load_labels(const fs::path& path, const Taxonomy& taxonomy) {
  LabelLoadResult result;
  std::unordered_set<std::string> seen;
  for_each_line(path, [&](std::size_t line, const std::string& text) {
    try {
      const json record = json::parse(text);
      const auto& raw_id = record.at("id");
      std::string id = raw_id.is_string() ? raw_id.get<std::string>() : raw_id.dump();
      const std::string label = record.at("label").get<std::string>();
      auto cls = taxonomy.find(label);
      if (!cls) {
        result.errors.push_back({line, id, fmt::format("unknown label \"{}\"", label)});
        return;
      }
      if (!seen.insert(id).second) {
        result.errors.push_back({line, id, "duplicate id"});
        return;
      }
      result.labels.emplace_back(std::move(id), *cls);
    } catch (const json::exception& e) {
      result.errors.push_back({line, "", fmt::format("malformed record: {}", e.what())});
    }
  });
  return result;
}

std::vector<LabeledPost> join_labels(const std::vector<Post>& posts,
                                     const std::vector<std::pair<std::string, ClassId>>& labels,
                                     std::vector<RecordError>* unmatched) {
  std::unordered_map<std::string, ClassId> by_id(labels.begin(), labels.end());
  std::vector<LabeledPost> joined;
  std::unordered_set<std::string> used;
  for (const auto& post : posts) {
    if (auto it = by_id.find(post.id); it != by_id.end()) {
      joined.push_back({post, it->second});
      used.insert(post.id);
    }
  }
  if (unmatched) {
    for (const auto& [id, cls] : labels) {
      if (!used.count(id)) unmatched->push_back({0, id, "label has no matching post"});
    }
  }
  return joined;
}

std::vector<std::size_t> stratified_test_counts(const std::vector<std::size_t>& class_counts,
                                                double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw Error(fmt::format("train_fraction must lie in (0, 1), got {}", train_fraction));
  }
  // Tolerance keeps products like 40 * (1 - 0.8) = 7.999999999999998 on the integer.
  constexpr double kSlack = 1e-9;
  const double test_fraction = 1.0 - train_fraction;
  const std::size_t total = std::accumulate(class_counts.begin(), class_counts.end(),
                                            std::size_t{0});
  const auto target = static_cast<std::size_t>(
      std::ceil(static_cast<double>(total) * test_fraction - kSlack));

  std::vector<std::size_t> counts(class_counts.size());
  std::vector<double> remainders(class_counts.size());
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < class_counts.size(); ++c) {
    const double exact = static_cast<double>(class_counts[c]) * test_fraction;
    counts[c] = static_cast<std::size_t>(std::floor(exact + kSlack));
    remainders[c] = exact - static_cast<double>(counts[c]);
    assigned += counts[c];
  }
  std::vector<std::size_t> order(class_counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainders[a] > remainders[b]; });
  for (std::size_t k = 0; assigned < target && k < order.size(); ++k) {
    const std::size_t c = order[k];
    if (counts[c] < class_counts[c]) {
      ++counts[c];
      ++assigned;
    }
  }
  // Both sides keep at least one sample of every class.
  for (std::size_t c = 0; c < class_counts.size(); ++c) {
    if (class_counts[c] >= 2) counts[c] = std::clamp<std::size_t>(counts[c], 1, class_counts[c] - 1);
  }
  return counts;
}

Split stratified_split(const std::vector<LabeledPost>& labeled, const SplitSpec& spec) {
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    by_class[labeled[i].label.value].push_back(i);
  }
  std::vector<std::size_t> class_counts;
  for (const auto& [cls, members] : by_class) {
    if (members.size() < 2) {
      const auto& name = cls < Taxonomy::wildfire().size()
                             ? Taxonomy::wildfire().at(ClassId{cls}).name
                             : std::to_string(cls);
      throw Error(fmt::format("class \"{}\" has {} sample(s); stratified split needs at least 2",
                              name, members.size()));
    }
    class_counts.push_back(members.size());
  }
  const auto test_counts = stratified_test_counts(class_counts, spec.train_fraction);

  Rng rng(spec.seed);
  std::vector<bool> is_test(labeled.size(), false);
  std::size_t k = 0;
  for (auto& [cls, members] : by_class) {
    std::vector<std::size_t> shuffled = members;
    rng.shuffle(shuffled);
    for (std::size_t i = 0; i < test_counts[k]; ++i) is_test[shuffled[i]] = true;
    ++k;
  }
  Split split;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    (is_test[i] ? split.test : split.train).push_back(labeled[i]);
  }
  return split;
}

}  // namespace triage
