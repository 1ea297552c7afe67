#include "triage/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "triage/annotation.hpp"
#include "triage/classifiers.hpp"
#include "triage/corpus.hpp"
#include "triage/encoders.hpp"
#include "triage/error.hpp"
#include "triage/evaluation.hpp"
#include "triage/taxonomy.hpp"
#include "triage/topics.hpp"
#include "triage/trends.hpp"
#include "triage/util/io.hpp"
#include "triage/util/rng.hpp"
#include "triage/zeroshot.hpp"

namespace triage::cli {

namespace {

// ---- schema ----------------------------------------------------------------

enum class Kind { object, integer, number, boolean, string, choice, path, out_path, array,
                  int_array, string_array };

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Field {
  Field(std::string p, Kind k) : path(std::move(p)), kind(k) {}

  std::string path;
  Kind kind = Kind::object;
  bool nullable = false;
  double lo = -kInf;
  double hi = kInf;
  bool lo_open = false;
  bool hi_open = false;
  std::vector<std::string> choices;
  std::size_t length = 0;  // int_array: required length when non-zero
};

Field object(std::string path) { return {std::move(path), Kind::object}; }
Field integer(std::string path, double lo, double hi = kInf, bool nullable = false) {
  Field f{std::move(path), Kind::integer};
  f.lo = lo;
  f.hi = hi;
  f.nullable = nullable;
  return f;
}
Field number(std::string path, double lo, double hi, bool lo_open, bool hi_open) {
  Field f{std::move(path), Kind::number};
  f.lo = lo;
  f.hi = hi;
  f.lo_open = lo_open;
  f.hi_open = hi_open;
  return f;
}
Field boolean(std::string path) { return {std::move(path), Kind::boolean}; }
Field string(std::string path, bool nullable = false) {
  Field f{std::move(path), Kind::string};
  f.nullable = nullable;
  return f;
}
Field choice(std::string path, std::vector<std::string> values) {
  Field f{std::move(path), Kind::choice};
  f.choices = std::move(values);
  return f;
}
Field path_field(std::string path) {
  Field f{std::move(path), Kind::path};
  f.nullable = true;
  return f;
}
Field int_array(std::string path, std::size_t length, double lo, bool nullable) {
  Field f{std::move(path), Kind::int_array};
  f.length = length;
  f.lo = lo;
  f.nullable = nullable;
  return f;
}

void add_encoder(std::vector<Field>& s, const std::string& p, const std::string& modality) {
  s.push_back(object(p));
  s.push_back(choice(p + ".modality", {modality}));
  s.push_back(string(p + ".checkpoint"));
  s.push_back(choice(p + ".pooling", {"cls", "mean"}));
  s.push_back(boolean(p + ".freeze_half"));
  s.push_back(integer(p + ".max_text_length", 1));
  s.push_back(int_array(p + ".image_size", 3, 1, false));
  s.push_back(choice(p + ".backend", {"stub", "recorded", "local"}));
  s.push_back(path_field(p + ".recorded_path"));
  s.push_back(object(p + ".backbone"));
  s.push_back(integer(p + ".backbone.layers", 1));
  s.push_back(integer(p + ".backbone.heads", 1));
  s.push_back(integer(p + ".backbone.ffn_dim", 1));
  s.push_back(integer(p + ".backbone.patch_size", 1));
  s.push_back(integer(p + ".backbone.vocab_size", 3));
  s.push_back(number(p + ".backbone.dropout", 0.0, 1.0, false, true));
}

std::vector<std::string> adapter_names() {
  std::vector<std::string> names;
  for (const auto& a : builtin_adapters()) names.push_back(a.name);
  return names;
}

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> s;
    s.push_back(object(""));
    s.push_back(integer("seed", 0));
    {
      Field seeds{"seeds", Kind::int_array};
      seeds.lo = 0;
      seeds.nullable = true;
      s.push_back(seeds);
    }
    s.push_back(path_field("taxonomy"));
    {
      Field out{"out", Kind::out_path};
      out.nullable = true;
      s.push_back(out);
    }

    s.push_back(object("ingest"));
    s.push_back({"ingest.inputs", Kind::array});
    s.push_back({"ingest.inputs[]", Kind::path});
    s.push_back(path_field("ingest.image_root"));
    s.push_back(int_array("ingest.year_range", 2, 0, true));
    s.push_back(boolean("ingest.require_images"));

    s.push_back(object("agree"));
    s.push_back(path_field("agree.annotations"));
    s.push_back(string("agree.expert", true));

    s.push_back(object("topics"));
    s.push_back(path_field("topics.posts"));
    s.push_back(path_field("topics.embeddings"));
    s.push_back(integer("topics.reduced_dims", 2));
    s.push_back(integer("topics.neighborhood_size", 2));
    s.push_back(int_array("topics.ngram_range", 2, 1, false));
    s.push_back(boolean("topics.stopword_removal"));
    s.push_back(integer("topics.target_topics", 1, kInf, true));
    s.push_back(integer("topics.min_cluster_size", 2));
    s.push_back(integer("topics.top_keywords", 1));
    s.push_back(integer("topics.representatives", 0));
    s.push_back(string("topics.embedder_checkpoint"));

    s.push_back(object("train"));
    s.push_back(path_field("train.posts"));
    s.push_back(path_field("train.labels"));
    s.push_back(path_field("train.image_root"));
    s.push_back(path_field("train.feature_cache"));
    s.push_back(number("train.train_fraction", 0.0, 1.0, true, true));
    s.push_back(number("train.val_fraction", 0.0, 1.0, true, true));
    add_encoder(s, "train.text_encoder", "text");
    add_encoder(s, "train.image_encoder", "image");
    s.push_back(object("train.model"));
    s.push_back(integer("train.model.input_dim", 1));
    s.push_back(integer("train.model.proj_dim", 1));
    s.push_back(choice("train.model.fusion", {"transformer", "concat", "cross_attention", "none"}));
    s.push_back(integer("train.model.fusion_layers", 1));
    s.push_back(integer("train.model.heads", 1));
    s.push_back(integer("train.model.ffn_dim", 1));
    s.push_back(number("train.model.dropout", 0.0, 1.0, false, true));
    s.push_back(integer("train.model.head_hidden", 1));
    s.push_back(integer("train.model.num_classes", 1));
    s.push_back(choice("train.model.head", {"mlp", "linear"}));
    s.push_back(object("train.training"));
    s.push_back(integer("train.training.batch_size", 1));
    s.push_back(number("train.training.learning_rate", 0.0, kInf, false, false));
    s.push_back(number("train.training.weight_decay", 0.0, kInf, false, false));
    s.push_back(integer("train.training.epochs", 0));
    s.push_back(object("train.training.optimizer"));
    s.push_back(number("train.training.optimizer.beta1", 0.0, 1.0, false, true));
    s.push_back(number("train.training.optimizer.beta2", 0.0, 1.0, false, true));
    s.push_back(number("train.training.optimizer.eps", 0.0, kInf, true, false));
    s.push_back(boolean("train.training.freeze_encoders"));

    s.push_back(object("eval"));
    s.push_back(path_field("eval.posts"));
    s.push_back(path_field("eval.labels"));
    s.push_back(path_field("eval.image_root"));
    s.push_back(path_field("eval.feature_cache"));
    s.push_back(string("eval.column_title"));
    s.push_back({"eval.runs", Kind::array});
    s.push_back(object("eval.runs[]"));
    s.push_back(integer("eval.runs[].seed", 0));
    s.push_back(path_field("eval.runs[].checkpoint"));
    s.push_back(path_field("eval.runs[].predictions"));

    s.push_back(object("zeroshot"));
    s.push_back(path_field("zeroshot.posts"));
    s.push_back(path_field("zeroshot.image_root"));
    s.push_back(path_field("zeroshot.labels"));
    s.push_back(choice("zeroshot.backend", {"recorded", "http"}));
    s.push_back(path_field("zeroshot.responses"));
    s.push_back(choice("zeroshot.adapter", adapter_names()));
    s.push_back(string("zeroshot.endpoint", true));
    s.push_back(object("zeroshot.settings"));
    s.push_back(number("zeroshot.settings.temperature", 0.0, kInf, false, false));
    s.push_back(integer("zeroshot.settings.num_beams", 1));
    s.push_back(integer("zeroshot.settings.max_new_tokens", 1));
    s.push_back(integer("zeroshot.max_in_flight", 1));
    s.push_back(integer("zeroshot.max_retries", 0));

    s.push_back(object("trends"));
    s.push_back(path_field("trends.posts"));
    s.push_back(path_field("trends.predictions"));
    s.push_back(path_field("trends.gazetteer"));
    s.push_back(int_array("trends.years", 0, 0, true));
    {
      Field classes{"trends.classes", Kind::string_array};
      classes.nullable = true;
      s.push_back(classes);
    }
    s.push_back(boolean("trends.render_svg"));
    return s;
  }();
  return fields;
}

const Field* find_field(const std::string& pattern) {
  for (const auto& f : schema()) {
    if (f.path == pattern) return &f;
  }
  return nullptr;
}

std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += sep;
    out += items[i];
  }
  return out;
}

std::string range_text(const Field& f) {
  std::string lo = std::isinf(f.lo) ? "-inf" : fmt::format("{:g}", f.lo);
  std::string hi = std::isinf(f.hi) ? "inf" : fmt::format("{:g}", f.hi);
  return fmt::format("{}{}, {}{}", f.lo_open ? '(' : '[', lo, hi, f.hi_open ? ')' : ']');
}

bool in_range(const Field& f, double v) {
  if (f.lo_open ? !(v > f.lo) : !(v >= f.lo)) return false;
  if (f.hi_open ? !(v < f.hi) : !(v <= f.hi)) return false;
  return true;
}

void check(const json& value, const std::string& pattern, const std::string& shown,
           std::vector<Violation>& out) {
  const Field* f = find_field(pattern);
  const std::string where = shown.empty() ? "<root>" : shown;
  if (f == nullptr) {
    out.push_back({where, "unknown field"});
    return;
  }
  if (value.is_null()) {
    if (!f->nullable) out.push_back({where, "must not be null"});
    return;
  }
  auto child = [&](const std::string& key) {
    return std::pair{pattern.empty() ? key : pattern + "." + key,
                     shown.empty() ? key : shown + "." + key};
  };
  switch (f->kind) {
    case Kind::object:
      if (!value.is_object()) {
        out.push_back({where, "must be an object"});
        return;
      }
      for (const auto& [key, v] : value.items()) {
        auto [p, s] = child(key);
        check(v, p, s, out);
      }
      return;
    case Kind::integer:
      if (!value.is_number_integer()) {
        out.push_back({where, "must be an integer"});
      } else if (!in_range(*f, value.get<double>())) {
        out.push_back({where, fmt::format("must be in {}", range_text(*f))});
      }
      return;
    case Kind::number:
      if (!value.is_number()) {
        out.push_back({where, "must be a number"});
      } else if (!in_range(*f, value.get<double>())) {
        out.push_back({where, fmt::format("must be in {}", range_text(*f))});
      }
      return;
    case Kind::boolean:
      if (!value.is_boolean()) out.push_back({where, "must be true or false"});
      return;
    case Kind::string:
    case Kind::out_path:
      if (!value.is_string()) out.push_back({where, "must be a string"});
      return;
    case Kind::choice:
      if (!value.is_string() ||
          std::find(f->choices.begin(), f->choices.end(), value.get<std::string>()) ==
              f->choices.end()) {
        out.push_back({where, fmt::format("unknown value {} (allowed: {})", value.dump(),
                                          join(f->choices, ", "))});
      }
      return;
    case Kind::path:
      if (!value.is_string()) {
        out.push_back({where, "must be a path string"});
      } else if (!fs::exists(value.get<std::string>())) {
        out.push_back({where, fmt::format("path does not exist: {}", value.get<std::string>())});
      }
      return;
    case Kind::array:
      if (!value.is_array()) {
        out.push_back({where, "must be an array"});
        return;
      }
      for (std::size_t i = 0; i < value.size(); ++i) {
        check(value[i], pattern + "[]", fmt::format("{}[{}]", shown, i), out);
      }
      return;
    case Kind::int_array: {
      if (!value.is_array()) {
        out.push_back({where, "must be an array of integers"});
        return;
      }
      if (f->length != 0 && value.size() != f->length) {
        out.push_back({where, fmt::format("must have exactly {} entries", f->length)});
      }
      for (std::size_t i = 0; i < value.size(); ++i) {
        if (!value[i].is_number_integer() || value[i].get<double>() < f->lo) {
          out.push_back({fmt::format("{}[{}]", shown, i),
                         fmt::format("must be an integer >= {:g}", f->lo)});
        }
      }
      return;
    }
    case Kind::string_array:
      if (!value.is_array() ||
          !std::all_of(value.begin(), value.end(), [](const json& v) { return v.is_string(); })) {
        out.push_back({where, "must be an array of strings"});
      }
      return;
  }
}

bool is_set(const json& config, const std::string& dotted) {
  const json* cur = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot - start);
    if (!cur->is_object() || !cur->contains(key)) return false;
    cur = &(*cur)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return !cur->is_null();
}

const json& at_path(const json& config, const std::string& dotted) {
  return config.at(json::json_pointer("/" + [&] {
    std::string p = dotted;
    std::replace(p.begin(), p.end(), '.', '/');
    return p;
  }()));
}

void require(const json& config, const std::string& dotted, const std::string& command,
             std::vector<Violation>& out) {
  if (!is_set(config, dotted)) out.push_back({dotted, fmt::format("required by {}", command)});
}

void check_encoder(const json& config, const std::string& p, std::vector<Violation>& out) {
  if (!is_set(config, p)) return;
  const json& enc = at_path(config, p);
  if (enc.is_object() && enc.value("backend", "") == "recorded" &&
      enc.value("recorded_path", json()).is_null()) {
    out.push_back({p + ".recorded_path", "required when backend is recorded"});
  }
}

void check_command(const json& config, const std::string& command, std::vector<Violation>& out) {
  if (command == "ingest") {
    if (!is_set(config, "ingest.inputs") || at_path(config, "ingest.inputs").empty()) {
      out.push_back({"ingest.inputs", "required by ingest: at least one post file"});
    }
  } else if (command == "agree") {
    require(config, "agree.annotations", command, out);
  } else if (command == "topics") {
    require(config, "topics.posts", command, out);
    require(config, "topics.embeddings", command, out);
  } else if (command == "train") {
    require(config, "train.posts", command, out);
    require(config, "train.labels", command, out);
  } else if (command == "eval") {
    if (!is_set(config, "eval.runs") || at_path(config, "eval.runs").empty()) {
      out.push_back({"eval.runs", "required by eval: at least one run"});
      return;
    }
    bool any_checkpoint = false;
    const json& runs = at_path(config, "eval.runs");
    if (!runs.is_array()) return;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const json& run = runs[i];
      if (!run.is_object()) continue;
      const bool ck = run.contains("checkpoint") && !run["checkpoint"].is_null();
      const bool pr = run.contains("predictions") && !run["predictions"].is_null();
      if (ck == pr) {
        out.push_back({fmt::format("eval.runs[{}]", i),
                       "needs exactly one of checkpoint or predictions"});
      }
      if (!run.contains("seed")) out.push_back({fmt::format("eval.runs[{}].seed", i), "required"});
      any_checkpoint = any_checkpoint || ck;
    }
    if (any_checkpoint) {
      require(config, "eval.posts", "checkpoint runs", out);
      require(config, "eval.labels", "checkpoint runs", out);
    }
  } else if (command == "zeroshot") {
    require(config, "zeroshot.posts", command, out);
    if (is_set(config, "zeroshot.backend") &&
        at_path(config, "zeroshot.backend") == json("recorded")) {
      require(config, "zeroshot.responses", "the recorded backend", out);
    }
  } else if (command == "trends") {
    require(config, "trends.posts", command, out);
  }
}

// ---- paths -----------------------------------------------------------------

void resolve_paths(json& value, const std::string& pattern, const fs::path& base) {
  const Field* f = find_field(pattern);
  if (f == nullptr || value.is_null()) return;
  auto child = [&](const std::string& key) { return pattern.empty() ? key : pattern + "." + key; };
  switch (f->kind) {
    case Kind::object:
      if (value.is_object()) {
        for (auto& [key, v] : value.items()) resolve_paths(v, child(key), base);
      }
      return;
    case Kind::array:
      if (value.is_array()) {
        for (auto& v : value) resolve_paths(v, pattern + "[]", base);
      }
      return;
    case Kind::path:
    case Kind::out_path:
      if (value.is_string()) {
        fs::path p = value.get<std::string>();
        if (p.is_relative()) p = base / p;
        value = p.lexically_normal().string();
      }
      return;
    default:
      return;
  }
}

void collect_paths(const json& value, const std::string& pattern, std::vector<fs::path>& out) {
  const Field* f = find_field(pattern);
  if (f == nullptr || value.is_null()) return;
  auto child = [&](const std::string& key) { return pattern.empty() ? key : pattern + "." + key; };
  if (f->kind == Kind::object && value.is_object()) {
    for (const auto& [key, v] : value.items()) collect_paths(v, child(key), out);
  } else if (f->kind == Kind::array && value.is_array()) {
    for (const auto& v : value) collect_paths(v, pattern + "[]", out);
  } else if (f->kind == Kind::path && value.is_string()) {
    out.emplace_back(value.get<std::string>());
  }
}

/// Files digest individually; directories digest the sorted list of
/// (relative name, file digest) pairs.
std::string digest(const fs::path& path) {
  if (!fs::is_directory(path)) return sha256_file(path);
  std::vector<std::pair<std::string, std::string>> entries;
  for (const auto& e : fs::recursive_directory_iterator(path)) {
    if (e.is_regular_file()) {
      entries.emplace_back(fs::relative(e.path(), path).generic_string(), sha256_file(e.path()));
    }
  }
  std::sort(entries.begin(), entries.end());
  std::string text;
  for (const auto& [name, hash] : entries) text += name + "\t" + hash + "\n";
  return sha256_hex(text);
}

fs::path normal(const fs::path& p) { return fs::weakly_canonical(fs::absolute(p)); }

// ---- run context -------------------------------------------------------------

class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<Violation> violations)
      : Error("config has violations"), violations(std::move(violations)) {}
  std::vector<Violation> violations;
};

struct Run {
  std::string command;
  json config;
  fs::path out;
  std::vector<std::uint64_t> seeds;
  Taxonomy taxonomy = Taxonomy::wildfire();
  std::set<fs::path> inputs;
  std::vector<std::string> outputs;

  const json& section() const { return config.at(command); }

  fs::path claim(const std::string& rel) {
    const fs::path path = out / rel;
    if (inputs.count(normal(path)) != 0) {
      throw Error(fmt::format("output {} would overwrite an input of this run", path.string()));
    }
    if (std::find(outputs.begin(), outputs.end(), rel) == outputs.end()) outputs.push_back(rel);
    fs::create_directories(path.parent_path());
    return path;
  }
  void write(const std::string& rel, std::string_view content) { write_file(claim(rel), content); }
  void write_json(const std::string& rel, const json& value) { write(rel, dump_json(value)); }
};

std::optional<fs::path> opt_path(const json& section, const char* key) {
  if (!section.contains(key) || section.at(key).is_null()) return std::nullopt;
  return fs::path(section.at(key).get<std::string>());
}

json record_errors(const std::vector<RecordError>& errors) {
  json out = json::array();
  for (const auto& e : errors) {
    out.push_back({{"line", e.line}, {"id", e.id}, {"message", e.message}});
  }
  return out;
}

json item_errors(const std::vector<ItemError>& errors, const std::vector<std::string>& ids) {
  json out = json::array();
  for (const auto& e : errors) {
    out.push_back({{"id", e.index < ids.size() ? ids[e.index] : ""}, {"message", e.message}});
  }
  return out;
}

std::vector<Post> load_posts_checked(const fs::path& path, const fs::path& image_root,
                                     json& errors_out) {
  LoadOptions options;
  options.image_root = image_root;
  auto result = load_posts(path, options);
  errors_out = record_errors(result.errors);
  return std::move(result.posts);
}

std::string letter(const Taxonomy& taxonomy, const Prediction& p) {
  return p ? std::string(1, taxonomy.letter_from_label(*p)) : std::string("UNPARSEABLE");
}

int year_of(Timestamp ts) {
  return static_cast<int>(std::chrono::year_month_day(std::chrono::floor<std::chrono::days>(ts)).year());
}

EncoderInput make_input(const Post& post, const std::optional<fs::path>& image_root) {
  EncoderInput input;
  input.id = post.id;
  input.text = post.text;
  if (!post.image_path.empty()) {
    input.image_path = image_root ? *image_root / post.image_path : fs::path(post.image_path);
  }
  return input;
}

// ---- commands ----------------------------------------------------------------

void cmd_ingest(Run& run) {
  const json& s = run.section();
  LoadOptions options;
  if (auto root = opt_path(s, "image_root")) options.image_root = *root;
  if (!s.at("year_range").is_null()) {
    options.year_range = {s["year_range"][0].get<int>(), s["year_range"][1].get<int>()};
  }
  options.require_images = s.at("require_images").get<bool>();

  std::vector<Post> all;
  json inputs = json::array();
  for (const auto& p : s.at("inputs")) {
    const fs::path path = p.get<std::string>();
    auto result = load_posts(path, options);
    inputs.push_back({{"file", path.filename().string()},
                      {"posts", result.posts.size()},
                      {"errors", record_errors(result.errors)}});
    all.insert(all.end(), result.posts.begin(), result.posts.end());
  }
  const std::vector<Post> unique = dedupe(all);
  write_posts(run.claim("posts.jsonl"), unique);

  std::map<int, std::size_t> per_year;
  for (const auto& post : unique) ++per_year[post.source_year];
  json years = json::object();
  for (const auto& [year, count] : per_year) years[std::to_string(year)] = count;
  run.write_json("ingest_report.json", {{"inputs", inputs},
                                        {"loaded", all.size()},
                                        {"unique", unique.size()},
                                        {"duplicates_removed", all.size() - unique.size()},
                                        {"posts_per_source_year", years}});

  auto queries = [](const std::vector<QuerySpec>& specs) {
    json out = json::array();
    for (const auto& spec : specs) {
      json q = {{"year", spec.year}, {"hashtags", spec.hashtags}, {"query", build_query(spec)}};
      if (spec.keywords) q["keyword_query"] = build_keyword_query(spec);
      out.push_back(q);
    }
    return out;
  };
  run.write_json("queries.json", {{"labeled_collection", queries(labeled_collection_queries())},
                                  {"trend_collection", queries(trend_collection_queries())}});
}

void cmd_agree(Run& run) {
  const json& s = run.section();
  auto loaded = load_annotations(s.at("annotations").get<std::string>(), run.taxonomy);
  std::optional<std::string> expert;
  if (!s.at("expert").is_null()) expert = s.at("expert").get<std::string>();
  const AgreementReport report = agreement_report(loaded.sets, expert);
  const std::string expert_id = expert.value_or(report.roster.front());

  json doc = report.to_json();
  doc["expert"] = expert_id;
  doc["load_errors"] = record_errors(loaded.errors);
  run.write_json("agreement.json", doc);

  std::string table = "| Metric | Value |\n|---|---|\n";
  for (const auto& [name, value] : report.rows()) {
    table += fmt::format("| {} | {:.1f}% |\n", name, 100.0 * value);
  }
  run.write("agreement.md", table);

  std::vector<json> adjudicated;
  for (const auto& set : loaded.sets) {
    const ClassId label = adjudicate(set, expert_id);
    const auto& cls = run.taxonomy.at(label);
    adjudicated.push_back({{"post_id", set.post_id},
                           {"label", cls.name},
                           {"letter", std::string(1, cls.letter)},
                           {"method", strict_majority(set) ? "majority" : "expert"}});
  }
  write_jsonl(run.claim("adjudicated.jsonl"), adjudicated);
}

void cmd_topics(Run& run) {
  const json& s = run.section();
  const TopicModelConfig config = topic_config_from_json(s);
  json load_errors;
  const auto posts = load_posts_checked(s.at("posts").get<std::string>(), {}, load_errors);
  RecordedEmbedder embedder(s.at("embeddings").get<std::string>());
  const EmbedResult embedded = embed_posts(posts, embedder);
  std::vector<Document> docs;
  std::vector<std::string> ids;
  for (const auto& p : posts) ids.push_back(p.id);
  for (std::size_t row : embedded.rows) docs.push_back({posts[row].id, posts[row].text});
  const TopicModel model = fit_topics(embedded.embeddings, docs, config);
  json doc = topics_to_json(model);
  doc["load_errors"] = load_errors;
  doc["embed_errors"] = item_errors(embedded.errors, ids);
  run.write_json("topics.json", doc);
}

struct LabeledData {
  std::vector<LabeledPost> labeled;
  json errors;
};

LabeledData load_labeled(const json& s, const Taxonomy& taxonomy) {
  json post_errors;
  const auto posts = load_posts_checked(s.at("posts").get<std::string>(), {}, post_errors);
  auto labels = load_labels(s.at("labels").get<std::string>(), taxonomy);
  std::vector<RecordError> unmatched;
  LabeledData data;
  data.labeled = join_labels(posts, labels.labels, &unmatched);
  data.errors = {{"posts", post_errors},
                 {"labels", record_errors(labels.errors)},
                 {"unmatched_labels", record_errors(unmatched)}};
  return data;
}

std::vector<Sample> to_samples(const std::vector<LabeledPost>& items,
                               const std::optional<fs::path>& image_root) {
  std::vector<Sample> out;
  out.reserve(items.size());
  for (const auto& item : items) out.push_back({make_input(item.post, image_root), item.label});
  return out;
}

std::vector<std::string> ids_of(const std::vector<LabeledPost>& items) {
  std::vector<std::string> out;
  for (const auto& item : items) out.push_back(item.post.id);
  return out;
}

struct Encoders {
  std::shared_ptr<Encoder> text;
  std::shared_ptr<Encoder> image;
};

Encoders build_encoders(const EncoderConfig& text, const EncoderConfig& image,
                        const std::optional<fs::path>& cache_path, std::uint64_t seed) {
  if (cache_path) {
    auto cache = std::make_shared<const FeatureCache>(
        FeatureCache::read(*cache_path, cache_header_for(text, image)));
    return {make_cached_encoder(cache, Modality::text), make_cached_encoder(cache, Modality::image)};
  }
  return {make_encoder(text, derive_seed(seed, "text_encoder")),
          make_encoder(image, derive_seed(seed, "image_encoder"))};
}

json predictions_json(const std::vector<std::string>& ids, const std::vector<ClassId>& truth,
                      const std::vector<Prediction>& predicted, const Taxonomy& taxonomy) {
  json out = json::array();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out.push_back({{"id", ids[i]},
                   {"truth", std::string(1, taxonomy.letter_from_label(truth[i]))},
                   {"predicted", letter(taxonomy, predicted[i])}});
  }
  return out;
}

void write_eval(Run& run, const std::string& prefix, const EvalReport& report) {
  run.write_json(prefix + "report.json", report_to_json(report, run.taxonomy));
  run.write(prefix + "confusion.csv", confusion_to_csv(report.confusion, run.taxonomy));
}

void write_aggregate(Run& run, const std::vector<EvalReport>& reports,
                     const std::vector<std::uint64_t>& seeds, const std::string& title) {
  const RunAggregate aggregate = aggregate_runs(reports, seeds);
  run.write_json("aggregate.json", aggregate_to_json(aggregate, run.taxonomy));
  run.write("aggregate.md", render_aggregate_table(aggregate, run.taxonomy, title));
}

void cmd_train(Run& run) {
  const json& s = run.section();
  const auto image_root = opt_path(s, "image_root");
  const auto cache_path = opt_path(s, "feature_cache");
  const double train_fraction = s.at("train_fraction").get<double>();
  const double val_fraction = s.at("val_fraction").get<double>();
  const EncoderConfig text_cfg = encoder_config_from_json(s.at("text_encoder"), Modality::text);
  const EncoderConfig image_cfg = encoder_config_from_json(s.at("image_encoder"), Modality::image);
  const FusionModelConfig model_cfg = fusion_config_from_json(s.at("model"));
  if (model_cfg.num_classes != run.taxonomy.size()) {
    throw ConfigError(std::vector<Violation>{{"train.model.num_classes",
                        fmt::format("must equal the taxonomy size {}", run.taxonomy.size())}});
  }
  const LabeledData data = load_labeled(s, run.taxonomy);

  std::vector<EvalReport> reports;
  for (const std::uint64_t seed : run.seeds) {
    const std::string dir = fmt::format("seed_{}/", seed);
    const Split split = stratified_split(data.labeled, {seed, train_fraction});
    const Split inner =
        stratified_split(split.train, {derive_seed(seed, "val_split"), 1.0 - val_fraction});

    TrainConfig train_cfg = train_config_from_json(s.at("training"));
    train_cfg.seed = seed;
    const Encoders enc = build_encoders(text_cfg, image_cfg, cache_path, seed);
    auto model = build_fusion_model(model_cfg, enc.text, enc.image, derive_seed(seed, "init"));
    const TrainResult result =
        train(*model, to_samples(inner.train, image_root), to_samples(inner.test, image_root),
              train_cfg);

    const auto test = to_samples(split.test, image_root);
    std::vector<EncoderInput> inputs;
    std::vector<ClassId> truth;
    for (const auto& sample : test) {
      inputs.push_back(sample.input);
      truth.push_back(sample.label);
    }
    const auto predicted_ids = model->predict(inputs, train_cfg.batch_size);
    const std::vector<Prediction> predicted(predicted_ids.begin(), predicted_ids.end());
    const EvalReport report = evaluate(truth, predicted, run.taxonomy.size());
    reports.push_back(report);

    json metadata = {{"seed", seed},
                     {"streams", seed_streams(seed)},
                     {"train_fraction", train_fraction},
                     {"val_fraction", val_fraction},
                     {"feature_cache", cache_path.has_value()},
                     {"training", to_json(train_cfg)},
                     {"best_epoch", result.best_epoch},
                     {"best_val_weighted_f1", result.best_val_weighted_f1}};
    save_checkpoint(run.claim(dir + "checkpoint.bin"), *model, metadata);
    run.write_json(dir + "history.json", to_json(result));
    run.write_json(dir + "split.json", {{"train", ids_of(inner.train)},
                                        {"val", ids_of(inner.test)},
                                        {"test", ids_of(split.test)}});
    const auto pred_json = predictions_json(ids_of(split.test), truth, predicted, run.taxonomy);
    write_jsonl(run.claim(dir + "predictions.jsonl"),
                std::vector<json>(pred_json.begin(), pred_json.end()));
    write_eval(run, dir, report);
  }
  run.write_json("load_errors.json", data.errors);
  write_aggregate(run, reports, run.seeds, "Custom model");
}

Prediction parse_prediction(const json& value, const Taxonomy& taxonomy, const std::string& where) {
  if (value.is_null()) return std::nullopt;
  const auto text = value.get<std::string>();
  if (text == "UNPARSEABLE") return std::nullopt;
  const auto id = taxonomy.find(text);
  if (!id) throw Error(fmt::format("{}: unknown class \"{}\"", where, text));
  return id;
}

EvalReport eval_predictions(const fs::path& path, const Taxonomy& taxonomy) {
  std::vector<ClassId> truth;
  std::vector<Prediction> predicted;
  for_each_line(path, [&](std::size_t line, const std::string& text) {
    const std::string where = fmt::format("{}:{}", path.filename().string(), line);
    json record;
    try {
      record = json::parse(text);
    } catch (const json::exception& e) {
      throw Error(fmt::format("{}: {}", where, e.what()));
    }
    const auto t = parse_prediction(record.at("truth"), taxonomy, where);
    if (!t) throw Error(fmt::format("{}: truth must be a class", where));
    truth.push_back(*t);
    predicted.push_back(parse_prediction(record.value("predicted", json()), taxonomy, where));
  });
  return evaluate(truth, predicted, taxonomy.size());
}

void cmd_eval(Run& run) {
  const json& s = run.section();
  std::optional<LabeledData> data;
  std::vector<EvalReport> reports;
  std::vector<std::uint64_t> seeds;
  std::size_t index = 0;
  for (const auto& entry : s.at("runs")) {
    const std::uint64_t seed = entry.at("seed").get<std::uint64_t>();
    const std::string prefix = fmt::format("run_{}_seed_{}/", index++, seed);
    EvalReport report;
    if (auto predictions = opt_path(entry, "predictions")) {
      report = eval_predictions(*predictions, run.taxonomy);
    } else {
      const fs::path checkpoint = entry.at("checkpoint").get<std::string>();
      const json header = read_checkpoint_header(checkpoint);
      const json& meta = header.at("metadata");
      if (meta.value("seed", seed) != seed) {
        throw Error(fmt::format("checkpoint {} was trained with seed {}, run declares {}",
                                checkpoint.filename().string(), meta.at("seed").dump(), seed));
      }
      if (!data) data = load_labeled(s, run.taxonomy);
      const auto cache_path = opt_path(s, "feature_cache");
      if (meta.value("feature_cache", false) && !cache_path) {
        throw ConfigError(
            std::vector<Violation>{{"eval.feature_cache", "checkpoint was trained on cached features"}});
      }
      const EncoderConfig text_cfg = encoder_config_from_json(header.at("text_encoder"), Modality::text);
      const EncoderConfig image_cfg =
          encoder_config_from_json(header.at("image_encoder"), Modality::image);
      const Encoders enc = build_encoders(text_cfg, image_cfg, cache_path, seed);
      auto model = build_fusion_model(fusion_config_from_json(header.at("model")), enc.text,
                                      enc.image, derive_seed(seed, "init"));
      load_checkpoint(checkpoint, *model);
      const Split split =
          stratified_split(data->labeled, {seed, meta.at("train_fraction").get<double>()});
      const auto test = to_samples(split.test, opt_path(s, "image_root"));
      std::vector<EncoderInput> inputs;
      std::vector<ClassId> truth;
      for (const auto& sample : test) {
        inputs.push_back(sample.input);
        truth.push_back(sample.label);
      }
      const auto ids = model->predict(inputs);
      const std::vector<Prediction> predicted(ids.begin(), ids.end());
      report = evaluate(truth, predicted, run.taxonomy.size());
      const auto pred_json = predictions_json(ids_of(split.test), truth, predicted, run.taxonomy);
      write_jsonl(run.claim(prefix + "predictions.jsonl"),
                  std::vector<json>(pred_json.begin(), pred_json.end()));
    }
    write_eval(run, prefix, report);
    reports.push_back(report);
    seeds.push_back(seed);
  }
  write_aggregate(run, reports, seeds, s.at("column_title").get<std::string>());
}

void cmd_zeroshot(Run& run) {
  const json& s = run.section();
  const auto image_root = opt_path(s, "image_root");
  json load_errors;
  const auto posts = load_posts_checked(s.at("posts").get<std::string>(), {}, load_errors);

  VlmSettings settings;
  settings.temperature = s.at("settings").at("temperature").get<double>();
  settings.num_beams = s.at("settings").at("num_beams").get<int>();
  settings.max_new_tokens = s.at("settings").at("max_new_tokens").get<int>();
  ZeroShotOptions options;
  options.max_in_flight = s.at("max_in_flight").get<std::size_t>();
  options.max_retries = s.at("max_retries").get<std::size_t>();

  AdapterConfig adapter;
  for (const auto& a : builtin_adapters()) {
    if (a.name == s.at("adapter").get<std::string>()) adapter = a;
  }
  if (!s.at("endpoint").is_null()) adapter.endpoint = s.at("endpoint").get<std::string>();

  std::unique_ptr<VlmClient> client;
  if (s.at("backend") == "recorded") {
    client = std::make_unique<RecordedClient>(s.at("responses").get<std::string>());
  } else {
    client = std::make_unique<HttpChatClient>(adapter);
  }
  const auto results = classify_zeroshot(posts, *client, settings, options,
                                         image_root.value_or(fs::path()), run.taxonomy);

  const PromptPair prompt = build_prompt(run.taxonomy);
  run.write_json("prompt.json", {{"system", prompt.system}, {"user", prompt.user}});
  write_response_log(run.claim("responses.jsonl"), results, run.taxonomy);

  std::map<std::string, std::size_t> counts;
  json failures = json::array();
  for (const auto& r : results) {
    ++counts[letter(run.taxonomy, r.label)];
    if (r.error) failures.push_back({{"id", r.post_id}, {"error", *r.error}, {"retries", r.retries}});
  }
  json summary = {{"model", adapter.name},
                  {"backend", s.at("backend")},
                  {"settings",
                   {{"temperature", settings.temperature},
                    {"num_beams", settings.num_beams},
                    {"max_new_tokens", settings.max_new_tokens}}},
                  {"posts", results.size()},
                  {"label_counts", counts},
                  {"unparseable", counts["UNPARSEABLE"]},
                  {"transport_failures", failures},
                  {"load_errors", load_errors}};

  if (auto labels_path = opt_path(s, "labels")) {
    const auto labels = load_labels(*labels_path, run.taxonomy);
    std::map<std::string, ClassId> by_id(labels.labels.begin(), labels.labels.end());
    std::vector<std::string> ids;
    std::vector<ClassId> truth;
    std::vector<Prediction> predicted;
    for (const auto& r : results) {
      auto it = by_id.find(r.post_id);
      if (it == by_id.end()) continue;
      ids.push_back(r.post_id);
      truth.push_back(it->second);
      predicted.push_back(r.label);
    }
    const auto pred_json = predictions_json(ids, truth, predicted, run.taxonomy);
    write_jsonl(run.claim("predictions.jsonl"), std::vector<json>(pred_json.begin(), pred_json.end()));
    write_eval(run, "", evaluate(truth, predicted, run.taxonomy.size()));
    summary["labeled_posts"] = ids.size();
    summary["label_errors"] = record_errors(labels.errors);
  }
  run.write_json("zeroshot.json", summary);
}

void cmd_trends(Run& run) {
  const json& s = run.section();
  json load_errors;
  const auto posts = load_posts_checked(s.at("posts").get<std::string>(), {}, load_errors);

  std::vector<int> years;
  if (!s.at("years").is_null()) {
    years = s.at("years").get<std::vector<int>>();
  } else {
    std::set<int> seen;
    for (const auto& p : posts) seen.insert(year_of(p.created_at));
    years.assign(seen.begin(), seen.end());
  }

  std::vector<ClassId> classes;
  if (!s.at("classes").is_null()) {
    for (const auto& name : s.at("classes")) classes.push_back(run.taxonomy.parse(name.get<std::string>()));
  } else {
    for (const auto& label : run.taxonomy.canonical_order()) classes.push_back(label.id);
  }

  std::vector<std::pair<Post, ClassId>> predicted;
  if (auto path = opt_path(s, "predictions")) {
    std::map<std::string, ClassId> by_id;
    for_each_line(*path, [&](std::size_t line, const std::string& text) {
      const json record = json::parse(text);
      const std::string where = fmt::format("{}:{}", path->filename().string(), line);
      const auto label = parse_prediction(record.at("predicted"), run.taxonomy, where);
      if (label) by_id.emplace(record.at("id").get<std::string>(), *label);
    });
    for (const auto& p : posts) {
      auto it = by_id.find(p.id);
      if (it != by_id.end()) predicted.emplace_back(p, it->second);
    }
  }

  json year_docs = json::array();
  for (int year : years) {
    const TrendSeries total = weekly_counts(posts, year);
    const std::string total_file = fmt::format("weekly_{}.csv", year);
    run.write(total_file, series_to_csv(total));
    json doc = {{"year", year},
                {"file", total_file},
                {"total", total.total()},
                {"peak_week", format_date(total.buckets[total.argmax()].first)}};
    std::vector<TrendSeries> plotted{total};
    std::vector<std::string> names{"all posts"};
    if (!predicted.empty()) {
      json class_docs = json::array();
      for (const auto& series : class_trend_series(predicted, year, classes, run.taxonomy)) {
        const auto& label = run.taxonomy.at(*series.cls);
        const std::string file = fmt::format("class_{}_{}.csv", year, slugify(label.name));
        run.write(file, series_to_csv(series));
        class_docs.push_back({{"class", label.name},
                              {"file", file},
                              {"total", series.total()},
                              {"peak_week", format_date(series.buckets[series.argmax()].first)}});
        plotted.push_back(series);
        names.push_back(label.name);
      }
      doc["classes"] = class_docs;
    }
    if (s.at("render_svg").get<bool>()) {
      const std::string file = fmt::format("trends_{}.svg", year);
      run.write(file, render_series_svg(plotted, names, fmt::format("Weekly posts, {}", year)));
      doc["chart"] = file;
    }
    year_docs.push_back(doc);
  }

  json summary = {{"week_anchor", "monday"},
                  {"posts", posts.size()},
                  {"predicted_posts", predicted.size()},
                  {"years", year_docs},
                  {"load_errors", load_errors}};
  if (auto gazetteer_path = opt_path(s, "gazetteer")) {
    const Gazetteer gazetteer = Gazetteer::load(*gazetteer_path);
    summary["provinces"] = province_distribution(posts, gazetteer);
  }
  run.write_json("trends.json", summary);
}

void dispatch(Run& run) {
  if (run.command == "ingest") return cmd_ingest(run);
  if (run.command == "agree") return cmd_agree(run);
  if (run.command == "topics") return cmd_topics(run);
  if (run.command == "train") return cmd_train(run);
  if (run.command == "eval") return cmd_eval(run);
  if (run.command == "zeroshot") return cmd_zeroshot(run);
  if (run.command == "trends") return cmd_trends(run);
  throw Error(fmt::format("unknown command {}", run.command));
}

json violations_json(const std::vector<Violation>& violations) {
  json out = json::array();
  for (const auto& v : violations) out.push_back({{"path", v.path}, {"message", v.message}});
  return out;
}

json parse_override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return json(text);
  }
}

}  // namespace

// ---- public ------------------------------------------------------------------

const std::vector<std::string>& commands() {
  static const std::vector<std::string> names{"ingest", "agree",    "topics", "train",
                                              "eval",   "zeroshot", "trends"};
  return names;
}

nlohmann::json default_config() {
  auto encoder = [](const EncoderConfig& c) {
    json j = to_json(c);
    j["recorded_path"] = nullptr;
    return j;
  };
  const TrainConfig train_defaults;
  json training = to_json(train_defaults);
  training.erase("seed");
  training.erase("loss");
  training.erase("selection_metric");
  training["optimizer"].erase("name");
  training["optimizer"].erase("weight_decay_mode");
  json topics = to_json(TopicModelConfig{});
  topics["posts"] = nullptr;
  topics["embeddings"] = nullptr;

  return {
      {"seed", 8},
      {"seeds", nullptr},
      {"taxonomy", nullptr},
      {"out", nullptr},
      {"ingest",
       {{"inputs", json::array()},
        {"image_root", nullptr},
        {"year_range", nullptr},
        {"require_images", false}}},
      {"agree", {{"annotations", nullptr}, {"expert", nullptr}}},
      {"topics", topics},
      {"train",
       {{"posts", nullptr},
        {"labels", nullptr},
        {"image_root", nullptr},
        {"feature_cache", nullptr},
        {"train_fraction", 0.8},
        {"val_fraction", 0.1},
        {"text_encoder", encoder(EncoderConfig::text_default())},
        {"image_encoder", encoder(EncoderConfig::image_default())},
        {"model", to_json(FusionModelConfig{})},
        {"training", training}}},
      {"eval",
       {{"posts", nullptr},
        {"labels", nullptr},
        {"image_root", nullptr},
        {"feature_cache", nullptr},
        {"column_title", "Custom model"},
        {"runs", json::array()}}},
      {"zeroshot",
       {{"posts", nullptr},
        {"image_root", nullptr},
        {"labels", nullptr},
        {"backend", "recorded"},
        {"responses", nullptr},
        {"adapter", "gpt-4o-mini"},
        {"endpoint", nullptr},
        {"settings", {{"temperature", 0.1}, {"num_beams", 1}, {"max_new_tokens", 1024}}},
        {"max_in_flight", 1},
        {"max_retries", 2}}},
      {"trends",
       {{"posts", nullptr},
        {"predictions", nullptr},
        {"gazetteer", nullptr},
        {"years", nullptr},
        {"classes", nullptr},
        {"render_svg", true}}},
  };
}

std::vector<Violation> validate_config(const nlohmann::json& config,
                                       const std::optional<std::string>& command) {
  std::vector<Violation> out;
  check(config, "", "", out);
  if (!config.is_object()) return out;
  check_encoder(config, "train.text_encoder", out);
  check_encoder(config, "train.image_encoder", out);
  if (is_set(config, "train.model")) {
    const json& m = at_path(config, "train.model");
    const auto proj = m.value("proj_dim", json());
    const auto heads = m.value("heads", json());
    const auto fusion = m.value("fusion", std::string("transformer"));
    if (proj.is_number_integer() && heads.is_number_integer() && heads.get<long>() > 0 &&
        (fusion == "transformer" || fusion == "cross_attention") &&
        proj.get<long>() % heads.get<long>() != 0) {
      out.push_back({"train.model.heads", "must divide train.model.proj_dim"});
    }
  }
  if (is_set(config, "topics.ngram_range")) {
    const json& r = at_path(config, "topics.ngram_range");
    if (r.is_array() && r.size() == 2 && r[0].is_number_integer() && r[1].is_number_integer() &&
        r[0].get<long>() > r[1].get<long>()) {
      out.push_back({"topics.ngram_range", "min must not exceed max"});
    }
  }
  if (command) {
    if (std::find(commands().begin(), commands().end(), *command) == commands().end()) {
      out.push_back({"<command>", fmt::format("unknown command \"{}\" (allowed: {})", *command,
                                              join(commands(), ", "))});
    } else {
      check_command(config, *command, out);
    }
  }
  return out;
}

nlohmann::json merge(nlohmann::json base, const nlohmann::json& patch) {
  if (!base.is_object() || !patch.is_object()) return patch;
  for (const auto& [key, value] : patch.items()) {
    base[key] = base.contains(key) ? merge(base[key], value) : value;
  }
  return base;
}

std::string config_hash(const nlohmann::json& config) { return sha256_hex(config.dump()); }

nlohmann::json seed_streams(std::uint64_t seed) {
  return {{"seed", seed},
          {"split", seed},
          {"val_split", derive_seed(seed, "val_split")},
          {"init", derive_seed(seed, "init")},
          {"text_encoder", derive_seed(seed, "text_encoder")},
          {"image_encoder", derive_seed(seed, "image_encoder")},
          {"shuffle", derive_seed(seed, "shuffle")},
          {"dropout", derive_seed(seed, "dropout")}};
}

LoadedConfig load_config(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(fmt::format("{}: {}", path.string(), e.what()));
  }
  if (!doc.is_object()) throw Error(fmt::format("{}: config must be a JSON object", path.string()));
  LoadedConfig loaded;
  if (doc.contains("manifest_version")) {
    loaded.manifest_command = doc.at("command").get<std::string>();
    loaded.manifest_inputs = doc.value("inputs", json::object());
    doc = doc.at("config");
  }
  const fs::path base = fs::absolute(path).parent_path();
  resolve_paths(doc, "", base);
  loaded.config = merge(default_config(), doc);
  return loaded;
}

int run(const RunOptions& options, std::ostream& err) {
  std::optional<fs::path> out_dir;
  auto report = [&](const std::string& type, const std::string& message,
                    const std::vector<Violation>& violations) {
    json doc = {{"status", "error"},
                {"command", options.command},
                {"error", {{"type", type}, {"message", message}}}};
    if (!violations.empty()) doc["error"]["violations"] = violations_json(violations);
    err << dump_json(doc);
    if (out_dir) {
      try {
        write_file(*out_dir / "error.json", dump_json(doc));
      } catch (const std::exception&) {
      }
    }
    return 1;
  };

  try {
    LoadedConfig loaded = load_config(options.config_path);
    if (loaded.manifest_command && *loaded.manifest_command != options.command) {
      return report("config",
                    fmt::format("manifest records command {}, not {}", *loaded.manifest_command,
                                options.command),
                    {});
    }
    json config = loaded.config;
    for (const auto& item : options.overrides) {
      const auto eq = item.find('=');
      if (eq == std::string::npos || eq == 0) {
        return report("config", fmt::format("override \"{}\" is not key=value", item), {});
      }
      std::string pointer = "/" + item.substr(0, eq);
      std::replace(pointer.begin(), pointer.end(), '.', '/');
      json patch;
      patch[json::json_pointer(pointer)] = parse_override_value(item.substr(eq + 1));
      resolve_paths(patch, "", fs::current_path());
      config = merge(config, patch);
    }
    if (!options.seeds.empty()) {
      config["seed"] = options.seeds.front();
      config["seeds"] = options.seeds;
    }
    if (options.out) config["out"] = fs::absolute(*options.out).lexically_normal().string();
    if (!config["out"].is_null()) out_dir = fs::path(config["out"].get<std::string>());

    const auto violations = validate_config(config, options.command);
    if (!violations.empty()) return report("config", "config has violations", violations);
    if (!out_dir) {
      return report("config", "no output directory",
                    {{"out", "pass --out or set out in the config"}});
    }

    Run run;
    run.command = options.command;
    run.out = *out_dir;
    if (!config["seeds"].is_null() && !config["seeds"].empty()) {
      run.seeds = config["seeds"].get<std::vector<std::uint64_t>>();
    } else {
      run.seeds = {config["seed"].get<std::uint64_t>()};
    }
    if (!config["taxonomy"].is_null()) {
      run.taxonomy = Taxonomy::from_json(json::parse(read_file(config["taxonomy"].get<std::string>())));
    }

    // The recorded config leaves out the output location, so a rerun into
    // another directory hashes identically.
    json recorded = config;
    recorded.erase("out");
    run.config = recorded;

    std::vector<fs::path> input_paths;
    collect_paths(config["taxonomy"], "taxonomy", input_paths);
    collect_paths(config[options.command], options.command, input_paths);
    json inputs = json::object();
    for (const auto& p : input_paths) {
      inputs[p.string()] = digest(p);
      run.inputs.insert(normal(p));
    }
    for (const auto& [path, hash] : loaded.manifest_inputs.items()) {
      if (inputs.contains(path) && inputs[path] != hash) {
        err << fmt::format("warning: input {} changed since the manifest was written\n", path);
      }
    }
    fs::create_directories(run.out);

    dispatch(run);

    json outputs = json::object();
    for (const auto& rel : run.outputs) outputs[rel] = sha256_file(run.out / rel);
    json seeds = json::array();
    for (auto s : run.seeds) seeds.push_back(seed_streams(s));
    const json manifest = {{"manifest_version", kManifestVersion},
                           {"command", options.command},
                           {"tool_version", kToolVersion},
                           {"config", recorded},
                           {"config_hash", config_hash(recorded)},
                           {"seeds", seeds},
                           {"inputs", inputs},
                           {"outputs", outputs}};
    run.claim("manifest.json");
    write_file(run.out / "manifest.json", dump_json(manifest));
    return 0;
  } catch (const ConfigError& e) {
    return report("config", e.what(), e.violations);
  } catch (const json::exception& e) {
    return report("input", e.what(), {});
  } catch (const std::exception& e) {
    return report("runtime", e.what(), {});
  }
}

int main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal crisis-post triage pipeline"};
  app.name("triage");
  RunOptions options;
  std::string config_path;
  std::string out_path;
  bool validate_only = false;
  bool print_defaults = false;
  app.add_option("command", options.command, "One of: " + join(commands(), ", "));
  app.add_option("--config", config_path, "Config file or run manifest");
  app.add_option("--seed", options.seeds, "Base seed; repeat or comma-separate for several")
      ->delimiter(',');
  app.add_option("--out", out_path, "Output directory");
  app.add_option("--set", options.overrides, "Override a config field: dotted.path=value");
  app.add_flag("--validate", validate_only, "Only validate the config and print violations");
  app.add_flag("--print-defaults", print_defaults, "Print the default config and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }
  if (print_defaults) {
    out << dump_json(default_config());
    return 0;
  }
  if (options.command.empty() ||
      std::find(commands().begin(), commands().end(), options.command) == commands().end()) {
    err << (options.command.empty() ? std::string("missing command")
                                    : fmt::format("unknown command \"{}\"", options.command))
        << "\n" << app.help();
    return 2;
  }
  if (config_path.empty()) {
    err << "--config is required\n" << app.help();
    return 2;
  }
  options.config_path = config_path;
  if (!out_path.empty()) options.out = fs::path(out_path);

  if (validate_only) {
    try {
      const json config = load_config(options.config_path).config;
      const auto violations = validate_config(config, options.command);
      out << dump_json({{"ok", violations.empty()}, {"violations", violations_json(violations)}});
      return violations.empty() ? 0 : 1;
    } catch (const std::exception& e) {
      err << dump_json({{"status", "error"}, {"error", {{"type", "config"}, {"message", e.what()}}}});
      return 1;
    }
  }
  return run(options, err);
}

}  // namespace triage::cli
