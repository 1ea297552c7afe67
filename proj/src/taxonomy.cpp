#include "triage/taxonomy.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include <fmt/format.h>

#include "triage/error.hpp"

namespace triage {

namespace {

std::string lower(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string trim(std::string_view text) {
  auto begin = text.find_first_not_of(" \t\r\n");
  if (begin == std::string_view::npos) return {};
  auto end = text.find_last_not_of(" \t\r\n");
  return std::string(text.substr(begin, end - begin + 1));
}

std::vector<ClassLabel> wildfire_labels() {
  struct Row {
    const char* name;
    const char* description;
    const char* hint;
    std::size_t count;
    std::vector<std::string> aliases;
  };
  // Letter order follows the zero-shot prompt options.
  const std::vector<Row> rows = {
      {"Evacuees", "Information relating to evacuees, their movements, needs, location.",
       "information relating to evacuees, their movements, needs, location, etc", 252, {}},
      {"General Information",
       "General info about the wildfire situation, such as total hectares burned.",
       "GENERAL facts about the wildfire situation, hectares burned", 170, {}},
      {"Preparedness",
       "Information for the general public to prepare themselves and their property.",
       "information for the general public to prepare themselves and property for wildfires", 264,
       {}},
      {"Weather Reports", "Information relating to the weather with a specific location mentioned.",
       "information relating to the weather, satellite imagery, radar imagery", 296, {}},
      {"Warnings & Status Updates",
       "Fire bans in certain areas, new information about a specific area, updates from officials.",
       "warnings/updates to the public from authoritative bodies, fire bans, specific information "
       "relating to a certain time or area",
       669,
       {"Warnings and Status Updates"}},
      {"Reports of Actions of Responders",
       "Actions of responders within specific areas or times, including prescribed burns.",
       "prescribed burns, responders responding to a specific location", 356, {}},
      {"Infrastructure",
       "Detours, road closures, damage to infrastructure (e.g., utility poles, highways), repairs "
       "by crews.",
       "road closures, damaged buildings or property, traffic", 264, {}},
      {"Political",
       "Posts directed towards political figures or parties (excluding situation updates).",
       "mentions of political or public figures or parties", 329, {}},
      {"Insurance", "Information relating to insurance, employment insurance, and EI benefits.",
       "mentions of insurance", 158, {}},
      {"Advertisement",
       "Posts about food, restaurants, off-topic ads for services (e.g., apps, air purifiers, not "
       "insurance-related).",
       "information about restaurants, food, apps or services", 117, {}},
      {"Smoke & Air Quality",
       "Tweets related to or showing signs of smoke or the current air quality.",
       "information about smoke or air quality, masks, breathing", 1128,
       {"Smoke and Air Quality"}},
      {"Support", "Mental health and financial support, temporary housing for livestock.",
       "information about financial, mental health, or other types of support for people", 178,
       {}},
      {"Other",
       "No 'useful' information, focusing on images (e.g., scenery), general complaining, or "
       "irrelevant content.",
       "the post does not fit well in one of the previous categories", 507, {}},
  };
  std::vector<ClassLabel> labels;
  labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    ClassLabel label;
    label.id = ClassId{i};
    label.letter = static_cast<char>('A' + i);
    label.name = rows[i].name;
    label.description = rows[i].description;
    label.prompt_hint = rows[i].hint;
    label.reference_count = rows[i].count;
    label.aliases = rows[i].aliases;
    labels.push_back(std::move(label));
  }
  return labels;
}

}  // namespace

Taxonomy::Taxonomy(std::vector<ClassLabel> labels) : labels_(std::move(labels)) {
  if (labels_.empty() || labels_.size() > 26) {
    throw Error(fmt::format("taxonomy must have 1..26 classes, got {}", labels_.size()));
  }
  std::set<std::string> names;
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    auto& label = labels_[i];
    label.id = ClassId{i};
    label.letter = static_cast<char>('A' + i);
    if (label.name.empty()) throw Error(fmt::format("class {} has an empty name", i));
    if (!names.insert(lower(label.name)).second) {
      throw Error(fmt::format("duplicate class name: {}", label.name));
    }
  }
}

const Taxonomy& Taxonomy::wildfire() {
  static const Taxonomy instance(wildfire_labels());
  return instance;
}

const ClassLabel& Taxonomy::at(ClassId id) const {
  if (id.value >= labels_.size()) {
    throw Error(fmt::format("class index {} out of range [0, {})", id.value, labels_.size()));
  }
  return labels_[id.value];
}

const ClassLabel& Taxonomy::label_from_letter(char letter) const {
  const int upper = std::toupper(static_cast<unsigned char>(letter));
  const int index = upper - 'A';
  if (index < 0 || static_cast<std::size_t>(index) >= labels_.size()) {
    throw Error(fmt::format("letter '{}' is outside A-{}", letter,
                            static_cast<char>('A' + labels_.size() - 1)));
  }
  return labels_[static_cast<std::size_t>(index)];
}

std::optional<ClassId> Taxonomy::find(std::string_view name_or_letter) const {
  const std::string key = lower(trim(name_or_letter));
  if (key.empty()) return std::nullopt;
  if (key.size() == 1) {
    const int index = key[0] - 'a';
    if (index >= 0 && static_cast<std::size_t>(index) < labels_.size()) {
      return ClassId{static_cast<std::size_t>(index)};
    }
    return std::nullopt;
  }
  for (const auto& label : labels_) {
    if (lower(label.name) == key) return label.id;
    for (const auto& alias : label.aliases) {
      if (lower(alias) == key) return label.id;
    }
  }
  return std::nullopt;
}

ClassId Taxonomy::parse(std::string_view name_or_letter) const {
  if (auto id = find(name_or_letter)) return *id;
  throw Error(fmt::format("unknown class label: \"{}\"", name_or_letter));
}

std::size_t Taxonomy::total_reference_count() const {
  std::size_t total = 0;
  for (const auto& label : labels_) total += label.reference_count;
  return total;
}

nlohmann::json Taxonomy::to_json() const {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& label : labels_) {
    classes.push_back({{"letter", std::string(1, label.letter)},
                       {"name", label.name},
                       {"description", label.description},
                       {"prompt_hint", label.prompt_hint},
                       {"reference_count", label.reference_count},
                       {"aliases", label.aliases}});
  }
  return {{"classes", classes}};
}

Taxonomy Taxonomy::from_json(const nlohmann::json& doc) {
  std::vector<ClassLabel> labels;
  for (const auto& entry : doc.at("classes")) {
    ClassLabel label;
    label.name = entry.at("name").get<std::string>();
    label.description = entry.value("description", "");
    label.prompt_hint = entry.value("prompt_hint", "");
    label.reference_count = entry.value("reference_count", std::size_t{0});
    label.aliases = entry.value("aliases", std::vector<std::string>{});
    labels.push_back(std::move(label));
  }
  return Taxonomy(std::move(labels));
}

std::string slugify(std::string_view name) {
  std::string out;
  bool pending_sep = false;
  for (unsigned char c : name) {
    if (std::isalnum(c)) {
      if (pending_sep && !out.empty()) out.push_back('_');
      out.push_back(static_cast<char>(std::tolower(c)));
      pending_sep = false;
    } else {
      pending_sep = true;
    }
  }
  return out;
}

}  // namespace triage
