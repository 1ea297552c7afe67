#pragma once

#include <compare>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace triage {

/// Index of a class in canonical (prompt-letter) order.
struct ClassId {
  std::size_t value = 0;
  friend auto operator<=>(const ClassId&, const ClassId&) = default;
};

struct ClassLabel {
  ClassId id;
  char letter = 'A';
  std::string name;
  std::string description;
  /// Parenthetical shown next to the option in the zero-shot prompt.
  std::string prompt_hint;
  /// Count in the released labeled corpus. Metadata only.
  std::size_t reference_count = 0;
  /// Other spellings accepted when parsing label files.
  std::vector<std::string> aliases;
};

/// Ordered class scheme. Letters run A, B, C, ... in canonical order.
class Taxonomy {
 public:
  explicit Taxonomy(std::vector<ClassLabel> labels);

  /// The 13-class wildfire scheme.
  static const Taxonomy& wildfire();

  std::size_t size() const { return labels_.size(); }
  const std::vector<ClassLabel>& canonical_order() const { return labels_; }
  const ClassLabel& at(ClassId id) const;

  /// Case-insensitive letter lookup. Throws triage::Error outside the range.
  const ClassLabel& label_from_letter(char letter) const;
  char letter_from_label(ClassId id) const { return at(id).letter; }

  /// Matches canonical names, aliases and single letters, ignoring case.
  std::optional<ClassId> find(std::string_view name_or_letter) const;
  /// As find(), but throws with the offending text.
  ClassId parse(std::string_view name_or_letter) const;

  std::size_t total_reference_count() const;

  nlohmann::json to_json() const;
  static Taxonomy from_json(const nlohmann::json& doc);

 private:
  std::vector<ClassLabel> labels_;
};

/// Filename-safe form of a class name ("Smoke & Air Quality" -> "smoke_air_quality").
std::string slugify(std::string_view name);

}  // namespace triage
