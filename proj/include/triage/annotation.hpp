#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "triage/corpus.hpp"
#include "triage/taxonomy.hpp"

namespace triage {

struct Vote {
  std::string annotator;
  ClassId label;
};

struct AnnotationSet {
  std::string post_id;
  std::vector<Vote> votes;
  std::optional<ClassId> final_label;
  std::set<std::string> flags;
};

/// Strict-majority label when one exists (more than half the votes),
/// otherwise the expert's vote. Throws when there are no votes, or when
/// there is no majority and the expert did not vote.
ClassId adjudicate(const AnnotationSet& set, const std::string& expert);

/// Label with more than half of the votes, if any.
std::optional<ClassId> strict_majority(const AnnotationSet& set);

/// Chance-corrected agreement between two raters, with chance agreement
/// from each rater's own marginal label frequencies. When chance agreement
/// is 1 (both raters used one identical label throughout) the result is 1
/// by convention.
double cohen_kappa(const std::vector<ClassId>& a, const std::vector<ClassId>& b);

/// Fleiss' kappa over an items x raters table. Every item must carry the
/// same number (>= 2) of ratings. Returns 1 when every rating in the table
/// is the same category.
double fleiss_kappa(const std::vector<std::vector<ClassId>>& table);

struct AgreementReport {
  std::vector<std::string> roster;
  std::size_t items = 0;
  double majority_rate = 0.0;
  double full_rate = 0.0;
  /// Fraction of items where the adjudicated label equals the annotator's.
  std::map<std::string, double> vote_vs_annotator;
  std::map<std::pair<std::string, std::string>, double> pairwise_cohen;
  double fleiss = 0.0;

  /// Rows named as in the published agreement table, in that order.
  std::vector<std::pair<std::string, double>> rows() const;
  nlohmann::json to_json() const;
};

/// Every set must carry exactly the same annotators. The expert defaults
/// to the first annotator of the roster (order of first appearance).
AgreementReport agreement_report(const std::vector<AnnotationSet>& sets,
                                 std::optional<std::string> expert = std::nullopt);

struct AnnotationLoadResult {
  std::vector<AnnotationSet> sets;
  std::vector<RecordError> errors;
};

/// Reads {post_id, annotator_id, label, flags} lines and groups them by
/// post in order of first appearance. A repeated (post, annotator) pair
/// is reported and skipped.
AnnotationLoadResult load_annotations(const std::filesystem::path& path,
                                      const Taxonomy& taxonomy);

}  // namespace triage
