#include "triage/annotation.hpp"

#include <algorithm>
#include <unordered_map>

#include <fmt/format.h>

#include "triage/error.hpp"
#include "triage/util/io.hpp"

namespace triage {

std::optional<ClassId> strict_majority(const AnnotationSet& set) {
  std::map<ClassId, std::size_t> tally;
  for (const auto& vote : set.votes) ++tally[vote.label];
  for (const auto& [label, count] : tally) {
    if (2 * count > set.votes.size()) return label;
  }
  return std::nullopt;
}

ClassId adjudicate(const AnnotationSet& set, const std::string& expert) {
  if (set.votes.empty()) {
    throw Error(fmt::format("post {} has no votes to adjudicate", set.post_id));
  }
  if (auto label = strict_majority(set)) return *label;
  for (const auto& vote : set.votes) {
    if (vote.annotator == expert) return vote.label;
  }
  throw Error(fmt::format("post {} has no majority and expert \"{}\" did not vote", set.post_id,
                          expert));
}

double cohen_kappa(const std::vector<ClassId>& a, const std::vector<ClassId>& b) {
  if (a.size() != b.size()) {
    throw Error(fmt::format("cohen_kappa: length mismatch ({} vs {})", a.size(), b.size()));
  }
  if (a.empty()) throw Error("cohen_kappa: empty label sequences");
  const double n = static_cast<double>(a.size());
  std::map<ClassId, std::size_t> marginal_a;
  std::map<ClassId, std::size_t> marginal_b;
  std::size_t agree = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++marginal_a[a[i]];
    ++marginal_b[b[i]];
    if (a[i] == b[i]) ++agree;
  }
  double expected = 0.0;
  for (const auto& [label, count] : marginal_a) {
    if (auto it = marginal_b.find(label); it != marginal_b.end()) {
      expected += (static_cast<double>(count) / n) * (static_cast<double>(it->second) / n);
    }
  }
  const double observed = static_cast<double>(agree) / n;
  if (expected >= 1.0) return 1.0;
  return (observed - expected) / (1.0 - expected);
}

double fleiss_kappa(const std::vector<std::vector<ClassId>>& table) {
  if (table.empty()) throw Error("fleiss_kappa: empty table");
  const std::size_t raters = table.front().size();
  if (raters < 2) throw Error("fleiss_kappa: need at least two ratings per item");
  std::map<ClassId, double> category_totals;
  double agreement_sum = 0.0;
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (table[i].size() != raters) {
      throw Error(fmt::format("fleiss_kappa: ragged table, item {} has {} ratings, expected {}", i,
                              table[i].size(), raters));
    }
    std::map<ClassId, std::size_t> counts;
    for (ClassId label : table[i]) ++counts[label];
    double squares = 0.0;
    for (const auto& [label, count] : counts) {
      squares += static_cast<double>(count * count);
      category_totals[label] += static_cast<double>(count);
    }
    const double r = static_cast<double>(raters);
    agreement_sum += (squares - r) / (r * (r - 1.0));
  }
  const double items = static_cast<double>(table.size());
  const double mean_agreement = agreement_sum / items;
  const double total_ratings = items * static_cast<double>(raters);
  double chance = 0.0;
  for (const auto& [label, total] : category_totals) {
    const double p = total / total_ratings;
    chance += p * p;
  }
  if (chance >= 1.0) return 1.0;
  return (mean_agreement - chance) / (1.0 - chance);
}

std::vector<std::pair<std::string, double>> AgreementReport::rows() const {
  std::vector<std::pair<std::string, double>> out;
  const std::string majority_name = roster.size() == 3
                                        ? "Majority Agreement (2 same)"
                                        : "Majority Agreement (more than half same)";
  out.emplace_back(majority_name, majority_rate);
  out.emplace_back("Full Agreement (all same)", full_rate);
  for (std::size_t i = 0; i < roster.size(); ++i) {
    out.emplace_back(fmt::format("Vote between all/annotator {}", i + 1),
                     vote_vs_annotator.at(roster[i]));
  }
  for (std::size_t i = 0; i < roster.size(); ++i) {
    for (std::size_t j = i + 1; j < roster.size(); ++j) {
      out.emplace_back(fmt::format("Cohen's Kappa annotator {}-{}", i + 1, j + 1),
                       pairwise_cohen.at({roster[i], roster[j]}));
    }
  }
  out.emplace_back("Fleiss' Kappa", fleiss);
  return out;
}

nlohmann::json AgreementReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& [name, value] : rows()) {
    rows_json.push_back({{"metric", name},
                         {"value", value},
                         {"percent", fmt::format("{:.1f}%", 100.0 * value)}});
  }
  return {{"roster", roster}, {"items", items}, {"rows", rows_json}};
}

AgreementReport agreement_report(const std::vector<AnnotationSet>& sets,
                                 std::optional<std::string> expert) {
  if (sets.empty()) throw Error("agreement_report: no annotation sets");
  AgreementReport report;
  for (const auto& vote : sets.front().votes) report.roster.push_back(vote.annotator);
  std::vector<std::string> sorted_roster = report.roster;
  std::sort(sorted_roster.begin(), sorted_roster.end());
  if (std::adjacent_find(sorted_roster.begin(), sorted_roster.end()) != sorted_roster.end()) {
    throw Error(fmt::format("post {} has repeated annotators", sets.front().post_id));
  }
  if (report.roster.size() < 2) throw Error("agreement_report: need at least two annotators");
  const std::string expert_id = expert.value_or(report.roster.front());

  const std::size_t raters = report.roster.size();
  std::vector<std::vector<ClassId>> by_annotator(raters);
  std::vector<std::vector<ClassId>> table;
  std::vector<std::size_t> matches_vote(raters, 0);
  std::size_t majority = 0;
  std::size_t full = 0;

  for (const auto& set : sets) {
    std::unordered_map<std::string, ClassId> votes;
    for (const auto& vote : set.votes) votes.emplace(vote.annotator, vote.label);
    if (votes.size() != raters || set.votes.size() != raters) {
      throw Error(fmt::format("post {}: annotator roster differs from the first post", set.post_id));
    }
    std::vector<ClassId> row;
    for (const auto& annotator : report.roster) {
      auto it = votes.find(annotator);
      if (it == votes.end()) {
        throw Error(fmt::format("post {}: missing vote from annotator {}", set.post_id, annotator));
      }
      row.push_back(it->second);
    }
    if (strict_majority(set)) ++majority;
    if (std::all_of(row.begin(), row.end(), [&](ClassId c) { return c == row.front(); })) ++full;
    const ClassId voted = adjudicate(set, expert_id);
    for (std::size_t r = 0; r < raters; ++r) {
      by_annotator[r].push_back(row[r]);
      if (row[r] == voted) ++matches_vote[r];
    }
    table.push_back(std::move(row));
  }

  const double n = static_cast<double>(sets.size());
  report.items = sets.size();
  report.majority_rate = static_cast<double>(majority) / n;
  report.full_rate = static_cast<double>(full) / n;
  for (std::size_t r = 0; r < raters; ++r) {
    report.vote_vs_annotator[report.roster[r]] = static_cast<double>(matches_vote[r]) / n;
    for (std::size_t s = r + 1; s < raters; ++s) {
      report.pairwise_cohen[{report.roster[r], report.roster[s]}] =
          cohen_kappa(by_annotator[r], by_annotator[s]);
    }
  }
  report.fleiss = fleiss_kappa(table);
  return report;
}

AnnotationLoadResult load_annotations(const fs::path& path, const Taxonomy& taxonomy) {
  AnnotationLoadResult result;
  std::unordered_map<std::string, std::size_t> index;
  for_each_line(path, [&](std::size_t line, const std::string& text) {
    std::string post_id;
    try {
      const json record = json::parse(text);
      const auto& raw_id = record.at("post_id");
      post_id = raw_id.is_string() ? raw_id.get<std::string>() : raw_id.dump();
      const auto& raw_annotator = record.at("annotator_id");
      const std::string annotator =
          raw_annotator.is_string() ? raw_annotator.get<std::string>() : raw_annotator.dump();
      const std::string label = record.at("label").get<std::string>();
      auto cls = taxonomy.find(label);
      if (!cls) {
        result.errors.push_back({line, post_id, fmt::format("unknown label \"{}\"", label)});
        return;
      }
      auto [it, inserted] = index.emplace(post_id, result.sets.size());
      if (inserted) result.sets.push_back(AnnotationSet{post_id, {}, std::nullopt, {}});
      auto& set = result.sets[it->second];
      const bool repeated = std::any_of(set.votes.begin(), set.votes.end(),
                                        [&](const Vote& v) { return v.annotator == annotator; });
      if (repeated) {
        result.errors.push_back(
            {line, post_id, fmt::format("annotator {} voted twice", annotator)});
        return;
      }
      set.votes.push_back({annotator, *cls});
      if (auto flags = record.find("flags"); flags != record.end() && flags->is_array()) {
        for (const auto& flag : *flags) set.flags.insert(flag.get<std::string>());
      }
    } catch (const json::exception& e) {
      result.errors.push_back({line, post_id, fmt::format("malformed record: {}", e.what())});
    }
  });
  return result;
}

}  // namespace triage
