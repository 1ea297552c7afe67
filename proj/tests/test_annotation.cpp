#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "triage/error.hpp"
#include "triage/annotation.hpp"
#include "triage/util/io.hpp"
#include "triage/util/rng.hpp"

using namespace triage;
using triage::testing::fixture;
using triage::testing::oracle_cohen;
using triage::testing::oracle_fleiss;
using triage::testing::to_ids;

namespace {

AnnotationSet make_set(const std::string& id, const std::vector<std::size_t>& labels) {
  AnnotationSet s;
  s.post_id = id;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    s.votes.push_back({"ann" + std::to_string(i + 1), ClassId{labels[i]}});
  }
  return s;
}

}  // namespace

TEST(Adjudicate, MajorityElseExpert) {
  EXPECT_EQ(adjudicate(make_set("a", {3, 3, 5}), "ann3").value, 3u);
  EXPECT_EQ(adjudicate(make_set("b", {1, 2, 5}), "ann2").value, 2u);
  EXPECT_EQ(adjudicate(make_set("c", {1, 2, 5}), "ann1").value, 1u);
  // a tie in an even panel is no majority
  EXPECT_FALSE(strict_majority(make_set("d", {4, 4, 6, 6})).has_value());
  EXPECT_EQ(adjudicate(make_set("d", {4, 4, 6, 6}), "ann4").value, 6u);
  EXPECT_THROW(adjudicate(make_set("e", {1, 2, 5}), "ann9"), Error);
  EXPECT_THROW(adjudicate(make_set("f", {}), "ann1"), Error);
}

TEST(Kappa, DegenerateCases) {
  EXPECT_DOUBLE_EQ(cohen_kappa(to_ids({2, 2, 2}), to_ids({2, 2, 2})), 1.0);
  EXPECT_DOUBLE_EQ(cohen_kappa(to_ids({0, 1, 2, 0}), to_ids({0, 1, 2, 0})), 1.0);
  EXPECT_DOUBLE_EQ(fleiss_kappa({to_ids({1, 1}), to_ids({1, 1})}), 1.0);
  EXPECT_THROW(cohen_kappa(to_ids({1}), to_ids({1, 2})), Error);
  EXPECT_THROW(fleiss_kappa({to_ids({1, 1}), to_ids({1})}), Error);
}

TEST(Kappa, HandWorkedExample) {
  // 2x2 table [[20, 5], [10, 15]]: po = 0.7, pe = 0.5, kappa = 0.4
  std::vector<std::size_t> a, b;
  auto add = [&](std::size_t x, std::size_t y, int n) {
    for (int i = 0; i < n; ++i) {
      a.push_back(x);
      b.push_back(y);
    }
  };
  add(0, 0, 20);
  add(0, 1, 5);
  add(1, 0, 10);
  add(1, 1, 15);
  EXPECT_NEAR(cohen_kappa(to_ids(a), to_ids(b)), 0.4, 1e-12);
}

TEST(Kappa, MatchesOracleOnRandomTables) {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(150);
    const std::size_t k = 2 + rng.below(12);
    std::vector<std::vector<std::size_t>> rows(n, std::vector<std::size_t>(3));
    std::vector<std::vector<ClassId>> table(n);
    std::vector<std::size_t> r0(n), r1(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (auto& x : rows[i]) x = rng.below(k);
      table[i] = to_ids(rows[i]);
      r0[i] = rows[i][0];
      r1[i] = rows[i][1];
    }
    EXPECT_NEAR(cohen_kappa(to_ids(r0), to_ids(r1)), oracle_cohen(r0, r1, k), 1e-9);
    EXPECT_NEAR(fleiss_kappa(table), oracle_fleiss(rows, k), 1e-9);
  }
}

TEST(Kappa, Symmetric) {
  Rng rng(4);
  std::vector<std::size_t> a(60), b(60);
  for (auto& x : a) x = rng.below(5);
  for (auto& x : b) x = rng.below(5);
  EXPECT_DOUBLE_EQ(cohen_kappa(to_ids(a), to_ids(b)), cohen_kappa(to_ids(b), to_ids(a)));
}

TEST(AgreementReport, MatchesGoldenFixture) {
  const auto& taxonomy = Taxonomy::wildfire();
  const auto loaded = load_annotations(fixture("annotations_synthetic.jsonl"), taxonomy);
  ASSERT_TRUE(loaded.errors.empty());
  const json golden = json::parse(read_file(fixture("agreement_golden.json")));
  const auto report = agreement_report(loaded.sets);
  EXPECT_EQ(report.items, golden.at("items").get<std::size_t>());
  EXPECT_EQ(report.roster, golden.at("roster").get<std::vector<std::string>>());
  const auto rows = report.rows();
  ASSERT_EQ(rows.size(), golden.at("rows").size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].first, golden["rows"][i]["metric"].get<std::string>());
    EXPECT_NEAR(rows[i].second, golden["rows"][i]["value"].get<double>(), 1e-9) << rows[i].first;
  }
  const auto& expected = golden.at("adjudicated");
  ASSERT_EQ(expected.size(), loaded.sets.size());
  for (std::size_t i = 0; i < loaded.sets.size(); ++i) {
    EXPECT_EQ(loaded.sets[i].post_id, expected[i]["post_id"].get<std::string>());
    EXPECT_EQ(taxonomy.at(adjudicate(loaded.sets[i], "ann1")).name,
              expected[i]["label"].get<std::string>());
  }
}

TEST(AgreementReport, MajorityAtLeastFull) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<AnnotationSet> sets;
    const std::size_t k = 1 + rng.below(5);
    for (int i = 0; i < 40; ++i) {
      sets.push_back(make_set("p" + std::to_string(i), {rng.below(k), rng.below(k), rng.below(k)}));
    }
    const auto report = agreement_report(sets);
    EXPECT_GE(report.majority_rate, report.full_rate);
    EXPECT_GE(report.full_rate, 0.0);
    EXPECT_LE(report.majority_rate, 1.0);
  }
}

TEST(AgreementReport, RosterMismatchRejected) {
  auto a = make_set("a", {1, 1, 1});
  auto b = make_set("b", {1, 1});
  EXPECT_THROW(agreement_report({a, b}), Error);
}

TEST(LoadAnnotations, DuplicatePairReported) {
  triage::testing::TempDir dir;
  write_file(dir / "a.jsonl",
             "{\"post_id\":\"p\",\"annotator_id\":\"x\",\"label\":\"Evacuees\",\"flags\":[]}\n"
             "{\"post_id\":\"p\",\"annotator_id\":\"x\",\"label\":\"Other\",\"flags\":[]}\n"
             "{\"post_id\":\"p\",\"annotator_id\":\"y\",\"label\":\"Bogus\",\"flags\":[]}\n"
             "{\"post_id\":\"p\",\"annotator_id\":\"z\",\"label\":\"L\",\"flags\":[\"sarcasm\"]}\n");
  const auto loaded = load_annotations(dir / "a.jsonl", Taxonomy::wildfire());
  ASSERT_EQ(loaded.sets.size(), 1u);
  EXPECT_EQ(loaded.sets[0].votes.size(), 2u);
  EXPECT_EQ(loaded.sets[0].flags.count("sarcasm"), 1u);
  ASSERT_EQ(loaded.errors.size(), 2u);
  EXPECT_EQ(loaded.errors[0].line, 2u);
  EXPECT_EQ(loaded.errors[1].line, 3u);
}
