#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "support.hpp"
#include "triage/error.hpp"
#include "triage/topics.hpp"
#include "triage/util/io.hpp"

using namespace triage;
using triage::testing::fixture;

namespace {

struct FixtureModel {
  TopicModel model;
  std::map<std::string, int> truth;
};

const FixtureModel& fixture_model() {
  static const FixtureModel cached = [] {
    FixtureModel f;
    const auto posts = load_posts(fixture("topics_posts.jsonl")).posts;
    RecordedEmbedder embedder(fixture("topics_embeddings.jsonl"));
    const auto embedded = embed_posts(posts, embedder);
    std::vector<Document> docs;
    for (auto row : embedded.rows) docs.push_back({posts[row].id, posts[row].text});
    f.model = fit_topics(embedded.embeddings, docs, TopicModelConfig{});
    for_each_line(fixture("topics_truth.jsonl"), [&](std::size_t, const std::string& line) {
      const json j = json::parse(line);
      f.truth[j.at("post_id").get<std::string>()] = j.at("cluster").get<int>();
    });
    return f;
  }();
  return cached;
}

nn::Matrix two_blobs(std::size_t per_blob, std::uint64_t seed) {
  Rng rng(seed);
  nn::Matrix x(static_cast<Eigen::Index>(2 * per_blob), 3);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double offset = r < static_cast<Eigen::Index>(per_blob) ? 0.0 : 20.0;
    for (Eigen::Index c = 0; c < 3; ++c) x(r, c) = offset + 0.5 * rng.normal();
  }
  return x;
}

}  // namespace

TEST(Terms, NgramsAndStopwords) {
  EXPECT_EQ(extract_terms("The smoke is DENSE", 1, 1, true),
            (std::vector<std::string>{"smoke", "dense"}));
  EXPECT_EQ(extract_terms("smoke over kelowna", 1, 2, false),
            (std::vector<std::string>{"smoke", "over", "kelowna", "smoke over", "over kelowna"}));
  EXPECT_TRUE(extract_terms("a I", 1, 2, false).empty());
  EXPECT_TRUE(is_stopword("the"));
  EXPECT_FALSE(is_stopword("wildfire"));
}

TEST(Config, ValidationAndJson) {
  TopicModelConfig c;
  c.ngram_min = 3;
  c.ngram_max = 2;
  EXPECT_THROW(validate(c), Error);
  c = {};
  c.min_cluster_size = 1;
  EXPECT_THROW(validate(c), Error);
  c = {};
  c.target_topics = 4;
  EXPECT_EQ(to_json(topic_config_from_json(to_json(c))), to_json(c));
}

TEST(Hdbscan, SeparatesTwoBlobs) {
  const auto x = two_blobs(30, 1);
  const auto labels = hdbscan(x, 10);
  std::set<int> first(labels.begin(), labels.begin() + 30);
  std::set<int> second(labels.begin() + 30, labels.end());
  EXPECT_EQ(first.size(), 1u);
  EXPECT_EQ(second.size(), 1u);
  EXPECT_NE(*first.begin(), *second.begin());
  EXPECT_GE(*first.begin(), 0);
}

TEST(Hdbscan, TooFewPointsAreAllNoise) {
  const auto x = two_blobs(3, 2);
  for (int label : hdbscan(x, 10)) EXPECT_EQ(label, -1);
}

TEST(Reduce, IdenticalRowsShareCoordinates) {
  Rng rng(3);
  nn::Matrix x(40, 16);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  x.row(7) = x.row(3);
  const auto a = reduce_dimensions(x, 5, 15);
  EXPECT_EQ(a.rows(), 40);
  EXPECT_EQ(a.cols(), 5);
  EXPECT_EQ(a.row(7), a.row(3));
  EXPECT_EQ(reduce_dimensions(x, 5, 15), a);
}

TEST(FitTopics, RecoversFixtureClusters) {
  const auto& f = fixture_model();
  ASSERT_EQ(f.model.topics.size(), 2u);
  std::size_t majority = 0;
  for (const auto& topic : f.model.topics) {
    std::map<int, std::size_t> counts;
    for (const auto& id : topic.member_ids) ++counts[f.truth.at(id)];
    std::size_t best = 0;
    for (const auto& [cluster, n] : counts) best = std::max(best, n);
    majority += best;
  }
  EXPECT_GE(static_cast<double>(majority) / static_cast<double>(f.truth.size()), 0.95);
}

TEST(FitTopics, SmokeClusterKeyword) {
  const auto& f = fixture_model();
  bool found = false;
  for (const auto& topic : f.model.topics) {
    std::size_t smoke_members = 0;
    for (const auto& id : topic.member_ids) smoke_members += f.truth.at(id) == 0;
    if (smoke_members * 2 < topic.member_ids.size()) continue;
    EXPECT_LE(topic.keywords.size(), 10u);
    found = std::find(topic.keywords.begin(), topic.keywords.end(), "smoke") != topic.keywords.end();
  }
  EXPECT_TRUE(found);
}

TEST(FitTopics, TopicsOrderedBySizeWithRepresentatives) {
  const auto& f = fixture_model();
  for (std::size_t i = 0; i < f.model.topics.size(); ++i) {
    const auto& t = f.model.topics[i];
    EXPECT_EQ(t.topic_id, static_cast<int>(i));
    if (i > 0) EXPECT_LE(t.member_ids.size(), f.model.topics[i - 1].member_ids.size());
    EXPECT_LE(t.representatives.size(), 3u);
    EXPECT_FALSE(t.representatives.empty());
    for (const auto& r : t.representatives) {
      EXPECT_NE(std::find(t.member_ids.begin(), t.member_ids.end(), r), t.member_ids.end());
    }
  }
}

TEST(ReduceTopics, PreservesMembershipTotals) {
  const auto& f = fixture_model();
  const auto reduced = reduce_topics(f.model, 1);
  ASSERT_EQ(reduced.topics.size(), 1u);
  std::size_t before = 0;
  for (const auto& t : f.model.topics) before += t.member_ids.size();
  EXPECT_EQ(reduced.topics[0].member_ids.size(), before);
  EXPECT_EQ(reduced.outlier_count(), f.model.outlier_count());
  EXPECT_EQ(reduce_topics(f.model, 2).topics.size(), 2u);
  EXPECT_THROW(reduce_topics(f.model, 5), Error);
}

TEST(FitTopics, TargetTopicsApplied) {
  const auto x = two_blobs(30, 4);
  std::vector<Document> docs;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    docs.push_back({std::to_string(r), r < 30 ? "smoke haze" : "evacuation order"});
  }
  TopicModelConfig config;
  config.target_topics = 1;
  const auto model = fit_topics(x, docs, config);
  ASSERT_EQ(model.topics.size(), 1u);
  EXPECT_EQ(model.topics[0].member_ids.size() + model.outlier_count(), 60u);
}

TEST(Json, ShapeOfExport) {
  const auto j = topics_to_json(fixture_model().model);
  EXPECT_EQ(j.at("topics").size(), 2u);
  EXPECT_TRUE(j.contains("outlier_ids"));
  EXPECT_EQ(j.at("topic_count").get<std::size_t>(), 2u);
}
