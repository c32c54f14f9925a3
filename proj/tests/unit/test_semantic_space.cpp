#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "flowplan/errors.hpp"
#include "flowplan/semantic_space.hpp"

using namespace flowplan;

namespace {

Toolset line_tools(const std::vector<double>& xs) {
  std::vector<Vec> e;
  for (double x : xs) e.push_back(Vec{x});
  return toolset_from_embeddings(e);
}

double cosine(const Vec& a, const Vec& b) { return dot(a, b) / (norm(a) * norm(b)); }

Toolset random_toolset(std::size_t n, std::size_t d, SeededRng& rng) {
  std::vector<Vec> e;
  for (std::size_t i = 0; i < n; ++i) e.push_back(random_unit_vector(d, rng));
  return toolset_from_embeddings(e);
}

}  // namespace

TEST(HashEmbed, IsDeterministic) {
  EXPECT_EQ(hash_embed("lookup order", 16, 3), hash_embed("lookup order", 16, 3));
}

TEST(HashEmbed, HasUnitNorm) {
  for (const char* text : {"a", "get order status", "cancel subscription for account"})
    EXPECT_NEAR(norm(hash_embed(text, 32, 1)), 1.0, 1e-12);
}

TEST(HashEmbed, SharedNgramsRaiseSimilarity) {
  for (std::uint64_t salt = 0; salt < 50; ++salt) {
    const Vec status = hash_embed("get order status", 64, salt);
    const Vec details = hash_embed("get order details", 64, salt);
    const Vec cancel = hash_embed("cancel subscription", 64, salt);
    EXPECT_GT(cosine(status, details), cosine(status, cancel)) << "salt " << salt;
  }
}

TEST(BuildToolset, SingleToolHasZeroDiameter) {
  const Toolset ts = build_toolset({{"lookup", "look up an order", Phase::Retrieval, std::nullopt}}, 8, 0);
  EXPECT_EQ(ts.size(), 1u);
  EXPECT_DOUBLE_EQ(ts.diameter(), 0.0);
}

TEST(BuildToolset, AntipodalEmbeddingsHaveDiameterTwo) {
  const Toolset ts = build_toolset({{"a", "", Phase::Other, Vec{1.0, 0.0}}, {"b", "", Phase::Other, Vec{-1.0, 0.0}}}, 2, 0);
  EXPECT_DOUBLE_EQ(ts.diameter(), 2.0);
}

TEST(BuildToolset, TenSpecsKeepInvariants) {
  std::vector<ToolSpec> specs;
  for (int i = 0; i < 10; ++i)
    specs.push_back({"tool" + std::to_string(i), "description number " + std::to_string(i), Phase::Other, std::nullopt});
  const Toolset ts = build_toolset(specs, 16, 5);
  EXPECT_EQ(ts.size(), 10u);
  double diameter = 0.0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    EXPECT_NEAR(norm(ts.embedding(i)), 1.0, 1e-12);
    EXPECT_EQ(ts.index_of(ts[i].id), i);
    for (std::size_t j = 0; j < ts.size(); ++j) diameter = std::max(diameter, distance(ts.embedding(i), ts.embedding(j)));
  }
  EXPECT_DOUBLE_EQ(ts.diameter(), diameter);
  EXPECT_LE(ts.diameter(), 2.0);
}

TEST(BuildToolset, RejectsDuplicateIds) {
  EXPECT_THROW(build_toolset({{"x", "one", Phase::Other, std::nullopt}, {"x", "two", Phase::Other, std::nullopt}}, 8, 0),
               InputError);
}

TEST(NearestTool, ExactEmbeddingHasZeroDistance) {
  SeededRng rng(1);
  const Toolset ts = random_toolset(6, 8, rng);
  for (std::size_t t = 0; t < ts.size(); ++t) {
    const NearestTool n = nearest_tool(ts.embedding(t), ts);
    EXPECT_EQ(n.index, t);
    EXPECT_DOUBLE_EQ(n.squared_distance, 0.0);
  }
}

TEST(NearestTool, TiesGoToLowerIndex) {
  const Toolset ts = line_tools({-1.0, 1.0});
  EXPECT_EQ(nearest_tool(Vec{0.0}, ts).index, 0u);
}

TEST(NearestTool, MatchesBruteForceScan) {
  SeededRng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const Toolset ts = random_toolset(9, 5, rng);
    const Vec z = rng.normal_vector(5);
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < ts.size(); ++t) {
      const double d = squared_distance(z, ts.embedding(t));
      if (d < best_d) {
        best_d = d;
        best = t;
      }
    }
    const NearestTool n = nearest_tool(z, ts);
    EXPECT_EQ(n.index, best);
    EXPECT_DOUBLE_EQ(n.squared_distance, best_d);
  }
}

TEST(DecodingMargin, OneDimensionalLayout) {
  const Toolset ts = line_tools({0.0, 3.0});
  const DecodingMargin m = decoding_margin(Vec{0.0}, ts, 0);
  EXPECT_DOUBLE_EQ(m.squared, 9.0);
  EXPECT_DOUBLE_EQ(m.linear, 3.0);
}

TEST(DecodingMargin, MidpointHasZeroMargins) {
  const Toolset ts = line_tools({-1.0, 1.0});
  const DecodingMargin m = decoding_margin(Vec{0.0}, ts, 1);
  EXPECT_DOUBLE_EQ(m.squared, 0.0);
  EXPECT_DOUBLE_EQ(m.linear, 0.0);
}

TEST(DecodingMargin, MatchesBruteForceAndSignAgreesWithNearestTool) {
  SeededRng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const Toolset ts = random_toolset(7, 6, rng);
    const Vec y = rng.normal_vector(6);
    const std::size_t gold = rng.below(ts.size());
    double sq = std::numeric_limits<double>::infinity(), lin = sq;
    for (std::size_t t = 0; t < ts.size(); ++t) {
      if (t == gold) continue;
      sq = std::min(sq, squared_distance(y, ts.embedding(t)) - squared_distance(y, ts.embedding(gold)));
      lin = std::min(lin, distance(y, ts.embedding(t)) - distance(y, ts.embedding(gold)));
    }
    const DecodingMargin m = decoding_margin(y, ts, gold);
    EXPECT_NEAR(m.squared, sq, 1e-12);
    EXPECT_NEAR(m.linear, lin, 1e-12);
    EXPECT_EQ(m.squared >= 0.0, nearest_tool(y, ts).index == gold || m.squared == 0.0);
  }
}

TEST(DecodingMargin, RejectsOutOfRangeGold) {
  EXPECT_THROW(decoding_margin(Vec{0.0}, line_tools({0.0, 1.0}), 2), InputError);
}

TEST(CoveringRadius, ProbesOnTrainingToolsGiveZero) {
  const Toolset ts = line_tools({0.0, 1.0, 2.0});
  EXPECT_DOUBLE_EQ(covering_radius(ts, ManifoldRegion{{{0.0}, {2.0}}}), 0.0);
}

TEST(CoveringRadius, MidpointProbe) {
  const Toolset ts = line_tools({0.0, 2.0});
  EXPECT_DOUBLE_EQ(covering_radius(ts, ManifoldRegion{{{0.0}, {1.0}, {2.0}}}), 1.0);
}

TEST(CoveringRadius, MatchesBruteForceAndShrinksWithMoreTools) {
  SeededRng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Vec> tools;
    for (int i = 0; i < 5; ++i) tools.push_back(rng.normal_vector(3));
    ManifoldRegion region;
    for (int i = 0; i < 30; ++i) region.probes.push_back(rng.normal_vector(3));
    double expected = 0.0;
    for (const Vec& p : region.probes) {
      double nearest = std::numeric_limits<double>::infinity();
      for (const Vec& t : tools) nearest = std::min(nearest, distance(p, t));
      expected = std::max(expected, nearest);
    }
    const double eps = covering_radius(toolset_from_embeddings(tools), region);
    EXPECT_DOUBLE_EQ(eps, expected);
    tools.push_back(rng.normal_vector(3));
    EXPECT_LE(covering_radius(toolset_from_embeddings(tools), region), eps);
  }
}

TEST(SemanticShift, UnseenInsideRegionGivesZero) {
  const ManifoldRegion region{{{0.0}, {1.0}, {2.0}}};
  EXPECT_DOUBLE_EQ(semantic_shift(line_tools({1.0, 2.0}), region), 0.0);
}

TEST(SemanticShift, SingleFarToolSetsTheShift) {
  const ManifoldRegion region{{{0.0}, {1.0}}};
  EXPECT_DOUBLE_EQ(semantic_shift(line_tools({0.5, 4.0}), region), 3.0);
}

TEST(SemanticShift, MatchesBruteForceAndGrowsWithMoreTools) {
  SeededRng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    ManifoldRegion region;
    for (int i = 0; i < 20; ++i) region.probes.push_back(rng.normal_vector(3));
    std::vector<Vec> unseen;
    for (int i = 0; i < 4; ++i) unseen.push_back(rng.normal_vector(3));
    double expected = 0.0;
    for (const Vec& u : unseen) {
      double nearest = std::numeric_limits<double>::infinity();
      for (const Vec& p : region.probes) nearest = std::min(nearest, distance(u, p));
      expected = std::max(expected, nearest);
    }
    const double delta = semantic_shift(toolset_from_embeddings(unseen), region);
    EXPECT_DOUBLE_EQ(delta, expected);
    unseen.push_back(rng.normal_vector(3));
    EXPECT_GE(semantic_shift(toolset_from_embeddings(unseen), region), delta);
  }
}

TEST(GreatCircle, PointsAreUnitAndArcHasRequestedCount) {
  SeededRng rng(6);
  const GreatCircle gc = random_great_circle(8, rng);
  EXPECT_NEAR(dot(gc.u, gc.v), 0.0, 1e-12);
  const ManifoldRegion arc = gc.arc(0.0, 1.0, 11);
  ASSERT_EQ(arc.probes.size(), 11u);
  for (const Vec& p : arc.probes) EXPECT_NEAR(norm(p), 1.0, 1e-12);
  EXPECT_NEAR(distance(arc.probes.front(), gc.point(0.0)), 0.0, 1e-12);
}

TEST(ToolsetJson, RoundTripsThroughText) {
  const Toolset ts = build_toolset({{"a", "alpha tool", Phase::Retrieval, std::nullopt},
                                    {"b", "beta tool", Phase::DatabaseOp, std::nullopt}},
                                   8, 2);
  const std::string text = toolset_to_json(ts);
  const auto path = std::filesystem::temp_directory_path() / "flowplan_toolset.json";
  write_file_atomic(path, text);
  const Toolset back = load_toolset_json(path, 8, 2);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].phase, Phase::DatabaseOp);
  EXPECT_EQ(back.embedding(0), ts.embedding(0));
  std::filesystem::remove(path);
}
