#include <cmath>

#include <gtest/gtest.h>

#include "flowplan/decoding.hpp"
#include "flowplan/errors.hpp"

using namespace flowplan;

namespace {

Toolset line_tools(const std::vector<double>& xs) {
  std::vector<Vec> e;
  for (double x : xs) e.push_back(Vec{x});
  return toolset_from_embeddings(e);
}

StopHead constant_head(std::size_t d, std::size_t cw, double logit) {
  StopHead head = StopHead::zeros(d, cw, 4);
  head.net.layers().back().bias[0] = logit;
  return head;
}

LatentPlan plan_of(std::vector<Vec> anchors) {
  LatentPlan plan;
  plan.anchors = std::move(anchors);
  return plan;
}

}  // namespace

TEST(ToolProbabilities, TwoToolsHandComputed) {
  const ToolDistribution d = tool_probabilities(Vec{0.0}, line_tools({0.0, 1.0}), 1.0);
  const double p0 = 1.0 / (1.0 + std::exp(-1.0));
  EXPECT_NEAR(d.probabilities[0], p0, 1e-15);
  EXPECT_NEAR(d.probabilities[1], 1.0 - p0, 1e-15);
  EXPECT_EQ(d.temperature, 1.0);
}

TEST(ToolProbabilities, SumsToOneAndStaysFiniteForFarAnchors) {
  SeededRng rng(1);
  std::vector<Vec> e;
  for (int i = 0; i < 7; ++i) e.push_back(random_unit_vector(5, rng));
  const Toolset ts = toolset_from_embeddings(e);
  for (double eps : {1e-4, 0.1, 10.0}) {
    Vec z = rng.normal_vector(5);
    for (double& v : z) v *= 1e3;
    const ToolDistribution d = tool_probabilities(z, ts, eps);
    double total = 0.0;
    for (double p : d.probabilities) {
      EXPECT_TRUE(std::isfinite(p));
      total += p;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(ToolProbabilities, LowTemperatureConcentratesOnNearestTool) {
  const Toolset ts = line_tools({0.0, 1.0, 3.0});
  const ToolDistribution d = tool_probabilities(Vec{0.8}, ts, 1e-3);
  EXPECT_NEAR(d.probabilities[1], 1.0, 1e-12);
}

TEST(ToolProbabilities, HighTemperatureApproachesUniform) {
  const Toolset ts = line_tools({0.0, 1.0, 3.0});
  const ToolDistribution d = tool_probabilities(Vec{0.8}, ts, 1e6);
  for (double p : d.probabilities) EXPECT_NEAR(p, 1.0 / 3.0, 1e-5);
}

TEST(ToolProbabilities, RejectsNonPositiveTemperatureAndEmptyToolset) {
  EXPECT_THROW(tool_probabilities(Vec{0.0}, line_tools({0.0}), 0.0), InputError);
  EXPECT_THROW(tool_probabilities(Vec{0.0}, line_tools({0.0}), -1.0), InputError);
}

TEST(MapDecode, PicksNearestToolAndBreaksTiesLow) {
  const Toolset ts = line_tools({-1.0, 1.0, 4.0});
  EXPECT_EQ(map_decode(tool_probabilities(Vec{3.0}, ts, 0.5)), 2u);
  EXPECT_EQ(map_decode(tool_probabilities(Vec{0.0}, ts, 0.5)), 0u);
}

TEST(SampleTool, FrequenciesMatchProbabilities) {
  const ToolDistribution d{{0.2, 0.5, 0.3}, 1.0, Vec{}};
  SeededRng rng(2);
  const int n = 60000;
  std::vector<int> counts(3, 0);
  for (int i = 0; i < n; ++i) ++counts[sample_tool(d, rng)];
  for (std::size_t k = 0; k < 3; ++k) {
    const double p = d.probabilities[k];
    EXPECT_NEAR(counts[k] / static_cast<double>(n), p, 4.0 * std::sqrt(p * (1 - p) / n));
  }
}

TEST(SampleTool, NeverReturnsZeroMassTool) {
  const ToolDistribution d{{0.0, 1.0, 0.0}, 1.0, Vec{}};
  SeededRng rng(3);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(sample_tool(d, rng), 1u);
}

TEST(StopHead, ZeroNetGivesOneHalf) {
  const StopHead head = StopHead::zeros(3, 2, 4);
  EXPECT_DOUBLE_EQ(stop_probability(head, Vec{1, 2, 3}, Vec{4, 5}), 0.5);
}

TEST(StopHead, RejectsBadThresholdAndWidths) {
  EXPECT_THROW(StopHead::zeros(3, 2, 4, 1.0), ConfigError);
  EXPECT_THROW(StopHead::zeros(3, 2, 4, 0.0), ConfigError);
  const StopHead head = StopHead::zeros(3, 2, 4);
  EXPECT_THROW(stop_probability(head, Vec{1, 2}, Vec{4, 5}), ShapeError);
}

TEST(Logistic, StableAtExtremes) {
  EXPECT_DOUBLE_EQ(logistic(0.0), 0.5);
  EXPECT_EQ(logistic(-1000.0), 0.0);
  EXPECT_EQ(logistic(1000.0), 1.0);
  EXPECT_NEAR(logistic(2.0) + logistic(-2.0), 1.0, 1e-15);
}

TEST(DecodePlan, HeadThatNeverFiresDecodesEveryAnchor) {
  const Toolset ts = line_tools({0.0, 1.0, 2.0});
  SeededRng rng(4);
  const DecodedPlan p =
      decode_plan(plan_of({Vec{1.9}, Vec{0.1}, Vec{1.2}}), ts, 0.1, constant_head(1, 1, -20.0), Vec{0.0},
                  DecodeMode::Map, rng);
  EXPECT_EQ(p.tools, (std::vector<std::size_t>{2, 0, 1}));
  EXPECT_EQ(p.effective_length, 3u);
  EXPECT_FALSE(p.stopped);
  EXPECT_EQ(p.stop_probabilities.size(), 3u);
}

TEST(DecodePlan, HeadThatAlwaysFiresEmitsNothing) {
  const Toolset ts = line_tools({0.0, 1.0});
  SeededRng rng(5);
  const DecodedPlan p =
      decode_plan(plan_of({Vec{0.0}, Vec{1.0}}), ts, 0.1, constant_head(1, 1, 20.0), Vec{0.0}, DecodeMode::Map, rng);
  EXPECT_TRUE(p.stopped);
  EXPECT_EQ(p.effective_length, 0u);
  EXPECT_EQ(p.stop_probabilities.size(), 1u);
}

TEST(DecodePlan, StopsAtFirstAnchorThatFires) {
  // The logit reads the anchor coordinate directly: it fires only for the anchor at 5.
  StopHead head = StopHead::zeros(1, 1, 1);
  head.net.layers()[0].weight(0, 0) = 1.0;
  head.net.layers()[0].bias[0] = -4.0;
  head.net.layers()[1].weight(0, 0) = 10.0;
  const Toolset ts = line_tools({0.0, 1.0, 5.0});
  SeededRng rng(6);
  const DecodedPlan p =
      decode_plan(plan_of({Vec{1.0}, Vec{0.0}, Vec{5.0}, Vec{1.0}}), ts, 0.1, head, Vec{0.0}, DecodeMode::Map, rng);
  EXPECT_EQ(p.tools, (std::vector<std::size_t>{1, 0}));
  EXPECT_TRUE(p.stopped);
  EXPECT_EQ(p.stop_probabilities.size(), 3u);
}

TEST(DecodePlan, ThresholdIsStrict) {
  const Toolset ts = line_tools({0.0});
  SeededRng rng(7);
  const DecodedPlan p = decode_plan(plan_of({Vec{0.0}}), ts, 0.1, StopHead::zeros(1, 1, 2), Vec{0.0},
                                    DecodeMode::Map, rng);
  EXPECT_FALSE(p.stopped);  // probability exactly 0.5 does not exceed the threshold
  EXPECT_EQ(p.effective_length, 1u);
}

TEST(DecodePlan, SampledModeIsReproducibleOnAFixedStream) {
  SeededRng init(8);
  std::vector<Vec> e, anchors;
  for (int i = 0; i < 6; ++i) e.push_back(random_unit_vector(4, init));
  for (int i = 0; i < 5; ++i) anchors.push_back(init.normal_vector(4));
  const Toolset ts = toolset_from_embeddings(e);
  const StopHead head = constant_head(4, 2, -20.0);
  SeededRng a(9, 3), b(9, 3);
  const DecodedPlan pa = decode_plan(plan_of(anchors), ts, 1.0, head, Vec{0.0, 0.0}, DecodeMode::Sampled, a);
  const DecodedPlan pb = decode_plan(plan_of(anchors), ts, 1.0, head, Vec{0.0, 0.0}, DecodeMode::Sampled, b);
  EXPECT_EQ(pa.tools, pb.tools);
  EXPECT_EQ(pa.mode, DecodeMode::Sampled);
}
