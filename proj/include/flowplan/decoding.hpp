#pragma once

#include <cstddef>
#include <vector>

#include "flowplan/flow_planner.hpp"
#include "flowplan/numerics.hpp"
#include "flowplan/semantic_space.hpp"

namespace flowplan {

/// p(t | z) over a toolset, indexed like the toolset.
struct ToolDistribution {
  std::vector<double> probabilities;
  double temperature = 0.0;
  Vec anchor;
};

/// Softmax of -||z - e_t||^2 / epsilon with max-subtraction.
ToolDistribution tool_probabilities(std::span<const double> z, const Toolset& toolset, double epsilon);

/// Inverse-CDF draw in tool-index order.
std::size_t sample_tool(const ToolDistribution& dist, SeededRng& rng);
/// Argmax with lowest-index tie-break.
std::size_t map_decode(const ToolDistribution& dist);

/// Termination head over [z ; context] producing one logit.
struct StopHead {
  DenseNet net;
  double threshold = 0.5;

  static StopHead create(std::size_t d, std::size_t context_width, std::size_t hidden, SeededRng& rng,
                         double threshold = 0.5);
  static StopHead zeros(std::size_t d, std::size_t context_width, std::size_t hidden, double threshold = 0.5);

  Vec features(std::span<const double> z, std::span<const double> context) const;
};

double logistic(double x);
double stop_logit(const StopHead& head, std::span<const double> z, std::span<const double> context);
double stop_probability(const StopHead& head, std::span<const double> z, std::span<const double> context);

enum class DecodeMode { Sampled, Map };

struct DecodedPlan {
  std::vector<std::size_t> tools;          // toolset indices, length = effective_length
  std::vector<double> stop_probabilities;  // one per inspected anchor
  std::size_t effective_length = 0;
  bool stopped = false;                    // true when the stop head fired
  DecodeMode mode = DecodeMode::Map;
};

/// Decodes anchors in order; the first anchor whose stop probability exceeds
/// the threshold halts the plan and emits no tool.
DecodedPlan decode_plan(const LatentPlan& plan, const Toolset& toolset, double epsilon, const StopHead& head,
                        std::span<const double> context, DecodeMode mode, SeededRng& rng);

}  // namespace flowplan
