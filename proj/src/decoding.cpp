#include "flowplan/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "flowplan/errors.hpp"

namespace flowplan {

ToolDistribution tool_probabilities(std::span<const double> z, const Toolset& toolset, double epsilon) {
  if (!(epsilon > 0.0)) throw InputError("temperature must be positive");
  if (toolset.empty()) throw InputError("empty toolset");
  ToolDistribution dist;
  dist.temperature = epsilon;
  dist.anchor.assign(z.begin(), z.end());
  dist.probabilities.resize(toolset.size());
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < toolset.size(); ++i) {
    dist.probabilities[i] = -squared_distance(z, toolset.embedding(i)) / epsilon;
    best = std::max(best, dist.probabilities[i]);
  }
  double total = 0.0;
  for (double& p : dist.probabilities) {
    p = std::exp(p - best);
    total += p;
  }
  for (double& p : dist.probabilities) p /= total;
  return dist;
}

std::size_t sample_tool(const ToolDistribution& dist, SeededRng& rng) {
  const double u = rng.uniform();
  double cumulative = 0.0;
  for (std::size_t i = 0; i < dist.probabilities.size(); ++i) {
    cumulative += dist.probabilities[i];
    if (u < cumulative) return i;
  }
  // Rounding left u above the final partial sum: take the last tool with mass.
  for (std::size_t i = dist.probabilities.size(); i-- > 0;)
    if (dist.probabilities[i] > 0.0) return i;
  return 0;
}

std::size_t map_decode(const ToolDistribution& dist) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < dist.probabilities.size(); ++i)
    if (dist.probabilities[i] > dist.probabilities[best]) best = i;
  return best;
}

StopHead StopHead::create(std::size_t d, std::size_t context_width, std::size_t hidden, SeededRng& rng,
                          double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("stop threshold must lie in (0, 1)");
  return {DenseNet::mlp({d + context_width, hidden, 1}, Activation::Tanh, Activation::Identity, rng), threshold};
}

StopHead StopHead::zeros(std::size_t d, std::size_t context_width, std::size_t hidden, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("stop threshold must lie in (0, 1)");
  return {DenseNet::zeros({d + context_width, hidden, 1}, Activation::Tanh, Activation::Identity), threshold};
}

Vec StopHead::features(std::span<const double> z, std::span<const double> context) const {
  if (z.size() + context.size() != net.input_width()) throw ShapeError("stop head: input width mismatch");
  return concat({z, context});
}

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stop_logit(const StopHead& head, std::span<const double> z, std::span<const double> context) {
  return head.net.apply(head.features(z, context))[0];
}

double stop_probability(const StopHead& head, std::span<const double> z, std::span<const double> context) {
  return logistic(stop_logit(head, z, context));
}

DecodedPlan decode_plan(const LatentPlan& plan, const Toolset& toolset, double epsilon, const StopHead& head,
                        std::span<const double> context, DecodeMode mode, SeededRng& rng) {
  DecodedPlan out;
  out.mode = mode;
  for (const Vec& anchor : plan.anchors) {
    const double p_stop = stop_probability(head, anchor, context);
    out.stop_probabilities.push_back(p_stop);
    if (p_stop > head.threshold) {
      out.stopped = true;
      break;
    }
    const ToolDistribution dist = tool_probabilities(anchor, toolset, epsilon);
    out.tools.push_back(mode == DecodeMode::Map ? map_decode(dist) : sample_tool(dist, rng));
  }
  out.effective_length = out.tools.size();
  return out;
}

}  // namespace flowplan
