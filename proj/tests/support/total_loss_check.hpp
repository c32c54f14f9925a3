#pragma once

#include <algorithm>

#include "flowplan/training.hpp"

namespace flowplan::checks {

struct TotalLossParts {
  double value = 0.0;
  GradientTape velocity;
  GradientTape stop;
  GradientTape map;
};

/// Total loss on a one-example micro-batch with every random draw pinned by
/// `seed`, so repeated calls differ only through the parameters.
inline TotalLossParts total_loss_on_example(const ModelBundle& bundle, const VelocityModel& snapshot,
                                            const TrainExample& ex, const Task& task, std::uint64_t seed) {
  const TrainConfig& cfg = bundle.config;
  const FlowSettings settings = bundle.flow_settings();
  SeededRng fm_rng(seed, 1), noise_rng(seed, 2), refine_rng(seed, 3);

  FlowLoss fm = loss_flow_matching(bundle, {ex}, fm_rng);
  const RecordedFlow flow = integrate_recorded(bundle.velocity, noise_rng.normal_vector(cfg.dimension), ex.context,
                                               settings.steps, settings.method);
  const std::vector<double> times = anchor_times(ex.knots.size(), settings.clock);
  std::vector<Vec> anchors;
  for (double t : times) anchors.push_back(flow.trajectory.state_at(t));
  const DecodeLoss dec = loss_decode(bundle, anchors, ex.labels, *task.toolset, cfg.epsilon, ex.context);
  const ConsistencyLoss cons = loss_consistency(anchors, ex.context, bundle.consistency);
  const RefineLoss ref = loss_plan_refine(bundle, snapshot, ex, task, refine_rng);

  TotalLossParts out;
  out.value = total_loss({fm.value, dec.value, ref.value, cons.value}, cfg.lambda_dec, cfg.lambda_plan,
                         cfg.lambda_cons);
  out.velocity = std::move(fm.velocity);
  out.velocity.accumulate(ref.velocity, cfg.lambda_plan);
  std::vector<Vec> grads;
  for (std::size_t l = 0; l < anchors.size(); ++l) {
    Vec g = scaled(dec.anchor_grads[l], cfg.lambda_dec);
    axpy(cfg.lambda_cons, cons.anchor_grads[l], g);
    grads.push_back(std::move(g));
  }
  std::vector<Vec> node_grads;
  scatter_anchor_grads(flow.trajectory, times, grads, node_grads);
  integrate_vjp(bundle.velocity, flow, std::move(node_grads), out.velocity);
  out.stop = bundle.stop.net.make_tape();
  out.stop.accumulate(dec.stop, cfg.lambda_dec);
  out.map = bundle.consistency.make_tape();
  out.map.accumulate(cons.map, cfg.lambda_cons);
  return out;
}

/// Largest finite-difference error of the total-loss gradient over the
/// velocity, stop and consistency networks.
inline double total_loss_gradient_error(const ModelBundle& bundle, const TrainExample& ex, const Task& task,
                                        std::uint64_t seed, double step = 1e-5, bool extrapolate = false) {
  const VelocityModel snapshot = bundle.velocity;
  const TotalLossParts parts = total_loss_on_example(bundle, snapshot, ex, task, seed);
  const double velocity_err = finite_diff_check(
      [&](const DenseNet& net) {
        ModelBundle probe = bundle;
        probe.velocity.net = net;
        return total_loss_on_example(probe, snapshot, ex, task, seed).value;
      },
      parts.velocity, bundle.velocity.net, step, extrapolate);
  const double stop_err = finite_diff_check(
      [&](const DenseNet& net) {
        ModelBundle probe = bundle;
        probe.stop.net = net;
        return total_loss_on_example(probe, snapshot, ex, task, seed).value;
      },
      parts.stop, bundle.stop.net, step, extrapolate);
  const double map_err = finite_diff_check(
      [&](const DenseNet& net) {
        ModelBundle probe = bundle;
        probe.consistency = net;
        return total_loss_on_example(probe, snapshot, ex, task, seed).value;
      },
      parts.map, bundle.consistency, step, extrapolate);
  return std::max({velocity_err, stop_err, map_err});
}

}  // namespace flowplan::checks
