#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "flowplan/numerics.hpp"

namespace flowplan {

inline constexpr std::size_t kTimeFrequencies = 4;

/// sin(2^k pi s), cos(2^k pi s) for k = 0..3.
Vec time_features(double s);

/// v_phi(z, s | c): a DenseNet over [z ; time features ; context].
struct VelocityModel {
  DenseNet net;
  std::size_t dimension = 0;
  std::size_t context_width = 0;

  static VelocityModel create(std::size_t d, std::size_t context_width, const std::vector<std::size_t>& hidden,
                              SeededRng& rng);
  static VelocityModel zeros(std::size_t d, std::size_t context_width, const std::vector<std::size_t>& hidden);

  Vec features(std::span<const double> z, double s, std::span<const double> context) const;
};

Vec velocity(const VelocityModel& model, std::span<const double> z, double s, std::span<const double> context);

enum class Integrator { Euler, Rk4 };

struct FlowTrajectory {
  std::vector<double> times;  // uniform grid k/S, k = 0..S
  std::vector<Vec> states;
  Integrator method = Integrator::Rk4;
  std::size_t steps = 0;

  /// Linear interpolation between grid samples.
  Vec state_at(double s) const;
};

using VectorField = std::function<Vec(std::span<const double> z, double s)>;

/// Fixed-step integration of dz/ds = field(z, s) on [0, 1]. Throws
/// NumericError naming the step at which the state stopped being finite.
FlowTrajectory integrate_field(const VectorField& field, Vec z0, std::size_t steps, Integrator method);
FlowTrajectory integrate(const VelocityModel& model, Vec z0, std::span<const double> context, std::size_t steps,
                         Integrator method);

/// Maps path time (knot/anchor coordinates) to planning time (ODE time).
/// The first `lead_in` of planning time carries the prior sample onto the
/// first knot. After it, path time advances as ((t - lead) / (1 - lead))^ease,
/// so with ease > 1 the path starts at rest and the field is continuous at the
/// boundary. lead_in = 0 with ease = 1 makes the two clocks identical.
struct PlanClock {
  double lead_in = 0.0;
  double ease = 1.0;

  double to_planning(double path_time) const;
  /// Inverse map; planning times inside the lead-in map to path time 0.
  double to_path(double planning_time) const;
  /// d(path time) / d(planning time); zero inside the lead-in.
  double path_rate(double planning_time) const;
  bool in_lead_in(double planning_time) const { return planning_time < lead_in; }
};

/// Planning times of L anchors: knot_time(l, L) pushed through the clock.
std::vector<double> anchor_times(std::size_t count, const PlanClock& clock = {});
std::vector<Vec> extract_anchors(const FlowTrajectory& trajectory, std::size_t count, const PlanClock& clock = {});

struct FlowSettings {
  std::size_t steps = 32;
  Integrator method = Integrator::Rk4;
  PlanClock clock{0.5, 2.0};
};

struct LatentPlan {
  std::vector<Vec> anchors;
  std::vector<double> anchor_times;  // planning time of each anchor
  Vec initial_noise;
  std::uint64_t context_hash = 0;
};

std::uint64_t hash_vector(std::span<const double> v);

/// z0 ~ N(0, I), integrate, read L anchors.
LatentPlan sample_plan(const VelocityModel& model, std::span<const double> context, std::size_t count,
                       SeededRng& rng, const FlowSettings& settings);
/// Deterministic plan from a given prior sample.
LatentPlan plan_from_noise(const VelocityModel& model, std::span<const double> context, std::size_t count,
                           Vec z0, const FlowSettings& settings);

// ---------------------------------------------------------------------------
// Reverse-mode through the integrator
// ---------------------------------------------------------------------------

/// Integration with every network evaluation traced, for backpropagation.
struct RecordedFlow {
  FlowTrajectory trajectory;
  std::vector<std::vector<ForwardTrace>> stages;  // per step: 1 (Euler) or 4 (RK4) traces
  Vec context;
};

RecordedFlow integrate_recorded(const VelocityModel& model, Vec z0, std::span<const double> context,
                                std::size_t steps, Integrator method);

/// Adds d(anchor)/d(grid state) weights of linearly interpolated anchors
/// into per-node gradients.
void scatter_anchor_grads(const FlowTrajectory& trajectory, const std::vector<double>& times,
                          const std::vector<Vec>& anchor_grads, std::vector<Vec>& node_grads);

/// Given dLoss/d(state_k) for every grid node, accumulates dLoss/d(params)
/// into `tape` and returns dLoss/d(z0).
Vec integrate_vjp(const VelocityModel& model, const RecordedFlow& flow, std::vector<Vec> node_grads,
                  GradientTape& tape);

}  // namespace flowplan
