#include "flowplan/flow_planner.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>

#include "flowplan/errors.hpp"
#include "flowplan/supervision.hpp"

namespace flowplan {

Vec time_features(double s) {
  Vec f;
  f.reserve(2 * kTimeFrequencies);
  double freq = std::numbers::pi;
  for (std::size_t k = 0; k < kTimeFrequencies; ++k, freq *= 2.0) {
    f.push_back(std::sin(freq * s));
    f.push_back(std::cos(freq * s));
  }
  return f;
}

namespace {

std::vector<std::size_t> velocity_widths(std::size_t d, std::size_t context_width,
                                         const std::vector<std::size_t>& hidden) {
  std::vector<std::size_t> widths{d + 2 * kTimeFrequencies + context_width};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(d);
  return widths;
}

}  // namespace

VelocityModel VelocityModel::create(std::size_t d, std::size_t context_width, const std::vector<std::size_t>& hidden,
                                    SeededRng& rng) {
  return {DenseNet::mlp(velocity_widths(d, context_width, hidden), Activation::Tanh, Activation::Identity, rng), d,
          context_width};
}

VelocityModel VelocityModel::zeros(std::size_t d, std::size_t context_width, const std::vector<std::size_t>& hidden) {
  return {DenseNet::zeros(velocity_widths(d, context_width, hidden), Activation::Tanh, Activation::Identity), d,
          context_width};
}

Vec VelocityModel::features(std::span<const double> z, double s, std::span<const double> context) const {
  if (z.size() != dimension) throw ShapeError("velocity: state width mismatch");
  if (context.size() != context_width) throw ShapeError("velocity: context width mismatch");
  const Vec tf = time_features(s);
  return concat({z, tf, context});
}

Vec velocity(const VelocityModel& model, std::span<const double> z, double s, std::span<const double> context) {
  return model.net.apply(model.features(z, s, context));
}

Vec FlowTrajectory::state_at(double s) const {
  if (states.empty()) throw InputError("empty trajectory");
  if (!(s >= 0.0 && s <= 1.0)) throw InputError("trajectory time must lie in [0, 1]");
  if (steps == 0) return states.front();
  const auto k = std::min<std::size_t>(steps - 1, static_cast<std::size_t>(std::floor(s * static_cast<double>(steps))));
  const double w = (s - times[k]) / (times[k + 1] - times[k]);
  if (w <= 0.0) return states[k];
  if (w >= 1.0) return states[k + 1];
  Vec out = scaled(states[k], 1.0 - w);
  axpy(w, states[k + 1], out);
  return out;
}

namespace {

Vec rk4_combine(std::span<const double> z, double h, const Vec& k1, const Vec& k2, const Vec& k3, const Vec& k4) {
  Vec out(z.begin(), z.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  return out;
}

Vec offset(std::span<const double> z, double h, const Vec& k) {
  Vec out(z.begin(), z.end());
  axpy(h, k, out);
  return out;
}

void check_state(const Vec& z, std::size_t step) {
  if (!all_finite(z)) throw NumericError("non-finite state at integration step " + std::to_string(step));
}

FlowTrajectory empty_trajectory(Vec z0, std::size_t steps, Integrator method) {
  if (steps == 0) throw InputError("integration needs at least one step");
  FlowTrajectory traj;
  traj.method = method;
  traj.steps = steps;
  traj.times.reserve(steps + 1);
  for (std::size_t k = 0; k <= steps; ++k) traj.times.push_back(static_cast<double>(k) / static_cast<double>(steps));
  check_state(z0, 0);
  traj.states.push_back(std::move(z0));
  return traj;
}

}  // namespace

FlowTrajectory integrate_field(const VectorField& field, Vec z0, std::size_t steps, Integrator method) {
  FlowTrajectory traj = empty_trajectory(std::move(z0), steps, method);
  const double h = 1.0 / static_cast<double>(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const Vec& z = traj.states.back();
    const double s = traj.times[k];
    Vec next;
    if (method == Integrator::Euler) {
      next = offset(z, h, field(z, s));
    } else {
      const Vec k1 = field(z, s);
      const Vec k2 = field(offset(z, h / 2.0, k1), s + h / 2.0);
      const Vec k3 = field(offset(z, h / 2.0, k2), s + h / 2.0);
      const Vec k4 = field(offset(z, h, k3), s + h);
      next = rk4_combine(z, h, k1, k2, k3, k4);
    }
    check_state(next, k + 1);
    traj.states.push_back(std::move(next));
  }
  return traj;
}

FlowTrajectory integrate(const VelocityModel& model, Vec z0, std::span<const double> context, std::size_t steps,
                         Integrator method) {
  return integrate_field([&](std::span<const double> z, double s) { return velocity(model, z, s, context); },
                         std::move(z0), steps, method);
}

double PlanClock::to_planning(double path_time) const {
  const double p = ease == 1.0 ? path_time : std::pow(path_time, 1.0 / ease);
  return lead_in + (1.0 - lead_in) * p;
}

double PlanClock::to_path(double planning_time) const {
  if (planning_time <= lead_in) return 0.0;
  const double p = std::min(1.0, (planning_time - lead_in) / (1.0 - lead_in));
  return ease == 1.0 ? p : std::pow(p, ease);
}

double PlanClock::path_rate(double planning_time) const {
  if (planning_time < lead_in) return 0.0;
  const double p = std::min(1.0, (planning_time - lead_in) / (1.0 - lead_in));
  return ease == 1.0 ? 1.0 / (1.0 - lead_in) : ease * std::pow(p, ease - 1.0) / (1.0 - lead_in);
}

std::vector<double> anchor_times(std::size_t count, const PlanClock& clock) {
  if (count == 0) throw InputError("anchor count must be at least 1");
  std::vector<double> times;
  for (std::size_t l = 0; l < count; ++l) times.push_back(clock.to_planning(knot_time(l, count)));
  return times;
}

std::vector<Vec> extract_anchors(const FlowTrajectory& trajectory, std::size_t count, const PlanClock& clock) {
  std::vector<Vec> anchors;
  for (double t : anchor_times(count, clock)) anchors.push_back(trajectory.state_at(t));
  return anchors;
}

std::uint64_t hash_vector(std::span<const double> v) {
  std::uint64_t h = 0x84222325cbf29ce4ULL;
  for (double x : v) h = mix64(h ^ std::bit_cast<std::uint64_t>(x));
  return h;
}

LatentPlan plan_from_noise(const VelocityModel& model, std::span<const double> context, std::size_t count, Vec z0,
                           const FlowSettings& settings) {
  LatentPlan plan;
  plan.initial_noise = z0;
  const FlowTrajectory traj = integrate(model, std::move(z0), context, settings.steps, settings.method);
  plan.anchor_times = anchor_times(count, settings.clock);
  for (double t : plan.anchor_times) plan.anchors.push_back(traj.state_at(t));
  plan.context_hash = hash_vector(context);
  return plan;
}

LatentPlan sample_plan(const VelocityModel& model, std::span<const double> context, std::size_t count,
                       SeededRng& rng, const FlowSettings& settings) {
  return plan_from_noise(model, context, count, rng.normal_vector(model.dimension), settings);
}

RecordedFlow integrate_recorded(const VelocityModel& model, Vec z0, std::span<const double> context,
                                std::size_t steps, Integrator method) {
  RecordedFlow rec;
  rec.context.assign(context.begin(), context.end());
  rec.trajectory = empty_trajectory(std::move(z0), steps, method);
  const double h = 1.0 / static_cast<double>(steps);
  auto eval = [&](std::span<const double> z, double s, std::vector<ForwardTrace>& traces) -> Vec {
    traces.push_back(model.net.forward(model.features(z, s, context)));
    return traces.back().output();
  };
  for (std::size_t k = 0; k < steps; ++k) {
    const Vec z = rec.trajectory.states.back();
    const double s = rec.trajectory.times[k];
    std::vector<ForwardTrace> traces;
    Vec next;
    if (method == Integrator::Euler) {
      next = offset(z, h, eval(z, s, traces));
    } else {
      const Vec k1 = eval(z, s, traces);
      const Vec k2 = eval(offset(z, h / 2.0, k1), s + h / 2.0, traces);
      const Vec k3 = eval(offset(z, h / 2.0, k2), s + h / 2.0, traces);
      const Vec k4 = eval(offset(z, h, k3), s + h, traces);
      next = rk4_combine(z, h, k1, k2, k3, k4);
    }
    check_state(next, k + 1);
    rec.trajectory.states.push_back(std::move(next));
    rec.stages.push_back(std::move(traces));
  }
  return rec;
}

void scatter_anchor_grads(const FlowTrajectory& trajectory, const std::vector<double>& times,
                          const std::vector<Vec>& anchor_grads, std::vector<Vec>& node_grads) {
  if (times.size() != anchor_grads.size()) throw ShapeError("scatter_anchor_grads: count mismatch");
  const std::size_t d = trajectory.states.front().size();
  if (node_grads.size() != trajectory.states.size()) node_grads.assign(trajectory.states.size(), Vec(d, 0.0));
  const std::size_t steps = trajectory.steps;
  for (std::size_t a = 0; a < times.size(); ++a) {
    const double s = times[a];
    const auto k = std::min<std::size_t>(steps - 1, static_cast<std::size_t>(std::floor(s * static_cast<double>(steps))));
    double w = (s - trajectory.times[k]) / (trajectory.times[k + 1] - trajectory.times[k]);
    w = std::clamp(w, 0.0, 1.0);
    axpy(1.0 - w, anchor_grads[a], node_grads[k]);
    axpy(w, anchor_grads[a], node_grads[k + 1]);
  }
}

Vec integrate_vjp(const VelocityModel& model, const RecordedFlow& flow, std::vector<Vec> node_grads,
                  GradientTape& tape) {
  const FlowTrajectory& traj = flow.trajectory;
  const std::size_t steps = traj.steps;
  const std::size_t d = model.dimension;
  if (node_grads.size() != steps + 1) throw ShapeError("integrate_vjp: need one gradient per grid node");
  const double h = 1.0 / static_cast<double>(steps);
  auto vjp = [&](const ForwardTrace& trace, const Vec& upstream) -> Vec {
    Vec g = model.net.backward(trace, upstream, tape);
    g.resize(d);  // drop time-feature and context components
    return g;
  };
  Vec lambda = node_grads[steps];
  for (std::size_t k = steps; k-- > 0;) {
    const auto& traces = flow.stages[k];
    Vec next_lambda = lambda;
    if (traj.method == Integrator::Euler) {
      axpy(1.0, vjp(traces[0], scaled(lambda, h)), next_lambda);
    } else {
      Vec g4 = scaled(lambda, h / 6.0);
      Vec g3 = scaled(lambda, h / 3.0);
      Vec g2 = scaled(lambda, h / 3.0);
      Vec g1 = scaled(lambda, h / 6.0);
      const Vec a4 = vjp(traces[3], g4);
      axpy(1.0, a4, next_lambda);
      axpy(h, a4, g3);
      const Vec a3 = vjp(traces[2], g3);
      axpy(1.0, a3, next_lambda);
      axpy(h / 2.0, a3, g2);
      const Vec a2 = vjp(traces[1], g2);
      axpy(1.0, a2, next_lambda);
      axpy(h / 2.0, a2, g1);
      const Vec a1 = vjp(traces[0], g1);
      axpy(1.0, a1, next_lambda);
    }
    axpy(1.0, node_grads[k], next_lambda);
    lambda = std::move(next_lambda);
  }
  return lambda;
}

}  // namespace flowplan
