#include <cmath>

#include <gtest/gtest.h>

#include "flowplan/errors.hpp"
#include "flowplan/flow_planner.hpp"
#include "flowplan/supervision.hpp"

using namespace flowplan;

namespace {

double endpoint_error(Integrator method, std::size_t steps) {
  const VectorField field = [](std::span<const double> z, double s) { return Vec{std::cos(3.0 * s) - 0.5 * z[0]}; };
  // z' = cos(3s) - z/2, z(0) = 0 has a closed-form solution.
  const double a = 0.5, w = 3.0;
  const auto exact = [&](double s) {
    return (a * std::cos(w * s) + w * std::sin(w * s) - a * std::exp(-a * s)) / (a * a + w * w);
  };
  const FlowTrajectory t = integrate_field(field, Vec{0.0}, steps, method);
  return std::abs(t.states.back()[0] - exact(1.0));
}

}  // namespace

TEST(Velocity, ZeroModelIsZeroEverywhere) {
  const VelocityModel m = VelocityModel::zeros(4, 3, {8, 8});
  SeededRng rng(1);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(velocity(m, rng.normal_vector(4), rng.uniform(), rng.normal_vector(3)), Vec(4, 0.0));
}

TEST(Velocity, IsPure) {
  SeededRng rng(2);
  const VelocityModel m = VelocityModel::create(4, 3, {8}, rng);
  const Vec z{0.1, 0.2, 0.3, 0.4}, c{1.0, -1.0, 0.5};
  EXPECT_EQ(velocity(m, z, 0.3, c), velocity(m, z, 0.3, c));
}

TEST(Velocity, ParameterGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SeededRng rng(seed, 0x7e1);
    const VelocityModel m = VelocityModel::create(3, 2, {6, 6}, rng);
    const Vec z = rng.normal_vector(3), c = rng.normal_vector(2);
    const double s = rng.uniform();
    const Vec feats = m.features(z, s, c);
    const Vec v = m.net.apply(feats);
    const Backprop bp = net_backprop(m.net, feats, scaled(v, 2.0));
    const auto loss = [&](const DenseNet& net) {
      const Vec out = net.apply(feats);
      return dot(out, out);
    };
    EXPECT_LT(finite_diff_check(loss, bp.tape, m.net, 1e-5), 1e-4) << "seed " << seed;
  }
}

TEST(Velocity, RejectsMismatchedWidths) {
  const VelocityModel m = VelocityModel::zeros(4, 3, {8});
  EXPECT_THROW(velocity(m, Vec(3, 0.0), 0.0, Vec(3, 0.0)), ShapeError);
  EXPECT_THROW(velocity(m, Vec(4, 0.0), 0.0, Vec(2, 0.0)), ShapeError);
}

TEST(Integrate, ConstantFieldIsExactForBothMethods) {
  const Vec c{0.5, -2.0};
  const VectorField field = [&](std::span<const double>, double) { return c; };
  for (Integrator m : {Integrator::Euler, Integrator::Rk4}) {
    const FlowTrajectory t = integrate_field(field, Vec{1.0, 1.0}, 7, m);
    EXPECT_NEAR(t.states.back()[0], 1.5, 1e-14);
    EXPECT_NEAR(t.states.back()[1], -1.0, 1e-14);
  }
}

TEST(Integrate, LinearDecayMatchesExponential) {
  const VectorField field = [](std::span<const double> z, double) { return Vec{-z[0]}; };
  const FlowTrajectory t = integrate_field(field, Vec{1.0}, 32, Integrator::Rk4);
  EXPECT_NEAR(t.states.back()[0], std::exp(-1.0), 1e-6);
  EXPECT_EQ(t.times.size(), 33u);
  EXPECT_DOUBLE_EQ(t.times.back(), 1.0);
}

TEST(Integrate, ConvergenceOrders) {
  const double euler_ratio = endpoint_error(Integrator::Euler, 64) / endpoint_error(Integrator::Euler, 128);
  const double rk4_ratio = endpoint_error(Integrator::Rk4, 16) / endpoint_error(Integrator::Rk4, 32);
  EXPECT_NEAR(euler_ratio, 2.0, 0.15);
  EXPECT_NEAR(rk4_ratio, 16.0, 1.5);
}

TEST(Integrate, HalvingTheStepNeverIncreasesTeacherError) {
  SeededRng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const TargetPath path({rng.normal_vector(2), rng.normal_vector(2), rng.normal_vector(2)});
    const Vec z0 = rng.normal_vector(2);
    const VectorField field = [&](std::span<const double> z, double s) { return teacher_velocity(path, z, s, 2.0); };
    const Vec reference = integrate_field(field, z0, 4096, Integrator::Rk4).states.back();
    double previous = std::numeric_limits<double>::infinity();
    for (std::size_t steps : {8, 16, 32, 64, 128}) {
      const double err = distance(integrate_field(field, z0, steps, Integrator::Rk4).states.back(), reference);
      EXPECT_LE(err, previous + 1e-12);
      previous = err;
    }
  }
}

TEST(Integrate, NonFiniteStateIsReported) {
  const VectorField field = [](std::span<const double> z, double) { return Vec{z[0] * z[0] * 1e200}; };
  EXPECT_THROW(integrate_field(field, Vec{1.0}, 8, Integrator::Euler), NumericError);
}

TEST(ExtractAnchors, TwoAnchorsAreTheEndpoints) {
  const VectorField field = [](std::span<const double> z, double s) { return Vec{std::sin(s) + z[0]}; };
  const FlowTrajectory t = integrate_field(field, Vec{0.3}, 16, Integrator::Rk4);
  const std::vector<Vec> a = extract_anchors(t, 2);
  EXPECT_EQ(a[0], t.states.front());
  EXPECT_EQ(a[1], t.states.back());
}

TEST(ExtractAnchors, GridNodesAreExactAndLinearStatesInterpolateExactly) {
  const VectorField field = [](std::span<const double>, double) { return Vec{2.0, -1.0}; };
  const FlowTrajectory t = integrate_field(field, Vec{1.0, 0.0}, 8, Integrator::Euler);
  const std::vector<Vec> five = extract_anchors(t, 5);  // times 0, .25, .5, .75, 1 are grid nodes
  for (std::size_t l = 0; l < 5; ++l) EXPECT_EQ(five[l], t.states[2 * l]);
  const std::vector<Vec> four = extract_anchors(t, 4);  // 1/3 and 2/3 fall between nodes
  for (std::size_t l = 0; l < 4; ++l) {
    const double s = knot_time(l, 4);
    EXPECT_NEAR(four[l][0], 1.0 + 2.0 * s, 1e-14);
    EXPECT_NEAR(four[l][1], -s, 1e-14);
  }
}

TEST(AnchorTimes, DefaultClockMatchesKnotTimes) {
  for (std::size_t count : {1, 2, 3, 5, 8}) {
    const std::vector<double> times = anchor_times(count);
    for (std::size_t l = 0; l < count; ++l) EXPECT_DOUBLE_EQ(times[l], knot_time(l, count));
  }
}

TEST(PlanClock, LeadInAndEaseMapping) {
  const PlanClock clock{0.5, 2.0};
  EXPECT_DOUBLE_EQ(clock.to_planning(0.0), 0.5);
  EXPECT_DOUBLE_EQ(clock.to_planning(1.0), 1.0);
  EXPECT_DOUBLE_EQ(clock.to_path(0.25), 0.0);
  EXPECT_DOUBLE_EQ(clock.path_rate(0.25), 0.0);
  EXPECT_DOUBLE_EQ(clock.path_rate(0.5), 0.0);  // eases in from rest
  for (double s : {0.1, 0.4, 0.9}) EXPECT_NEAR(clock.to_path(clock.to_planning(s)), s, 1e-14);
  const double t = 0.8, h = 1e-6;
  EXPECT_NEAR(clock.path_rate(t), (clock.to_path(t + h) - clock.to_path(t - h)) / (2 * h), 1e-6);
  const PlanClock identity{};
  EXPECT_DOUBLE_EQ(identity.to_planning(0.3), 0.3);
  EXPECT_DOUBLE_EQ(identity.path_rate(0.3), 1.0);
}

TEST(SamplePlan, ZeroModelKeepsEveryAnchorAtPrior) {
  const VelocityModel m = VelocityModel::zeros(4, 2, {8});
  SeededRng rng(4);
  const LatentPlan plan = sample_plan(m, Vec{0.0, 1.0}, 5, rng, FlowSettings{});
  ASSERT_EQ(plan.anchors.size(), 5u);
  for (const Vec& a : plan.anchors) EXPECT_LT(distance(a, plan.initial_noise), 1e-14);
}

TEST(SamplePlan, FixedStreamReproducesAndIndependentStreamsDiffer) {
  SeededRng init(5);
  const VelocityModel m = VelocityModel::create(4, 2, {8}, init);
  SeededRng a(10, 1), b(10, 1), c(10, 2);
  const LatentPlan pa = sample_plan(m, Vec{0.0, 1.0}, 3, a, FlowSettings{});
  const LatentPlan pb = sample_plan(m, Vec{0.0, 1.0}, 3, b, FlowSettings{});
  const LatentPlan pc = sample_plan(m, Vec{0.0, 1.0}, 3, c, FlowSettings{});
  EXPECT_EQ(pa.anchors, pb.anchors);
  EXPECT_NE(pa.initial_noise, pc.initial_noise);
  EXPECT_EQ(pa.context_hash, hash_vector(Vec{0.0, 1.0}));
}

TEST(IntegrateVjp, MatchesFiniteDifferencesThroughTheFlow) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SeededRng rng(seed, 0x71);
    const VelocityModel m = VelocityModel::create(3, 2, {6}, rng);
    const Vec z0 = rng.normal_vector(3), c = rng.normal_vector(2);
    const Vec target = rng.normal_vector(3);
    const std::vector<double> times = anchor_times(3, PlanClock{0.5, 2.0});
    const auto loss_of = [&](const VelocityModel& model, const Vec& start) {
      const FlowTrajectory t = integrate(model, start, c, 12, Integrator::Rk4);
      const std::vector<Vec> a = extract_anchors(t, 3, PlanClock{0.5, 2.0});
      double total = 0.0;
      for (const Vec& x : a) total += squared_distance(x, target);
      return total;
    };
    const RecordedFlow flow = integrate_recorded(m, z0, c, 12, Integrator::Rk4);
    const std::vector<Vec> anchors = extract_anchors(flow.trajectory, 3, PlanClock{0.5, 2.0});
    std::vector<Vec> anchor_grads;
    for (const Vec& a : anchors) anchor_grads.push_back(scaled(subtract(a, target), 2.0));
    std::vector<Vec> node_grads(flow.trajectory.states.size(), Vec(3, 0.0));
    scatter_anchor_grads(flow.trajectory, times, anchor_grads, node_grads);
    GradientTape tape = m.net.make_tape();
    const Vec z0_grad = integrate_vjp(m, flow, node_grads, tape);
    const double err = finite_diff_check(
        [&](const DenseNet& net) {
          VelocityModel probe = m;
          probe.net = net;
          return loss_of(probe, z0);
        },
        tape, m.net, 1e-5);
    EXPECT_LT(err, 1e-4) << "seed " << seed;
    for (std::size_t i = 0; i < 3; ++i) {
      Vec up = z0, down = z0;
      up[i] += 1e-5;
      down[i] -= 1e-5;
      const double numeric = (loss_of(m, up) - loss_of(m, down)) / 2e-5;
      EXPECT_NEAR(z0_grad[i], numeric, 1e-5 * (1.0 + std::abs(numeric)));
    }
  }
}
