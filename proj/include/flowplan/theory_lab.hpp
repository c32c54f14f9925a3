#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flowplan/environment.hpp"
#include "flowplan/numerics.hpp"

namespace flowplan {

struct ModelBundle;
struct TaskRecord;

/// Outcome of one bound check with per-trial rows for external plotting.
struct BoundReport {
  std::string id;
  std::string measured_name;
  double measured = 0.0;  // worst or aggregate measured quantity
  double bound = 0.0;     // theoretical value it is compared against
  std::size_t violations = 0;
  std::size_t trials = 0;
  std::map<std::string, double> constants;  // fitted or derived constants
  std::map<std::string, bool> checks;       // named pass/fail side conditions
  std::string config_json;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  /// No violations and every side check true.
  bool passed() const;
  /// Summary lines prefixed with '#', then a header row and one line per trial.
  std::string to_csv() const;
};

/// (e^K - 1) / K, and 1 at K = 0.
double c_flow(double lipschitz);

/// Spearman rank correlation with average ranks for ties and its one-sided
/// p-value for rho > 0 from the Student-t approximation.
struct RankCorrelation {
  double rho = 0.0;
  double p_value = 1.0;
};
RankCorrelation spearman(const std::vector<double>& x, const std::vector<double>& y);

// ---------------------------------------------------------------------------
// Gronwall constant
// ---------------------------------------------------------------------------

struct GronwallConfig {
  std::size_t dimension = 8;
  std::size_t steps = 64;
  std::uint64_t seed = 101;
};

/// Linear teacher fields u* = A (y(s) - z) + y'(s) with ||A|| = K_u along a
/// cubic path; the perturbed field adds a bounded term of sup-norm delta.
/// Violation: endpoint error above 1.05 C_flow delta (1e-8 when delta = 0).
BoundReport verify_gronwall(double lipschitz, double delta, std::size_t trials, const GronwallConfig& config = {});
/// All cells of K_u x delta, 100 trials each by default.
BoundReport verify_gronwall_grid(const std::vector<double>& lipschitz_grid, const std::vector<double>& delta_grid,
                                 std::size_t trials_per_cell, const GronwallConfig& config = {});

// ---------------------------------------------------------------------------
// Proposition 1
// ---------------------------------------------------------------------------

struct Prop1Config {
  std::size_t trials = 10000;
  std::size_t dimension = 16;
  std::size_t tools = 8;
  std::size_t steps = 32;
  double lipschitz = 1.0;
  /// Velocity error sup-norms as fractions of the linear margin over C_flow.
  std::vector<double> delta_fractions{0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 3.0, 4.0};
  std::uint64_t seed = 202;
};

/// Trials integrate a perturbed teacher field whose endpoint is decoded
/// against a random toolset. Per group of equal delta, the MAP error rate must
/// not exceed min{1, 2 mean(eta) / margin} nor min{1, 2 C_flow delta / margin};
/// per trial an error with eta below half the margin is also a violation.
/// A half-normal endpoint-error family checks the Markov form directly.
BoundReport verify_prop1(const Prop1Config& config = {});

// ---------------------------------------------------------------------------
// Theorem 1
// ---------------------------------------------------------------------------

struct Thm1Config {
  std::vector<double> anchor_errors{0.0, 0.1, 0.2, 0.4};
  std::vector<double> temperatures{0.01, 0.05, 0.10, 0.20, 0.50};
  std::vector<double> observation_noise{0.0, 0.1, 0.2, 0.4};
  std::size_t samples = 16;  // decodes averaged per trial
  std::size_t max_examples = 24;
  std::uint64_t seed = 303;
};

/// Mean over `samples` draws of U(P*) - U(P) in absolute value for one
/// example: expert knots decoded by MAP on the clean context against knots
/// moved by `anchor_error` in random directions, decoded by sampling at
/// `epsilon` with the stop head and consistency term reading a context rebuilt
/// from observations moved by `observation_noise`. Accuracy, cost and
/// redundancy are always scored against the true task.
double utility_gap(const ModelBundle& bundle, const std::vector<TaskRecord>& records, std::size_t record,
                   std::size_t progress, double anchor_error, double epsilon, double observation_noise,
                   std::size_t samples, SeededRng& rng, std::uint64_t env_seed);

/// Gap |U(P*) - U(P)| between expert anchors decoded by MAP on the clean
/// context and perturbed anchors decoded at temperature epsilon on a context
/// rebuilt from perturbed observations. An affine form with nonnegative
/// slopes is fitted by least squares on one half of the trials (negative
/// slopes clipped and the rest refitted), raised by the largest residual
/// on that half; domination is measured on the other half. Throws ConfigError when a regressor column is all zero.
BoundReport verify_thm1(const ModelBundle& bundle, const std::vector<TaskRecord>& records,
                        const Thm1Config& config = {});

// ---------------------------------------------------------------------------
// Theorem 2
// ---------------------------------------------------------------------------

struct Thm2Config {
  std::size_t dimension = 16;
  double arc = 1.5;  // radians spanned by the training tools
  std::vector<double> spacings{0.05, 0.15, 0.3, 0.5};    // training tool spacing (radians)
  std::vector<double> tilts{0.02, 0.15, 0.3, 0.5};      // max off-manifold angle of unseen tools
  std::size_t trials_per_cell = 100;
  std::size_t unseen_tools = 12;
  std::size_t queries_per_tool = 10;
  double bandwidth = 0.05;       // kernel width of the fitted planner
  double query_noise = 0.005;
  std::size_t probes = 400;
  std::uint64_t seed = 404;
};

/// Tools on a great-circle arc train a kernel planner; unseen tools are
/// tilted off the manifold by random angles. Reports the unseen MAP error per
/// trial against measured delta_shift + eps_cover with a constant fitted on a
/// disjoint half, the proxy inequality, Spearman trends along both axes, and
/// a label-lookup baseline that can never name an unseen tool.
BoundReport verify_thm2(const Thm2Config& config = {});

// ---------------------------------------------------------------------------
// Proposition 2
// ---------------------------------------------------------------------------

struct RecurrenceTrace {
  std::vector<double> closed;  // e_1 .. e_{H+1}, e_1 = 0
  std::vector<double> open;
  double closed_total = 0.0;
  double open_total = 0.0;
};

/// e_{h+1} = rho e_h + a_h (closed, equality case) and e_h + a_h (open).
RecurrenceTrace unroll_recurrences(double rho, const std::vector<double>& local_errors);

struct Prop2Config {
  std::vector<double> rhos{0.3, 0.5, 0.7, 0.9};
  std::size_t sequences = 1000;  // random recurrences
  std::size_t live_runs = 1000;  // paired executor episodes
  std::size_t dimension = 16;
  std::uint64_t seed = 505;
};

/// Symbolic identities at rho = 0.5, a = (1, 1, 1); random recurrences; then
/// paired closed/open oracle episodes with shared injected context errors.
BoundReport verify_prop2(const Prop2Config& config = {});

// ---------------------------------------------------------------------------
// Temperature sweep
// ---------------------------------------------------------------------------

struct TemperatureSweepConfig {
  std::vector<double> temperatures{0.01, 0.05, 0.10, 0.20, 0.50};
  std::size_t seeds = 20;
  std::size_t dimension = 16;
  std::size_t tools = 8;
  double noise_fraction = 0.3;  // anchor noise sigma over mean linear margin
  std::size_t train_samples = 64;
  std::size_t test_samples = 2000;
  std::size_t steps = 100;
  double learning_rate = 3e-2;
  std::uint64_t seed = 606;
};

/// A linear anchor map trained from zero with the tool cross-entropy at
/// temperature epsilon on noisy anchors, then scored by sampled decoding at
/// the same epsilon. Rows hold per-seed Tool EM; constants hold the means.
BoundReport temperature_sweep(const TemperatureSweepConfig& config = {});

}  // namespace flowplan
