#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "flowplan/decoding.hpp"
#include "flowplan/environment.hpp"
#include "flowplan/flow_planner.hpp"
#include "flowplan/numerics.hpp"
#include "flowplan/supervision.hpp"

namespace flowplan {

struct TrainConfig {
  std::size_t dimension = 16;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t stop_hidden = 32;
  std::size_t steps = 32;
  double lead_in = 0.5;
  double kappa_pull = 4.0;
  double lead_in_pull = 12.0;  // pull rate toward the first knot during the lead-in
  double ease = 2.0;           // path clock exponent after the lead-in
  double sigma_tube = 0.1;
  double epsilon = 0.1;
  double stop_threshold = 0.5;
  double rho = 0.7;
  double sigma_obs = 0.02;
  double lambda_dec = 0.1;
  double lambda_plan = 0.5;
  double lambda_cons = 0.1;
  UtilityWeights utility;
  std::size_t candidates = 8;
  std::size_t epochs_flow = 300;
  std::size_t epochs_decode = 20;
  std::size_t epochs_refine = 0;
  double learning_rate = 3e-3;
  double refine_learning_rate = 1e-4;  // divided by (1 + stage-3 epoch)
  std::uint64_t seed = 7;
  std::size_t max_length = 8;
  std::size_t fm_samples = 8;
  std::size_t batch_size = 16;
  std::size_t refine_examples = 48;
  std::size_t utility_probe_examples = 512;
  bool augment_failures = false;

  /// Throws ConfigError when a field is out of range.
  void validate() const;
  std::string to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(std::string_view text);
  static TrainConfig load(const std::filesystem::path& path);
  /// Hex FNV-1a of the canonical JSON form.
  std::string hash() const;
};

/// Every learned or frozen map the planner uses.
struct ModelBundle {
  TrainConfig config;
  VelocityModel velocity;
  SupervisionHeads heads;
  StopHead stop;
  DenseNet consistency;  // W_c, d x d linear
  ContextNets context;

  static ModelBundle initialize(const TrainConfig& config);
  FlowSettings flow_settings() const;

  Checkpoint to_checkpoint() const;
  static ModelBundle from_checkpoint(const Checkpoint& checkpoint);
  void save(const std::filesystem::path& path) const;
  static ModelBundle load(const std::filesystem::path& path);
};

struct AnchorLabel {
  std::optional<std::size_t> tool;  // gold tool index, empty for the stop position
  bool stop = false;
};

/// One conditioning context with its supervised remaining plan.
struct TrainExample {
  std::size_t record = 0;
  std::size_t progress = 0;
  Vec context;
  std::vector<Vec> knots;
  std::vector<AnchorLabel> labels;
  bool failure = false;  // context produced after a wrong tool
};

/// Target for the position after the last gold tool: a reserved unit
/// direction outside the tool subspace (first coordinate of the second half).
Vec stop_knot(std::size_t d);

/// Per-episode simulator state for a task, independent of how it was loaded.
EnvState make_env(const Task& task, double sigma_obs, std::uint64_t seed);

/// Replays gold chains of the selected split through the simulator. Every
/// phase yields one example (remaining gold tools plus a stop knot); the
/// completed chain yields a stop-only example; with `augment`, each phase also
/// yields the context after one wrong tool.
std::vector<TrainExample> build_examples(const ModelBundle& bundle, const std::vector<TaskRecord>& records,
                                         Split split, bool augment, std::uint64_t noise_seed);

struct FlowLoss {
  double value = 0.0;
  GradientTape velocity;
};

/// Mean squared velocity residual against the teacher field over sampled
/// planning times (lead-in transport or tube samples around the path).
FlowLoss loss_flow_matching(const ModelBundle& bundle, const std::vector<TrainExample>& batch, SeededRng& rng);

struct DecodeLoss {
  double value = 0.0;
  double tool_term = 0.0;
  double stop_term = 0.0;
  std::vector<Vec> anchor_grads;
  GradientTape stop;
};

/// Sum over anchors of tool cross-entropy and stop binary cross-entropy.
DecodeLoss loss_decode(const ModelBundle& bundle, const std::vector<Vec>& anchors,
                       const std::vector<AnchorLabel>& labels, const Toolset& toolset, double epsilon,
                       std::span<const double> context);

struct ConsistencyLoss {
  double value = 0.0;
  std::vector<Vec> anchor_grads;
  GradientTape map;
};

/// (1/L) sum_l ||z_l - W_c c||^2.
ConsistencyLoss loss_consistency(const std::vector<Vec>& anchors, std::span<const double> context,
                                 const DenseNet& consistency_map);

struct RefineLoss {
  double value = 0.0;
  GradientTape velocity;
  std::vector<double> utilities;
  std::vector<double> weights;
};

/// Self-normalized exp(U) weights over K snapshot candidates
/// (each with stored prior noise); the loss pulls the current flow's
/// re-integrated anchors onto the weighted candidates.
RefineLoss loss_plan_refine(const ModelBundle& bundle, const VelocityModel& snapshot, const TrainExample& example,
                            const Task& task, SeededRng& rng);

/// exp(U_k) / sum_j exp(U_j), max-subtracted.
std::vector<double> utility_weights(const std::vector<double>& utilities);

struct LossComponents {
  double flow = 0.0;
  double decode = 0.0;
  double plan = 0.0;
  double consistency = 0.0;
};

double total_loss(const LossComponents& parts, double lambda_dec, double lambda_plan, double lambda_cons);

/// Teacher-forced quality of the leading anchor on a set of examples.
struct AnchorReport {
  double anchor_rms = 0.0;
  double within_half_margin = 0.0;  // fraction of action anchors
  double tool_em = 0.0;             // action rows
  double stop_accuracy = 0.0;       // stop rows
  std::size_t action_rows = 0;
  std::size_t stop_rows = 0;
};

AnchorReport evaluate_anchors(const ModelBundle& bundle, const std::vector<TaskRecord>& records,
                              const std::vector<TrainExample>& examples, std::uint64_t seed);

/// Mean utility of K sampled candidates per probe example under fixed noise.
double candidate_utility(const ModelBundle& bundle, const std::vector<TaskRecord>& records,
                         const std::vector<TrainExample>& probes, std::uint64_t seed);

struct HistoryRow {
  std::size_t epoch = 0;
  int stage = 1;
  LossComponents loss;
  double total = 0.0;
  double anchor_rms = 0.0;
  double dev_tool_em = 0.0;
  std::optional<double> candidate_utility;
};

struct TrainHistory {
  std::vector<HistoryRow> rows;
  double stage_seconds[3] = {0.0, 0.0, 0.0};  // wall clock, kept out of the CSV

  /// epoch,stage,loss_fm,loss_dec,loss_plan,loss_cons,loss_total,anchor_rms,dev_tool_em,candidate_utility
  std::string to_csv() const;
};

struct TrainOptions {
  /// When set, the bundle is written here after every epoch; on a numeric
  /// failure the last good file is left in place and the error rethrown.
  std::optional<std::filesystem::path> checkpoint;
  /// Bundle to start from instead of a fresh initialization.
  std::optional<ModelBundle> initial;
  /// Runs only the listed stages (1-based); empty means all.
  std::vector<int> stages;
};

struct TrainResult {
  ModelBundle bundle;
  TrainHistory history;
};

TrainResult train(const TrainConfig& config, const std::vector<TaskRecord>& records, const TrainOptions& options = {});

}  // namespace flowplan
