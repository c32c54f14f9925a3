#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "flowplan/decoding.hpp"
#include "flowplan/flow_planner.hpp"
#include "flowplan/numerics.hpp"
#include "flowplan/semantic_space.hpp"
#include "flowplan/supervision.hpp"

namespace flowplan {

enum class Split { Train, Dev, Test };

std::string_view split_name(Split split);
/// Throws InputError on anything but "train", "dev" or "test".
Split parse_split(std::string_view name);

struct Task {
  std::string id;
  std::string domain;
  Split split = Split::Train;
  std::shared_ptr<const Toolset> toolset;
  std::vector<std::size_t> gold;  // toolset indices, length m >= 1
  Vec goal;                       // normalized mean of gold embeddings
  Vec query;                      // initial query x
  std::vector<bool> unseen;       // one flag per tool

  std::size_t length() const { return gold.size(); }
  bool gold_has_unseen() const;
};

/// Hidden progress of one episode plus its private noise stream.
struct EnvState {
  std::size_t progress = 0;
  SeededRng rng{0};
  double sigma_obs = 0.02;
  std::size_t calls = 0;
};

struct SyntheticConfig {
  std::size_t toolset_size = 8;
  std::size_t dimension = 16;
  std::size_t min_chain = 2;
  std::size_t max_chain = 5;
  double unseen_fraction = 0.2;
  double sigma_obs = 0.02;
  double query_noise = 0.05;
  double position_jitter = 0.15;  // fraction of the angular spacing
  std::uint64_t manifold_seed = 0x5eed;
};

/// Point on the shared closed tool manifold: a unit-speed-ish curve living in
/// the first d/2 coordinates.
Vec manifold_point(double theta, std::size_t d, std::uint64_t manifold_seed);

/// Tools on the manifold, a gold chain with no repeated tool, and a noisy query.
/// Train and dev chains avoid unseen tools; test chains may use them.
std::pair<Task, EnvState> generate_task(SeededRng& rng, const SyntheticConfig& config, Split split,
                                        const std::string& id);

/// Pre-episode observation that names the first gold tool: e_{t1}/2 + noise.
Vec briefing(EnvState& env, const Task& task);

/// Runs one tool. The next gold tool advances progress and returns
/// e_tool + e_next/2 + noise (e_next = 0 after the last step); anything else
/// returns -e_tool/2 + noise.
Vec execute(EnvState& env, const Task& task, std::size_t tool);
Vec execute(EnvState& env, const Task& task, std::string_view tool_id);

/// Frozen context-update maps: c' = rho W_U c + (1 - rho) tanh(W_a [e ; Enc(o)]).
struct ContextNets {
  Matrix transition;  // W_U, d x d
  Matrix action;      // W_a, d x 2d
  DenseNet encoder;   // Enc, d -> d
  double rho = 0.7;

  std::size_t dimension() const { return transition.rows(); }

  /// Two-block shift register: block 0 (first d/2 coordinates) receives new
  /// evidence 2 (o - e) and moves to block 1 on the next update, so the
  /// context remembers the latest two observations.
  static ContextNets shift_register(std::size_t d, double rho, double gain = 1.0);
  /// Random Gaussian maps; W_U is spectrally normalized when `normalize`.
  static ContextNets random(std::size_t d, double rho, SeededRng& rng, bool normalize = true);
};

/// Divides by max(1, estimated spectral norm).
void spectral_normalize(Matrix& m, int iterations = 20);

struct ContextEntry {
  std::size_t tool;
  Vec observation;
};

struct ContextState {
  Vec vec;
  std::vector<ContextEntry> record;
  std::size_t phase = 1;
  std::shared_ptr<const Toolset> toolset;
};

Vec context_map(const ContextNets& nets, std::span<const double> c, std::span<const double> tool_embedding,
                std::span<const double> observation);
ContextState update_context(const ContextState& ctx, std::size_t tool, std::span<const double> observation,
                            const ContextNets& nets);
/// Context after the briefing: c_1 = map(x, 0, o_0), empty record, phase 1.
ContextState start_context(const Task& task, std::span<const double> briefing_obs, const ContextNets& nets);

/// max ||map(c1) - map(c2)|| / ||c1 - c2|| over random pairs with shared inputs.
double contraction_estimate(const ContextNets& nets, std::size_t trials, SeededRng& rng);

struct UtilityWeights {
  double cost = 0.1;
  double redundancy = 0.2;
  double consistency = 0.1;
};

struct UtilityBreakdown {
  double accuracy = 0.0;
  double cost = 0.0;
  double redundancy = 0.0;
  double consistency = 0.0;
  UtilityWeights weights;
  double value = 0.0;
};

double assemble_utility(double acc, double cost, double red, double cons, const UtilityWeights& w);

/// Acc: matched prefix of the remaining gold chain over its length (with no
/// remaining steps, 1 for an empty plan, else 0). Cost: effective length over
/// L_max. Red: immediate repeats over max(1, length). Cons: exp(-mean anchor
/// distance squared to W_c c).
UtilityBreakdown utility(const LatentPlan& plan, const DecodedPlan& decoded, const Task& task, std::size_t progress,
                         std::span<const double> context, const DenseNet& consistency_map, std::size_t max_length,
                         const UtilityWeights& weights);

/// Text is hashed into the first d/2 coordinates (the tool subspace) and
/// zero-padded to d.
Vec embed_text(std::string_view text, std::size_t d, std::uint64_t salt);

struct TaskRecord {
  Task task;
  ExpertTrajectory expert;
  std::vector<std::string> rationales;
  std::vector<std::string> observations;
};

struct LoadOptions {
  std::size_t dimension = 16;
  std::uint64_t salt = 0;
};

/// One JSON object per line. Blank lines are skipped; a malformed line throws
/// ParseError with its 1-based number; an unknown gold tool throws
/// ReferenceError naming it.
std::vector<TaskRecord> load_trajectories(const std::filesystem::path& path, const LoadOptions& options);
std::vector<TaskRecord> parse_trajectories(std::string_view text, const LoadOptions& options);
std::string serialize_record(const TaskRecord& record);

/// Synthetic task wrapped as a record with its gold replay as expert steps.
TaskRecord synthetic_record(const Task& task, const EnvState& env);

}  // namespace flowplan
