#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "flowplan/decoding.hpp"
#include "flowplan/environment.hpp"
#include "flowplan/training.hpp"

namespace flowplan {

enum class LoopMode { Closed, Open, Stepwise };

std::string_view loop_mode_name(LoopMode mode);
/// Throws InputError on anything but "closed", "open" or "stepwise".
LoopMode parse_loop_mode(std::string_view name);

/// A latent plan together with its discrete reading.
struct PhasePlan {
  LatentPlan plan;
  DecodedPlan decoded;
};

/// Produces the plan for the current context; `count` anchors are requested.
using Planner = std::function<PhasePlan(const ContextState& context, std::size_t count, SeededRng& rng)>;

/// Samples from the learned flow and decodes with the bundle's temperature and stop head.
Planner flow_planner(const ModelBundle& bundle, DecodeMode mode);

/// Gold positions completed by the executed record of a context.
std::size_t replay_progress(const Task& task, const ContextState& context);

/// Places anchors exactly on the remaining gold embeddings followed by a stop
/// position; progress is recovered by replaying the context record against the gold chain.
Planner oracle_planner(const Task& task);

/// Local context errors added after each context update: phase h adds
/// magnitudes[h-1] * direction. Missing magnitudes count as zero.
struct ErrorInjection {
  Vec direction;
  std::vector<double> magnitudes;
};

struct ExecutorConfig {
  std::size_t plan_length = 8;  // anchors per plan, at least 2
  std::size_t horizon = 0;      // 0 selects 2 m + 2
  std::optional<ErrorInjection> injection;
};

struct PhaseEntry {
  std::size_t phase = 1;
  std::size_t progress = 0;                 // gold position when the phase began
  std::vector<Vec> anchors;                 // plan snapshot
  std::optional<std::size_t> tool;          // decoded leading tool, empty when the stop head fired
  bool executed = false;                    // false for stop events and the completion decision
  bool stop = false;
  double stop_probability = 0.0;            // at the leading anchor
  Vec observation;                          // empty when nothing was executed
  std::optional<double> context_error;      // after this phase's update, when an oracle trace exists
};

struct EpisodeRecord {
  std::string task_id;
  std::string domain;
  Split split = Split::Train;
  LoopMode mode = LoopMode::Closed;
  std::size_t gold_length = 0;
  std::size_t horizon = 0;
  std::vector<PhaseEntry> entries;
  bool stopped = false;
  bool success = false;  // stopped with the gold chain complete

  /// Number of phases that executed a tool.
  std::size_t executed_count() const;
  /// Sum of recorded context errors.
  double cumulative_context_error() const;
};

/// Receding horizon: each phase samples a plan, halts if the stop head fires
/// at anchor 1, otherwise executes only tool 1 and discards the rest. After the
/// gold chain completes, one more phase records the stop decision without
/// executing anything.
EpisodeRecord run_closed_loop(const Planner& planner, const ContextNets& nets, EnvState& env, const Task& task,
                              const ExecutorConfig& config, SeededRng& rng);
EpisodeRecord run_closed_loop(const ModelBundle& bundle, EnvState& env, const Task& task, std::size_t horizon,
                              const ExecutorConfig& config, SeededRng& rng, DecodeMode mode = DecodeMode::Map);

/// One plan at phase 1, decoded in full and executed without replanning. The
/// believed context is advanced by the oracle increment plus the injected
/// error and never corrected by observations.
EpisodeRecord run_open_loop(const Planner& planner, const ContextNets& nets, EnvState& env, const Task& task,
                            const ExecutorConfig& config, SeededRng& rng);
EpisodeRecord run_open_loop(const ModelBundle& bundle, EnvState& env, const Task& task, const ExecutorConfig& config,
                            SeededRng& rng, DecodeMode mode = DecodeMode::Map);

/// Myopic baseline: nearest tool to W_c c each phase, halting after the gold
/// length or the horizon.
EpisodeRecord run_stepwise_baseline(const ModelBundle& bundle, EnvState& env, const Task& task,
                                    const ExecutorConfig& config);

std::string serialize_episode(const EpisodeRecord& record, const Task& task);
/// Tool ids are resolved against `tasks` by task id.
EpisodeRecord parse_episode(std::string_view line, const std::vector<TaskRecord>& tasks);
std::vector<EpisodeRecord> parse_episodes(std::string_view text, const std::vector<TaskRecord>& tasks);

}  // namespace flowplan
