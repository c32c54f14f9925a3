#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "flowplan/executor.hpp"
#include "flowplan/theory_lab.hpp"
#include "flowplan/training.hpp"

namespace flowplan {

/// Row-level counts for one (split, domain) group; "all" aggregates.
struct MetricsRow {
  std::string split;
  std::string domain;
  std::size_t episodes = 0;
  std::size_t action_rows = 0;
  std::size_t action_correct = 0;
  std::size_t stop_rows = 0;
  std::size_t stop_correct = 0;
  std::size_t unseen_rows = 0;
  std::size_t unseen_correct = 0;

  double tool_em() const;
  double stop_accuracy() const;
  /// Correct action and stop rows over all rows.
  double overall_success() const;
  double unseen_tool_em() const;

  bool operator==(const MetricsRow&) const = default;
};

struct MetricsTable {
  std::vector<MetricsRow> rows;  // sorted by (split, domain), "all" rows included

  const MetricsRow* find(std::string_view split, std::string_view domain) const;
  std::string to_json() const;
  static MetricsTable from_json(std::string_view text);
  std::string to_csv() const;

  bool operator==(const MetricsTable&) const = default;
};

/// Per-row correctness of one episode against its gold chain.
struct RowScores {
  std::vector<bool> action;  // one per gold position
  bool stop = false;
};

/// Action row j is correct when the first phase that began at gold position j
/// decoded gold[j]; the stop row is correct when the first phase that began
/// with the chain complete fired the stop head.
RowScores score_episode(const EpisodeRecord& episode, const Task& task);

/// Throws ReferenceError when an episode names an unknown task.
MetricsTable compute_metrics(const std::vector<EpisodeRecord>& episodes, const std::vector<TaskRecord>& tasks);

/// Runs every task of `split` in the given loop mode with MAP decoding and
/// observation noise sigma_obs; per-task streams derive from `seed`.
std::vector<EpisodeRecord> run_episodes(const ModelBundle& bundle, const std::vector<TaskRecord>& records,
                                        Split split, LoopMode mode, double sigma_obs, std::uint64_t seed);

/// Mean utility of every phase plan produced during MAP closed-loop episodes
/// on `split`, each scored against the gold position reached when the phase
/// began.
double closed_loop_utility(const ModelBundle& bundle, const std::vector<TaskRecord>& records, Split split,
                           double sigma_obs, std::uint64_t seed);

struct LoopComparison {
  double closed_tool_em = 0.0;
  double open_tool_em = 0.0;
  std::size_t episodes = 0;
};

/// Closed- versus open-loop Tool EM on the same tasks and noise streams.
LoopComparison compare_loops(const ModelBundle& bundle, const std::vector<TaskRecord>& records, Split split,
                             double sigma_obs, std::uint64_t seed);

/// Writes metrics.json, metrics.csv, history.csv and one <id>.csv per report,
/// each atomically.
void write_report(const MetricsTable& metrics, const std::vector<TrainHistory>& histories,
                  const std::vector<BoundReport>& reports, const std::filesystem::path& out_dir);

/// Inverse of TrainHistory::to_csv; throws ParseError with the line number.
TrainHistory parse_history_csv(std::string_view text);

/// Inverse of BoundReport::to_csv up to the config JSON, which the CSV omits.
BoundReport parse_bound_report_csv(std::string_view text);

/// Entry point for the flowplan command line; returns the process exit code.
int run_cli(int argc, const char* const* argv);

}  // namespace flowplan
