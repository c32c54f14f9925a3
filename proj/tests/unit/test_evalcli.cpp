#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "flowplan/errors.hpp"
#include "flowplan/evalcli.hpp"

using namespace flowplan;
namespace fs = std::filesystem;

namespace {

TaskRecord make_record(std::uint64_t seed, Split split = Split::Dev, std::size_t chain = 3) {
  SyntheticConfig cfg;
  cfg.min_chain = chain;
  cfg.max_chain = chain;
  SeededRng rng(seed);
  auto [task, env] = generate_task(rng, cfg, split, "t" + std::to_string(seed));
  return synthetic_record(task, env);
}

PhaseEntry act(std::size_t progress, std::size_t tool) {
  PhaseEntry e;
  e.progress = progress;
  e.tool = tool;
  e.executed = true;
  return e;
}

PhaseEntry halt(std::size_t progress) {
  PhaseEntry e;
  e.progress = progress;
  e.stop = true;
  return e;
}

EpisodeRecord gold_episode(const Task& task) {
  EpisodeRecord ep;
  ep.task_id = task.id;
  ep.domain = task.domain;
  ep.split = task.split;
  ep.gold_length = task.length();
  for (std::size_t j = 0; j < task.length(); ++j) ep.entries.push_back(act(j, task.gold[j]));
  ep.entries.push_back(halt(task.length()));
  ep.stopped = ep.success = true;
  return ep;
}

std::size_t wrong_tool(const Task& task, std::size_t j) { return (task.gold[j] + 1) % task.toolset->size(); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("flowplan_evalcli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "flowplan");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST(ScoreEpisode, GoldEpisodeScoresEveryRow) {
  const TaskRecord r = make_record(1);
  const RowScores s = score_episode(gold_episode(r.task), r.task);
  EXPECT_EQ(s.action, std::vector<bool>(3, true));
  EXPECT_TRUE(s.stop);
}

TEST(ScoreEpisode, OnlyTheFirstPhaseAtEachPositionCounts) {
  const TaskRecord r = make_record(2);
  const Task& t = r.task;
  EpisodeRecord ep = gold_episode(t);
  // Wrong first attempt at position 1, then a correct retry from the same position.
  ep.entries.insert(ep.entries.begin() + 1, act(1, wrong_tool(t, 1)));
  const RowScores s = score_episode(ep, t);
  EXPECT_EQ(s.action, (std::vector<bool>{true, false, true}));
  EXPECT_TRUE(s.stop);
}

TEST(ScoreEpisode, EarlyStopAndMissedStop) {
  const TaskRecord r = make_record(3);
  const Task& t = r.task;
  EpisodeRecord early;
  early.task_id = t.id;
  early.entries = {act(0, t.gold[0]), halt(1)};
  RowScores s = score_episode(early, t);
  EXPECT_EQ(s.action, (std::vector<bool>{true, false, false}));
  EXPECT_FALSE(s.stop);

  EpisodeRecord missed = gold_episode(t);
  missed.entries.back() = act(3, t.gold[0]);
  missed.entries.back().executed = false;
  s = score_episode(missed, t);
  EXPECT_EQ(s.action, std::vector<bool>(3, true));
  EXPECT_FALSE(s.stop);
}

TEST(Metrics, AllGoldEpisodesScorePerfectly) {
  std::vector<TaskRecord> tasks;
  std::vector<EpisodeRecord> eps;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    tasks.push_back(make_record(s));
    eps.push_back(gold_episode(tasks.back().task));
  }
  const MetricsTable m = compute_metrics(eps, tasks);
  const MetricsRow* all = m.find("all", "all");
  ASSERT_NE(all, nullptr);
  EXPECT_EQ(all->episodes, 5u);
  EXPECT_EQ(all->action_rows, 15u);
  EXPECT_DOUBLE_EQ(all->tool_em(), 1.0);
  EXPECT_DOUBLE_EQ(all->stop_accuracy(), 1.0);
  EXPECT_DOUBLE_EQ(all->overall_success(), 1.0);
  EXPECT_NE(m.find("dev", "all"), nullptr);
}

TEST(Metrics, OneWrongActionInTenRows) {
  // Five tasks of length 2 give ten action rows and five stop rows.
  std::vector<TaskRecord> tasks;
  std::vector<EpisodeRecord> eps;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    tasks.push_back(make_record(s, Split::Dev, 2));
    eps.push_back(gold_episode(tasks.back().task));
  }
  eps[0].entries[1].tool = wrong_tool(tasks[0].task, 1);
  const MetricsRow* all = compute_metrics(eps, tasks).find("all", "all");
  EXPECT_EQ(all->action_rows, 10u);
  EXPECT_DOUBLE_EQ(all->tool_em(), 0.9);
  EXPECT_DOUBLE_EQ(all->stop_accuracy(), 1.0);
  EXPECT_DOUBLE_EQ(all->overall_success(), 14.0 / 15.0);
}

TEST(Metrics, UnknownTaskIsAReferenceError) {
  const TaskRecord r = make_record(4);
  EpisodeRecord ep = gold_episode(r.task);
  ep.task_id = "missing";
  EXPECT_THROW(compute_metrics({ep}, {r}), ReferenceError);
}

TEST(Metrics, EpisodesSurviveAJsonlRoundTrip) {
  std::vector<TaskRecord> tasks;
  std::vector<EpisodeRecord> eps;
  for (std::uint64_t s = 1; s <= 6; ++s) {
    tasks.push_back(make_record(s, s % 2 == 0 ? Split::Dev : Split::Train));
    const Task& t = tasks.back().task;
    EnvState env = make_env(t, 0.1, s);
    SeededRng rng(s);
    eps.push_back(run_closed_loop(oracle_planner(t), ContextNets::shift_register(16, 0.7), env, t, ExecutorConfig{},
                                  rng));
  }
  std::string text;
  for (std::size_t i = 0; i < eps.size(); ++i) text += serialize_episode(eps[i], tasks[i].task) + "\n";
  const auto back = parse_episodes(text, tasks);
  ASSERT_EQ(back.size(), eps.size());
  EXPECT_EQ(compute_metrics(back, tasks), compute_metrics(eps, tasks));
}

TEST(MetricsTable, JsonRoundTrip) {
  std::vector<TaskRecord> tasks{make_record(1), make_record(2, Split::Train)};
  std::vector<EpisodeRecord> eps{gold_episode(tasks[0].task), gold_episode(tasks[1].task)};
  eps[1].entries[0].tool = wrong_tool(tasks[1].task, 0);
  const MetricsTable m = compute_metrics(eps, tasks);
  EXPECT_EQ(MetricsTable::from_json(m.to_json()), m);
  EXPECT_THROW(MetricsTable::from_json("{not json"), ParseError);
}

TEST(History, CsvRoundTrip) {
  TrainHistory h;
  HistoryRow a;
  a.epoch = 1;
  a.loss = {0.5, 0.25, 0.0, 0.125};
  a.total = 0.875;
  a.anchor_rms = 0.3;
  a.dev_tool_em = 0.75;
  HistoryRow b = a;
  b.epoch = 2;
  b.stage = 3;
  b.candidate_utility = 0.5625;
  h.rows = {a, b};
  const TrainHistory back = parse_history_csv(h.to_csv());
  ASSERT_EQ(back.rows.size(), 2u);
  EXPECT_EQ(back.to_csv(), h.to_csv());
  EXPECT_FALSE(back.rows[0].candidate_utility.has_value());
  EXPECT_DOUBLE_EQ(*back.rows[1].candidate_utility, 0.5625);
}

TEST(History, ParseErrorsCarryTheLineNumber) {
  EXPECT_THROW(parse_history_csv("epoch,oops\n"), ParseError);
  TrainHistory h;
  h.rows.resize(2);
  std::string csv = h.to_csv();
  csv += "3,1,x,0,0,0,0,0,0,\n";
  try {
    parse_history_csv(csv);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 4u);
  }
  try {
    parse_history_csv(h.to_csv() + "1,2,3\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 4u);
  }
}

TEST(BoundReportCsv, RoundTripsEverythingButTheConfig) {
  BoundReport r;
  r.id = "demo";
  r.measured_name = "worst_ratio";
  r.measured = 0.75;
  r.bound = 1.0;
  r.violations = 0;
  r.trials = 12;
  r.constants["c"] = 1.5;
  r.checks["side"] = true;
  r.columns = {"k", "delta"};
  r.rows = {{0.5, 0.01}, {1.0, 0.1}};
  const BoundReport back = parse_bound_report_csv(r.to_csv());
  EXPECT_EQ(back.id, r.id);
  EXPECT_EQ(back.measured_name, r.measured_name);
  EXPECT_DOUBLE_EQ(back.measured, r.measured);
  EXPECT_EQ(back.trials, r.trials);
  EXPECT_EQ(back.constants, r.constants);
  EXPECT_EQ(back.checks, r.checks);
  EXPECT_EQ(back.columns, r.columns);
  EXPECT_EQ(back.rows, r.rows);
  EXPECT_EQ(back.to_csv(), r.to_csv());
}

TEST(BoundReportCsv, MalformedHeadersAreParseErrors) {
  EXPECT_THROW(parse_bound_report_csv("a,b\n1,2\n"), ParseError);
  EXPECT_THROW(parse_bound_report_csv("# id=x\n"), ParseError);
  EXPECT_THROW(parse_bound_report_csv("# id=x\n# m=1 bound=2\n# violations=0 trials=1\n# check a=maybe\n"),
               ParseError);
}

TEST(WriteReport, EmptyInputsStillWriteHeaders) {
  const fs::path dir = scratch("empty");
  write_report(MetricsTable{}, {}, {}, dir / "out");
  EXPECT_TRUE(fs::exists(dir / "out" / "metrics.json"));
  EXPECT_EQ(MetricsTable::from_json(slurp(dir / "out" / "metrics.json")), MetricsTable{});
  EXPECT_EQ(slurp(dir / "out" / "history.csv").rfind("run,epoch,stage,", 0), 0u);
}

TEST(WriteReport, OutputsRoundTripAndAreDeterministic) {
  std::vector<TaskRecord> tasks{make_record(1), make_record(2)};
  const MetricsTable m = compute_metrics({gold_episode(tasks[0].task), gold_episode(tasks[1].task)}, tasks);
  TrainHistory h;
  h.rows.resize(2);
  h.rows[1].epoch = 1;
  BoundReport r;
  r.id = "demo";
  r.measured_name = "x";
  r.trials = 1;
  const fs::path dir = scratch("report");
  write_report(m, {h, h}, {r}, dir / "a");
  write_report(m, {h, h}, {r}, dir / "b");
  for (const char* name : {"metrics.json", "metrics.csv", "history.csv", "demo.csv"})
    EXPECT_EQ(slurp(dir / "a" / name), slurp(dir / "b" / name)) << name;
  EXPECT_EQ(MetricsTable::from_json(slurp(dir / "a" / "metrics.json")), m);
  EXPECT_EQ(parse_bound_report_csv(slurp(dir / "a" / "demo.csv")).id, "demo");
  // Two histories of two rows each, plus the header.
  const std::string history = slurp(dir / "a" / "history.csv");
  EXPECT_EQ(std::count(history.begin(), history.end(), '\n'), 5);
}

TEST(Cli, MissingSubcommandIsAUsageError) {
  EXPECT_EQ(cli({}), 1);
  EXPECT_EQ(cli({"frobnicate"}), 1);
  EXPECT_EQ(cli({"eval", "--data", "x"}), 1);
}

TEST(Cli, GenIsDeterministic) {
  const fs::path dir = scratch("gen");
  ASSERT_EQ(cli({"gen", "--tasks", "12", "--seed", "5", "--out", (dir / "a.jsonl").string()}), 0);
  ASSERT_EQ(cli({"gen", "--tasks", "12", "--seed", "5", "--out", (dir / "b.jsonl").string()}), 0);
  ASSERT_EQ(cli({"gen", "--tasks", "12", "--seed", "6", "--out", (dir / "c.jsonl").string()}), 0);
  const std::string a = slurp(dir / "a.jsonl");
  EXPECT_EQ(a, slurp(dir / "b.jsonl"));
  EXPECT_NE(a, slurp(dir / "c.jsonl"));
  EXPECT_EQ(load_trajectories(dir / "a.jsonl", LoadOptions{}).size(), 12u);
}

TEST(Cli, RuntimeErrorsExitWithTwo) {
  const fs::path dir = scratch("missing");
  EXPECT_EQ(cli({"eval", "--checkpoint", (dir / "none.ckpt").string(), "--data", (dir / "none.jsonl").string(),
                 "--out", (dir / "o").string()}),
            2);
  EXPECT_EQ(cli({"theory", "--check", "thm1", "--out", (dir / "o").string()}), 2);
}

TEST(Cli, TheoryProp2PassesAndWritesItsReport) {
  const fs::path dir = scratch("theory");
  EXPECT_EQ(cli({"theory", "--check", "prop2", "--out", dir.string()}), 0);
  const BoundReport r = parse_bound_report_csv(slurp(dir / "prop2.csv"));
  EXPECT_EQ(r.id, "prop2");
  EXPECT_TRUE(r.passed());
}
