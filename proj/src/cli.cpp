#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "flowplan/errors.hpp"
#include "flowplan/evalcli.hpp"

namespace flowplan {

namespace {

namespace fs = std::filesystem;

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitViolation = 3;

/// FLOWPLAN_SEED when set and numeric.
std::optional<std::uint64_t> env_seed() {
  const char* raw = std::getenv("FLOWPLAN_SEED");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(raw, &used);
    if (raw[used] != '\0') throw ConfigError("FLOWPLAN_SEED must be an unsigned integer");
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError("FLOWPLAN_SEED must be an unsigned integer");
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

struct GenArgs {
  std::size_t tasks = 200;
  std::optional<std::uint64_t> seed;
  std::string out;
  double unseen_frac = 0.2;
  std::size_t chain_min = 2;
  std::size_t chain_max = 5;
  std::size_t tools = 8;
  std::size_t dimension = 16;
  double dev_frac = 0.2;
  double test_frac = 0.0;
};

int run_gen(const GenArgs& a) {
  if (a.dev_frac < 0.0 || a.test_frac < 0.0 || a.dev_frac + a.test_frac > 1.0)
    throw ConfigError("--dev-frac and --test-frac must be non-negative and sum to at most 1");
  SyntheticConfig sc;
  sc.toolset_size = a.tools;
  sc.dimension = a.dimension;
  sc.min_chain = a.chain_min;
  sc.max_chain = a.chain_max;
  sc.unseen_fraction = a.unseen_frac;
  const std::uint64_t seed = a.seed ? *a.seed : env_seed().value_or(7);
  const auto n = static_cast<double>(a.tasks);
  const auto n_test = static_cast<std::size_t>(n * a.test_frac + 0.5);
  const auto n_dev = static_cast<std::size_t>(n * a.dev_frac + 0.5);
  const std::size_t n_train = a.tasks - std::min(a.tasks, n_dev + n_test);
  SeededRng rng(seed);
  std::string text;
  for (std::size_t i = 0; i < a.tasks; ++i) {
    const Split split = i < n_train ? Split::Train : (i < n_train + n_dev ? Split::Dev : Split::Test);
    auto [task, env] = generate_task(rng, sc, split, "task" + std::to_string(i));
    text += serialize_record(synthetic_record(task, env)) + "\n";
  }
  write_file_atomic(a.out, text);
  std::printf("wrote %zu tasks (%zu train, %zu dev, %zu test) to %s\n", a.tasks, n_train,
              std::min(n_dev, a.tasks - n_train), a.tasks - n_train - std::min(n_dev, a.tasks - n_train),
              a.out.c_str());
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
};

int run_train(const TrainArgs& a) {
  TrainConfig config = a.config.empty() ? TrainConfig{} : TrainConfig::load(a.config);
  if (const auto s = env_seed()) config.seed = *s;
  config.validate();
  const auto records = load_trajectories(a.data, LoadOptions{config.dimension, 0});
  const fs::path out(a.out);
  ensure_directory(out);
  write_file_atomic(out / "config.json", config.to_json());
  TrainOptions options;
  options.checkpoint = out / "model.ckpt";
  const TrainResult result = train(config, records, options);
  result.bundle.save(out / "model.ckpt");
  write_file_atomic(out / "history.csv", result.history.to_csv());
  const HistoryRow* last = result.history.rows.empty() ? nullptr : &result.history.rows.back();
  std::printf("trained %zu epochs, config %s\n", result.history.rows.size(), config.hash().c_str());
  if (last != nullptr)
    std::printf("final loss %.6f anchor_rms %.6f dev_tool_em %.4f\n", last->total, last->anchor_rms,
                last->dev_tool_em);
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string mode = "closed";
  std::string split = "dev";
  std::string out;
  std::optional<double> sigma_obs;
  std::optional<std::uint64_t> seed;
};

int run_eval(const EvalArgs& a) {
  const ModelBundle bundle = ModelBundle::load(a.checkpoint);
  const auto records = load_trajectories(a.data, LoadOptions{bundle.config.dimension, 0});
  const LoopMode mode = parse_loop_mode(a.mode);
  const Split split = parse_split(a.split);
  const std::uint64_t seed = a.seed ? *a.seed : env_seed().value_or(bundle.config.seed);
  const double sigma = a.sigma_obs.value_or(bundle.config.sigma_obs);
  const auto episodes = run_episodes(bundle, records, split, mode, sigma, seed);
  const MetricsTable metrics = compute_metrics(episodes, records);
  std::map<std::string, const Task*> by_id;
  for (const auto& r : records) by_id[r.task.id] = &r.task;
  std::string lines;
  for (const auto& ep : episodes) lines += serialize_episode(ep, *by_id.at(ep.task_id)) + "\n";
  const fs::path out(a.out);
  ensure_directory(out);
  write_file_atomic(out / "episodes.jsonl", lines);
  write_file_atomic(out / "metrics.json", metrics.to_json());
  write_file_atomic(out / "metrics.csv", metrics.to_csv());
  for (const auto& row : metrics.rows) {
    std::printf("%-6s %-10s episodes %4zu tool_em %.4f stop_acc %.4f overall %.4f unseen_em %.4f\n",
                row.split.c_str(), row.domain.c_str(), row.episodes, row.tool_em(), row.stop_accuracy(),
                row.overall_success(), row.unseen_tool_em());
  }
  return 0;
}

struct TheoryArgs {
  std::string check = "all";
  std::string out;
  std::string checkpoint;
  std::string data;
};

int run_theory(const TheoryArgs& a) {
  const std::vector<std::string> known{"gronwall", "prop1", "prop2", "thm1", "thm2", "temperature", "all"};
  if (std::find(known.begin(), known.end(), a.check) == known.end())
    throw ConfigError("unknown check: " + a.check);
  const bool all = a.check == "all";
  const bool have_model = !a.checkpoint.empty() && !a.data.empty();
  if (a.check == "thm1" && !have_model) throw ConfigError("thm1 needs --checkpoint and --data");
  std::optional<std::uint64_t> seed = env_seed();
  std::vector<BoundReport> reports;
  if (all || a.check == "gronwall") {
    GronwallConfig c;
    if (seed) c.seed = *seed;
    reports.push_back(verify_gronwall_grid({0.0, 0.5, 1.0, 2.0}, {1e-3, 1e-2, 1e-1}, 100, c));
  }
  if (all || a.check == "prop1") {
    Prop1Config c;
    if (seed) c.seed = *seed;
    reports.push_back(verify_prop1(c));
  }
  if (all || a.check == "prop2") {
    Prop2Config c;
    if (seed) c.seed = *seed;
    reports.push_back(verify_prop2(c));
  }
  if ((all && have_model) || a.check == "thm1") {
    const ModelBundle bundle = ModelBundle::load(a.checkpoint);
    const auto records = load_trajectories(a.data, LoadOptions{bundle.config.dimension, 0});
    Thm1Config c;
    if (seed) c.seed = *seed;
    reports.push_back(verify_thm1(bundle, records, c));
  } else if (all) {
    std::fprintf(stderr, "thm1 skipped: needs --checkpoint and --data\n");
  }
  if (all || a.check == "thm2") {
    Thm2Config c;
    if (seed) c.seed = *seed;
    reports.push_back(verify_thm2(c));
  }
  if (all || a.check == "temperature") {
    TemperatureSweepConfig c;
    if (seed) c.seed = *seed;
    reports.push_back(temperature_sweep(c));
  }
  const fs::path out(a.out);
  ensure_directory(out);
  bool ok = true;
  for (const auto& r : reports) {
    write_file_atomic(out / (r.id + ".csv"), r.to_csv());
    std::printf("%s %s: %s %.6g bound %.6g violations %zu/%zu\n", r.passed() ? "PASS" : "FAIL", r.id.c_str(),
                r.measured_name.c_str(), r.measured, r.bound, r.violations, r.trials);
    ok = ok && r.passed();
  }
  return ok ? 0 : kExitViolation;
}

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out;
};

int run_report(const ReportArgs& a) {
  std::optional<MetricsTable> metrics;
  std::vector<TrainHistory> histories;
  std::vector<BoundReport> reports;
  for (const auto& dir_name : a.inputs) {
    const fs::path dir(dir_name);
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      const std::string name = file.filename().string();
      if (name == "metrics.json") {
        if (metrics) throw InputError("more than one metrics.json among the inputs");
        metrics = MetricsTable::from_json(read_text(file));
      } else if (name == "history.csv") {
        histories.push_back(parse_history_csv(read_text(file)));
      } else if (file.extension() == ".csv" && name != "metrics.csv") {
        const std::string text = read_text(file);
        if (text.rfind("# id=", 0) == 0) reports.push_back(parse_bound_report_csv(text));
      }
    }
  }
  if (!metrics) throw InputError("no metrics.json found among the inputs");
  write_report(*metrics, histories, reports, a.out);
  std::printf("report: %zu metric rows, %zu histories, %zu bound reports\n", metrics->rows.size(),
              histories.size(), reports.size());
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Flow-based tool-chain planner: data generation, training, evaluation and bound checks"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Write a synthetic task set as JSONL");
  gen_cmd->add_option("--tasks", gen.tasks, "Number of tasks")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", gen.seed, "Generator seed (default FLOWPLAN_SEED or 7)");
  gen_cmd->add_option("--out", gen.out, "Output JSONL path")->required();
  gen_cmd->add_option("--unseen-frac", gen.unseen_frac, "Fraction of tools held out of train and dev")
      ->check(CLI::Range(0.0, 1.0));
  gen_cmd->add_option("--chain-min", gen.chain_min, "Shortest gold chain")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--chain-max", gen.chain_max, "Longest gold chain")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--tools", gen.tools, "Tools per task")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--dimension", gen.dimension, "Embedding width")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--dev-frac", gen.dev_frac, "Fraction of tasks in the dev split");
  gen_cmd->add_option("--test-frac", gen.test_frac, "Fraction of tasks in the test split");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model bundle");
  train_cmd->add_option("--config", tr.config, "Training config JSON (defaults when omitted)");
  train_cmd->add_option("--data", tr.data, "Trajectory JSONL")->required();
  train_cmd->add_option("--out", tr.out, "Output directory")->required();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Run episodes and score them");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--data", ev.data, "Trajectory JSONL")->required();
  eval_cmd->add_option("--mode", ev.mode, "Loop mode")->check(CLI::IsMember({"closed", "open", "stepwise"}));
  eval_cmd->add_option("--split", ev.split, "Split to evaluate")->check(CLI::IsMember({"train", "dev", "test"}));
  eval_cmd->add_option("--out", ev.out, "Output directory")->required();
  eval_cmd->add_option("--sigma-obs", ev.sigma_obs, "Observation noise (default from the checkpoint)");
  eval_cmd->add_option("--seed", ev.seed, "Episode seed (default FLOWPLAN_SEED or the checkpoint seed)");

  TheoryArgs th;
  auto* theory_cmd = app.add_subcommand("theory", "Check the bounds empirically");
  theory_cmd->add_option("--check", th.check, "Which check to run")
      ->check(CLI::IsMember({"gronwall", "prop1", "prop2", "thm1", "thm2", "temperature", "all"}));
  theory_cmd->add_option("--out", th.out, "Output directory")->required();
  theory_cmd->add_option("--checkpoint", th.checkpoint, "Model checkpoint for thm1");
  theory_cmd->add_option("--data", th.data, "Trajectory JSONL for thm1");

  ReportArgs rp;
  auto* report_cmd = app.add_subcommand("report", "Collect metrics, histories and bound reports");
  report_cmd->add_option("--in", rp.inputs, "Input directories")->required();
  report_cmd->add_option("--out", rp.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen_cmd) return run_gen(gen);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*theory_cmd) return run_theory(th);
    if (*report_cmd) return run_report(rp);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace flowplan
