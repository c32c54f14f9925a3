// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "flowplan/errors.hpp"
#include "flowplan/evalcli.hpp"
#include "total_loss_check.hpp"

using namespace flowplan;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("flowplan_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "flowplan");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::fflush(stdout);
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

double dev_tool_em(const ModelBundle& bundle, const std::vector<TaskRecord>& records, double sigma,
                   std::uint64_t seed) {
  const auto episodes = run_episodes(bundle, records, Split::Dev, LoopMode::Closed, sigma, seed);
  return compute_metrics(episodes, records).find("all", "all")->tool_em();
}

/// Shared across criteria 2, 5 and 8: the default bundle after stages 1 and 2
/// on 200 tasks generated with the default seed.
struct Stage2Run {
  std::vector<TaskRecord> records;
  ModelBundle bundle;
  TrainConfig config;
  double seconds = 0.0;
};

const Stage2Run& stage2_run() {
  static const Stage2Run run = [] {
    const fs::path dir = scratch("stage2");
    if (cli({"gen", "--tasks", "200", "--out", (dir / "tasks.jsonl").string()}) != 0) throw IoError("gen failed");
    Stage2Run r;
    r.records = load_trajectories(dir / "tasks.jsonl", LoadOptions{r.config.dimension, 0});
    TrainOptions opt;
    opt.stages = {1, 2};
    const auto start = std::chrono::steady_clock::now();
    r.bundle = train(r.config, r.records, opt).bundle;
    r.seconds = seconds_since(start);
    return r;
  }();
  return run;
}

Verdict gradient_integrity() {
  const auto start = std::chrono::steady_clock::now();
  TrainConfig cfg;
  cfg.dimension = 8;
  cfg.hidden = {12};
  cfg.stop_hidden = 6;
  cfg.steps = 6;
  cfg.fm_samples = 4;
  cfg.candidates = 3;
  SyntheticConfig sc;
  sc.dimension = 8;
  sc.toolset_size = 6;
  sc.max_chain = 3;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    cfg.seed = seed;
    const ModelBundle bundle = ModelBundle::initialize(cfg);
    SeededRng rng(seed, 0xacc);
    auto [task, env] = generate_task(rng, sc, Split::Train, "g" + std::to_string(seed));
    const std::vector<TaskRecord> recs{synthetic_record(task, env)};
    const auto examples = build_examples(bundle, recs, Split::Train, true, seed);
    const TrainExample& ex = examples[seed % examples.size()];
    worst = std::max(worst, checks::total_loss_gradient_error(bundle, ex, recs[0].task, seed, 1e-5, true));
  }
  const double secs = seconds_since(start);
  return {worst < 1e-4 && secs < 30.0, format("max relative error %.3g over 100 seeds, %.1f s", worst, secs)};
}

Verdict flow_imitation() {
  const Stage2Run& r = stage2_run();
  const auto dev = build_examples(r.bundle, r.records, Split::Dev, false, mix64(r.config.seed ^ 0xde7));
  const AnchorReport rep = evaluate_anchors(r.bundle, r.records, dev, r.config.seed);
  const double em = dev_tool_em(r.bundle, r.records, r.config.sigma_obs, r.config.seed);
  return {rep.within_half_margin >= 0.95 && em >= 0.95 && r.seconds < 600.0,
          format("anchors within half margin %.4f, closed-loop dev Tool EM %.4f, training %.0f s",
                 rep.within_half_margin, em, r.seconds)};
}

Verdict report_verdict(const BoundReport& r) {
  std::string detail = format("%s %.6g bound %.6g, violations %zu/%zu", r.measured_name.c_str(), r.measured,
                              r.bound, r.violations, r.trials);
  for (const auto& [name, ok] : r.checks) detail += ", " + name + (ok ? " ok" : " FAILED");
  return {r.passed(), detail};
}

Verdict proposition1() {
  Prop1Config cfg;
  cfg.trials = 10000;
  return report_verdict(verify_prop1(cfg));
}

Verdict gronwall() {
  const BoundReport r = verify_gronwall_grid({0.0, 0.5, 1.0, 2.0}, {1e-3, 1e-2, 1e-1}, 100);
  const bool constant_ok = std::abs(c_flow(1.0) - (std::exp(1.0) - 1.0)) < 1e-12;
  Verdict v = report_verdict(r);
  v.pass = v.pass && constant_ok && r.trials == 1200;
  v.detail += format(", C_flow(1) = %.5f", c_flow(1.0));
  return v;
}

Verdict proposition2() {
  const RecurrenceTrace t = unroll_recurrences(0.5, {1.0, 1.0, 1.0});
  const bool symbolic = t.closed == std::vector<double>{0.0, 1.0, 1.5, 1.75} &&
                        t.open == std::vector<double>{0.0, 1.0, 2.0, 3.0};
  Verdict v = report_verdict(verify_prop2(Prop2Config{}));
  const Stage2Run& r = stage2_run();
  const LoopComparison cmp = compare_loops(r.bundle, r.records, Split::Dev, 0.2, r.config.seed);
  const double gap = cmp.closed_tool_em - cmp.open_tool_em;
  v.pass = v.pass && symbolic && gap >= 0.05;
  v.detail += format(", closed/open Tool EM at sigma 0.2: %.4f/%.4f (gap %.1f pp)", cmp.closed_tool_em,
                     cmp.open_tool_em, 100.0 * gap);
  return v;
}

Verdict theorem2() {
  const BoundReport r = verify_thm2(Thm2Config{});
  Verdict v = report_verdict(r);
  v.detail += format(", unseen accuracy %.4f vs label baseline %.4f", r.constants.at("continuous_unseen_accuracy"),
                     r.constants.at("label_baseline_accuracy"));
  return v;
}

Verdict temperature() {
  const BoundReport r = temperature_sweep(TemperatureSweepConfig{});
  Verdict v = report_verdict(r);
  for (const auto& [name, value] : r.constants) v.detail += format(", %s %.4f", name.c_str(), value);
  return v;
}

Verdict refinement() {
  const Stage2Run& r = stage2_run();
  TrainConfig cfg = r.config;
  cfg.epochs_refine = 12;
  TrainOptions opt;
  opt.initial = r.bundle;
  opt.stages = {3};
  const auto start = std::chrono::steady_clock::now();
  const TrainResult refined = train(cfg, r.records, opt);
  const double secs = seconds_since(start);
  std::vector<double> u;
  for (const auto& row : refined.history.rows) u.push_back(row.candidate_utility.value_or(NAN));
  std::vector<double> ma;
  for (std::size_t i = 2; i < u.size(); ++i) ma.push_back((u[i - 2] + u[i - 1] + u[i]) / 3.0);
  std::size_t drops = 0;
  for (std::size_t i = 1; i < ma.size(); ++i) drops += ma[i] < ma[i - 1] ? 1 : 0;
  const double before = closed_loop_utility(r.bundle, r.records, Split::Dev, cfg.sigma_obs, cfg.seed);
  const double after = closed_loop_utility(refined.bundle, r.records, Split::Dev, cfg.sigma_obs, cfg.seed);
  const bool ok = u.size() == 12 && drops == 0 && after >= before && secs < 600.0;
  return {ok, format("3-epoch moving average drops %zu/%zu, candidate utility %.5f -> %.5f, closed-loop "
                     "utility %.5f -> %.5f, %.0f s",
                     drops, ma.empty() ? 0 : ma.size() - 1, u.empty() ? NAN : u.front(),
                     u.empty() ? NAN : u.back(), before, after, secs)};
}

/// Every file under `dir`, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

Verdict determinism() {
  const fs::path root = scratch("determinism");
  TrainConfig cfg;
  cfg.hidden = {32, 32};
  cfg.epochs_flow = 20;
  cfg.epochs_decode = 3;
  cfg.epochs_refine = 2;
  cfg.refine_examples = 8;
  cfg.utility_probe_examples = 16;
  cfg.seed = 5;
  std::ofstream(root / "config.json") << cfg.to_json();
  std::vector<int> codes[2];
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = root / ("run" + std::to_string(run));
    const std::string data = (dir / "tasks.jsonl").string();
    const std::string model = (dir / "model").string();
    fs::create_directories(dir);
    codes[run].push_back(cli({"gen", "--tasks", "30", "--seed", "5", "--out", data}));
    codes[run].push_back(cli({"train", "--config", (root / "config.json").string(), "--data", data, "--out", model}));
    codes[run].push_back(cli({"eval", "--checkpoint", model + "/model.ckpt", "--data", data, "--mode", "closed",
                              "--out", (dir / "eval").string()}));
    codes[run].push_back(cli({"theory", "--check", "all", "--checkpoint", model + "/model.ckpt", "--data", data,
                              "--out", (dir / "theory").string()}));
  }
  const auto a = tree(root / "run0"), b = tree(root / "run1");
  std::size_t differing = 0;
  for (const auto& [name, text] : a) {
    const auto it = b.find(name);
    differing += it == b.end() || it->second != text ? 1 : 0;
  }
  differing += b.size() > a.size() ? b.size() - a.size() : 0;
  const bool ran = codes[0][0] == 0 && codes[0][1] == 0 && codes[0][2] == 0 && codes[0][3] != 1 && codes[0][3] != 2;
  return {ran && codes[0] == codes[1] && differing == 0 && a.size() >= 10,
          format("%zu output files compared, %zu differ, exit codes gen/train/eval/theory %d/%d/%d/%d", a.size(),
                 differing, codes[0][0], codes[0][1], codes[0][2], codes[0][3])};
}

Verdict ingestion() {
  const fs::path fixtures(FLOWPLAN_FIXTURES);
  const TrainConfig cfg;
  const LoadOptions load{cfg.dimension, 0};
  const auto records = load_trajectories(fixtures / "trajectories.jsonl", load);
  std::string text;
  for (const auto& r : records) text += serialize_record(r) + "\n";
  std::string again;
  for (const auto& r : parse_trajectories(text, load)) again += serialize_record(r) + "\n";
  const bool round_trip = records.size() == 20 && again == text;

  bool malformed_ok = false;
  try {
    load_trajectories(fixtures / "malformed.jsonl", load);
  } catch (const ParseError& e) {
    malformed_ok = e.line() == 3;
  }
  bool dangling_ok = false;
  try {
    load_trajectories(fixtures / "dangling_tool.jsonl", load);
  } catch (const ReferenceError& e) {
    dangling_ok = std::string(e.what()).find("refund_gift_card") != std::string::npos;
  }

  const TrainResult trained = train(cfg, records);
  const double em = dev_tool_em(trained.bundle, records, cfg.sigma_obs, cfg.seed);
  return {round_trip && malformed_ok && dangling_ok && em >= 0.9,
          format("%zu records, round trip %s, malformed line error %s, dangling tool error %s, dev Tool EM %.4f",
                 records.size(), round_trip ? "ok" : "FAILED", malformed_ok ? "ok" : "FAILED",
                 dangling_ok ? "ok" : "FAILED", em)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient integrity", gradient_integrity},
      {"flow imitation", flow_imitation},
      {"proposition 1 decoding bound", proposition1},
      {"gronwall constant", gronwall},
      {"proposition 2 closed vs open loop", proposition2},
      {"theorem 2 unseen-tool generalization", theorem2},
      {"temperature sweep", temperature},
      {"refinement monotonicity", refinement},
      {"determinism", determinism},
      {"ingestion", ingestion},
  };
  std::vector<std::string> lines;
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    all = all && v.pass;
    lines.push_back(format("%s %zu %s: ", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str()) + v.detail);
    std::printf("%s\n", lines.back().c_str());
    std::fflush(stdout);
  }
  std::printf("\nsummary\n");
  for (const auto& l : lines) std::printf("%s\n", l.c_str());
  return all ? 0 : 1;
}
