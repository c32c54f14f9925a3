#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "flowplan/errors.hpp"
#include "flowplan/evalcli.hpp"

namespace flowplan {

using nlohmann::json;

namespace {

double rate(std::size_t hit, std::size_t total) {
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

double parse_number(const std::string& field, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(field, &used);
    if (used != field.size()) throw ParseError("trailing characters in number '" + field + "'", line);
    return v;
  } catch (const std::logic_error&) {
    throw ParseError("not a number: '" + field + "'", line);
  }
}

std::vector<std::string> text_lines(std::string_view text) {
  std::vector<std::string> lines;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

}  // namespace

double MetricsRow::tool_em() const { return rate(action_correct, action_rows); }
double MetricsRow::stop_accuracy() const { return rate(stop_correct, stop_rows); }
double MetricsRow::overall_success() const {
  return rate(action_correct + stop_correct, action_rows + stop_rows);
}
double MetricsRow::unseen_tool_em() const { return rate(unseen_correct, unseen_rows); }

const MetricsRow* MetricsTable::find(std::string_view split, std::string_view domain) const {
  for (const auto& r : rows) {
    if (r.split == split && r.domain == domain) return &r;
  }
  return nullptr;
}

std::string MetricsTable::to_json() const {
  json arr = json::array();
  for (const auto& r : rows) {
    arr.push_back({{"split", r.split},
                   {"domain", r.domain},
                   {"episodes", r.episodes},
                   {"action_rows", r.action_rows},
                   {"action_correct", r.action_correct},
                   {"stop_rows", r.stop_rows},
                   {"stop_correct", r.stop_correct},
                   {"unseen_rows", r.unseen_rows},
                   {"unseen_correct", r.unseen_correct},
                   {"tool_em", r.tool_em()},
                   {"stop_accuracy", r.stop_accuracy()},
                   {"overall_success", r.overall_success()},
                   {"unseen_tool_em", r.unseen_tool_em()}});
  }
  return json{{"rows", arr}}.dump(2) + "\n";
}

MetricsTable MetricsTable::from_json(std::string_view text) {
  MetricsTable table;
  try {
    const json j = json::parse(text.begin(), text.end());
    for (const auto& r : j.at("rows")) {
      MetricsRow row;
      row.split = r.at("split").get<std::string>();
      row.domain = r.at("domain").get<std::string>();
      row.episodes = r.at("episodes").get<std::size_t>();
      row.action_rows = r.at("action_rows").get<std::size_t>();
      row.action_correct = r.at("action_correct").get<std::size_t>();
      row.stop_rows = r.at("stop_rows").get<std::size_t>();
      row.stop_correct = r.at("stop_correct").get<std::size_t>();
      row.unseen_rows = r.at("unseen_rows").get<std::size_t>();
      row.unseen_correct = r.at("unseen_correct").get<std::size_t>();
      table.rows.push_back(std::move(row));
    }
  } catch (const json::exception& e) {
    throw ParseError(e.what(), 1);
  }
  return table;
}

std::string MetricsTable::to_csv() const {
  std::string out =
      "split,domain,episodes,action_rows,stop_rows,unseen_rows,tool_em,stop_accuracy,overall_success,unseen_tool_em\n";
  for (const auto& r : rows) {
    out += r.split + "," + r.domain + "," + std::to_string(r.episodes) + "," + std::to_string(r.action_rows) + "," +
           std::to_string(r.stop_rows) + "," + std::to_string(r.unseen_rows) + "," + fmt(r.tool_em()) + "," +
           fmt(r.stop_accuracy()) + "," + fmt(r.overall_success()) + "," + fmt(r.unseen_tool_em()) + "\n";
  }
  return out;
}

RowScores score_episode(const EpisodeRecord& episode, const Task& task) {
  const std::size_t m = task.length();
  RowScores s;
  s.action.assign(m, false);
  std::vector<bool> seen(m + 1, false);
  for (const auto& e : episode.entries) {
    if (e.progress > m || seen[e.progress]) continue;
    seen[e.progress] = true;
    if (e.progress < m) {
      s.action[e.progress] = !e.stop && e.tool && *e.tool == task.gold[e.progress];
    } else {
      s.stop = e.stop;
    }
  }
  return s;
}

MetricsTable compute_metrics(const std::vector<EpisodeRecord>& episodes, const std::vector<TaskRecord>& tasks) {
  std::map<std::string, const Task*> by_id;
  for (const auto& t : tasks) by_id[t.task.id] = &t.task;
  std::map<std::pair<std::string, std::string>, MetricsRow> groups;
  groups[{"all", "all"}];
  for (const auto& ep : episodes) {
    const auto it = by_id.find(ep.task_id);
    if (it == by_id.end()) throw ReferenceError("episode references unknown task: " + ep.task_id);
    const Task& task = *it->second;
    const RowScores s = score_episode(ep, task);
    const std::string split(split_name(task.split));
    for (const auto& key : {std::pair{split, task.domain}, std::pair{split, std::string("all")},
                            std::pair{std::string("all"), std::string("all")}}) {
      MetricsRow& row = groups[key];
      row.episodes += 1;
      for (std::size_t j = 0; j < s.action.size(); ++j) {
        row.action_rows += 1;
        row.action_correct += s.action[j] ? 1 : 0;
        if (task.unseen[task.gold[j]]) {
          row.unseen_rows += 1;
          row.unseen_correct += s.action[j] ? 1 : 0;
        }
      }
      row.stop_rows += 1;
      row.stop_correct += s.stop ? 1 : 0;
    }
  }
  MetricsTable table;
  for (auto& [key, row] : groups) {
    row.split = key.first;
    row.domain = key.second;
    table.rows.push_back(row);
  }
  return table;
}

std::vector<EpisodeRecord> run_episodes(const ModelBundle& bundle, const std::vector<TaskRecord>& records,
                                        Split split, LoopMode mode, double sigma_obs, std::uint64_t seed) {
  std::vector<EpisodeRecord> out;
  const ExecutorConfig config{bundle.config.max_length, 0, std::nullopt};
  for (const auto& r : records) {
    if (r.task.split != split) continue;
    EnvState env = make_env(r.task, sigma_obs, seed);
    SeededRng rng(mix64(seed) ^ fnv1a64(r.task.id), 0xe9);
    switch (mode) {
      case LoopMode::Closed:
        out.push_back(run_closed_loop(flow_planner(bundle, DecodeMode::Map), bundle.context, env, r.task, config, rng));
        break;
      case LoopMode::Open:
        out.push_back(run_open_loop(flow_planner(bundle, DecodeMode::Map), bundle.context, env, r.task, config, rng));
        break;
      case LoopMode::Stepwise:
        out.push_back(run_stepwise_baseline(bundle, env, r.task, config));
        break;
    }
  }
  return out;
}

double closed_loop_utility(const ModelBundle& bundle, const std::vector<TaskRecord>& records, Split split,
                           double sigma_obs, std::uint64_t seed) {
  const ExecutorConfig config{bundle.config.max_length, 0, std::nullopt};
  const Planner inner = flow_planner(bundle, DecodeMode::Map);
  double total = 0.0;
  std::size_t phases = 0;
  for (const auto& r : records) {
    if (r.task.split != split) continue;
    const Task& task = r.task;
    const Planner scored = [&](const ContextState& ctx, std::size_t count, SeededRng& rng) {
      PhasePlan out = inner(ctx, count, rng);
      total += utility(out.plan, out.decoded, task, replay_progress(task, ctx), ctx.vec, bundle.consistency,
                       bundle.config.max_length, bundle.config.utility)
                   .value;
      ++phases;
      return out;
    };
    EnvState env = make_env(task, sigma_obs, seed);
    SeededRng rng(mix64(seed) ^ fnv1a64(task.id), 0xe9);
    run_closed_loop(scored, bundle.context, env, task, config, rng);
  }
  return phases == 0 ? 0.0 : total / static_cast<double>(phases);
}

LoopComparison compare_loops(const ModelBundle& bundle, const std::vector<TaskRecord>& records, Split split,
                             double sigma_obs, std::uint64_t seed) {
  const auto closed = run_episodes(bundle, records, split, LoopMode::Closed, sigma_obs, seed);
  const auto open = run_episodes(bundle, records, split, LoopMode::Open, sigma_obs, seed);
  const MetricsTable mc = compute_metrics(closed, records);
  const MetricsTable mo = compute_metrics(open, records);
  return {mc.find("all", "all")->tool_em(), mo.find("all", "all")->tool_em(), closed.size()};
}

void write_report(const MetricsTable& metrics, const std::vector<TrainHistory>& histories,
                  const std::vector<BoundReport>& reports, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create report directory " + out_dir.string() + ": " + ec.message());
  write_file_atomic(out_dir / "metrics.json", metrics.to_json());
  write_file_atomic(out_dir / "metrics.csv", metrics.to_csv());
  std::string history = "run,";
  history += "epoch,stage,loss_fm,loss_dec,loss_plan,loss_cons,loss_total,anchor_rms,dev_tool_em,candidate_utility\n";
  for (std::size_t i = 0; i < histories.size(); ++i) {
    const std::string csv = histories[i].to_csv();
    std::size_t start = csv.find('\n') + 1;
    while (start < csv.size()) {
      const std::size_t end = csv.find('\n', start);
      history += std::to_string(i) + "," + csv.substr(start, end - start) + "\n";
      start = end + 1;
    }
  }
  write_file_atomic(out_dir / "history.csv", history);
  for (const auto& r : reports) write_file_atomic(out_dir / (r.id + ".csv"), r.to_csv());
}

TrainHistory parse_history_csv(std::string_view text) {
  const auto lines = text_lines(text);
  if (lines.empty() || lines[0].rfind("epoch,stage,", 0) != 0) throw ParseError("missing history header", 1);
  TrainHistory history;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = split_fields(lines[i]);
    if (f.size() != 10) throw ParseError("expected 10 history fields", i + 1);
    HistoryRow r;
    r.epoch = static_cast<std::size_t>(parse_number(f[0], i + 1));
    r.stage = static_cast<int>(parse_number(f[1], i + 1));
    r.loss.flow = parse_number(f[2], i + 1);
    r.loss.decode = parse_number(f[3], i + 1);
    r.loss.plan = parse_number(f[4], i + 1);
    r.loss.consistency = parse_number(f[5], i + 1);
    r.total = parse_number(f[6], i + 1);
    r.anchor_rms = parse_number(f[7], i + 1);
    r.dev_tool_em = parse_number(f[8], i + 1);
    if (!f[9].empty()) r.candidate_utility = parse_number(f[9], i + 1);
    history.rows.push_back(r);
  }
  return history;
}

BoundReport parse_bound_report_csv(std::string_view text) {
  const auto lines = text_lines(text);
  BoundReport r;
  std::size_t i = 0;
  std::size_t summary = 0;
  for (; i < lines.size() && lines[i].rfind("# ", 0) == 0; ++i) {
    const std::string body = lines[i].substr(2);
    const std::size_t line_no = i + 1;
    if (i == 0) {
      if (body.rfind("id=", 0) != 0) throw ParseError("missing report id", line_no);
      r.id = body.substr(3);
    } else if (body.rfind("check ", 0) == 0) {
      const std::size_t eq = body.find('=');
      if (eq == std::string::npos) throw ParseError("malformed check line", line_no);
      const std::string verdict = body.substr(eq + 1);
      if (verdict != "pass" && verdict != "fail") throw ParseError("check verdict must be pass or fail", line_no);
      r.checks[body.substr(6, eq - 6)] = verdict == "pass";
    } else if (summary < 2) {
      // "<name>=<v> bound=<v>" then "violations=<n> trials=<n>"
      const std::size_t space = body.find(' ');
      const std::size_t eq1 = body.find('=');
      const std::size_t eq2 = body.rfind('=');
      if (space == std::string::npos || eq1 > space || eq2 < space) throw ParseError("malformed summary line", line_no);
      const std::string left = body.substr(0, eq1);
      const double a = parse_number(body.substr(eq1 + 1, space - eq1 - 1), line_no);
      const double b = parse_number(body.substr(eq2 + 1), line_no);
      if (summary == 0) {
        r.measured_name = left;
        r.measured = a;
        r.bound = b;
      } else {
        if (left != "violations") throw ParseError("expected violation counts", line_no);
        r.violations = static_cast<std::size_t>(a);
        r.trials = static_cast<std::size_t>(b);
      }
      ++summary;
    } else {
      const std::size_t eq = body.find('=');
      if (eq == std::string::npos) throw ParseError("malformed constant line", line_no);
      r.constants[body.substr(0, eq)] = parse_number(body.substr(eq + 1), line_no);
    }
  }
  if (r.id.empty() || summary < 2) throw ParseError("incomplete report summary", i + 1);
  if (i < lines.size()) {
    if (!lines[i].empty()) r.columns = split_fields(lines[i]);
    for (std::size_t k = i + 1; k < lines.size(); ++k) {
      if (lines[k].empty()) continue;
      const auto f = split_fields(lines[k]);
      if (f.size() != r.columns.size()) throw ParseError("row width differs from header", k + 1);
      std::vector<double> row;
      for (const auto& x : f) row.push_back(parse_number(x, k + 1));
      r.rows.push_back(std::move(row));
    }
  }
  return r;
}

}  // namespace flowplan
