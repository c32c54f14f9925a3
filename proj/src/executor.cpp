#include "flowplan/executor.hpp"

#include <json.hpp>

#include "flowplan/errors.hpp"

namespace flowplan {

using nlohmann::json;

std::string_view loop_mode_name(LoopMode mode) {
  switch (mode) {
    case LoopMode::Closed: return "closed";
    case LoopMode::Open: return "open";
    case LoopMode::Stepwise: return "stepwise";
  }
  return "closed";
}

LoopMode parse_loop_mode(std::string_view name) {
  if (name == "closed") return LoopMode::Closed;
  if (name == "open") return LoopMode::Open;
  if (name == "stepwise") return LoopMode::Stepwise;
  throw InputError("unknown loop mode: " + std::string(name));
}

std::size_t EpisodeRecord::executed_count() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.executed ? 1 : 0;
  return n;
}

double EpisodeRecord::cumulative_context_error() const {
  double total = 0.0;
  for (const auto& e : entries) total += e.context_error.value_or(0.0);
  return total;
}

Planner flow_planner(const ModelBundle& bundle, DecodeMode mode) {
  return [&bundle, mode](const ContextState& context, std::size_t count, SeededRng& rng) {
    PhasePlan out;
    out.plan = sample_plan(bundle.velocity, context.vec, count, rng, bundle.flow_settings());
    out.decoded =
        decode_plan(out.plan, *context.toolset, bundle.config.epsilon, bundle.stop, context.vec, mode, rng);
    return out;
  };
}

std::size_t replay_progress(const Task& task, const ContextState& context) {
  std::size_t p = 0;
  for (const auto& entry : context.record) {
    if (p < task.gold.size() && entry.tool == task.gold[p]) ++p;
  }
  return p;
}

Planner oracle_planner(const Task& task) {
  return [&task](const ContextState& context, std::size_t count, SeededRng&) {
    const std::size_t d = task.toolset->dimension();
    const std::size_t progress = replay_progress(task, context);
    PhasePlan out;
    out.plan.context_hash = hash_vector(context.vec);
    out.decoded.mode = DecodeMode::Map;
    for (std::size_t l = 0; l < count; ++l) {
      const std::size_t j = progress + l;
      out.plan.anchor_times.push_back(knot_time(l, count));
      if (j < task.gold.size()) {
        out.plan.anchors.push_back(task.toolset->embedding(task.gold[j]));
        if (!out.decoded.stopped) {
          out.decoded.tools.push_back(task.gold[j]);
          out.decoded.stop_probabilities.push_back(0.0);
        }
      } else {
        out.plan.anchors.push_back(stop_knot(d));
        if (!out.decoded.stopped) {
          out.decoded.stop_probabilities.push_back(1.0);
          out.decoded.stopped = true;
        }
      }
    }
    out.decoded.effective_length = out.decoded.tools.size();
    return out;
  };
}

namespace {

std::size_t resolve_horizon(const ExecutorConfig& config, const Task& task) {
  return config.horizon > 0 ? config.horizon : 2 * task.length() + 2;
}

void check_config(const ExecutorConfig& config, const Task& task) {
  if (config.plan_length < 2) throw ConfigError("plan_length must be at least 2");
  if (config.injection && config.injection->direction.size() != task.toolset->dimension()) {
    throw ShapeError("injection direction width mismatch");
  }
}

double injected(const ExecutorConfig& config, std::size_t phase) {
  if (!config.injection) return 0.0;
  const auto& a = config.injection->magnitudes;
  return phase - 1 < a.size() ? a[phase - 1] : 0.0;
}

EpisodeRecord new_record(const Task& task, LoopMode mode, std::size_t horizon) {
  EpisodeRecord rec;
  rec.task_id = task.id;
  rec.domain = task.domain;
  rec.split = task.split;
  rec.mode = mode;
  rec.gold_length = task.length();
  rec.horizon = horizon;
  return rec;
}

void finish(EpisodeRecord& rec, const EnvState& env) { rec.success = rec.stopped && env.progress == rec.gold_length; }

}  // namespace

EpisodeRecord run_closed_loop(const Planner& planner, const ContextNets& nets, EnvState& env, const Task& task,
                              const ExecutorConfig& config, SeededRng& rng) {
  check_config(config, task);
  const std::size_t horizon = resolve_horizon(config, task);
  EpisodeRecord rec = new_record(task, LoopMode::Closed, horizon);
  ContextState ctx = start_context(task, briefing(env, task), nets);
  ContextState clean = ctx;
  for (std::size_t h = 1; h <= horizon; ++h) {
    const PhasePlan p = planner(ctx, config.plan_length, rng);
    PhaseEntry entry;
    entry.phase = h;
    entry.progress = env.progress;
    entry.anchors = p.plan.anchors;
    entry.stop_probability = p.decoded.stop_probabilities.empty() ? 0.0 : p.decoded.stop_probabilities.front();
    if (p.decoded.effective_length == 0) {
      entry.stop = true;
      rec.entries.push_back(std::move(entry));
      rec.stopped = true;
      break;
    }
    entry.tool = p.decoded.tools.front();
    if (env.progress == task.length()) {
      // Gold chain already complete: record the missed stop without acting.
      rec.entries.push_back(std::move(entry));
      break;
    }
    entry.observation = execute(env, task, *entry.tool);
    entry.executed = true;
    ctx = update_context(ctx, *entry.tool, entry.observation, nets);
    if (config.injection) {
      clean = update_context(clean, *entry.tool, entry.observation, nets);
      axpy(injected(config, h), config.injection->direction, ctx.vec);
      entry.context_error = distance(ctx.vec, clean.vec);
    }
    rec.entries.push_back(std::move(entry));
  }
  finish(rec, env);
  return rec;
}

EpisodeRecord run_closed_loop(const ModelBundle& bundle, EnvState& env, const Task& task, std::size_t horizon,
                              const ExecutorConfig& config, SeededRng& rng, DecodeMode mode) {
  if (horizon == 0) throw InputError("horizon must be at least 1");
  ExecutorConfig c = config;
  c.horizon = horizon;
  return run_closed_loop(flow_planner(bundle, mode), bundle.context, env, task, c, rng);
}

EpisodeRecord run_open_loop(const Planner& planner, const ContextNets& nets, EnvState& env, const Task& task,
                            const ExecutorConfig& config, SeededRng& rng) {
  check_config(config, task);
  const std::size_t horizon = std::min(resolve_horizon(config, task), config.plan_length);
  EpisodeRecord rec = new_record(task, LoopMode::Open, horizon);
  ContextState belief = start_context(task, briefing(env, task), nets);
  ContextState clean = belief;
  const PhasePlan p = planner(belief, config.plan_length, rng);
  for (std::size_t h = 1; h <= horizon; ++h) {
    const std::size_t l = h - 1;
    PhaseEntry entry;
    entry.phase = h;
    entry.progress = env.progress;
    if (h == 1) entry.anchors = p.plan.anchors;
    entry.stop_probability = l < p.decoded.stop_probabilities.size() ? p.decoded.stop_probabilities[l] : 0.0;
    if (l >= p.decoded.effective_length) {
      entry.stop = p.decoded.stopped;
      rec.stopped = p.decoded.stopped;
      if (entry.stop) rec.entries.push_back(std::move(entry));
      break;
    }
    entry.tool = p.decoded.tools[l];
    if (env.progress == task.length()) {
      rec.entries.push_back(std::move(entry));
      break;
    }
    entry.observation = execute(env, task, *entry.tool);
    entry.executed = true;
    const ContextState next_clean = update_context(clean, *entry.tool, entry.observation, nets);
    Vec drift = subtract(next_clean.vec, clean.vec);
    axpy(1.0, drift, belief.vec);
    belief.record = next_clean.record;
    belief.phase = next_clean.phase;
    clean = next_clean;
    if (config.injection) {
      axpy(injected(config, h), config.injection->direction, belief.vec);
      entry.context_error = distance(belief.vec, clean.vec);
    }
    rec.entries.push_back(std::move(entry));
  }
  finish(rec, env);
  return rec;
}

EpisodeRecord run_open_loop(const ModelBundle& bundle, EnvState& env, const Task& task, const ExecutorConfig& config,
                            SeededRng& rng, DecodeMode mode) {
  return run_open_loop(flow_planner(bundle, mode), bundle.context, env, task, config, rng);
}

EpisodeRecord run_stepwise_baseline(const ModelBundle& bundle, EnvState& env, const Task& task,
                                    const ExecutorConfig& config) {
  const std::size_t horizon = resolve_horizon(config, task);
  EpisodeRecord rec = new_record(task, LoopMode::Stepwise, horizon);
  ContextState ctx = start_context(task, briefing(env, task), bundle.context);
  for (std::size_t h = 1; h <= horizon; ++h) {
    PhaseEntry entry;
    entry.phase = h;
    entry.progress = env.progress;
    if (rec.executed_count() == task.length()) {
      entry.stop = true;
      entry.stop_probability = 1.0;
      rec.entries.push_back(std::move(entry));
      rec.stopped = true;
      break;
    }
    const Vec target = bundle.consistency.apply(ctx.vec);
    entry.anchors = {target};
    entry.tool = nearest_tool(target, *task.toolset).index;
    entry.observation = execute(env, task, *entry.tool);
    entry.executed = true;
    ctx = update_context(ctx, *entry.tool, entry.observation, bundle.context);
    rec.entries.push_back(std::move(entry));
  }
  finish(rec, env);
  return rec;
}

std::string serialize_episode(const EpisodeRecord& record, const Task& task) {
  json j;
  j["task_id"] = record.task_id;
  j["domain"] = record.domain;
  j["split"] = std::string(split_name(record.split));
  j["mode"] = std::string(loop_mode_name(record.mode));
  j["gold_length"] = record.gold_length;
  j["horizon"] = record.horizon;
  j["stopped"] = record.stopped;
  j["success"] = record.success;
  json entries = json::array();
  for (const auto& e : record.entries) {
    json je;
    je["phase"] = e.phase;
    je["progress"] = e.progress;
    je["anchors"] = e.anchors;
    je["tool"] = e.tool ? json((*task.toolset)[*e.tool].id) : json(nullptr);
    je["executed"] = e.executed;
    je["stop"] = e.stop;
    je["stop_probability"] = e.stop_probability;
    je["observation"] = e.observation;
    je["context_error"] = e.context_error ? json(*e.context_error) : json(nullptr);
    entries.push_back(std::move(je));
  }
  j["entries"] = std::move(entries);
  return j.dump();
}

EpisodeRecord parse_episode(std::string_view line, const std::vector<TaskRecord>& tasks) {
  const json j = json::parse(line.begin(), line.end());
  EpisodeRecord rec;
  rec.task_id = j.at("task_id").get<std::string>();
  const Task* task = nullptr;
  for (const auto& t : tasks) {
    if (t.task.id == rec.task_id) task = &t.task;
  }
  if (task == nullptr) throw ReferenceError("episode references unknown task: " + rec.task_id);
  rec.domain = j.at("domain").get<std::string>();
  rec.split = parse_split(j.at("split").get<std::string>());
  rec.mode = parse_loop_mode(j.at("mode").get<std::string>());
  rec.gold_length = j.at("gold_length").get<std::size_t>();
  rec.horizon = j.at("horizon").get<std::size_t>();
  rec.stopped = j.at("stopped").get<bool>();
  rec.success = j.at("success").get<bool>();
  for (const auto& je : j.at("entries")) {
    PhaseEntry e;
    e.phase = je.at("phase").get<std::size_t>();
    e.progress = je.at("progress").get<std::size_t>();
    e.anchors = je.at("anchors").get<std::vector<Vec>>();
    if (!je.at("tool").is_null()) {
      const std::string id = je.at("tool").get<std::string>();
      const auto idx = task->toolset->index_of(id);
      if (!idx) throw ReferenceError("episode references unknown tool: " + id);
      e.tool = *idx;
    }
    e.executed = je.at("executed").get<bool>();
    e.stop = je.at("stop").get<bool>();
    e.stop_probability = je.at("stop_probability").get<double>();
    e.observation = je.at("observation").get<Vec>();
    if (!je.at("context_error").is_null()) e.context_error = je.at("context_error").get<double>();
    rec.entries.push_back(std::move(e));
  }
  return rec;
}

std::vector<EpisodeRecord> parse_episodes(std::string_view text, const std::vector<TaskRecord>& tasks) {
  std::vector<EpisodeRecord> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find('\n', start), text.size());
    const std::string_view line = text.substr(start, end - start);
    ++line_no;
    if (line.find_first_not_of(" \t\r") != std::string_view::npos) {
      try {
        out.push_back(parse_episode(line, tasks));
      } catch (const ReferenceError&) {
        throw;
      } catch (const std::exception& e) {
        throw ParseError(e.what(), line_no);
      }
    }
    start = end + 1;
  }
  return out;
}

}  // namespace flowplan
