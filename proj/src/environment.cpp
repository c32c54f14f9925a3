#include "flowplan/environment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "flowplan/errors.hpp"

namespace flowplan {

std::string_view split_name(Split split) {
  switch (split) {
    case Split::Train:
      return "train";
    case Split::Dev:
      return "dev";
    case Split::Test:
      break;
  }
  return "test";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "dev") return Split::Dev;
  if (name == "test") return Split::Test;
  throw InputError("unknown split '" + std::string(name) + "'");
}

bool Task::gold_has_unseen() const {
  return std::any_of(gold.begin(), gold.end(), [&](std::size_t t) { return unseen[t]; });
}

namespace {

Vec normalized_mean(const Toolset& toolset, const std::vector<std::size_t>& gold) {
  Vec mean(toolset.dimension(), 0.0);
  for (std::size_t t : gold) axpy(1.0, toolset.embedding(t), mean);
  const double len = norm(mean);
  if (len < 1e-12) return toolset.embedding(gold.front());
  return scaled(mean, 1.0 / len);
}

double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * std::numbers::pi);
  if (a > std::numbers::pi) a -= 2.0 * std::numbers::pi;
  if (a < -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

}  // namespace

Vec manifold_point(double theta, std::size_t d, std::uint64_t manifold_seed) {
  const std::size_t half = d / 2;
  if (half < 4) throw InputError("manifold needs d >= 8");
  SeededRng rng(manifold_seed, 0x3a41f0);
  std::vector<Vec> basis;
  while (basis.size() < 4) {
    Vec v = rng.normal_vector(half);
    for (const Vec& b : basis) axpy(-dot(v, b), b, v);
    const double len = norm(v);
    if (len > 1e-6) basis.push_back(scaled(v, 1.0 / len));
  }
  const double coef[4] = {std::cos(theta), std::sin(theta), std::cos(2.0 * theta), std::sin(2.0 * theta)};
  Vec p(d, 0.0);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t i = 0; i < half; ++i) p[i] += coef[k] * basis[k][i] / std::numbers::sqrt2;
  return scaled(p, 1.0 / norm(p));
}

std::pair<Task, EnvState> generate_task(SeededRng& rng, const SyntheticConfig& config, Split split,
                                        const std::string& id) {
  const std::size_t n = config.toolset_size;
  const auto unseen_count = static_cast<std::size_t>(std::llround(config.unseen_fraction * static_cast<double>(n)));
  if (config.min_chain < 1 || config.min_chain > config.max_chain) throw InputError("invalid chain length range");
  if (n < config.max_chain) throw InputError("toolset smaller than the longest chain");
  if (!(config.unseen_fraction >= 0.0 && config.unseen_fraction < 1.0))
    throw InputError("unseen fraction must lie in [0, 1)");
  if (n - unseen_count < config.max_chain) throw InputError("too few seen tools for the longest chain");

  const double spacing = 2.0 * std::numbers::pi / static_cast<double>(n);
  const double theta0 = rng.uniform() * 2.0 * std::numbers::pi;
  std::vector<double> thetas(n);
  std::vector<ToolSpec> specs;
  for (std::size_t k = 0; k < n; ++k) {
    thetas[k] = theta0 + spacing * static_cast<double>(k) +
                config.position_jitter * spacing * (2.0 * rng.uniform() - 1.0);
    char name[32];
    std::snprintf(name, sizeof name, "t%02zu", k);
    specs.push_back({name, "synthetic tool " + std::to_string(k), static_cast<Phase>(k % kPhaseCount),
                     manifold_point(thetas[k], config.dimension, config.manifold_seed)});
  }

  Task task;
  task.id = id;
  task.domain = "synthetic";
  task.split = split;
  task.toolset = std::make_shared<const Toolset>(build_toolset(specs, config.dimension, 0));

  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < n; ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(wrap_angle(thetas[a])) < std::abs(wrap_angle(thetas[b]));
  });
  task.unseen.assign(n, false);
  for (std::size_t k = 0; k < unseen_count; ++k) task.unseen[order[k]] = true;

  std::vector<std::size_t> pool;
  for (std::size_t k = 0; k < n; ++k)
    if (split == Split::Test || !task.unseen[k]) pool.push_back(k);
  const std::size_t m = config.min_chain + rng.below(config.max_chain - config.min_chain + 1);
  for (std::size_t j = 0; j < m; ++j) {
    const std::size_t pick = j + rng.below(pool.size() - j);
    std::swap(pool[j], pool[pick]);
    task.gold.push_back(pool[j]);
  }

  task.goal = normalized_mean(*task.toolset, task.gold);
  task.query = task.goal;
  axpy(config.query_noise, rng.normal_vector(config.dimension), task.query);

  EnvState env;
  env.rng = SeededRng(rng.next_u64(), 0xe11);
  env.sigma_obs = config.sigma_obs;
  return {std::move(task), std::move(env)};
}

Vec briefing(EnvState& env, const Task& task) {
  Vec o = scaled(task.toolset->embedding(task.gold.front()), 0.5);
  axpy(env.sigma_obs, env.rng.normal_vector(o.size()), o);
  return o;
}

Vec execute(EnvState& env, const Task& task, std::size_t tool) {
  const Toolset& tools = *task.toolset;
  if (tool >= tools.size()) throw InputError("unknown tool index " + std::to_string(tool));
  ++env.calls;
  Vec o;
  if (env.progress < task.length() && tool == task.gold[env.progress]) {
    ++env.progress;
    o = tools.embedding(tool);
    if (env.progress < task.length()) axpy(0.5, tools.embedding(task.gold[env.progress]), o);
  } else {
    o = scaled(tools.embedding(tool), -0.5);
  }
  axpy(env.sigma_obs, env.rng.normal_vector(o.size()), o);
  return o;
}

Vec execute(EnvState& env, const Task& task, std::string_view tool_id) {
  const auto index = task.toolset->index_of(tool_id);
  if (!index) throw InputError("unknown tool '" + std::string(tool_id) + "'");
  return execute(env, task, *index);
}

void spectral_normalize(Matrix& m, int iterations) {
  const double sigma = spectral_norm_estimate(m, iterations);
  if (sigma > 1.0)
    for (double& v : m.data()) v /= sigma;
}

ContextNets ContextNets::shift_register(std::size_t d, double rho, double gain) {
  if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("rho must lie in [0, 1)");
  const std::size_t half = d / 2;
  ContextNets nets{Matrix(d, d), Matrix(d, 2 * d), DenseNet::linear(Matrix::identity(d)), rho};
  for (std::size_t i = 0; i < half; ++i) {
    nets.transition(half + i, i) = 1.0;
    nets.action(i, i) = -2.0 * gain;
    nets.action(i, d + i) = 2.0 * gain;
  }
  return nets;
}

ContextNets ContextNets::random(std::size_t d, double rho, SeededRng& rng, bool normalize) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
  ContextNets nets{Matrix(d, d), Matrix(d, 2 * d), DenseNet::linear(Matrix::identity(d)), rho};
  for (double& v : nets.transition.data()) v = rng.normal() / std::sqrt(static_cast<double>(d));
  for (double& v : nets.action.data()) v = rng.normal() / std::sqrt(2.0 * static_cast<double>(d));
  if (normalize) spectral_normalize(nets.transition);
  return nets;
}

Vec context_map(const ContextNets& nets, std::span<const double> c, std::span<const double> tool_embedding,
                std::span<const double> observation) {
  const std::size_t d = nets.dimension();
  if (c.size() != d || tool_embedding.size() != d) throw ShapeError("context update: width mismatch");
  const Vec encoded = nets.encoder.apply(observation);
  const Vec a = nets.action.multiply(concat({tool_embedding, encoded}));
  Vec out = scaled(nets.transition.multiply(c), nets.rho);
  for (std::size_t i = 0; i < d; ++i) out[i] += (1.0 - nets.rho) * std::tanh(a[i]);
  return out;
}

ContextState update_context(const ContextState& ctx, std::size_t tool, std::span<const double> observation,
                            const ContextNets& nets) {
  if (!ctx.toolset || tool >= ctx.toolset->size()) throw InputError("context update: unknown tool");
  ContextState next = ctx;
  next.vec = context_map(nets, ctx.vec, ctx.toolset->embedding(tool), observation);
  if (!all_finite(next.vec)) throw NumericError("context update produced a non-finite vector");
  next.record.push_back({tool, Vec(observation.begin(), observation.end())});
  ++next.phase;
  return next;
}

ContextState start_context(const Task& task, std::span<const double> briefing_obs, const ContextNets& nets) {
  ContextState ctx;
  ctx.toolset = task.toolset;
  const Vec none(task.query.size(), 0.0);
  ctx.vec = context_map(nets, task.query, none, briefing_obs);
  return ctx;
}

double contraction_estimate(const ContextNets& nets, std::size_t trials, SeededRng& rng) {
  const std::size_t d = nets.dimension();
  double worst = 0.0;
  for (std::size_t k = 0; k < trials; ++k) {
    const Vec c1 = rng.normal_vector(d);
    const Vec c2 = rng.normal_vector(d);
    const Vec e = random_unit_vector(d, rng);
    const Vec o = rng.normal_vector(d);
    const double before = distance(c1, c2);
    if (before == 0.0) continue;
    worst = std::max(worst, distance(context_map(nets, c1, e, o), context_map(nets, c2, e, o)) / before);
  }
  return worst;
}

double assemble_utility(double acc, double cost, double red, double cons, const UtilityWeights& w) {
  return acc - w.cost * cost - w.redundancy * red + w.consistency * cons;
}

UtilityBreakdown utility(const LatentPlan& plan, const DecodedPlan& decoded, const Task& task, std::size_t progress,
                         std::span<const double> context, const DenseNet& consistency_map, std::size_t max_length,
                         const UtilityWeights& weights) {
  if (max_length == 0) throw InputError("utility: L_max must be positive");
  UtilityBreakdown u;
  u.weights = weights;
  const std::size_t remaining = task.length() - std::min(progress, task.length());
  const std::size_t len = decoded.effective_length;
  if (remaining == 0) {
    u.accuracy = len == 0 ? 1.0 : 0.0;
  } else {
    std::size_t matched = 0;
    while (matched < len && matched < remaining && decoded.tools[matched] == task.gold[progress + matched]) ++matched;
    u.accuracy = static_cast<double>(matched) / static_cast<double>(remaining);
  }
  u.cost = static_cast<double>(len) / static_cast<double>(max_length);
  std::size_t repeats = 0;
  for (std::size_t l = 1; l < len; ++l)
    if (decoded.tools[l] == decoded.tools[l - 1]) ++repeats;
  u.redundancy = static_cast<double>(repeats) / static_cast<double>(std::max<std::size_t>(1, len));
  double mean_sq = 0.0;
  if (!plan.anchors.empty()) {
    const Vec target = consistency_map.apply(context);
    for (const Vec& z : plan.anchors) mean_sq += squared_distance(z, target);
    mean_sq /= static_cast<double>(plan.anchors.size());
  }
  u.consistency = std::exp(-mean_sq);
  u.value = assemble_utility(u.accuracy, u.cost, u.redundancy, u.consistency, weights);
  return u;
}

Vec embed_text(std::string_view text, std::size_t d, std::uint64_t salt) {
  Vec v = hash_embed(text, d / 2, salt);
  v.resize(d, 0.0);
  return v;
}

namespace {

TaskRecord parse_record(const nlohmann::json& doc, const LoadOptions& options) {
  const std::size_t d = options.dimension;
  TaskRecord rec;
  Task& task = rec.task;
  task.id = doc.at("task_id").get<std::string>();
  task.domain = doc.value("domain", std::string());
  task.split = parse_split(doc.at("split").get<std::string>());

  std::vector<ToolSpec> specs;
  for (const auto& entry : doc.at("tools")) {
    ToolSpec spec;
    spec.id = entry.at("id").get<std::string>();
    spec.description = entry.value("description", std::string());
    spec.phase = parse_phase(entry.value("phase", std::string("other")));
    if (entry.contains("embedding")) {
      spec.embedding = entry.at("embedding").get<Vec>();
    } else {
      spec.embedding = embed_text(spec.description.empty() ? spec.id : spec.description, d, options.salt);
    }
    specs.push_back(std::move(spec));
  }
  if (specs.empty()) throw InputError("task '" + task.id + "' lists no tools");
  task.toolset = std::make_shared<const Toolset>(build_toolset(specs, d, options.salt));

  for (const auto& id : doc.at("gold_workflow")) {
    const std::string name = id.get<std::string>();
    const auto index = task.toolset->index_of(name);
    if (!index) throw ReferenceError("task '" + task.id + "': gold tool '" + name + "' is not in its tool list");
    task.gold.push_back(*index);
  }
  if (task.gold.empty()) throw InputError("task '" + task.id + "' has an empty gold workflow");

  task.unseen.assign(task.toolset->size(), false);
  if (doc.contains("unseen")) {
    for (const auto& id : doc.at("unseen")) {
      const auto index = task.toolset->index_of(id.get<std::string>());
      if (!index) throw ReferenceError("task '" + task.id + "': unseen tool '" + id.get<std::string>() + "' unknown");
      task.unseen[*index] = true;
    }
  }
  task.goal = normalized_mean(*task.toolset, task.gold);
  task.query = doc.contains("query") ? doc.at("query").get<Vec>() : task.goal;
  if (task.query.size() != d) throw InputError("task '" + task.id + "': query dimension mismatch");

  const std::size_t m = task.gold.size();
  auto texts = [&](const char* key) {
    std::vector<std::string> out;
    if (doc.contains(key)) {
      out = doc.at(key).get<std::vector<std::string>>();
      if (out.size() != m) throw InputError("task '" + task.id + "': " + key + " must have one entry per gold step");
    }
    return out;
  };
  rec.rationales = texts("rationales");
  rec.observations = texts("observations");

  rec.expert.task_id = task.id;
  for (std::size_t j = 0; j < m; ++j) {
    ExpertStep step;
    step.tool = task.gold[j];
    step.rationale = rec.rationales.empty() ? Vec(d, 0.0) : embed_text(rec.rationales[j], d, options.salt);
    step.observation = rec.observations.empty() ? Vec(d, 0.0) : embed_text(rec.observations[j], d, options.salt);
    rec.expert.steps.push_back(std::move(step));
  }
  return rec;
}

}  // namespace

std::vector<TaskRecord> parse_trajectories(std::string_view text, const LoadOptions& options) {
  std::vector<TaskRecord> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find('\n', start), text.size());
    const std::string_view line = text.substr(start, end - start);
    ++line_no;
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
      if (end == text.size()) break;
      continue;
    }
    try {
      out.push_back(parse_record(nlohmann::json::parse(line), options));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed record: ") + e.what(), line_no);
    } catch (const ReferenceError&) {
      throw;
    } catch (const Error& e) {
      throw ParseError(e.what(), line_no);
    }
    if (end == text.size()) break;
  }
  return out;
}

std::vector<TaskRecord> load_trajectories(const std::filesystem::path& path, const LoadOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open trajectory file " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_trajectories(buffer.str(), options);
}

std::string serialize_record(const TaskRecord& record) {
  const Task& task = record.task;
  nlohmann::json doc;
  doc["task_id"] = task.id;
  doc["domain"] = task.domain;
  doc["split"] = std::string(split_name(task.split));
  nlohmann::json tools = nlohmann::json::array();
  for (const auto& tool : task.toolset->tools()) {
    tools.push_back({{"id", tool.id},
                     {"description", tool.description},
                     {"phase", std::string(phase_name(tool.phase))},
                     {"embedding", tool.embedding}});
  }
  doc["tools"] = std::move(tools);
  nlohmann::json gold = nlohmann::json::array();
  for (std::size_t t : task.gold) gold.push_back((*task.toolset)[t].id);
  doc["gold_workflow"] = std::move(gold);
  nlohmann::json unseen = nlohmann::json::array();
  for (std::size_t k = 0; k < task.unseen.size(); ++k)
    if (task.unseen[k]) unseen.push_back((*task.toolset)[k].id);
  doc["unseen"] = std::move(unseen);
  doc["query"] = task.query;
  if (!record.rationales.empty()) doc["rationales"] = record.rationales;
  if (!record.observations.empty()) doc["observations"] = record.observations;
  return doc.dump();
}

TaskRecord synthetic_record(const Task& task, const EnvState& env) {
  TaskRecord rec;
  rec.task = task;
  rec.expert.task_id = task.id;
  EnvState replay = env;
  briefing(replay, task);
  for (std::size_t t : task.gold) {
    ExpertStep step;
    step.tool = t;
    step.rationale = Vec(task.query.size(), 0.0);
    step.observation = execute(replay, task, t);
    rec.expert.steps.push_back(std::move(step));
  }
  return rec;
}

}  // namespace flowplan
