#include "flowplan/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "flowplan/errors.hpp"

namespace flowplan {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  require(dimension >= 8 && dimension % 2 == 0, "dimension must be even and at least 8");
  require(!hidden.empty(), "hidden must list at least one width");
  require(stop_hidden >= 1, "stop_hidden must be positive");
  require(steps >= 1, "steps must be positive");
  require(lead_in >= 0.0 && lead_in < 1.0, "lead_in must lie in [0, 1)");
  require(kappa_pull >= 0.0, "kappa_pull must be non-negative");
  require(lead_in_pull >= 0.0, "lead_in_pull must be non-negative");
  require(ease >= 1.0, "ease must be at least 1");
  require(sigma_tube >= 0.0, "sigma_tube must be non-negative");
  require(epsilon > 0.0, "epsilon must be positive");
  require(stop_threshold > 0.0 && stop_threshold < 1.0, "stop_threshold must lie in (0, 1)");
  require(rho >= 0.0 && rho < 1.0, "rho must lie in [0, 1)");
  require(sigma_obs >= 0.0, "sigma_obs must be non-negative");
  require(lambda_dec >= 0.0 && lambda_plan >= 0.0 && lambda_cons >= 0.0, "loss weights must be non-negative");
  require(utility.cost >= 0.0 && utility.redundancy >= 0.0 && utility.consistency >= 0.0,
          "utility weights must be non-negative");
  require(candidates >= 2, "candidates must be at least 2");
  require(learning_rate > 0.0 && refine_learning_rate > 0.0, "learning rates must be positive");
  require(max_length >= 1, "max_length must be positive");
  require(fm_samples >= 1 && batch_size >= 1, "fm_samples and batch_size must be positive");
}

namespace {

nlohmann::json config_json(const TrainConfig& c) {
  nlohmann::json j;
  j["dimension"] = c.dimension;
  j["hidden"] = c.hidden;
  j["stop_hidden"] = c.stop_hidden;
  j["steps"] = c.steps;
  j["lead_in"] = c.lead_in;
  j["kappa_pull"] = c.kappa_pull;
  j["lead_in_pull"] = c.lead_in_pull;
  j["ease"] = c.ease;
  j["sigma_tube"] = c.sigma_tube;
  j["epsilon"] = c.epsilon;
  j["stop_threshold"] = c.stop_threshold;
  j["rho"] = c.rho;
  j["sigma_obs"] = c.sigma_obs;
  j["lambda_dec"] = c.lambda_dec;
  j["lambda_plan"] = c.lambda_plan;
  j["lambda_cons"] = c.lambda_cons;
  j["utility"] = {{"cost", c.utility.cost}, {"redundancy", c.utility.redundancy}, {"consistency", c.utility.consistency}};
  j["candidates"] = c.candidates;
  j["epochs_flow"] = c.epochs_flow;
  j["epochs_decode"] = c.epochs_decode;
  j["epochs_refine"] = c.epochs_refine;
  j["learning_rate"] = c.learning_rate;
  j["refine_learning_rate"] = c.refine_learning_rate;
  j["seed"] = c.seed;
  j["max_length"] = c.max_length;
  j["fm_samples"] = c.fm_samples;
  j["batch_size"] = c.batch_size;
  j["refine_examples"] = c.refine_examples;
  j["utility_probe_examples"] = c.utility_probe_examples;
  j["augment_failures"] = c.augment_failures;
  return j;
}

void reject_unknown(const nlohmann::json& given, const nlohmann::json& known, const std::string& prefix) {
  for (const auto& [key, value] : given.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + prefix + key + "'");
    if (value.is_object() && known.at(key).is_object()) reject_unknown(value, known.at(key), prefix + key + ".");
  }
}

}  // namespace

std::string TrainConfig::to_json() const { return config_json(*this).dump(2); }

TrainConfig TrainConfig::from_json(std::string_view text) {
  nlohmann::json given;
  try {
    given = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!given.is_object()) throw ConfigError("config must be a JSON object");
  nlohmann::json j = config_json(TrainConfig{});
  reject_unknown(given, j, "");
  j.merge_patch(given);
  TrainConfig c;
  try {
    c.dimension = j.at("dimension").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    c.stop_hidden = j.at("stop_hidden").get<std::size_t>();
    c.steps = j.at("steps").get<std::size_t>();
    c.lead_in = j.at("lead_in").get<double>();
    c.kappa_pull = j.at("kappa_pull").get<double>();
    c.lead_in_pull = j.at("lead_in_pull").get<double>();
    c.ease = j.at("ease").get<double>();
    c.sigma_tube = j.at("sigma_tube").get<double>();
    c.epsilon = j.at("epsilon").get<double>();
    c.stop_threshold = j.at("stop_threshold").get<double>();
    c.rho = j.at("rho").get<double>();
    c.sigma_obs = j.at("sigma_obs").get<double>();
    c.lambda_dec = j.at("lambda_dec").get<double>();
    c.lambda_plan = j.at("lambda_plan").get<double>();
    c.lambda_cons = j.at("lambda_cons").get<double>();
    c.utility.cost = j.at("utility").at("cost").get<double>();
    c.utility.redundancy = j.at("utility").at("redundancy").get<double>();
    c.utility.consistency = j.at("utility").at("consistency").get<double>();
    c.candidates = j.at("candidates").get<std::size_t>();
    c.epochs_flow = j.at("epochs_flow").get<std::size_t>();
    c.epochs_decode = j.at("epochs_decode").get<std::size_t>();
    c.epochs_refine = j.at("epochs_refine").get<std::size_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.refine_learning_rate = j.at("refine_learning_rate").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.max_length = j.at("max_length").get<std::size_t>();
    c.fm_samples = j.at("fm_samples").get<std::size_t>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.refine_examples = j.at("refine_examples").get<std::size_t>();
    c.utility_probe_examples = j.at("utility_probe_examples").get<std::size_t>();
    c.augment_failures = j.at("augment_failures").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config field has the wrong type: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return from_json(buffer.str());
}

std::string TrainConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(config_json(*this).dump())));
  return buf;
}

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

ModelBundle ModelBundle::initialize(const TrainConfig& config) {
  config.validate();
  const std::size_t d = config.dimension;
  SeededRng root(config.seed, 0xb0d1e);
  SeededRng velocity_rng = root.derive(1);
  SeededRng stop_rng = root.derive(2);
  SeededRng map_rng = root.derive(3);
  Matrix wc(d, d);
  for (double& v : wc.data()) v = 0.01 * map_rng.normal();
  return {config,
          VelocityModel::create(d, d, config.hidden, velocity_rng),
          SupervisionHeads::tool_identity(d, d, d),
          StopHead::create(d, d, config.stop_hidden, stop_rng, config.stop_threshold),
          DenseNet::linear(std::move(wc)),
          ContextNets::shift_register(d, config.rho)};
}

FlowSettings ModelBundle::flow_settings() const {
  return {config.steps, Integrator::Rk4, PlanClock{config.lead_in, config.lead_in > 0.0 ? config.ease : 1.0}};
}

Checkpoint ModelBundle::to_checkpoint() const {
  Checkpoint ck;
  ck.seed = config.seed;
  ck.config_hash = config.hash();
  ck.config_json = config.to_json();
  ck.add_net("velocity", velocity.net);
  ck.add_net("stop", stop.net);
  ck.add_net("consistency", consistency);
  ck.add_net("heads.tool", heads.tool_projection);
  ck.add_net("heads.rationale", heads.rationale_projection);
  ck.add_net("heads.observation", heads.observation_projection);
  ck.add_net("heads.phase", heads.phase_projection);
  ck.add_net("heads.rationale_encoder", heads.rationale_encoder);
  ck.add_net("heads.observation_encoder", heads.observation_encoder);
  const auto table = heads.phase_table.data();
  ck.tensors.push_back({"heads.phase_table", {heads.phase_table.rows(), heads.phase_table.cols()},
                        std::vector<double>(table.begin(), table.end())});
  ck.add_net("context.transition", DenseNet::linear(context.transition));
  ck.add_net("context.action", DenseNet::linear(context.action));
  ck.add_net("context.encoder", context.encoder);
  return ck;
}

ModelBundle ModelBundle::from_checkpoint(const Checkpoint& ck) {
  const TrainConfig config = TrainConfig::from_json(ck.config_json);
  if (config.hash() != ck.config_hash) throw InputError("checkpoint config hash does not match its config");
  ModelBundle b = initialize(config);
  ck.load_net("velocity", b.velocity.net);
  ck.load_net("stop", b.stop.net);
  ck.load_net("consistency", b.consistency);
  ck.load_net("heads.tool", b.heads.tool_projection);
  ck.load_net("heads.rationale", b.heads.rationale_projection);
  ck.load_net("heads.observation", b.heads.observation_projection);
  ck.load_net("heads.phase", b.heads.phase_projection);
  ck.load_net("heads.rationale_encoder", b.heads.rationale_encoder);
  ck.load_net("heads.observation_encoder", b.heads.observation_encoder);
  const NamedTensor& table = ck.find("heads.phase_table");
  if (table.values.size() != b.heads.phase_table.data().size()) throw InputError("checkpoint phase table shape");
  std::copy(table.values.begin(), table.values.end(), b.heads.phase_table.data().begin());
  DenseNet transition = DenseNet::linear(b.context.transition);
  DenseNet action = DenseNet::linear(b.context.action);
  ck.load_net("context.transition", transition);
  ck.load_net("context.action", action);
  ck.load_net("context.encoder", b.context.encoder);
  b.context.transition = transition.layers()[0].weight;
  b.context.action = action.layers()[0].weight;
  return b;
}

void ModelBundle::save(const std::filesystem::path& path) const { write_checkpoint(path, to_checkpoint()); }

ModelBundle ModelBundle::load(const std::filesystem::path& path) { return from_checkpoint(read_checkpoint(path)); }

// ---------------------------------------------------------------------------
// Examples
// ---------------------------------------------------------------------------

Vec stop_knot(std::size_t d) {
  Vec v(d, 0.0);
  v[d / 2] = 1.0;
  return v;
}

EnvState make_env(const Task& task, double sigma_obs, std::uint64_t seed) {
  EnvState env;
  env.rng = SeededRng(mix64(seed) ^ fnv1a64(task.id), 0xe11);
  env.sigma_obs = sigma_obs;
  return env;
}

namespace {

TrainExample make_example(const ModelBundle& bundle, const TaskRecord& rec, std::size_t index, std::size_t progress,
                          const Vec& context, bool failure) {
  const Task& task = rec.task;
  const std::size_t d = bundle.config.dimension;
  TrainExample ex;
  ex.record = index;
  ex.progress = progress;
  ex.context = context;
  ex.failure = failure;
  const Vec zero(d, 0.0);
  for (std::size_t j = progress; j < task.length(); ++j) {
    const std::size_t tool = task.gold[j];
    const bool has_step = j < rec.expert.steps.size();
    const Vec& rationale = has_step ? rec.expert.steps[j].rationale : zero;
    const Vec& prev_obs = (j > 0 && j - 1 < rec.expert.steps.size()) ? rec.expert.steps[j - 1].observation : zero;
    ex.knots.push_back(
        encode_step(bundle.heads, task.toolset->embedding(tool), rationale, prev_obs, (*task.toolset)[tool].phase));
    ex.labels.push_back({tool, false});
  }
  // A finished chain holds the stop position over two knots so its leading
  // anchor is read at the same planning time as in every other example.
  const std::size_t stops = ex.knots.empty() ? 2 : 1;
  for (std::size_t k = 0; k < stops; ++k) {
    ex.knots.push_back(stop_knot(d));
    ex.labels.push_back({std::nullopt, true});
  }
  return ex;
}

}  // namespace

std::vector<TrainExample> build_examples(const ModelBundle& bundle, const std::vector<TaskRecord>& records,
                                         Split split, bool augment, std::uint64_t noise_seed) {
  std::vector<TrainExample> out;
  for (std::size_t r = 0; r < records.size(); ++r) {
    const Task& task = records[r].task;
    if (task.split != split) continue;
    EnvState env = make_env(task, bundle.config.sigma_obs, noise_seed);
    ContextState ctx = start_context(task, briefing(env, task), bundle.context);
    for (std::size_t p = 0; p < task.length(); ++p) {
      out.push_back(make_example(bundle, records[r], r, p, ctx.vec, false));
      if (augment && task.toolset->size() > 1) {
        EnvState side = env;
        side.rng = env.rng.derive(0xfa11 + p);
        std::size_t wrong = side.rng.below(task.toolset->size() - 1);
        if (wrong >= task.gold[p]) ++wrong;
        const Vec o = execute(side, task, wrong);
        out.push_back(make_example(bundle, records[r], r, p, update_context(ctx, wrong, o, bundle.context).vec, true));
      }
      const Vec o = execute(env, task, task.gold[p]);
      ctx = update_context(ctx, task.gold[p], o, bundle.context);
    }
    out.push_back(make_example(bundle, records[r], r, task.length(), ctx.vec, false));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

FlowLoss loss_flow_matching(const ModelBundle& bundle, const std::vector<TrainExample>& batch, SeededRng& rng) {
  if (batch.empty()) throw InputError("flow-matching batch is empty");
  const TrainConfig& cfg = bundle.config;
  const double lead = cfg.lead_in;
  const std::size_t d = cfg.dimension;
  FlowLoss out;
  out.velocity = bundle.velocity.net.make_tape();
  const double weight = 1.0 / static_cast<double>(batch.size() * cfg.fm_samples);
  for (const TrainExample& ex : batch) {
    const TargetPath path(ex.knots);
    for (std::size_t n = 0; n < cfg.fm_samples; ++n) {
      Vec z;
      Vec target;
      double t;
      const double u = rng.uniform();
      if (u < lead) {
        // Exponential pull from prior noise onto the first knot, sampled on
        // the exact teacher trajectory z(t) = y0 + exp(-k t) (z0 - y0).
        const Vec z0 = rng.normal_vector(d);
        const Vec& y0 = ex.knots.front();
        z = y0;
        axpy(std::exp(-cfg.lead_in_pull * u), subtract(z0, y0), z);
        target = scaled(subtract(y0, z), cfg.lead_in_pull);
        t = u;
      } else {
        // Tube sample around the path at planning time t = u.
        t = u;
        const PlanClock clock = bundle.flow_settings().clock;
        const double s = clock.to_path(t);
        const Vec y = path.eval(s);
        z = y;
        if (cfg.sigma_tube > 0.0) axpy(cfg.sigma_tube, rng.normal_vector(d), z);
        target = scaled(path.slope(s), clock.path_rate(t));
        axpy(cfg.kappa_pull, subtract(y, z), target);
      }
      const ForwardTrace trace = bundle.velocity.net.forward(bundle.velocity.features(z, t, ex.context));
      const Vec residual = subtract(trace.output(), target);
      if (!all_finite(residual)) throw NumericError("non-finite flow-matching residual");
      out.value += weight * dot(residual, residual);
      bundle.velocity.net.backward(trace, scaled(residual, 2.0 * weight), out.velocity);
    }
  }
  if (!std::isfinite(out.value)) throw NumericError("non-finite flow-matching loss");
  return out;
}

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

DecodeLoss loss_decode(const ModelBundle& bundle, const std::vector<Vec>& anchors,
                       const std::vector<AnchorLabel>& labels, const Toolset& toolset, double epsilon,
                       std::span<const double> context) {
  if (anchors.size() != labels.size()) throw ShapeError("loss_decode: one label per anchor required");
  const std::size_t d = bundle.config.dimension;
  DecodeLoss out;
  out.stop = bundle.stop.net.make_tape();
  for (std::size_t l = 0; l < anchors.size(); ++l) {
    const Vec& z = anchors[l];
    Vec grad(d, 0.0);
    if (labels[l].tool) {
      const std::size_t gold = *labels[l].tool;
      if (gold >= toolset.size()) throw ReferenceError("loss_decode: gold tool outside toolset");
      const ToolDistribution dist = tool_probabilities(z, toolset, epsilon);
      // -log p_gold computed from logits to stay finite when p_gold underflows.
      double best = -std::numeric_limits<double>::infinity();
      std::vector<double> logits(toolset.size());
      for (std::size_t i = 0; i < toolset.size(); ++i) {
        logits[i] = -squared_distance(z, toolset.embedding(i)) / epsilon;
        best = std::max(best, logits[i]);
      }
      double sum = 0.0;
      for (double v : logits) sum += std::exp(v - best);
      out.tool_term += best + std::log(sum) - logits[gold];
      Vec expected(d, 0.0);
      for (std::size_t i = 0; i < toolset.size(); ++i) axpy(dist.probabilities[i], toolset.embedding(i), expected);
      for (std::size_t k = 0; k < d; ++k) grad[k] = 2.0 / epsilon * (expected[k] - toolset.embedding(gold)[k]);
    }
    const ForwardTrace trace = bundle.stop.net.forward(bundle.stop.features(z, context));
    const double logit = trace.output()[0];
    const double target = labels[l].stop ? 1.0 : 0.0;
    out.stop_term += softplus(logit) - target * logit;
    const Vec input_grad = bundle.stop.net.backward(trace, Vec{logistic(logit) - target}, out.stop);
    for (std::size_t k = 0; k < d; ++k) grad[k] += input_grad[k];
    out.anchor_grads.push_back(std::move(grad));
  }
  out.value = out.tool_term + out.stop_term;
  if (!std::isfinite(out.value)) throw NumericError("non-finite decoding loss");
  return out;
}

ConsistencyLoss loss_consistency(const std::vector<Vec>& anchors, std::span<const double> context,
                                 const DenseNet& consistency_map) {
  if (anchors.empty()) throw InputError("loss_consistency: no anchors");
  ConsistencyLoss out;
  out.map = consistency_map.make_tape();
  const ForwardTrace trace = consistency_map.forward(context);
  const Vec& projected = trace.output();
  const double inv = 1.0 / static_cast<double>(anchors.size());
  Vec map_grad(projected.size(), 0.0);
  for (const Vec& z : anchors) {
    const Vec diff = subtract(z, projected);
    out.value += inv * dot(diff, diff);
    out.anchor_grads.push_back(scaled(diff, 2.0 * inv));
    axpy(-2.0 * inv, diff, map_grad);
  }
  consistency_map.backward(trace, map_grad, out.map);
  return out;
}

std::vector<double> utility_weights(const std::vector<double>& utilities) {
  if (utilities.empty()) return {};
  const double best = *std::max_element(utilities.begin(), utilities.end());
  std::vector<double> w;
  double total = 0.0;
  for (double u : utilities) {
    w.push_back(std::exp(u - best));
    total += w.back();
  }
  for (double& v : w) v /= total;
  return w;
}

RefineLoss loss_plan_refine(const ModelBundle& bundle, const VelocityModel& snapshot, const TrainExample& example,
                            const Task& task, SeededRng& rng) {
  const TrainConfig& cfg = bundle.config;
  const FlowSettings settings = bundle.flow_settings();
  const std::size_t count = example.knots.size();
  RefineLoss out;
  out.velocity = bundle.velocity.net.make_tape();
  std::vector<LatentPlan> candidates;
  for (std::size_t k = 0; k < cfg.candidates; ++k) {
    LatentPlan plan = plan_from_noise(snapshot, example.context, count, rng.normal_vector(cfg.dimension), settings);
    const DecodedPlan decoded = decode_plan(plan, *task.toolset, cfg.epsilon, bundle.stop, example.context,
                                            DecodeMode::Sampled, rng);
    out.utilities.push_back(utility(plan, decoded, task, example.progress, example.context, bundle.consistency,
                                    cfg.max_length, cfg.utility)
                                .value);
    candidates.push_back(std::move(plan));
  }
  out.weights = utility_weights(out.utilities);
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    const LatentPlan& cand = candidates[k];
    const RecordedFlow flow =
        integrate_recorded(bundle.velocity, cand.initial_noise, example.context, settings.steps, settings.method);
    std::vector<Vec> grads;
    for (std::size_t l = 0; l < count; ++l) {
      const Vec diff = subtract(flow.trajectory.state_at(cand.anchor_times[l]), cand.anchors[l]);
      out.value += out.weights[k] * dot(diff, diff);
      grads.push_back(scaled(diff, 2.0 * out.weights[k]));
    }
    std::vector<Vec> node_grads;
    scatter_anchor_grads(flow.trajectory, cand.anchor_times, grads, node_grads);
    integrate_vjp(bundle.velocity, flow, std::move(node_grads), out.velocity);
  }
  if (!std::isfinite(out.value)) throw NumericError("non-finite refinement loss");
  return out;
}

double total_loss(const LossComponents& parts, double lambda_dec, double lambda_plan, double lambda_cons) {
  return parts.flow + lambda_dec * parts.decode + lambda_plan * parts.plan + lambda_cons * parts.consistency;
}

// ---------------------------------------------------------------------------
// Evaluation probes
// ---------------------------------------------------------------------------

AnchorReport evaluate_anchors(const ModelBundle& bundle, const std::vector<TaskRecord>& records,
                              const std::vector<TrainExample>& examples, std::uint64_t seed) {
  const FlowSettings settings = bundle.flow_settings();
  const SeededRng base(seed, 0xe7a1);
  AnchorReport report;
  double sq_sum = 0.0;
  std::size_t within = 0;
  std::size_t tool_hits = 0;
  std::size_t stop_hits = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const TrainExample& ex = examples[i];
    const Task& task = records[ex.record].task;
    SeededRng rng = base.derive(i);
    const LatentPlan plan = plan_from_noise(bundle.velocity, ex.context, ex.knots.size(),
                                            rng.normal_vector(bundle.config.dimension), settings);
    const Vec& lead = plan.anchors.front();
    if (ex.labels.front().tool) {
      const std::size_t gold = *ex.labels.front().tool;
      ++report.action_rows;
      const double err = distance(lead, ex.knots.front());
      sq_sum += err * err;
      const double margin = task.toolset->size() > 1
                                ? decoding_margin(ex.knots.front(), *task.toolset, gold).linear
                                : std::numeric_limits<double>::infinity();
      if (err < margin / 2.0) ++within;
      const DecodedPlan decoded = decode_plan(plan, *task.toolset, bundle.config.epsilon, bundle.stop, ex.context,
                                              DecodeMode::Map, rng);
      if (!decoded.tools.empty() && decoded.tools.front() == gold) ++tool_hits;
    } else {
      ++report.stop_rows;
      if (stop_probability(bundle.stop, lead, ex.context) > bundle.stop.threshold) ++stop_hits;
    }
  }
  if (report.action_rows > 0) {
    const auto n = static_cast<double>(report.action_rows);
    report.anchor_rms = std::sqrt(sq_sum / n);
    report.within_half_margin = static_cast<double>(within) / n;
    report.tool_em = static_cast<double>(tool_hits) / n;
  }
  if (report.stop_rows > 0)
    report.stop_accuracy = static_cast<double>(stop_hits) / static_cast<double>(report.stop_rows);
  return report;
}

double candidate_utility(const ModelBundle& bundle, const std::vector<TaskRecord>& records,
                         const std::vector<TrainExample>& probes, std::uint64_t seed) {
  if (probes.empty()) return 0.0;
  const TrainConfig& cfg = bundle.config;
  const FlowSettings settings = bundle.flow_settings();
  const SeededRng base(seed, 0xc4d1);
  double total = 0.0;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    const TrainExample& ex = probes[i];
    const Task& task = records[ex.record].task;
    for (std::size_t k = 0; k < cfg.candidates; ++k) {
      SeededRng rng = base.derive(i * cfg.candidates + k);
      const LatentPlan plan =
          plan_from_noise(bundle.velocity, ex.context, ex.knots.size(), rng.normal_vector(cfg.dimension), settings);
      const DecodedPlan decoded =
          decode_plan(plan, *task.toolset, cfg.epsilon, bundle.stop, ex.context, DecodeMode::Sampled, rng);
      total += utility(plan, decoded, task, ex.progress, ex.context, bundle.consistency, cfg.max_length, cfg.utility)
                   .value;
    }
  }
  return total / static_cast<double>(probes.size() * cfg.candidates);
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

std::string TrainHistory::to_csv() const {
  std::string out =
      "epoch,stage,loss_fm,loss_dec,loss_plan,loss_cons,loss_total,anchor_rms,dev_tool_em,candidate_utility\n";
  for (const HistoryRow& r : rows) {
    out += std::to_string(r.epoch) + "," + std::to_string(r.stage) + "," + format_double(r.loss.flow) + "," +
           format_double(r.loss.decode) + "," + format_double(r.loss.plan) + "," +
           format_double(r.loss.consistency) + "," + format_double(r.total) + "," + format_double(r.anchor_rms) +
           "," + format_double(r.dev_tool_em) + "," +
           (r.candidate_utility ? format_double(*r.candidate_utility) : std::string()) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

struct Optimizers {
  OptimState velocity;
  OptimState stop;
  OptimState consistency;

  void set_rate(double lr) {
    velocity.learning_rate = lr;
    stop.learning_rate = lr;
    consistency.learning_rate = lr;
  }
};

void shuffle(std::vector<TrainExample>& items, SeededRng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.below(i)]);
}

/// Decoding and consistency losses on anchors produced by the current flow,
/// backpropagated through the integrator.
void flow_anchor_step(const ModelBundle& bundle, const TrainExample& ex, const Task& task, SeededRng& rng,
                      double scale, GradientTape& velocity_tape, GradientTape& stop_tape, GradientTape& map_tape,
                      LossComponents& parts) {
  const TrainConfig& cfg = bundle.config;
  const FlowSettings settings = bundle.flow_settings();
  const RecordedFlow flow = integrate_recorded(bundle.velocity, rng.normal_vector(cfg.dimension), ex.context,
                                               settings.steps, settings.method);
  const std::vector<double> times = anchor_times(ex.knots.size(), settings.clock);
  std::vector<Vec> anchors;
  for (double t : times) anchors.push_back(flow.trajectory.state_at(t));
  const DecodeLoss dec = loss_decode(bundle, anchors, ex.labels, *task.toolset, cfg.epsilon, ex.context);
  const ConsistencyLoss cons = loss_consistency(anchors, ex.context, bundle.consistency);
  parts.decode += scale * dec.value;
  parts.consistency += scale * cons.value;
  std::vector<Vec> grads;
  for (std::size_t l = 0; l < anchors.size(); ++l) {
    Vec g = scaled(dec.anchor_grads[l], scale * cfg.lambda_dec);
    axpy(scale * cfg.lambda_cons, cons.anchor_grads[l], g);
    grads.push_back(std::move(g));
  }
  std::vector<Vec> node_grads;
  scatter_anchor_grads(flow.trajectory, times, grads, node_grads);
  integrate_vjp(bundle.velocity, flow, std::move(node_grads), velocity_tape);
  stop_tape.accumulate(dec.stop, scale * cfg.lambda_dec);
  map_tape.accumulate(cons.map, scale * cfg.lambda_cons);
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<TaskRecord>& records, const TrainOptions& options) {
  config.validate();
  TrainResult result{options.initial ? *options.initial : ModelBundle::initialize(config), {}};
  ModelBundle& bundle = result.bundle;
  if (bundle.config.dimension != config.dimension || bundle.config.hidden != config.hidden ||
      bundle.config.stop_hidden != config.stop_hidden)
    throw ConfigError("initial bundle does not match the configured architecture");
  bundle.config = config;
  bundle.stop.threshold = config.stop_threshold;
  bundle.context.rho = config.rho;

  const bool has_train = std::any_of(records.begin(), records.end(),
                                     [](const TaskRecord& r) { return r.task.split == Split::Train; });
  if (!has_train) throw InputError("dataset has no training records");
  const bool has_dev = std::any_of(records.begin(), records.end(),
                                   [](const TaskRecord& r) { return r.task.split == Split::Dev; });
  const std::uint64_t seed = config.seed;
  const std::vector<TrainExample> dev_examples =
      build_examples(bundle, records, has_dev ? Split::Dev : Split::Train, false, mix64(seed ^ 0xde7));
  std::vector<TrainExample> probes = build_examples(bundle, records, Split::Train, false, mix64(seed ^ 0x9b0b));
  if (probes.size() > config.utility_probe_examples) probes.resize(config.utility_probe_examples);

  Optimizers opt{OptimState::for_net(bundle.velocity.net, config.learning_rate),
                 OptimState::for_net(bundle.stop.net, config.learning_rate),
                 OptimState::for_net(bundle.consistency, config.learning_rate)};
  SeededRng rng(seed, 0x7a1);
  if (options.checkpoint) bundle.save(*options.checkpoint);

  auto selected = [&](int stage) {
    return options.stages.empty() ||
           std::find(options.stages.begin(), options.stages.end(), stage) != options.stages.end();
  };
  const std::size_t epochs[3] = {config.epochs_flow, config.epochs_decode, config.epochs_refine};
  std::size_t epoch = 0;
  for (int stage = 1; stage <= 3; ++stage) {
    if (!selected(stage)) continue;
    const auto started = std::chrono::steady_clock::now();
    for (std::size_t e = 0; e < epochs[stage - 1]; ++e, ++epoch) {
      // Refinement anneals harmonically so late epochs stop trading utility for noise.
      if (stage == 3) opt.set_rate(config.refine_learning_rate / static_cast<double>(1 + e));
      std::vector<TrainExample> examples =
          build_examples(bundle, records, Split::Train, config.augment_failures, mix64(seed ^ (epoch + 1)));
      shuffle(examples, rng);
      if (stage == 3 && examples.size() > config.refine_examples) examples.resize(config.refine_examples);
      const VelocityModel snapshot = bundle.velocity;
      LossComponents epoch_parts;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < examples.size(); start += config.batch_size, ++batches) {
        const std::vector<TrainExample> batch(
            examples.begin() + static_cast<std::ptrdiff_t>(start),
            examples.begin() + static_cast<std::ptrdiff_t>(std::min(examples.size(), start + config.batch_size)));
        const double scale = 1.0 / static_cast<double>(batch.size());
        FlowLoss fm = loss_flow_matching(bundle, batch, rng);
        GradientTape velocity_tape = std::move(fm.velocity);
        GradientTape stop_tape = bundle.stop.net.make_tape();
        GradientTape map_tape = bundle.consistency.make_tape();
        LossComponents parts;
        parts.flow = fm.value;
        for (const TrainExample& ex : batch) {
          const Task& task = records[ex.record].task;
          if (stage == 1) {
            const ConsistencyLoss cons = loss_consistency(ex.knots, ex.context, bundle.consistency);
            parts.consistency += scale * cons.value;
            map_tape.accumulate(cons.map, scale * config.lambda_cons);
          } else {
            flow_anchor_step(bundle, ex, task, rng, scale, velocity_tape, stop_tape, map_tape, parts);
          }
          if (stage == 3) {
            const RefineLoss ref = loss_plan_refine(bundle, snapshot, ex, task, rng);
            parts.plan += scale * ref.value;
            velocity_tape.accumulate(ref.velocity, scale * config.lambda_plan);
          }
        }
        adam_update(opt.velocity, bundle.velocity.net, velocity_tape);
        adam_update(opt.consistency, bundle.consistency, map_tape);
        if (stage >= 2) adam_update(opt.stop, bundle.stop.net, stop_tape);
        epoch_parts.flow += parts.flow;
        epoch_parts.decode += parts.decode;
        epoch_parts.plan += parts.plan;
        epoch_parts.consistency += parts.consistency;
      }
      const double per_batch = batches > 0 ? 1.0 / static_cast<double>(batches) : 0.0;
      HistoryRow row;
      row.epoch = epoch;
      row.stage = stage;
      row.loss = {epoch_parts.flow * per_batch, epoch_parts.decode * per_batch, epoch_parts.plan * per_batch,
                  epoch_parts.consistency * per_batch};
      row.total = total_loss(row.loss, config.lambda_dec, config.lambda_plan, config.lambda_cons);
      const AnchorReport dev = evaluate_anchors(bundle, records, dev_examples, seed);
      row.anchor_rms = dev.anchor_rms;
      row.dev_tool_em = dev.tool_em;
      if (stage == 3) row.candidate_utility = candidate_utility(bundle, records, probes, seed);
      result.history.rows.push_back(row);
      if (options.checkpoint) bundle.save(*options.checkpoint);
    }
    result.history.stage_seconds[stage - 1] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  }
  return result;
}

}  // namespace flowplan
