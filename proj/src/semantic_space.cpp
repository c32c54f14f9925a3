#include "flowplan/semantic_space.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include <json.hpp>

#include "flowplan/errors.hpp"

namespace flowplan {

std::string_view phase_name(Phase phase) {
  switch (phase) {
    case Phase::Retrieval:
      return "retrieval";
    case Phase::Verification:
      return "verification";
    case Phase::DatabaseOp:
      return "database-op";
    case Phase::Other:
      break;
  }
  return "other";
}

Phase parse_phase(std::string_view name) {
  if (name == "retrieval") return Phase::Retrieval;
  if (name == "verification") return Phase::Verification;
  if (name == "database-op") return Phase::DatabaseOp;
  return Phase::Other;
}

Toolset::Toolset(std::vector<Tool> tools) : tools_(std::move(tools)) {
  if (tools_.empty()) throw InputError("toolset must contain at least one tool");
  std::set<std::string, std::less<>> ids;
  const std::size_t d = tools_.front().embedding.size();
  for (const auto& tool : tools_) {
    if (!ids.insert(tool.id).second) throw InputError("duplicate tool id '" + tool.id + "'");
    if (tool.embedding.size() != d || d == 0) throw InputError("tool '" + tool.id + "' has inconsistent dimension");
    if (!all_finite(tool.embedding)) throw InputError("tool '" + tool.id + "' has a non-finite embedding");
  }
  for (std::size_t i = 0; i < tools_.size(); ++i)
    for (std::size_t j = i + 1; j < tools_.size(); ++j)
      diameter_ = std::max(diameter_, distance(tools_[i].embedding, tools_[j].embedding));
}

std::optional<std::size_t> Toolset::index_of(std::string_view id) const {
  for (std::size_t i = 0; i < tools_.size(); ++i)
    if (tools_[i].id == id) return i;
  return std::nullopt;
}

Vec hash_embed(std::string_view text, std::size_t d, std::uint64_t salt) {
  if (d < 2) throw InputError("hash_embed: dimension must be at least 2");
  if (text.empty()) throw InputError("hash_embed: empty text");
  Vec out(d, 0.0);
  const std::uint64_t basis = mix64(salt ^ 0xcbf29ce484222325ULL);
  const std::size_t n = 3;
  const std::size_t grams = text.size() >= n ? text.size() - n + 1 : 1;
  for (std::size_t i = 0; i < grams; ++i) {
    const std::string_view gram = text.substr(i, std::min(n, text.size()));
    const std::uint64_t h = mix64(fnv1a64(gram, basis));
    const std::size_t bucket = static_cast<std::size_t>(h % d);
    const double sign = ((h >> 63) & 1U) ? -1.0 : 1.0;
    out[bucket] += sign;
  }
  double len = norm(out);
  if (len == 0.0) {
    // Every gram cancelled out; fall back to a deterministic bucket.
    out[static_cast<std::size_t>(mix64(fnv1a64(text, basis)) % d)] = 1.0;
    len = 1.0;
  }
  for (double& v : out) v /= len;
  return out;
}

Toolset build_toolset(const std::vector<ToolSpec>& specs, std::size_t d, std::uint64_t salt) {
  std::vector<Tool> tools;
  tools.reserve(specs.size());
  for (const auto& spec : specs) {
    Tool tool{spec.id, spec.description, spec.phase, {}};
    if (spec.embedding) {
      if (spec.embedding->size() != d) throw InputError("tool '" + spec.id + "': embedding dimension mismatch");
      const double len = norm(*spec.embedding);
      if (!(len > 0.0) || !std::isfinite(len)) throw InputError("tool '" + spec.id + "': degenerate embedding");
      // Leave already-unit vectors bit-identical so serialized toolsets round-trip.
      tool.embedding = std::abs(len - 1.0) < 1e-12 ? *spec.embedding : scaled(*spec.embedding, 1.0 / len);
    } else {
      tool.embedding = hash_embed(spec.description.empty() ? spec.id : spec.description, d, salt);
    }
    tools.push_back(std::move(tool));
  }
  return Toolset(std::move(tools));
}

NearestTool nearest_tool(std::span<const double> z, const Toolset& toolset) {
  NearestTool best{0, std::numeric_limits<double>::infinity()};
  for (std::size_t i = 0; i < toolset.size(); ++i) {
    const double d2 = squared_distance(z, toolset.embedding(i));
    if (d2 < best.squared_distance) best = {i, d2};
  }
  return best;
}

DecodingMargin decoding_margin(std::span<const double> anchor, const Toolset& toolset, std::size_t gold) {
  if (toolset.size() < 2) throw InputError("decoding margin undefined for a single-tool toolset");
  if (gold >= toolset.size()) throw InputError("decoding margin: gold index out of range");
  const double gold_d2 = squared_distance(anchor, toolset.embedding(gold));
  const double gold_d = std::sqrt(gold_d2);
  DecodingMargin m{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  for (std::size_t i = 0; i < toolset.size(); ++i) {
    if (i == gold) continue;
    const double d2 = squared_distance(anchor, toolset.embedding(i));
    m.squared = std::min(m.squared, d2 - gold_d2);
    m.linear = std::min(m.linear, std::sqrt(d2) - gold_d);
  }
  return m;
}

double covering_radius(const Toolset& train_tools, const ManifoldRegion& region) {
  if (train_tools.empty() || region.probes.empty()) throw InputError("covering_radius: empty input");
  double radius = 0.0;
  for (const auto& probe : region.probes) {
    radius = std::max(radius, std::sqrt(nearest_tool(probe, train_tools).squared_distance));
  }
  return radius;
}

double semantic_shift(const Toolset& unseen_tools, const ManifoldRegion& train_region) {
  if (unseen_tools.empty() || train_region.probes.empty()) throw InputError("semantic_shift: empty input");
  double shift = 0.0;
  for (const auto& tool : unseen_tools.tools()) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& probe : train_region.probes) best = std::min(best, squared_distance(tool.embedding, probe));
    shift = std::max(shift, std::sqrt(best));
  }
  return shift;
}

Vec GreatCircle::point(double theta) const {
  Vec p = scaled(u, std::cos(theta));
  axpy(std::sin(theta), v, p);
  return p;
}

ManifoldRegion GreatCircle::arc(double theta_begin, double theta_end, std::size_t count) const {
  ManifoldRegion region;
  if (count == 0) return region;
  for (std::size_t k = 0; k < count; ++k) {
    const double t = count == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(count - 1);
    region.probes.push_back(point(theta_begin + t * (theta_end - theta_begin)));
  }
  return region;
}

Vec random_unit_vector(std::size_t d, SeededRng& rng) {
  for (;;) {
    Vec v = rng.normal_vector(d);
    const double len = norm(v);
    if (len > 1e-12) return scaled(v, 1.0 / len);
  }
}

GreatCircle random_great_circle(std::size_t d, SeededRng& rng) {
  if (d < 2) throw InputError("great circle needs d >= 2");
  Vec u = random_unit_vector(d, rng);
  for (;;) {
    Vec v = rng.normal_vector(d);
    axpy(-dot(u, v), u, v);
    const double len = norm(v);
    if (len > 1e-9) return {u, scaled(v, 1.0 / len)};
  }
}

Toolset toolset_from_embeddings(const std::vector<Vec>& embeddings, const std::string& prefix) {
  std::vector<Tool> tools;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    tools.push_back({prefix + std::to_string(i), prefix + std::to_string(i), Phase::Other, embeddings[i]});
  }
  return Toolset(std::move(tools));
}

Toolset load_toolset_json(const std::filesystem::path& path, std::size_t d, std::uint64_t salt) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open toolset file " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(e.what(), 1);
  }
  std::vector<ToolSpec> specs;
  for (const auto& entry : doc) {
    ToolSpec spec;
    spec.id = entry.at("id").get<std::string>();
    spec.description = entry.value("description", spec.id);
    spec.phase = parse_phase(entry.value("phase", std::string("other")));
    if (entry.contains("embedding")) spec.embedding = entry.at("embedding").get<Vec>();
    specs.push_back(std::move(spec));
  }
  return build_toolset(specs, d, salt);
}

std::string toolset_to_json(const Toolset& toolset) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& tool : toolset.tools()) {
    doc.push_back({{"id", tool.id},
                   {"description", tool.description},
                   {"phase", std::string(phase_name(tool.phase))},
                   {"embedding", tool.embedding}});
  }
  return doc.dump();
}

}  // namespace flowplan
