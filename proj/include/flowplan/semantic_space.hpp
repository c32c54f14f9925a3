#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flowplan/numerics.hpp"

namespace flowplan {

enum class Phase { Retrieval = 0, Verification = 1, DatabaseOp = 2, Other = 3 };
inline constexpr std::size_t kPhaseCount = 4;

std::string_view phase_name(Phase phase);
/// Unrecognized tags map to Phase::Other.
Phase parse_phase(std::string_view name);

struct Tool {
  std::string id;
  std::string description;
  Phase phase = Phase::Other;
  Vec embedding;  // unit L2 norm when built from specs
};

struct ToolSpec {
  std::string id;
  std::string description;
  Phase phase = Phase::Other;
  std::optional<Vec> embedding;
};

/// Immutable ordered tool catalog with its cached diameter.
class Toolset {
 public:
  Toolset() = default;
  /// Throws InputError on an empty list, duplicate ids, mixed dimensions or
  /// non-finite embeddings. Unit norm is established by build_toolset, not here.
  explicit Toolset(std::vector<Tool> tools);

  std::size_t size() const { return tools_.size(); }
  bool empty() const { return tools_.empty(); }
  std::size_t dimension() const { return tools_.empty() ? 0 : tools_.front().embedding.size(); }
  /// Max pairwise embedding distance (0 for a single tool).
  double diameter() const { return diameter_; }

  const std::vector<Tool>& tools() const { return tools_; }
  const Tool& operator[](std::size_t i) const { return tools_[i]; }
  const Vec& embedding(std::size_t i) const { return tools_[i].embedding; }
  std::optional<std::size_t> index_of(std::string_view id) const;

 private:
  std::vector<Tool> tools_;
  double diameter_ = 0.0;
};

/// Character trigrams feature-hashed into d signed buckets, L2-normalized.
Vec hash_embed(std::string_view text, std::size_t d, std::uint64_t salt);

/// Embeds specs without an explicit embedding via hash_embed(description).
/// Explicit embeddings are normalized to unit length.
Toolset build_toolset(const std::vector<ToolSpec>& specs, std::size_t d, std::uint64_t salt);

struct NearestTool {
  std::size_t index = 0;
  double squared_distance = 0.0;
};

/// argmin ||z - e_t||^2 with ties resolved toward the lowest index.
NearestTool nearest_tool(std::span<const double> z, const Toolset& toolset);

struct DecodingMargin {
  double squared = 0.0;  // min_{t != gold} ||y-e_t||^2 - ||y-e_gold||^2
  double linear = 0.0;   // min_{t != gold} ||y-e_t||   - ||y-e_gold||
};

DecodingMargin decoding_margin(std::span<const double> anchor, const Toolset& toolset, std::size_t gold);

/// Finite probe sample standing in for a compact region of the manifold.
struct ManifoldRegion {
  std::vector<Vec> probes;
};

/// sup over probes of the distance to the nearest training embedding.
double covering_radius(const Toolset& train_tools, const ManifoldRegion& region);
/// sup over unseen embeddings of the distance to the nearest region probe.
double semantic_shift(const Toolset& unseen_tools, const ManifoldRegion& train_region);

/// Great circle through orthonormal directions u, v: cos(theta) u + sin(theta) v.
struct GreatCircle {
  Vec u;
  Vec v;

  Vec point(double theta) const;
  /// `count` evenly spaced probes on [theta_begin, theta_end].
  ManifoldRegion arc(double theta_begin, double theta_end, std::size_t count) const;
};

Vec random_unit_vector(std::size_t d, SeededRng& rng);
GreatCircle random_great_circle(std::size_t d, SeededRng& rng);
/// Toolset with ids "<prefix><k>" over the given points, kept as they are.
Toolset toolset_from_embeddings(const std::vector<Vec>& embeddings, const std::string& prefix = "t");

/// Toolset JSON: [{"id", "description", "phase", optional "embedding"}].
Toolset load_toolset_json(const std::filesystem::path& path, std::size_t d, std::uint64_t salt);
std::string toolset_to_json(const Toolset& toolset);

}  // namespace flowplan
