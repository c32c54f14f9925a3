#pragma once

#include <string>
#include <vector>

#include "flowplan/numerics.hpp"
#include "flowplan/semantic_space.hpp"

namespace flowplan {

struct ExpertStep {
  Vec rationale;    // r_j
  std::size_t tool; // index into the task toolset
  Vec observation;  // o_j, returned after executing the tool
};

struct ExpertTrajectory {
  std::string task_id;
  std::vector<ExpertStep> steps;
};

/// Projections that lift one expert step into a dense latent anchor:
/// y = W_t e + W_r Enc_r(r) + W_o Enc_o(o_prev) + W_p nu(phase).
struct SupervisionHeads {
  DenseNet tool_projection;
  DenseNet rationale_projection;
  DenseNet observation_projection;
  DenseNet phase_projection;
  Matrix phase_table;  // kPhaseCount x d, one learnable row per phase tag
  DenseNet rationale_encoder;
  DenseNet observation_encoder;

  /// Every projection and the phase table zero; encoders are identity maps.
  static SupervisionHeads zeros(std::size_t d, std::size_t rationale_width, std::size_t observation_width);
  /// As zeros(), but W_t is the identity so anchors sit on tool embeddings.
  static SupervisionHeads tool_identity(std::size_t d, std::size_t rationale_width, std::size_t observation_width);

  std::size_t dimension() const { return tool_projection.output_width(); }
};

Vec encode_step(const SupervisionHeads& heads, std::span<const double> tool_embedding,
                std::span<const double> rationale, std::span<const double> prev_observation, Phase phase);

/// Knot time of anchor `index` (0-based) out of `count`: index/(count-1), or 1
/// when count == 1. Shared by supervision knots and flow anchor extraction.
double knot_time(std::size_t index, std::size_t count);

/// Piecewise-linear target path through the expert anchors.
class TargetPath {
 public:
  TargetPath() = default;
  explicit TargetPath(std::vector<Vec> anchors);

  std::size_t knot_count() const { return anchors_.size(); }
  std::size_t dimension() const { return anchors_.empty() ? 0 : anchors_.front().size(); }
  const std::vector<Vec>& anchors() const { return anchors_; }
  const std::vector<double>& knot_times() const { return times_; }

  Vec eval(double s) const;
  /// Segment slope, right limit at interior knots; the last segment at s = 1.
  Vec slope(double s) const;
  double max_slope_norm() const;

 private:
  std::size_t segment(double s) const;

  std::vector<Vec> anchors_;
  std::vector<double> times_;
  std::vector<Vec> slopes_;
};

TargetPath build_target_path(std::vector<Vec> anchors);
Vec path_eval(const TargetPath& path, double s);

/// u*(z, s) = y'(s) + kappa_pull (y(s) - z).
Vec teacher_velocity(const TargetPath& path, std::span<const double> z, double s, double kappa_pull);

struct TubePoint {
  double s = 0.0;
  Vec z;
};

/// s ~ U[0,1), z = y(s) + sigma_tube * g with g standard normal.
TubePoint sample_tube_point(const TargetPath& path, SeededRng& rng, double sigma_tube);

}  // namespace flowplan
