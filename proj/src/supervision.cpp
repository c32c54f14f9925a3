#include "flowplan/supervision.hpp"

#include <algorithm>
#include <cmath>

#include "flowplan/errors.hpp"

namespace flowplan {

namespace {

DenseNet zero_linear(std::size_t out, std::size_t in) { return DenseNet::linear(Matrix(out, in)); }

}  // namespace

SupervisionHeads SupervisionHeads::zeros(std::size_t d, std::size_t rationale_width, std::size_t observation_width) {
  SupervisionHeads heads;
  heads.tool_projection = zero_linear(d, d);
  heads.rationale_projection = zero_linear(d, d);
  heads.observation_projection = zero_linear(d, d);
  heads.phase_projection = zero_linear(d, d);
  heads.phase_table = Matrix(kPhaseCount, d);
  Matrix enc_r(d, rationale_width);
  for (std::size_t i = 0; i < std::min(d, rationale_width); ++i) enc_r(i, i) = 1.0;
  Matrix enc_o(d, observation_width);
  for (std::size_t i = 0; i < std::min(d, observation_width); ++i) enc_o(i, i) = 1.0;
  heads.rationale_encoder = DenseNet::linear(std::move(enc_r));
  heads.observation_encoder = DenseNet::linear(std::move(enc_o));
  return heads;
}

SupervisionHeads SupervisionHeads::tool_identity(std::size_t d, std::size_t rationale_width,
                                                 std::size_t observation_width) {
  SupervisionHeads heads = zeros(d, rationale_width, observation_width);
  heads.tool_projection = DenseNet::linear(Matrix::identity(d));
  return heads;
}

Vec encode_step(const SupervisionHeads& heads, std::span<const double> tool_embedding,
                std::span<const double> rationale, std::span<const double> prev_observation, Phase phase) {
  const std::size_t d = heads.dimension();
  const auto phase_row = static_cast<std::size_t>(phase);
  if (phase_row >= heads.phase_table.rows()) throw InputError("encode_step: phase outside vocabulary");
  Vec y = heads.tool_projection.apply(tool_embedding);
  const Vec r = heads.rationale_projection.apply(heads.rationale_encoder.apply(rationale));
  const Vec o = heads.observation_projection.apply(heads.observation_encoder.apply(prev_observation));
  const Vec nu(heads.phase_table.data().begin() + static_cast<std::ptrdiff_t>(phase_row * d),
               heads.phase_table.data().begin() + static_cast<std::ptrdiff_t>((phase_row + 1) * d));
  const Vec p = heads.phase_projection.apply(nu);
  if (r.size() != d || o.size() != d || p.size() != d) throw ShapeError("encode_step: head widths disagree");
  axpy(1.0, r, y);
  axpy(1.0, o, y);
  axpy(1.0, p, y);
  return y;
}

double knot_time(std::size_t index, std::size_t count) {
  if (count <= 1) return 1.0;
  return static_cast<double>(index) / static_cast<double>(count - 1);
}

TargetPath::TargetPath(std::vector<Vec> anchors) : anchors_(std::move(anchors)) {
  if (anchors_.empty()) throw InputError("target path needs at least one anchor");
  const std::size_t d = anchors_.front().size();
  for (const auto& a : anchors_) {
    if (a.size() != d) throw ShapeError("target path anchors disagree in dimension");
    if (!all_finite(a)) throw InputError("target path anchor is not finite");
  }
  const std::size_t m = anchors_.size();
  for (std::size_t j = 0; j < m; ++j) times_.push_back(knot_time(j, m));
  for (std::size_t j = 0; j + 1 < m; ++j) {
    slopes_.push_back(scaled(subtract(anchors_[j + 1], anchors_[j]), 1.0 / (times_[j + 1] - times_[j])));
  }
}

std::size_t TargetPath::segment(double s) const {
  if (!(s >= 0.0 && s <= 1.0)) throw InputError("path time must lie in [0, 1]");
  const auto it = std::upper_bound(times_.begin(), times_.end(), s);
  const auto idx = static_cast<std::size_t>(std::distance(times_.begin(), it));
  return std::min(idx == 0 ? 0 : idx - 1, slopes_.size() - 1);
}

Vec TargetPath::eval(double s) const {
  if (!(s >= 0.0 && s <= 1.0)) throw InputError("path time must lie in [0, 1]");
  if (anchors_.size() == 1) return anchors_.front();
  const std::size_t j = segment(s);
  if (s == times_[j]) return anchors_[j];
  if (s == times_[j + 1]) return anchors_[j + 1];
  Vec y = anchors_[j];
  axpy(s - times_[j], slopes_[j], y);
  return y;
}

Vec TargetPath::slope(double s) const {
  if (!(s >= 0.0 && s <= 1.0)) throw InputError("path time must lie in [0, 1]");
  if (anchors_.size() == 1) return Vec(dimension(), 0.0);
  return slopes_[segment(s)];
}

double TargetPath::max_slope_norm() const {
  double best = 0.0;
  for (const auto& sl : slopes_) best = std::max(best, norm(sl));
  return best;
}

TargetPath build_target_path(std::vector<Vec> anchors) { return TargetPath(std::move(anchors)); }

Vec path_eval(const TargetPath& path, double s) { return path.eval(s); }

Vec teacher_velocity(const TargetPath& path, std::span<const double> z, double s, double kappa_pull) {
  Vec u = path.slope(s);
  const Vec y = path.eval(s);
  if (z.size() != y.size()) throw ShapeError("teacher_velocity: state dimension mismatch");
  for (std::size_t i = 0; i < u.size(); ++i) u[i] += kappa_pull * (y[i] - z[i]);
  return u;
}

TubePoint sample_tube_point(const TargetPath& path, SeededRng& rng, double sigma_tube) {
  if (sigma_tube < 0.0) throw InputError("sigma_tube must be non-negative");
  TubePoint p;
  p.s = rng.uniform();
  p.z = path.eval(p.s);
  if (sigma_tube > 0.0) {
    for (double& v : p.z) v += sigma_tube * rng.normal();
  }
  return p;
}

}  // namespace flowplan
