#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace flowplan {

using Vec = std::vector<double>;

// ---------------------------------------------------------------------------
// Dense linear algebra
// ---------------------------------------------------------------------------

/// Row-major dense matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  /// y = A x
  Vec multiply(std::span<const double> x) const;
  /// y = A^T x
  Vec multiply_transposed(std::span<const double> x) const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
double squared_distance(std::span<const double> a, std::span<const double> b);
double distance(std::span<const double> a, std::span<const double> b);
Vec add(std::span<const double> a, std::span<const double> b);
Vec subtract(std::span<const double> a, std::span<const double> b);
Vec scaled(std::span<const double> a, double s);
/// y += s * x
void axpy(double s, std::span<const double> x, std::span<double> y);
Vec concat(std::initializer_list<std::span<const double>> parts);
bool all_finite(std::span<const double> a);

/// Largest singular value estimated by power iteration on A^T A.
double spectral_norm_estimate(const Matrix& a, int iterations = 20);

// ---------------------------------------------------------------------------
// Randomness
// ---------------------------------------------------------------------------

/// Counter-based generator: the n-th draw is a pure function of
/// (seed, stream, n), so derived streams never interfere with each other.
class SeededRng {
 public:
  using result_type = std::uint64_t;

  explicit SeededRng(std::uint64_t seed, std::uint64_t stream = 0);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }
  result_type operator()() { return next_u64(); }

  std::uint64_t next_u64();
  /// Uniform on [0, 1).
  double uniform();
  /// Standard normal (Box-Muller, platform independent).
  double normal();
  Vec normal_vector(std::size_t n);
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  /// Child stream; children with distinct ids are independent of each other
  /// and of the parent.
  SeededRng derive(std::uint64_t id) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::optional<double> spare_normal_;
};

std::uint64_t mix64(std::uint64_t x);
/// Stable 64-bit FNV-1a hash (independent of std::hash).
std::uint64_t fnv1a64(std::string_view text, std::uint64_t basis = 0xcbf29ce484222325ULL);

// ---------------------------------------------------------------------------
// Feed-forward network with reverse-mode gradients
// ---------------------------------------------------------------------------

enum class Activation { Identity, Tanh };

struct DenseLayer {
  Matrix weight;  // out x in
  Vec bias;       // out
  Activation activation = Activation::Identity;
};

/// Per-parameter gradient accumulators, shape-congruent with one DenseNet.
struct GradientTape {
  std::vector<Matrix> weights;
  std::vector<Vec> biases;

  void zero();
  void accumulate(const GradientTape& other, double scale = 1.0);
  void scale(double s);
  bool all_finite() const;
  std::vector<double> flatten() const;
  double squared_norm() const;
};

/// Post-activation values of every layer; values[0] is the input.
struct ForwardTrace {
  std::vector<Vec> values;
  const Vec& output() const { return values.back(); }
};

class DenseNet {
 public:
  DenseNet() = default;
  explicit DenseNet(std::vector<DenseLayer> layers);

  /// Layers with scaled-uniform (Glorot) weights and zero biases.
  static DenseNet mlp(const std::vector<std::size_t>& widths, Activation hidden, Activation output,
                      SeededRng& rng, double output_gain = 1.0);
  static DenseNet zeros(const std::vector<std::size_t>& widths, Activation hidden, Activation output);
  /// Single identity-activation layer with the given weight and zero bias.
  static DenseNet linear(Matrix weight);

  std::size_t input_width() const;
  std::size_t output_width() const;
  bool empty() const { return layers_.empty(); }

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  Vec apply(std::span<const double> input) const;
  ForwardTrace forward(std::span<const double> input) const;
  /// Accumulates parameter gradients of <upstream, net(input)> into `tape`
  /// and returns the gradient with respect to the input.
  Vec backward(const ForwardTrace& trace, std::span<const double> upstream, GradientTape& tape) const;

  GradientTape make_tape() const;
  std::size_t parameter_count() const;
  std::vector<double> parameters() const;
  void set_parameters(std::span<const double> values);
  bool all_finite() const;

  bool operator==(const DenseNet& other) const;

 private:
  std::vector<DenseLayer> layers_;
};

struct Backprop {
  GradientTape tape;
  Vec input_grad;
};

Backprop net_backprop(const DenseNet& net, std::span<const double> input, std::span<const double> upstream);

/// Derivative of a scalar function at 0 by Ridders' extrapolation of central
/// differences, starting from step `h` and shrinking it by 1.4 per level.
struct Derivative {
  double value = 0.0;
  double error = 0.0;  // extrapolation error estimate
};
Derivative ridders_derivative(const std::function<double(double)>& f, double h);

/// Max over parameters of |analytic - numeric| / (|numeric| + 1e-12), where
/// numeric is the central difference at `step`. With `extrapolate`, any
/// parameter whose central difference disagrees by more than 1e-6 is
/// re-estimated with ridders_derivative from step 1e-2, which removes the
/// roundoff and curvature error of a single step.
double finite_diff_check(const std::function<double(const DenseNet&)>& loss_fn, const GradientTape& analytic,
                         const DenseNet& point, double step, bool extrapolate = false);

// ---------------------------------------------------------------------------
// Adaptive-moment optimizer
// ---------------------------------------------------------------------------

struct OptimState {
  GradientTape first_moment;
  GradientTape second_moment;
  long step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static OptimState for_net(const DenseNet& net, double learning_rate);
};

/// One bias-corrected Adam step. Throws NumericError (leaving net and state
/// untouched) when the gradient is not finite.
void adam_update(OptimState& state, DenseNet& net, const GradientTape& tape);

// ---------------------------------------------------------------------------
// Checkpoints: u64 little-endian header length, JSON header, raw LE float64.
// ---------------------------------------------------------------------------

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string config_json;

  void add_net(const std::string& prefix, const DenseNet& net);
  /// Overwrites the parameters of `net` (whose shapes must match) from tensors
  /// stored under `prefix`.
  void load_net(const std::string& prefix, DenseNet& net) const;
  const NamedTensor& find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Writes `contents` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace flowplan
