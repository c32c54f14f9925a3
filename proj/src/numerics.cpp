#include "flowplan/numerics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "flowplan/errors.hpp"

namespace flowplan {

// ---------------------------------------------------------------------------
// Matrix and vector helpers
// ---------------------------------------------------------------------------

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Vec Matrix::multiply(std::span<const double> x) const {
  if (x.size() != cols_) {
    throw ShapeError("matrix multiply: expected input width " + std::to_string(cols_) + ", got " +
                     std::to_string(x.size()));
  }
  Vec y(rows_, 0.0);
  for (std::size_t r = 0; r < rows_; ++r) {
    const double* row = data_.data() + r * cols_;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols_; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
  return y;
}

Vec Matrix::multiply_transposed(std::span<const double> x) const {
  if (x.size() != rows_) {
    throw ShapeError("matrix transpose multiply: expected width " + std::to_string(rows_) + ", got " +
                     std::to_string(x.size()));
  }
  Vec y(cols_, 0.0);
  for (std::size_t r = 0; r < rows_; ++r) {
    const double* row = data_.data() + r * cols_;
    const double xr = x[r];
    if (xr == 0.0) continue;
    for (std::size_t c = 0; c < cols_; ++c) y[c] += row[c] * xr;
  }
  return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("distance: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

double distance(std::span<const double> a, std::span<const double> b) { return std::sqrt(squared_distance(a, b)); }

Vec add(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("add: size mismatch");
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Vec subtract(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("subtract: size mismatch");
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

Vec scaled(std::span<const double> a, double s) {
  Vec out(a.begin(), a.end());
  for (double& v : out) v *= s;
  return out;
}

void axpy(double s, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw ShapeError("axpy: size mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += s * x[i];
}

Vec concat(std::initializer_list<std::span<const double>> parts) {
  Vec out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

double spectral_norm_estimate(const Matrix& a, int iterations) {
  if (a.rows() == 0 || a.cols() == 0) return 0.0;
  // Deterministic, non-degenerate start vector.
  Vec v(a.cols());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i % 7);
  double sigma = 0.0;
  for (int it = 0; it < iterations; ++it) {
    const double n = norm(v);
    if (n == 0.0) return 0.0;
    for (double& x : v) x /= n;
    Vec av = a.multiply(v);
    sigma = norm(av);
    v = a.multiply_transposed(av);
  }
  return sigma;
}

// ---------------------------------------------------------------------------
// SeededRng
// ---------------------------------------------------------------------------

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view text, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

SeededRng::SeededRng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), key_(mix64(seed ^ mix64(stream ^ 0x5851f42d4c957f2dULL))) {}

std::uint64_t SeededRng::next_u64() {
  const std::uint64_t c = counter_++;
  return mix64(key_ ^ mix64(c + 0x9e3779b97f4a7c15ULL));
}

double SeededRng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double SeededRng::normal() {
  if (spare_normal_) {
    const double v = *spare_normal_;
    spare_normal_.reset();
    return v;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_normal_ = r * std::sin(theta);
  return r * std::cos(theta);
}

Vec SeededRng::normal_vector(std::size_t n) {
  Vec out(n);
  for (double& v : out) v = normal();
  return out;
}

std::size_t SeededRng::below(std::size_t n) {
  if (n == 0) throw InputError("SeededRng::below: empty range");
  return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
}

SeededRng SeededRng::derive(std::uint64_t id) const {
  return SeededRng(seed_, mix64(stream_ * 0x2545f4914f6cdd1dULL ^ mix64(id + 0x632be59bd9b4e019ULL)));
}

// ---------------------------------------------------------------------------
// GradientTape
// ---------------------------------------------------------------------------

void GradientTape::zero() {
  for (auto& w : weights) std::fill(w.data().begin(), w.data().end(), 0.0);
  for (auto& b : biases) std::fill(b.begin(), b.end(), 0.0);
}

void GradientTape::accumulate(const GradientTape& other, double scale) {
  if (other.weights.size() != weights.size()) throw ShapeError("tape accumulate: layer count mismatch");
  for (std::size_t l = 0; l < weights.size(); ++l) {
    auto dst = weights[l].data();
    auto src = other.weights[l].data();
    if (dst.size() != src.size()) throw ShapeError("tape accumulate: weight shape mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
    if (biases[l].size() != other.biases[l].size()) throw ShapeError("tape accumulate: bias shape mismatch");
    for (std::size_t i = 0; i < biases[l].size(); ++i) biases[l][i] += scale * other.biases[l][i];
  }
}

void GradientTape::scale(double s) {
  for (auto& w : weights)
    for (double& v : w.data()) v *= s;
  for (auto& b : biases)
    for (double& v : b) v *= s;
}

bool GradientTape::all_finite() const {
  for (const auto& w : weights)
    if (!flowplan::all_finite(w.data())) return false;
  for (const auto& b : biases)
    if (!flowplan::all_finite(b)) return false;
  return true;
}

std::vector<double> GradientTape::flatten() const {
  std::vector<double> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.insert(out.end(), weights[l].data().begin(), weights[l].data().end());
    out.insert(out.end(), biases[l].begin(), biases[l].end());
  }
  return out;
}

double GradientTape::squared_norm() const {
  double acc = 0.0;
  for (double v : flatten()) acc += v * v;
  return acc;
}

// ---------------------------------------------------------------------------
// DenseNet
// ---------------------------------------------------------------------------

DenseNet::DenseNet(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (layers_[l].bias.size() != layers_[l].weight.rows()) {
      throw ShapeError("DenseNet: bias width does not match layer " + std::to_string(l));
    }
    if (l > 0 && layers_[l].weight.cols() != layers_[l - 1].weight.rows()) {
      throw ShapeError("DenseNet: layer " + std::to_string(l) + " input width does not chain");
    }
  }
}

DenseNet DenseNet::mlp(const std::vector<std::size_t>& widths, Activation hidden, Activation output, SeededRng& rng,
                       double output_gain) {
  if (widths.size() < 2) throw ShapeError("DenseNet::mlp needs at least input and output widths");
  std::vector<DenseLayer> layers;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t in = widths[l];
    const std::size_t out = widths[l + 1];
    DenseLayer layer{Matrix(out, in), Vec(out, 0.0), l + 2 == widths.size() ? output : hidden};
    double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    if (l + 2 == widths.size()) limit *= output_gain;
    for (double& w : layer.weight.data()) w = limit * (2.0 * rng.uniform() - 1.0);
    layers.push_back(std::move(layer));
  }
  return DenseNet(std::move(layers));
}

DenseNet DenseNet::zeros(const std::vector<std::size_t>& widths, Activation hidden, Activation output) {
  if (widths.size() < 2) throw ShapeError("DenseNet::zeros needs at least input and output widths");
  std::vector<DenseLayer> layers;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    layers.push_back(
        {Matrix(widths[l + 1], widths[l]), Vec(widths[l + 1], 0.0), l + 2 == widths.size() ? output : hidden});
  }
  return DenseNet(std::move(layers));
}

DenseNet DenseNet::linear(Matrix weight) {
  const std::size_t out = weight.rows();
  std::vector<DenseLayer> layers;
  layers.push_back({std::move(weight), Vec(out, 0.0), Activation::Identity});
  return DenseNet(std::move(layers));
}

std::size_t DenseNet::input_width() const { return layers_.empty() ? 0 : layers_.front().weight.cols(); }
std::size_t DenseNet::output_width() const { return layers_.empty() ? 0 : layers_.back().weight.rows(); }

namespace {

void apply_layer(const DenseLayer& layer, std::span<const double> x, Vec& out) {
  out = layer.weight.multiply(x);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += layer.bias[i];
    if (layer.activation == Activation::Tanh) out[i] = std::tanh(out[i]);
  }
}

}  // namespace

Vec DenseNet::apply(std::span<const double> input) const {
  if (input.size() != input_width()) {
    throw ShapeError("net_apply: expected input width " + std::to_string(input_width()) + ", got " +
                     std::to_string(input.size()));
  }
  Vec current(input.begin(), input.end());
  Vec next;
  for (const auto& layer : layers_) {
    apply_layer(layer, current, next);
    current.swap(next);
  }
  return current;
}

ForwardTrace DenseNet::forward(std::span<const double> input) const {
  if (input.size() != input_width()) {
    throw ShapeError("net forward: expected input width " + std::to_string(input_width()) + ", got " +
                     std::to_string(input.size()));
  }
  ForwardTrace trace;
  trace.values.reserve(layers_.size() + 1);
  trace.values.emplace_back(input.begin(), input.end());
  for (const auto& layer : layers_) {
    Vec out;
    apply_layer(layer, trace.values.back(), out);
    trace.values.push_back(std::move(out));
  }
  return trace;
}

Vec DenseNet::backward(const ForwardTrace& trace, std::span<const double> upstream, GradientTape& tape) const {
  if (upstream.size() != output_width()) {
    throw ShapeError("net_backprop: expected upstream width " + std::to_string(output_width()) + ", got " +
                     std::to_string(upstream.size()));
  }
  if (trace.values.size() != layers_.size() + 1) throw ShapeError("net_backprop: trace does not match network");
  if (tape.weights.size() != layers_.size()) throw ShapeError("net_backprop: tape does not match network");
  Vec grad(upstream.begin(), upstream.end());
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const DenseLayer& layer = layers_[li];
    const Vec& out = trace.values[li + 1];
    const Vec& in = trace.values[li];
    if (layer.activation == Activation::Tanh) {
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= 1.0 - out[i] * out[i];
    }
    Matrix& gw = tape.weights[li];
    Vec& gb = tape.biases[li];
    for (std::size_t r = 0; r < layer.weight.rows(); ++r) {
      const double g = grad[r];
      gb[r] += g;
      if (g == 0.0) continue;
      for (std::size_t c = 0; c < layer.weight.cols(); ++c) gw(r, c) += g * in[c];
    }
    grad = layer.weight.multiply_transposed(grad);
  }
  return grad;
}

GradientTape DenseNet::make_tape() const {
  GradientTape tape;
  for (const auto& layer : layers_) {
    tape.weights.emplace_back(layer.weight.rows(), layer.weight.cols());
    tape.biases.emplace_back(layer.bias.size(), 0.0);
  }
  return tape;
}

std::size_t DenseNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers_) n += layer.weight.data().size() + layer.bias.size();
  return n;
}

std::vector<double> DenseNet::parameters() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const auto& layer : layers_) {
    out.insert(out.end(), layer.weight.data().begin(), layer.weight.data().end());
    out.insert(out.end(), layer.bias.begin(), layer.bias.end());
  }
  return out;
}

void DenseNet::set_parameters(std::span<const double> values) {
  if (values.size() != parameter_count()) throw ShapeError("set_parameters: size mismatch");
  std::size_t k = 0;
  for (auto& layer : layers_) {
    for (double& w : layer.weight.data()) w = values[k++];
    for (double& b : layer.bias) b = values[k++];
  }
}

bool DenseNet::all_finite() const {
  for (const auto& layer : layers_) {
    if (!flowplan::all_finite(layer.weight.data()) || !flowplan::all_finite(layer.bias)) return false;
  }
  return true;
}

bool DenseNet::operator==(const DenseNet& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (!(layers_[l].weight == other.layers_[l].weight) || layers_[l].bias != other.layers_[l].bias ||
        layers_[l].activation != other.layers_[l].activation) {
      return false;
    }
  }
  return true;
}

Backprop net_backprop(const DenseNet& net, std::span<const double> input, std::span<const double> upstream) {
  Backprop out{net.make_tape(), {}};
  const ForwardTrace trace = net.forward(input);
  out.input_grad = net.backward(trace, upstream, out.tape);
  return out;
}

Derivative ridders_derivative(const std::function<double(double)>& f, double h) {
  if (!(h > 0.0)) throw InputError("ridders_derivative: step must be positive");
  constexpr std::size_t kLevels = 10;
  constexpr double kShrink = 1.4;
  constexpr double kShrink2 = kShrink * kShrink;
  constexpr double kSafe = 2.0;
  double table[kLevels][kLevels];
  Derivative best{0.0, std::numeric_limits<double>::infinity()};
  for (std::size_t i = 0; i < kLevels; ++i, h /= kShrink) {
    const double up = f(h), down = f(-h);
    if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("ridders_derivative: non-finite value");
    table[0][i] = (up - down) / (2.0 * h);
    double factor = kShrink2;
    for (std::size_t j = 1; j <= i; ++j, factor *= kShrink2) {
      table[j][i] = (table[j - 1][i] * factor - table[j - 1][i - 1]) / (factor - 1.0);
      const double err = std::max(std::abs(table[j][i] - table[j - 1][i]), std::abs(table[j][i] - table[j - 1][i - 1]));
      if (err <= best.error) best = {table[j][i], err};
    }
    if (i > 0 && std::abs(table[i][i] - table[i - 1][i - 1]) >= kSafe * best.error) break;
  }
  if (!std::isfinite(best.error)) best = {table[0][0], std::abs(table[0][0])};
  return best;
}

double finite_diff_check(const std::function<double(const DenseNet&)>& loss_fn, const GradientTape& analytic,
                         const DenseNet& point, double step, bool extrapolate) {
  if (!(step > 0.0)) throw InputError("finite_diff_check: step must be positive");
  const std::vector<double> grad = analytic.flatten();
  std::vector<double> params = point.parameters();
  if (grad.size() != params.size()) throw ShapeError("finite_diff_check: tape does not match network");
  DenseNet probe = point;
  const auto shifted = [&](std::size_t i, double dx) {
    const double original = params[i];
    params[i] = original + dx;
    probe.set_parameters(params);
    const double value = loss_fn(probe);
    params[i] = original;
    return value;
  };
  const auto rel = [](double a, double n) { return std::abs(a - n) / (std::abs(n) + 1e-12); };
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double up = shifted(i, step);
    const double down = shifted(i, -step);
    if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("finite_diff_check: non-finite loss");
    double err = rel(grad[i], (up - down) / (2.0 * step));
    if (extrapolate && err > 1e-6) {
      err = rel(grad[i], ridders_derivative([&](double dx) { return shifted(i, dx); }, 1e-2).value);
    }
    worst = std::max(worst, err);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

OptimState OptimState::for_net(const DenseNet& net, double learning_rate) {
  OptimState state;
  state.first_moment = net.make_tape();
  state.second_moment = net.make_tape();
  state.learning_rate = learning_rate;
  return state;
}

void adam_update(OptimState& state, DenseNet& net, const GradientTape& tape) {
  if (tape.weights.size() != net.layers().size() || state.first_moment.weights.size() != net.layers().size()) {
    throw ShapeError("adam_update: tape/state do not match network");
  }
  if (!tape.all_finite()) throw NumericError("adam_update: non-finite gradient");
  state.step += 1;
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  auto update = [&](std::span<double> param, std::span<const double> g, std::span<double> m, std::span<double> v) {
    for (std::size_t i = 0; i < param.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      param[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  };
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    auto& layer = net.layers()[l];
    update(layer.weight.data(), tape.weights[l].data(), state.first_moment.weights[l].data(),
           state.second_moment.weights[l].data());
    update(layer.bias, tape.biases[l], state.first_moment.biases[l], state.second_moment.biases[l]);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void Checkpoint::add_net(const std::string& prefix, const DenseNet& net) {
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    const auto& layer = net.layers()[l];
    const std::string base = prefix + ".layer" + std::to_string(l);
    tensors.push_back({base + ".weight",
                       {layer.weight.rows(), layer.weight.cols()},
                       {layer.weight.data().begin(), layer.weight.data().end()}});
    tensors.push_back({base + ".bias", {layer.bias.size()}, layer.bias});
  }
}

const NamedTensor& Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw ReferenceError("checkpoint: missing tensor " + name);
}

void Checkpoint::load_net(const std::string& prefix, DenseNet& net) const {
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    auto& layer = net.layers()[l];
    const std::string base = prefix + ".layer" + std::to_string(l);
    const NamedTensor& w = find(base + ".weight");
    const NamedTensor& b = find(base + ".bias");
    if (w.shape != std::vector<std::size_t>{layer.weight.rows(), layer.weight.cols()} ||
        b.shape != std::vector<std::size_t>{layer.bias.size()}) {
      throw ShapeError("checkpoint: shape mismatch for " + base);
    }
    std::copy(w.values.begin(), w.values.end(), layer.weight.data().begin());
    layer.bias = b.values;
  }
}

namespace {

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  nlohmann::json header;
  header["seed"] = checkpoint.seed;
  header["config_hash"] = checkpoint.config_hash;
  header["config"] = checkpoint.config_json;
  nlohmann::json list = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : checkpoint.tensors) {
    list.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", t.values.size()}});
    offset += t.values.size();
  }
  header["tensors"] = list;
  const std::string text = header.dump();
  std::string blob;
  put_u64_le(blob, text.size());
  blob += text;
  for (const auto& t : checkpoint.tensors) {
    for (double v : t.values) put_u64_le(blob, std::bit_cast<std::uint64_t>(v));
  }
  write_file_atomic(path, blob);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() < 8) throw ParseError("checkpoint truncated", 0);
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  const std::uint64_t header_len = get_u64_le(bytes);
  if (8 + header_len > blob.size()) throw ParseError("checkpoint header truncated", 0);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(8, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what(), 0);
  }
  Checkpoint ck;
  ck.seed = header.at("seed").get<std::uint64_t>();
  ck.config_hash = header.at("config_hash").get<std::string>();
  ck.config_json = header.value("config", std::string{});
  const std::size_t data_start = 8 + header_len;
  for (const auto& entry : header.at("tensors")) {
    NamedTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<std::size_t>>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    if (data_start + 8 * (offset + count) > blob.size()) throw ParseError("checkpoint data truncated", 0);
    t.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      t.values[i] = std::bit_cast<double>(get_u64_le(bytes + data_start + 8 * (offset + i)));
    }
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace flowplan
