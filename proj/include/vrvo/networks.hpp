#pragma once

// Toy-scale networks: shared encoder, disparity decoder, pose regressor and
// the global-pool discriminator, plus parameter storage, hashing and
// checkpoint serialization.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vrvo/diffops.hpp"

namespace vrvo::nn {

using ad::Shape;
using ad::Tape;
using ad::TensorPtr;
using ad::Var;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Parameter {
  std::string name;
  TensorPtr tensor;
};

/// Named parameter list shared by all networks.
class ParameterSet {
 public:
  TensorPtr add(const std::string& name, Shape shape) {
    auto t = ad::make_tensor(shape, 0.0, true);
    params_.push_back({name, t});
    return t;
  }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor->numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor->zero_grad();
  }

  bool all_finite() const {
    for (const auto& p : params_)
      for (double v : p.tensor->value)
        if (!std::isfinite(v)) return false;
    return true;
  }

  /// FNV-1a over the raw bytes of every value.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : params_)
      for (double v : p.tensor->value) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        for (int b = 0; b < 8; ++b) {
          h ^= (bits >> (8 * b)) & 0xff;
          h *= 1099511628211ULL;
        }
      }
    return h;
  }

  /// Flattened copy of all values (in declaration order).
  std::vector<double> flatten() const {
    std::vector<double> out;
    for (const auto& p : params_) out.insert(out.end(), p.tensor->value.begin(), p.tensor->value.end());
    return out;
  }

  void assign(const std::vector<double>& flat) {
    if (flat.size() != count()) throw CheckpointError("parameter count mismatch");
    std::size_t off = 0;
    for (auto& p : params_) {
      std::copy_n(flat.begin() + off, p.tensor->numel(), p.tensor->value.begin());
      off += p.tensor->numel();
    }
  }

 private:
  std::vector<Parameter> params_;
};

namespace detail {

/// Uniform(-a, a) with a = gain * sqrt(6 / (fan_in + fan_out)).
inline void init_uniform(const TensorPtr& t, int fan_in, int fan_out, std::mt19937_64& rng, double gain = 1.0) {
  const double a = gain * std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  for (double& v : t->value) v = u(rng);
}

struct ConvLayer {
  TensorPtr weight, bias;
  int stride = 1, padding = 1;

  ConvLayer() = default;
  ConvLayer(ParameterSet& ps, const std::string& name, int cin, int cout, int k, int stride_, int pad,
            std::mt19937_64& rng, double gain = 1.0)
      : stride(stride_), padding(pad) {
    weight = ps.add(name + ".weight", Shape{cout, cin, k, k});
    bias = ps.add(name + ".bias", Shape{1, cout, 1, 1});
    init_uniform(weight, cin * k * k, cout * k * k, rng, gain);
  }

  Var operator()(Tape& tape, const Var& x, bool trainable) const {
    return ad::conv2d(x, tape.leaf(weight, trainable), tape.leaf(bias, trainable), {stride, padding});
  }
};

struct LinearLayer {
  TensorPtr weight, bias;

  LinearLayer() = default;
  LinearLayer(ParameterSet& ps, const std::string& name, int in, int out, std::mt19937_64& rng, double gain = 1.0) {
    weight = ps.add(name + ".weight", Shape{1, 1, out, in});
    bias = ps.add(name + ".bias", Shape{1, out, 1, 1});
    init_uniform(weight, in, out, rng, gain);
  }

  Var operator()(Tape& tape, const Var& x, bool trainable) const {
    return ad::linear(x, tape.leaf(weight, trainable), tape.leaf(bias, trainable));
  }
};

}  // namespace detail

/// Image-shaped shared feature extractor: 1 -> 8 -> 8 -> 1 channels.
class SharedEncoder {
 public:
  explicit SharedEncoder(std::uint64_t seed = 1) {
    std::mt19937_64 rng(seed);
    c1_ = detail::ConvLayer(params_, "encoder.conv1", 1, 8, 3, 1, 1, rng);
    c2_ = detail::ConvLayer(params_, "encoder.conv2", 8, 8, 3, 1, 1, rng);
    c3_ = detail::ConvLayer(params_, "encoder.conv3", 8, 1, 3, 1, 1, rng);
  }

  Var forward(Tape& tape, const Var& image, bool trainable = true) const {
    if (image.shape().c != 1) throw ad::ShapeError("SharedEncoder: expects one channel, got " + image.shape().str());
    Var h = ad::tanh(c1_(tape, image, trainable));
    h = ad::tanh(c2_(tape, h, trainable));
    return c3_(tape, h, trainable);
  }

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

 private:
  ParameterSet params_;
  detail::ConvLayer c1_, c2_, c3_;
};

/// Feature map -> disparity in (0, d_max): 1 -> 16 -> 16 -> 16 -> 1.
class DisparityDecoder {
 public:
  DisparityDecoder(double max_disparity, std::uint64_t seed = 2) : max_disparity_(max_disparity) {
    if (!(max_disparity > 0)) throw std::invalid_argument("DisparityDecoder: max disparity must be positive");
    std::mt19937_64 rng(seed);
    c1_ = detail::ConvLayer(params_, "decoder.conv1", 1, 16, 3, 1, 1, rng);
    c2_ = detail::ConvLayer(params_, "decoder.conv2", 16, 16, 3, 1, 1, rng);
    c3_ = detail::ConvLayer(params_, "decoder.conv3", 16, 16, 3, 1, 1, rng);
    c4_ = detail::ConvLayer(params_, "decoder.conv4", 16, 1, 3, 1, 1, rng);
  }

  Var forward(Tape& tape, const Var& features, bool trainable = true) const {
    Var h = ad::tanh(c1_(tape, features, trainable));
    h = ad::tanh(c2_(tape, h, trainable));
    h = ad::tanh(c3_(tape, h, trainable));
    return ad::mul_scalar(ad::sigmoid(c4_(tape, h, trainable)), max_disparity_);
  }

  double max_disparity() const { return max_disparity_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

 private:
  double max_disparity_;
  ParameterSet params_;
  detail::ConvLayer c1_, c2_, c3_, c4_;
};

/// Temporally ordered frame pair -> relative pose vector (rotation vector,
/// translation) of the later camera w.r.t. the earlier one, scaled by 0.01.
class PoseRegressor {
 public:
  static constexpr double kOutputScale = 0.01;

  explicit PoseRegressor(std::uint64_t seed = 3) {
    std::mt19937_64 rng(seed);
    c1_ = detail::ConvLayer(params_, "pose.conv1", 2, 8, 3, 2, 1, rng);
    c2_ = detail::ConvLayer(params_, "pose.conv2", 8, 16, 3, 2, 1, rng);
    c3_ = detail::ConvLayer(params_, "pose.conv3", 16, 16, 3, 2, 1, rng);
    fc_ = detail::LinearLayer(params_, "pose.fc", 16, 6, rng);
  }

  /// earlier, later: (N, 1, H, W). Returns (N, 6, 1, 1).
  Var forward(Tape& tape, const Var& earlier, const Var& later, bool trainable = true) const {
    Var x = ad::concat_channels(earlier, later);
    Var h = ad::tanh(c1_(tape, x, trainable));
    h = ad::tanh(c2_(tape, h, trainable));
    h = ad::tanh(c3_(tape, h, trainable));
    return ad::mul_scalar(fc_(tape, ad::global_avg_pool(h), trainable), kOutputScale);
  }

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

 private:
  ParameterSet params_;
  detail::ConvLayer c1_, c2_, c3_;
  detail::LinearLayer fc_;
};

/// Spatial mean per channel of sample n of a plain tensor.
inline std::vector<double> pooled_features(const ad::TensorBuffer& f, int n) {
  const Shape s = f.shape;
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  std::vector<double> out(s.c, 0.0);
  for (int c = 0; c < s.c; ++c) {
    double acc = 0;
    for (std::size_t i = 0; i < plane; ++i) acc += f.value[(static_cast<std::size_t>(n) * s.c + c) * plane + i];
    out[c] = acc / static_cast<double>(plane);
  }
  return out;
}

/// Global average pool -> affine(16, tanh) -> affine(1). Small enough for
/// a closed-form input gradient.
class Discriminator {
 public:
  static constexpr int kHidden = 16;

  explicit Discriminator(int channels = 1, std::uint64_t seed = 4) : channels_(channels) {
    std::mt19937_64 rng(seed);
    l1_ = detail::LinearLayer(params_, "critic.fc1", channels, kHidden, rng);
    l2_ = detail::LinearLayer(params_, "critic.fc2", kHidden, 1, rng);
  }

  /// (N, C, H, W) -> (N, 1, 1, 1).
  Var forward(Tape& tape, const Var& features, bool trainable = true) const {
    Var h = ad::tanh(l1_(tape, ad::global_avg_pool(features), trainable));
    return l2_(tape, h, trainable);
  }

  /// Score of pooled features (length C).
  double score(const std::vector<double>& pooled) const {
    double out = l2_.bias->value[0];
    for (int j = 0; j < kHidden; ++j) out += l2_.weight->value[j] * std::tanh(hidden_pre(pooled, j));
    return out;
  }

  /// d score / d pooled (length C).
  std::vector<double> pooled_gradient(const std::vector<double>& pooled) const {
    std::vector<double> g(channels_, 0.0);
    for (int j = 0; j < kHidden; ++j) {
      const double h = std::tanh(hidden_pre(pooled, j));
      const double s = l2_.weight->value[j] * (1 - h * h);
      for (int c = 0; c < channels_; ++c) g[c] += s * l1_.weight->value[j * channels_ + c];
    }
    return g;
  }

  /// Closed-form d score / d F for one sample of `pixels` = H*W pixels per
  /// channel: every pixel of channel c gets pooled_gradient[c] / pixels.
  std::vector<double> input_gradient(const std::vector<double>& pooled, std::size_t pixels) const {
    std::vector<double> g;
    g.reserve(channels_ * pixels);
    for (double gc : pooled_gradient(pooled)) g.insert(g.end(), pixels, gc / static_cast<double>(pixels));
    return g;
  }

  /// ||d score / d F||_2 without materialising the per-pixel gradient.
  double input_gradient_norm(const std::vector<double>& pooled, std::size_t pixels) const {
    double s = 0;
    for (double gc : pooled_gradient(pooled)) s += gc * gc;
    return std::sqrt(s / static_cast<double>(pixels));
  }

  /// Input-gradient norm at sample n of a feature tensor.
  double sample_gradient_norm(const ad::TensorBuffer& features, int n) const {
    return input_gradient_norm(pooled_features(features, n),
                               static_cast<std::size_t>(features.shape.h) * features.shape.w);
  }

  int channels() const { return channels_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

 private:
  double hidden_pre(const std::vector<double>& pooled, int j) const {
    double a = l1_.bias->value[j];
    for (int c = 0; c < channels_; ++c) a += l1_.weight->value[j * channels_ + c] * pooled[c];
    return a;
  }

  int channels_;
  ParameterSet params_;
  detail::LinearLayer l1_, l2_;
};

// ---------------------------------------------------------------------------
// Checkpoints: text header then little-endian float64 values.

inline void write_checkpoint(const std::filesystem::path& path, const std::vector<const ParameterSet*>& sets) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  std::size_t n = 0;
  for (const auto* s : sets) n += s->params().size();
  out << "vrvo-checkpoint 1\n" << n << "\n";
  for (const auto* s : sets)
    for (const auto& p : s->params()) {
      const Shape sh = p.tensor->shape;
      out << p.name << ' ' << sh.n << ' ' << sh.c << ' ' << sh.h << ' ' << sh.w << '\n';
    }
  out << "data\n";
  for (const auto* s : sets)
    for (const auto& p : s->params())
      for (double v : p.tensor->value) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
        out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
      }
  if (!out) throw CheckpointError("write failed for " + path.string());
}

/// Restores parameters by name; every listed set must be fully covered.
inline void read_checkpoint(const std::filesystem::path& path, const std::vector<ParameterSet*>& sets) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string magic, version;
  in >> magic >> version;
  if (magic != "vrvo-checkpoint" || version != "1") throw CheckpointError(path.string() + ": not a checkpoint");
  std::size_t n = 0;
  in >> n;
  struct Entry {
    std::string name;
    Shape shape;
  };
  std::vector<Entry> entries(n);
  for (auto& e : entries) in >> e.name >> e.shape.n >> e.shape.c >> e.shape.h >> e.shape.w;
  std::string tag;
  in >> tag;
  if (!in || tag != "data") throw CheckpointError(path.string() + ": malformed header");
  in.get();
  std::size_t matched = 0;
  for (const auto& e : entries) {
    std::vector<double> vals(e.shape.numel());
    for (double& v : vals) {
      std::uint64_t bits;
      in.read(reinterpret_cast<char*>(&bits), sizeof bits);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      std::memcpy(&v, &bits, sizeof v);
    }
    if (!in) throw CheckpointError(path.string() + ": truncated data for " + e.name);
    for (auto* s : sets)
      for (auto& p : s->params())
        if (p.name == e.name) {
          if (!(p.tensor->shape == e.shape))
            throw CheckpointError(path.string() + ": shape mismatch for " + e.name + " " + e.shape.str() + " vs " +
                                  p.tensor->shape.str());
          p.tensor->value = vals;
          ++matched;
        }
  }
  std::size_t expected = 0;
  for (auto* s : sets) expected += s->params().size();
  if (matched != expected)
    throw CheckpointError(path.string() + ": covers " + std::to_string(matched) + " of " + std::to_string(expected) +
                          " parameters");
}

}  // namespace vrvo::nn
