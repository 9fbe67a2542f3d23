#pragma once

// Minimal reverse-mode differentiation over NCHW double tensors.
//
// A Tape records one backward closure per executed operation. Var is a
// handle to a buffer plus the tape it lives on. Parameters are long-lived
// buffers that enter a tape through Tape::leaf and receive gradients there.
// Operations whose inputs need no gradient record nothing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "vrvo/geometry.hpp"

namespace vrvo::ad {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Shape {
  int n = 1, c = 1, h = 1, w = 1;
  std::size_t numel() const { return static_cast<std::size_t>(n) * c * h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const {
    std::ostringstream ss;
    ss << "(" << n << "," << c << "," << h << "," << w << ")";
    return ss.str();
  }
};

struct TensorBuffer {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  ///< empty unless requires_grad
  bool requires_grad = false;

  TensorBuffer() = default;
  explicit TensorBuffer(Shape s, double fill = 0.0, bool grad_enabled = false)
      : shape(s), value(s.numel(), fill), requires_grad(grad_enabled) {
    if (grad_enabled) grad.assign(s.numel(), 0.0);
  }

  std::size_t numel() const { return value.size(); }
  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape.c + c) * shape.h + y) * shape.w + x;
  }
  double& at(int n, int c, int y, int x) { return value[index(n, c, y, x)]; }
  double at(int n, int c, int y, int x) const { return value[index(n, c, y, x)]; }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
  void enable_grad() {
    requires_grad = true;
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

using TensorPtr = std::shared_ptr<TensorBuffer>;

inline TensorPtr make_tensor(Shape s, double fill = 0.0, bool grad = false) {
  return std::make_shared<TensorBuffer>(s, fill, grad);
}

class Tape;

/// Handle to a tensor recorded on a tape.
class Var {
 public:
  Var() = default;
  Var(TensorPtr b, Tape* t) : buf_(std::move(b)), tape_(t) {}

  const Shape& shape() const { return buf_->shape; }
  std::size_t numel() const { return buf_->numel(); }
  bool requires_grad() const { return buf_->requires_grad; }
  double item() const {
    if (buf_->numel() != 1) throw ShapeError("item(): tensor has " + std::to_string(buf_->numel()) + " elements");
    return buf_->value[0];
  }
  const std::vector<double>& value() const { return buf_->value; }
  const std::vector<double>& grad() const { return buf_->grad; }
  double value(int n, int c, int y, int x) const { return buf_->at(n, c, y, x); }
  TensorBuffer& buffer() const { return *buf_; }
  const TensorPtr& ptr() const { return buf_; }
  Tape* tape() const { return tape_; }
  bool defined() const { return static_cast<bool>(buf_); }

 private:
  TensorPtr buf_;
  Tape* tape_ = nullptr;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Enters an existing buffer (typically a parameter). If `trainable`, the
  /// buffer's grad receives contributions on backward.
  Var leaf(const TensorPtr& buf, bool trainable = true) {
    if (trainable) {
      buf->enable_grad();
      return Var(buf, this);
    }
    if (!buf->requires_grad) return Var(buf, this);
    // Same values, no gradient path.
    auto copy = std::make_shared<TensorBuffer>(buf->shape);
    copy->value = buf->value;
    return Var(copy, this);
  }

  Var constant(TensorBuffer buf) {
    buf.requires_grad = false;
    buf.grad.clear();
    return Var(std::make_shared<TensorBuffer>(std::move(buf)), this);
  }
  Var constant(Shape s, double fill) { return Var(make_tensor(s, fill), this); }
  Var scalar(double v) { return constant(Shape{}, v); }

  /// Fresh intermediate buffer; gradients enabled when `grad`.
  Var make(Shape s, bool grad) { return Var(make_tensor(s, 0.0, grad), this); }

  void record(std::function<void()> backward) {
    if (ran_) throw TapeError("record(): tape already ran backward; reset() first");
    nodes_.push_back(std::move(backward));
  }

  /// Seeds d(out)/d(out) = 1 and runs every recorded closure once, newest first.
  void backward(const Var& out) {
    if (ran_) throw TapeError("backward(): tape already replayed; reset() before reuse");
    if (out.numel() != 1) throw ShapeError("backward(): output must be a scalar, got " + out.shape().str());
    ran_ = true;
    if (!out.requires_grad()) return;
    out.buffer().grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void reset() {
    nodes_.clear();
    ran_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  bool ran() const { return ran_; }

  /// When enabled, non-smooth operations fold their discrete choices
  /// (signs, min branch, sampling cell, validity) into a running hash, so
  /// two evaluations with equal signatures lie on the same smooth piece.
  void track_branches(bool on) { tracking_ = on; }
  bool tracking() const { return tracking_; }
  void note_branch(std::uint64_t v) {
    signature_ ^= v + 0x9e3779b97f4a7c15ULL + (signature_ << 6) + (signature_ >> 2);
  }
  std::uint64_t branch_signature() const { return signature_; }

 private:
  std::vector<std::function<void()>> nodes_;
  bool ran_ = false;
  bool tracking_ = false;
  std::uint64_t signature_ = 0;
};

namespace detail {

inline Tape* tape_of(const Var& a) {
  if (!a.defined() || !a.tape()) throw TapeError("operation on an unbound Var");
  return a.tape();
}

inline Tape* tape_of(const Var& a, const Var& b) {
  Tape* t = tape_of(a);
  if (tape_of(b) != t) throw TapeError("operands live on different tapes");
  return t;
}

enum class Broadcast { Equal, LeftScalar, RightScalar };

inline Broadcast broadcast_kind(const Var& a, const Var& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::Equal;
  if (a.numel() == 1) return Broadcast::LeftScalar;
  if (b.numel() == 1) return Broadcast::RightScalar;
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape().str() + " and " + b.shape().str());
}

/// Elementwise binary op with derivative callbacks da(a, b), db(a, b).
template <typename F, typename DA, typename DB>
Var binary(const Var& a, const Var& b, const char* name, F f, DA da, DB db) {
  Tape* tape = tape_of(a, b);
  const Broadcast kind = broadcast_kind(a, b, name);
  const Shape out_shape = kind == Broadcast::LeftScalar ? b.shape() : a.shape();
  const bool grad = a.requires_grad() || b.requires_grad();
  Var out = tape->make(out_shape, grad);
  const std::size_t n = out.numel();
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& ov = out.buffer().value;
  auto ia = [kind](std::size_t i) { return kind == Broadcast::LeftScalar ? 0 : i; };
  auto ib = [kind](std::size_t i) { return kind == Broadcast::RightScalar ? 0 : i; };
  for (std::size_t i = 0; i < n; ++i) ov[i] = f(av[ia(i)], bv[ib(i)]);
  if (grad) {
    tape->record([a, b, out, kind, da, db, n] {
      const auto& g = out.buffer().grad;
      const auto& av = a.value();
      const auto& bv = b.value();
      auto ia = [kind](std::size_t i) { return kind == Broadcast::LeftScalar ? 0 : i; };
      auto ib = [kind](std::size_t i) { return kind == Broadcast::RightScalar ? 0 : i; };
      if (a.requires_grad()) {
        auto& ga = a.buffer().grad;
        for (std::size_t i = 0; i < n; ++i) ga[ia(i)] += g[i] * da(av[ia(i)], bv[ib(i)]);
      }
      if (b.requires_grad()) {
        auto& gb = b.buffer().grad;
        for (std::size_t i = 0; i < n; ++i) gb[ib(i)] += g[i] * db(av[ia(i)], bv[ib(i)]);
      }
    });
  }
  return out;
}

/// Elementwise unary op; d(x, y) is the derivative given input x and output y.
template <typename F, typename D>
Var unary(const Var& a, F f, D d) {
  Tape* tape = tape_of(a);
  Var out = tape->make(a.shape(), a.requires_grad());
  const std::size_t n = out.numel();
  const auto& av = a.value();
  auto& ov = out.buffer().value;
  for (std::size_t i = 0; i < n; ++i) ov[i] = f(av[i]);
  if (a.requires_grad()) {
    tape->record([a, out, d, n] {
      const auto& g = out.buffer().grad;
      const auto& av = a.value();
      const auto& ov = out.value();
      auto& ga = a.buffer().grad;
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * d(av[i], ov[i]);
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise suite

inline Var add(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var div(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }

inline Var add_scalar(const Var& a, double c) {
  return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}
inline Var mul_scalar(const Var& a, double c) {
  return detail::unary(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}
inline Var operator*(double c, const Var& a) { return mul_scalar(a, c); }
inline Var operator*(const Var& a, double c) { return mul_scalar(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }
inline Var operator-(double c, const Var& a) { return add_scalar(mul_scalar(a, -1.0), c); }

inline Var square(const Var& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

namespace detail {

inline void note_signs(const Var& a) {
  Tape* t = a.tape();
  if (!t->tracking()) return;
  for (double v : a.value()) t->note_branch(v > 0 ? 1 : (v < 0 ? 2 : 3));
}

}  // namespace detail

/// |x|; subgradient 0 at x = 0.
inline Var abs(const Var& a) {
  detail::note_signs(a);
  return detail::unary(
      a, [](double x) { return std::abs(x); }, [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

inline Var exp(const Var& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var tanh(const Var& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

/// max(x, 0); subgradient 0 at x = 0.
inline Var relu(const Var& a) {
  detail::note_signs(a);
  return detail::unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

/// Pixelwise minimum of two equal-shape maps; ties route the gradient to `a`.
inline Var min2(const Var& a, const Var& b) {
  Tape* tape = detail::tape_of(a, b);
  if (!(a.shape() == b.shape()))
    throw ShapeError("min2: shapes differ " + a.shape().str() + " vs " + b.shape().str());
  const bool grad = a.requires_grad() || b.requires_grad();
  Var out = tape->make(a.shape(), grad);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.buffer().value[i] = b.value()[i] < a.value()[i] ? b.value()[i] : a.value()[i];
  if (tape->tracking())
    for (std::size_t i = 0; i < n; ++i) tape->note_branch(b.value()[i] < a.value()[i] ? 5 : 7);
  if (grad) {
    tape->record([a, b, out, n] {
      const auto& g = out.buffer().grad;
      for (std::size_t i = 0; i < n; ++i) {
        const bool pick_b = b.value()[i] < a.value()[i];
        if (pick_b) {
          if (b.requires_grad()) b.buffer().grad[i] += g[i];
        } else if (a.requires_grad()) {
          a.buffer().grad[i] += g[i];
        }
      }
    });
  }
  return out;
}

inline Var sum(const Var& a) {
  Tape* tape = detail::tape_of(a);
  Var out = tape->make(Shape{}, a.requires_grad());
  double s = 0;
  for (double v : a.value()) s += v;
  out.buffer().value[0] = s;
  if (a.requires_grad()) {
    tape->record([a, out] {
      const double g = out.buffer().grad[0];
      for (double& ga : a.buffer().grad) ga += g;
    });
  }
  return out;
}

inline Var mean(const Var& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Detached copy (no gradient path).
inline Var detach(const Var& a) {
  TensorBuffer b(a.shape());
  b.value = a.value();
  return detail::tape_of(a)->constant(std::move(b));
}

// ---------------------------------------------------------------------------
// Structural ops

/// Spatial window [x0, x0 + w) x [y0, y0 + h) of every channel.
inline Var crop(const Var& a, int x0, int y0, int w, int h) {
  const Shape s = a.shape();
  if (x0 < 0 || y0 < 0 || w <= 0 || h <= 0 || x0 + w > s.w || y0 + h > s.h)
    throw ShapeError("crop: window out of range for " + s.str());
  Tape* tape = detail::tape_of(a);
  Var out = tape->make(Shape{s.n, s.c, h, w}, a.requires_grad());
  auto& ob = out.buffer();
  const auto& ab = a.buffer();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) ob.at(n, c, y, x) = ab.at(n, c, y + y0, x + x0);
  if (a.requires_grad()) {
    tape->record([a, out, x0, y0, w, h] {
      auto& ab = a.buffer();
      const auto& ob = out.buffer();
      const Shape s = ab.shape;
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) ab.grad[ab.index(n, c, y + y0, x + x0)] += ob.grad[ob.index(n, c, y, x)];
    });
  }
  return out;
}

inline Var concat_channels(const Var& a, const Var& b) {
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
    throw ShapeError("concat_channels: " + sa.str() + " vs " + sb.str());
  Tape* tape = detail::tape_of(a, b);
  const bool grad = a.requires_grad() || b.requires_grad();
  Var out = tape->make(Shape{sa.n, sa.c + sb.c, sa.h, sa.w}, grad);
  const std::size_t plane = static_cast<std::size_t>(sa.h) * sa.w;
  auto& ov = out.buffer().value;
  for (int n = 0; n < sa.n; ++n) {
    std::copy_n(a.value().begin() + n * sa.c * plane, sa.c * plane, ov.begin() + n * (sa.c + sb.c) * plane);
    std::copy_n(b.value().begin() + n * sb.c * plane, sb.c * plane,
                ov.begin() + (n * (sa.c + sb.c) + sa.c) * plane);
  }
  if (grad) {
    tape->record([a, b, out, plane] {
      const Shape sa = a.shape(), sb = b.shape();
      const auto& g = out.buffer().grad;
      for (int n = 0; n < sa.n; ++n) {
        const std::size_t base = n * (sa.c + sb.c) * plane;
        if (a.requires_grad())
          for (std::size_t i = 0; i < sa.c * plane; ++i) a.buffer().grad[n * sa.c * plane + i] += g[base + i];
        if (b.requires_grad())
          for (std::size_t i = 0; i < sb.c * plane; ++i)
            b.buffer().grad[n * sb.c * plane + i] += g[base + sa.c * plane + i];
      }
    });
  }
  return out;
}

/// Samples [first, first + count) of the batch.
inline Var batch_slice(const Var& a, int first, int count) {
  const Shape s = a.shape();
  if (first < 0 || count <= 0 || first + count > s.n) throw ShapeError("batch_slice: out of range for " + s.str());
  Tape* tape = detail::tape_of(a);
  Var out = tape->make(Shape{count, s.c, s.h, s.w}, a.requires_grad());
  const std::size_t per = static_cast<std::size_t>(s.c) * s.h * s.w;
  std::copy_n(a.value().begin() + first * per, count * per, out.buffer().value.begin());
  if (a.requires_grad()) {
    tape->record([a, out, first, count, per] {
      for (std::size_t i = 0; i < count * per; ++i) a.buffer().grad[first * per + i] += out.grad()[i];
    });
  }
  return out;
}

/// Concatenates along the batch axis.
inline Var batch_concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("batch_concat: no inputs");
  Shape s = parts[0].shape();
  int total = 0;
  bool grad = false;
  Tape* tape = detail::tape_of(parts[0]);
  for (const Var& p : parts) {
    if (p.shape().c != s.c || p.shape().h != s.h || p.shape().w != s.w)
      throw ShapeError("batch_concat: " + p.shape().str() + " vs " + s.str());
    detail::tape_of(p, parts[0]);
    total += p.shape().n;
    grad = grad || p.requires_grad();
  }
  Var out = tape->make(Shape{total, s.c, s.h, s.w}, grad);
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().begin(), p.value().end(), out.buffer().value.begin() + off);
    off += p.numel();
  }
  if (grad) {
    tape->record([parts, out] {
      std::size_t off = 0;
      for (const Var& p : parts) {
        if (p.requires_grad())
          for (std::size_t i = 0; i < p.numel(); ++i) p.buffer().grad[i] += out.grad()[off + i];
        off += p.numel();
      }
    });
  }
  return out;
}

/// (N, C, H, W) -> (N, C, 1, 1) spatial mean.
inline Var global_avg_pool(const Var& a) {
  const Shape s = a.shape();
  Tape* tape = detail::tape_of(a);
  Var out = tape->make(Shape{s.n, s.c, 1, 1}, a.requires_grad());
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  for (int i = 0; i < s.n * s.c; ++i) {
    double acc = 0;
    for (std::size_t k = 0; k < plane; ++k) acc += a.value()[i * plane + k];
    out.buffer().value[i] = acc / static_cast<double>(plane);
  }
  if (a.requires_grad()) {
    tape->record([a, out, plane] {
      const Shape s = a.shape();
      for (int i = 0; i < s.n * s.c; ++i) {
        const double g = out.grad()[i] / static_cast<double>(plane);
        for (std::size_t k = 0; k < plane; ++k) a.buffer().grad[i * plane + k] += g;
      }
    });
  }
  return out;
}

/// Affine map of each flattened sample: x (N, F) -> (N, O, 1, 1) with
/// weight shape (1, 1, O, F) and bias shape (1, O, 1, 1).
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Shape sx = x.shape(), sw = weight.shape();
  const int features = sx.c * sx.h * sx.w;
  const int outputs = sw.h;
  if (sw.w != features || sw.n != 1 || sw.c != 1 || bias.numel() != static_cast<std::size_t>(outputs))
    throw ShapeError("linear: input " + sx.str() + " weight " + sw.str() + " bias " + bias.shape().str());
  Tape* tape = detail::tape_of(x, weight);
  detail::tape_of(x, bias);
  const bool grad = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
  Var out = tape->make(Shape{sx.n, outputs, 1, 1}, grad);
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> X(x.value().data(), sx.n, features);
  Eigen::Map<const RowMat> W(weight.value().data(), outputs, features);
  Eigen::Map<const Eigen::RowVectorXd> B(bias.value().data(), outputs);
  Eigen::Map<RowMat> Y(out.buffer().value.data(), sx.n, outputs);
  Y.noalias() = X * W.transpose();
  Y.rowwise() += B;
  if (grad) {
    tape->record([x, weight, bias, out, features, outputs] {
      const int n = x.shape().n;
      Eigen::Map<const RowMat> G(out.grad().data(), n, outputs);
      if (x.requires_grad()) {
        Eigen::Map<RowMat> GX(x.buffer().grad.data(), n, features);
        Eigen::Map<const RowMat> W(weight.value().data(), outputs, features);
        GX.noalias() += G * W;
      }
      if (weight.requires_grad()) {
        Eigen::Map<RowMat> GW(weight.buffer().grad.data(), outputs, features);
        Eigen::Map<const RowMat> X(x.value().data(), n, features);
        GW.noalias() += G.transpose() * X;
      }
      if (bias.requires_grad()) {
        Eigen::Map<Eigen::RowVectorXd> GB(bias.buffer().grad.data(), outputs);
        GB += G.colwise().sum();
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dSpec {
  int stride = 1;
  int padding = 0;
};

namespace detail {

using ColMat = Eigen::MatrixXd;

/// im2col of one sample: rows (c, ky, kx), columns output pixels.
inline void im2col(const double* in, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, ColMat& col) {
  col.resize(static_cast<Eigen::Index>(C) * k * k, static_cast<Eigen::Index>(Ho) * Wo);
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(c) * k + ky) * k + kx;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            col(row, static_cast<Eigen::Index>(oy) * Wo + ox) =
                (iy >= 0 && iy < H && ix >= 0 && ix < W) ? in[(static_cast<std::size_t>(c) * H + iy) * W + ix] : 0.0;
          }
        }
      }
}

inline void col2im_add(const ColMat& col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, double* out) {
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(c) * k + ky) * k + kx;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            out[(static_cast<std::size_t>(c) * H + iy) * W + ix] += col(row, static_cast<Eigen::Index>(oy) * Wo + ox);
          }
        }
      }
}

}  // namespace detail

/// Cross-correlation. kernel: (Cout, Cin, k, k); bias: (1, Cout, 1, 1) or
/// an undefined Var.
inline Var conv2d(const Var& input, const Var& kernel, const Var& bias, Conv2dSpec spec = {}) {
  const Shape si = input.shape(), sk = kernel.shape();
  if (sk.h != sk.w) throw ShapeError("conv2d: kernel must be square, got " + sk.str());
  if (si.c != sk.c)
    throw ShapeError("conv2d: input channels " + std::to_string(si.c) + " != kernel input channels " +
                     std::to_string(sk.c) + " (input " + si.str() + ", kernel " + sk.str() + ")");
  if (spec.stride < 1 || spec.padding < 0) throw ShapeError("conv2d: stride >= 1 and padding >= 0 required");
  const int k = sk.h, cout = sk.n;
  const int ho = (si.h + 2 * spec.padding - k) / spec.stride + 1;
  const int wo = (si.w + 2 * spec.padding - k) / spec.stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: kernel larger than padded input " + si.str());
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != static_cast<std::size_t>(cout))
    throw ShapeError("conv2d: bias has " + std::to_string(bias.numel()) + " entries, expected " + std::to_string(cout));
  Tape* tape = detail::tape_of(input, kernel);
  const bool grad = input.requires_grad() || kernel.requires_grad() || (has_bias && bias.requires_grad());
  Var out = tape->make(Shape{si.n, cout, ho, wo}, grad);

  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const int kk = si.c * k * k;
  Eigen::Map<const RowMat> Wm(kernel.value().data(), cout, kk);
  auto cols = std::make_shared<std::vector<detail::ColMat>>(si.n);
  const std::size_t in_per = static_cast<std::size_t>(si.c) * si.h * si.w;
  const std::size_t out_per = static_cast<std::size_t>(cout) * ho * wo;
  for (int n = 0; n < si.n; ++n) {
    auto& col = (*cols)[n];
    detail::im2col(input.value().data() + n * in_per, si.c, si.h, si.w, k, spec.stride, spec.padding, ho, wo, col);
    Eigen::Map<RowMat> Y(out.buffer().value.data() + n * out_per, cout, static_cast<Eigen::Index>(ho) * wo);
    Y.noalias() = Wm * col;
    if (has_bias)
      for (int c = 0; c < cout; ++c) Y.row(c).array() += bias.value()[c];
  }
  if (grad) {
    tape->record([input, kernel, bias, out, cols, spec, k, cout, ho, wo, kk, in_per, out_per, has_bias] {
      const Shape si = input.shape();
      Eigen::Map<const RowMat> Wm(kernel.value().data(), cout, kk);
      detail::ColMat dcol;
      for (int n = 0; n < si.n; ++n) {
        Eigen::Map<const RowMat> G(out.grad().data() + n * out_per, cout, static_cast<Eigen::Index>(ho) * wo);
        if (kernel.requires_grad()) {
          Eigen::Map<RowMat> GW(kernel.buffer().grad.data(), cout, kk);
          GW.noalias() += G * (*cols)[n].transpose();
        }
        if (has_bias && bias.requires_grad())
          for (int c = 0; c < cout; ++c) bias.buffer().grad[c] += G.row(c).sum();
        if (input.requires_grad()) {
          dcol.noalias() = Wm.transpose() * G;
          detail::col2im_add(dcol, si.c, si.h, si.w, k, spec.stride, spec.padding, ho, wo,
                             input.buffer().grad.data() + n * in_per);
        }
      }
    });
  }
  return out;
}

/// 3x3 box mean with reflection padding (stride 1, same size).
inline Var box3(const Var& a) {
  const Shape s = a.shape();
  if (s.h < 2 || s.w < 2) throw ShapeError("box3: needs at least 2x2 maps, got " + s.str());
  Tape* tape = detail::tape_of(a);
  Var out = tape->make(s, a.requires_grad());
  auto reflect = [](int i, int n) { return i < 0 ? -i : (i >= n ? 2 * n - 2 - i : i); };
  const auto& ab = a.buffer();
  auto& ob = out.buffer();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          double acc = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) acc += ab.at(n, c, reflect(y + dy, s.h), reflect(x + dx, s.w));
          ob.at(n, c, y, x) = acc / 9.0;
        }
  if (a.requires_grad()) {
    tape->record([a, out, reflect] {
      auto& ab = a.buffer();
      const auto& ob = out.buffer();
      const Shape s = ab.shape;
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
          for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
              const double g = ob.grad[ob.index(n, c, y, x)] / 9.0;
              for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                  ab.grad[ab.index(n, c, reflect(y + dy, s.h), reflect(x + dx, s.w))] += g;
            }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling

/// Bilinear sampling. coords: (N, 2, Ho, Wo) absolute pixel positions
/// (channel 0 = x, 1 = y) into input (N, C, H, W). Positions outside
/// [0, W-1] x [0, H-1] yield 0 with zero gradient.
inline Var sample_grid(const Var& input, const Var& coords) {
  const Shape si = input.shape(), sc = coords.shape();
  if (sc.c != 2 || sc.n != si.n)
    throw ShapeError("sample_grid: coords must be (N,2,H,W) with N=" + std::to_string(si.n) + ", got " + sc.str());
  Tape* tape = detail::tape_of(input, coords);
  const bool grad = input.requires_grad() || coords.requires_grad();
  Var out = tape->make(Shape{si.n, si.c, sc.h, sc.w}, grad);
  const auto& ib = input.buffer();
  const auto& cb = coords.buffer();
  auto& ob = out.buffer();
  for (int n = 0; n < si.n; ++n)
    for (int y = 0; y < sc.h; ++y)
      for (int x = 0; x < sc.w; ++x) {
        const auto tap = bilinear_tap(cb.at(n, 0, y, x), cb.at(n, 1, y, x), si.w, si.h);
        if (tape->tracking()) {
          const double fx = std::floor(cb.at(n, 0, y, x)), fy = std::floor(cb.at(n, 1, y, x));
          tape->note_branch(tap ? static_cast<std::uint64_t>(fx * 7919 + fy + 1e6) : 11);
        }
        if (!tap) continue;
        const int x1 = std::min(tap->x0 + 1, si.w - 1), y1 = std::min(tap->y0 + 1, si.h - 1);
        for (int c = 0; c < si.c; ++c) {
          const double top = (1 - tap->ax) * ib.at(n, c, tap->y0, tap->x0) + tap->ax * ib.at(n, c, tap->y0, x1);
          const double bot = (1 - tap->ax) * ib.at(n, c, y1, tap->x0) + tap->ax * ib.at(n, c, y1, x1);
          ob.at(n, c, y, x) = (1 - tap->ay) * top + tap->ay * bot;
        }
      }
  if (grad) {
    tape->record([input, coords, out] {
      auto& ib = input.buffer();
      auto& cb = coords.buffer();
      const auto& ob = out.buffer();
      const Shape si = ib.shape, sc = cb.shape;
      for (int n = 0; n < si.n; ++n)
        for (int y = 0; y < sc.h; ++y)
          for (int x = 0; x < sc.w; ++x) {
            const auto tap = bilinear_tap(cb.at(n, 0, y, x), cb.at(n, 1, y, x), si.w, si.h);
            if (!tap) continue;
            const int x1 = std::min(tap->x0 + 1, si.w - 1), y1 = std::min(tap->y0 + 1, si.h - 1);
            const double ax = tap->ax, ay = tap->ay;
            double gx = 0, gy = 0;
            for (int c = 0; c < si.c; ++c) {
              const double g = ob.grad[ob.index(n, c, y, x)];
              if (g == 0.0) continue;
              const double v00 = ib.at(n, c, tap->y0, tap->x0), v10 = ib.at(n, c, tap->y0, x1);
              const double v01 = ib.at(n, c, y1, tap->x0), v11 = ib.at(n, c, y1, x1);
              if (input.requires_grad()) {
                ib.grad[ib.index(n, c, tap->y0, tap->x0)] += g * (1 - ax) * (1 - ay);
                ib.grad[ib.index(n, c, tap->y0, x1)] += g * ax * (1 - ay);
                ib.grad[ib.index(n, c, y1, tap->x0)] += g * (1 - ax) * ay;
                ib.grad[ib.index(n, c, y1, x1)] += g * ax * ay;
              }
              gx += g * ((1 - ay) * (v10 - v00) + ay * (v11 - v01));
              gy += g * (((1 - ax) * v01 + ax * v11) - ((1 - ax) * v00 + ax * v10));
            }
            if (coords.requires_grad()) {
              cb.grad[cb.index(n, 0, y, x)] += gx;
              cb.grad[cb.index(n, 1, y, x)] += gy;
            }
          }
    });
  }
  return out;
}

/// 1 where sample_grid would produce a valid sample, else 0 (no gradient).
inline Var sample_mask(const Var& coords, int width, int height) {
  const Shape sc = coords.shape();
  Tape* tape = detail::tape_of(coords);
  Var out = tape->make(Shape{sc.n, 1, sc.h, sc.w}, false);
  for (int n = 0; n < sc.n; ++n)
    for (int y = 0; y < sc.h; ++y)
      for (int x = 0; x < sc.w; ++x)
        out.buffer().at(n, 0, y, x) =
            bilinear_tap(coords.value(n, 0, y, x), coords.value(n, 1, y, x), width, height) ? 1.0 : 0.0;
  if (tape->tracking())
    for (double v : out.value()) tape->note_branch(v > 0 ? 13 : 17);
  return out;
}

/// Pixel grid shifted horizontally by `sign * disparity`: (x + sign d, y).
inline Var shift_coords_x(const Var& disparity, double sign) {
  const Shape s = disparity.shape();
  if (s.c != 1) throw ShapeError("shift_coords_x: disparity must have one channel, got " + s.str());
  Tape* tape = detail::tape_of(disparity);
  Var out = tape->make(Shape{s.n, 2, s.h, s.w}, disparity.requires_grad());
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        out.buffer().at(n, 0, y, x) = x + sign * disparity.value(n, 0, y, x);
        out.buffer().at(n, 1, y, x) = y;
      }
  if (disparity.requires_grad()) {
    tape->record([disparity, out, sign] {
      const Shape s = disparity.shape();
      for (int n = 0; n < s.n; ++n)
        for (int y = 0; y < s.h; ++y)
          for (int x = 0; x < s.w; ++x)
            disparity.buffer().grad[disparity.buffer().index(n, 0, y, x)] +=
                sign * out.buffer().grad[out.buffer().index(n, 0, y, x)];
    });
  }
  return out;
}

/// Rotation-vector + translation pose: [exp(omega), t].
inline Pose pose_from_vector(const double* v) {
  return {so3_exp(Vec3(v[0], v[1], v[2])), Vec3(v[3], v[4], v[5])};
}

/// Inverse of pose_from_vector.
inline Vec6 pose_to_vector(const Pose& p) {
  Vec6 v;
  v.head<3>() = so3_log(p.rotation);
  v.tail<3>() = p.translation;
  return v;
}

/// Right Jacobian of SO(3): d exp(w + dw) = exp(w) exp(J_r dw).
inline Mat3 so3_right_jacobian(const Vec3& w) { return so3_left_jacobian(-w); }

/// Reprojection of every pixel through depth z = focal_baseline / d and the
/// relative pose [exp(omega), t] given as a (N, 6, 1, 1) vector. Returns
/// target coordinates (N, 2, H, W); points landing behind the camera get
/// coordinates far outside the image.
inline Var reproject_coords(const Var& disparity, const Var& pose6, const Intrinsics& k, double focal_baseline) {
  const Shape sd = disparity.shape();
  if (sd.c != 1) throw ShapeError("reproject_coords: disparity must be (N,1,H,W), got " + sd.str());
  if (pose6.numel() != static_cast<std::size_t>(6 * sd.n))
    throw ShapeError("reproject_coords: pose must be (N,6,1,1), got " + pose6.shape().str());
  Tape* tape = detail::tape_of(disparity, pose6);
  const bool grad = disparity.requires_grad() || pose6.requires_grad();
  Var out = tape->make(Shape{sd.n, 2, sd.h, sd.w}, grad);
  constexpr double kOutside = -1e6;
  for (int n = 0; n < sd.n; ++n) {
    const Pose T = pose_from_vector(pose6.value().data() + 6 * n);
    for (int y = 0; y < sd.h; ++y)
      for (int x = 0; x < sd.w; ++x) {
        const double d = disparity.value(n, 0, y, x);
        double u = kOutside, v = kOutside;
        if (d > kEpsilonDisparity) {
          const double z = focal_baseline / d;
          const Vec3 X = T * Vec3((x - k.cx) / k.fx * z, (y - k.cy) / k.fy * z, z);
          if (X.z() > kEpsilonDepth) {
            u = k.fx * X.x() / X.z() + k.cx;
            v = k.fy * X.y() / X.z() + k.cy;
          }
        }
        out.buffer().at(n, 0, y, x) = u;
        out.buffer().at(n, 1, y, x) = v;
        if (tape->tracking()) tape->note_branch(u == kOutside ? 19 : 23);
      }
  }
  if (grad) {
    tape->record([disparity, pose6, out, k, focal_baseline] {
      const Shape sd = disparity.shape();
      for (int n = 0; n < sd.n; ++n) {
        const double* pv = pose6.value().data() + 6 * n;
        const Vec3 omega(pv[0], pv[1], pv[2]);
        const Pose T = pose_from_vector(pv);
        const Mat3 jr = so3_right_jacobian(omega);
        Vec6 gpose = Vec6::Zero();
        for (int y = 0; y < sd.h; ++y)
          for (int x = 0; x < sd.w; ++x) {
            const double d = disparity.value(n, 0, y, x);
            if (!(d > kEpsilonDisparity)) continue;
            const double z = focal_baseline / d;
            const Vec3 ray((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
            const Vec3 Xs = ray * z;
            const Vec3 X = T * Xs;
            if (!(X.z() > kEpsilonDepth)) continue;
            const double gu = out.buffer().grad[out.buffer().index(n, 0, y, x)];
            const double gv = out.buffer().grad[out.buffer().index(n, 1, y, x)];
            if (gu == 0.0 && gv == 0.0) continue;
            const double iz = 1.0 / X.z();
            // dL/dX through the pinhole projection.
            const Vec3 gX(gu * k.fx * iz, gv * k.fy * iz, -(gu * k.fx * X.x() + gv * k.fy * X.y()) * iz * iz);
            if (disparity.requires_grad()) {
              const double dz_dd = -focal_baseline / (d * d);
              disparity.buffer().grad[disparity.buffer().index(n, 0, y, x)] += gX.dot(T.rotation * ray) * dz_dd;
            }
            if (pose6.requires_grad()) {
              // d(R a)/d omega = -R [a]x J_r(omega)
              const Vec3 g_omega = (-(T.rotation * hat(Xs) * jr)).transpose() * gX;
              gpose.head<3>() += g_omega;
              gpose.tail<3>() += gX;
            }
          }
        if (pose6.requires_grad())
          for (int i = 0; i < 6; ++i) pose6.buffer().grad[6 * n + i] += gpose[i];
      }
    });
  }
  return out;
}

/// Inverse of a batch of pose vectors: [exp(-w), -exp(-w) t].
inline Var invert_pose(const Var& pose6) {
  const Shape s = pose6.shape();
  if (s.numel() != static_cast<std::size_t>(6 * s.n) || s.c != 6)
    throw ShapeError("invert_pose: expected (N,6,1,1), got " + s.str());
  Tape* tape = detail::tape_of(pose6);
  Var out = tape->make(s, pose6.requires_grad());
  for (int n = 0; n < s.n; ++n) {
    const double* v = pose6.value().data() + 6 * n;
    const Pose inv = pose_from_vector(v).inverse();
    double* o = out.buffer().value.data() + 6 * n;
    for (int i = 0; i < 3; ++i) {
      o[i] = -v[i];
      o[3 + i] = inv.translation[i];
    }
  }
  if (pose6.requires_grad()) {
    tape->record([pose6, out] {
      for (int n = 0; n < pose6.shape().n; ++n) {
        const double* v = pose6.value().data() + 6 * n;
        const Vec3 u(-v[0], -v[1], -v[2]);
        const Vec3 t(v[3], v[4], v[5]);
        const Mat3 r = so3_exp(u);
        const double* g = out.grad().data() + 6 * n;
        const Vec3 gw(g[0], g[1], g[2]), gt(g[3], g[4], g[5]);
        // t' = -R(u) t with u = -w:  dt'/dt = -R(u),  dt'/dw = -R(u) [t]x J_r(u).
        const Mat3 dtw = -(r * hat(t) * so3_right_jacobian(u));
        const Vec3 grad_w = -gw + dtw.transpose() * gt;
        const Vec3 grad_t = -(r.transpose() * gt);
        double* gi = pose6.buffer().grad.data() + 6 * n;
        for (int i = 0; i < 3; ++i) {
          gi[i] += grad_w[i];
          gi[3 + i] += grad_t[i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckFailure {
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::size_t checked = 0;
  /// Coordinates whose +-step evaluations fall on a different smooth piece.
  std::size_t kink_excluded = 0;
  std::vector<GradCheckFailure> failures;
  bool passed() const { return failures.empty(); }
  double excluded_fraction() const {
    const std::size_t total = checked + kink_excluded;
    return total ? static_cast<double>(kink_excluded) / total : 0.0;
  }
};

using ScalarFunction = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Central differences against reverse-mode gradients for every coordinate
/// of every input. Relative error is |a - n| / max(|a|, |n|, floor) with the
/// floor at 1e-3 of the largest numeric gradient magnitude (and >= 1e-10),
/// so entries that are pure FD noise do not dominate.
///
/// A coordinate is excluded as a kink neighbourhood when the branch
/// signature recorded by the tape at x + step or x - step differs from the
/// one at x: there the central difference straddles a non-smooth point and
/// says nothing about the derivative. `skip(input, index)` excludes further
/// coordinates explicitly.
inline GradCheckReport grad_check(const ScalarFunction& f, const std::vector<TensorPtr>& inputs, double step = 1e-4,
                                  double tolerance = 1e-4,
                                  const std::function<bool(std::size_t, std::size_t)>& skip = {}) {
  for (const auto& in : inputs) {
    in->enable_grad();
    in->zero_grad();
  }
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& in : inputs) vars.push_back(tape.leaf(in));
    tape.backward(f(tape, vars));
  }
  auto eval = [&] {
    Tape tape;
    tape.track_branches(true);
    std::vector<Var> vars;
    for (const auto& in : inputs) vars.push_back(tape.leaf(in, false));
    const double value = f(tape, vars).item();
    return std::pair{value, tape.branch_signature()};
  };
  const std::uint64_t base = eval().second;
  std::vector<std::vector<double>> numeric(inputs.size());
  std::vector<std::vector<char>> usable(inputs.size());
  double scale = 0;
  GradCheckReport report;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& v = inputs[i]->value;
    numeric[i].assign(v.size(), 0.0);
    usable[i].assign(v.size(), 0);
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (skip && skip(i, j)) continue;
      const double orig = v[j];
      v[j] = orig + step;
      const auto [fp, sp] = eval();
      v[j] = orig - step;
      const auto [fm, sm] = eval();
      v[j] = orig;
      if (sp != base || sm != base) {
        ++report.kink_excluded;
        continue;
      }
      usable[i][j] = 1;
      numeric[i][j] = (fp - fm) / (2 * step);
      scale = std::max(scale, std::abs(numeric[i][j]));
    }
  }
  const double floor = std::max(1e-10, 1e-3 * scale);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i]->value.size(); ++j) {
      if (!usable[i][j]) continue;
      const double a = inputs[i]->grad[j], n = numeric[i][j];
      const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
      ++report.checked;
      report.max_rel_error = std::max(report.max_rel_error, rel);
      if (!(rel <= tolerance)) report.failures.push_back({i, j, a, n, rel});
    }
  }
  return report;
}

/// Uniform random tensor in [lo, hi).
inline TensorPtr random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  auto t = make_tensor(s);
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t->value) v = u(rng);
  return t;
}

}  // namespace vrvo::ad
