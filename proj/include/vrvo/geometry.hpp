#pragma once

// SE(3) algebra, pinhole projection, disparity/depth conversion and
// bilinear image sampling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace vrvo {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;

constexpr double kEpsilonDepth = 1e-6;
constexpr double kEpsilonDisparity = 1e-6;
constexpr double kSmallAngle = 1e-8;

/// Raised when an input violates an operation's precondition.
class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major 2-D grid.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int width, int height, T fill = T{})
      : width_(width), height_(height),
        data_(static_cast<std::size_t>(std::max(width, 0)) * static_cast<std::size_t>(std::max(height, 0)), fill) {
    if (width < 0 || height < 0) throw GeometryError("Grid: negative dimensions");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int x, int y) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  const T& operator()(int x, int y) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool operator==(const Grid&) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

/// Grayscale image; intensities are nominally in [0, 1].
using Image = Grid<double>;
using Mask = Grid<std::uint8_t>;

/// Positive per-pixel map (depth in scene units or disparity in pixels)
/// with a validity mask.
struct ScalarMap {
  Image values;
  Mask valid;

  ScalarMap() = default;
  ScalarMap(int w, int h, double fill = 0.0, bool valid_fill = false)
      : values(w, h, fill), valid(w, h, valid_fill ? 1 : 0) {}

  int width() const { return values.width(); }
  int height() const { return values.height(); }
  bool is_valid(int x, int y) const { return valid(x, y) != 0; }
  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count_if(valid.data().begin(), valid.data().end(),
                                                  [](std::uint8_t v) { return v != 0; }));
  }
  bool operator==(const ScalarMap&) const = default;
};

using DepthMap = ScalarMap;
using DisparityMap = ScalarMap;

// ---------------------------------------------------------------------------
// SO(3) / SE(3)

inline Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return m;
}

inline Vec3 vee(const Mat3& m) { return {m(2, 1), m(0, 2), m(1, 0)}; }

/// Rigid transform x -> R x + t.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Pose() = default;
  Pose(const Mat3& r, const Vec3& t) : rotation(r), translation(t) {}

  static Pose identity() { return {}; }

  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }
  Pose operator*(const Pose& o) const {
    return {rotation * o.rotation, rotation * o.translation + translation};
  }
  Pose inverse() const {
    Mat3 rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }

  /// Max deviation of R R^T from identity and of det(R) from one.
  double orthonormality_error() const {
    double e = (rotation * rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff();
    return std::max(e, std::abs(rotation.determinant() - 1.0));
  }

  bool is_valid(double tol = 1e-9) const {
    return rotation.allFinite() && translation.allFinite() && orthonormality_error() <= tol;
  }

  /// Projects the rotation back onto SO(3) (via SVD).
  void reorthonormalize() {
    Eigen::JacobiSVD<Mat3> svd(rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0) {
      Mat3 u = svd.matrixU();
      u.col(2) *= -1;
      r = u * svd.matrixV().transpose();
    }
    rotation = r;
  }

  /// Translation scaled by s; models the monocular gauge (z, t) -> (s z, s t).
  Pose scaled(double s) const { return {rotation, translation * s}; }
};

/// Composes a chain of poses left to right, re-projecting the rotation
/// onto SO(3) every 100 compositions.
template <typename Range>
Pose compose_chain(const Range& poses) {
  Pose acc;
  int n = 0;
  for (const Pose& p : poses) {
    acc = acc * p;
    if (++n % 100 == 0) acc.reorthonormalize();
  }
  return acc;
}

inline Mat3 so3_exp(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 W = hat(w);
  if (theta < kSmallAngle) return Mat3::Identity() + W + 0.5 * W * W;
  return Mat3::Identity() + (std::sin(theta) / theta) * W +
         ((1.0 - std::cos(theta)) / theta2) * W * W;
}

inline Vec3 so3_log(const Mat3& r) {
  const double cos_theta = std::clamp(0.5 * (r.trace() - 1.0), -1.0, 1.0);
  const Vec3 v = vee(r - r.transpose());  // = 2 sin(theta) * axis
  const double theta = std::atan2(0.5 * v.norm(), cos_theta);
  if (theta < kSmallAngle) return 0.5 * v;
  if (M_PI - theta < 1e-3) {
    // sin(theta) ~ 0: sym(R) = cos(theta) I + (1 - cos(theta)) a a^T.
    const Mat3 aat = (0.5 * (r + r.transpose()) - cos_theta * Mat3::Identity()) / (1.0 - cos_theta);
    int k = 0;
    aat.diagonal().maxCoeff(&k);
    Vec3 axis = aat.col(k) / std::sqrt(std::max(aat(k, k), 1e-300));
    axis.normalize();
    if (axis.dot(v) < 0) axis = -axis;
    return theta * axis;
  }
  return (theta / (2.0 * std::sin(theta))) * v;
}

/// Left Jacobian of SO(3); maps the se(3) translation part to t.
inline Mat3 so3_left_jacobian(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 W = hat(w);
  if (theta < kSmallAngle) return Mat3::Identity() + 0.5 * W + (1.0 / 6.0) * W * W;
  return Mat3::Identity() + ((1.0 - std::cos(theta)) / theta2) * W +
         ((theta - std::sin(theta)) / (theta2 * theta)) * W * W;
}

inline Mat3 so3_left_jacobian_inverse(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 W = hat(w);
  if (theta < kSmallAngle) return Mat3::Identity() - 0.5 * W + (1.0 / 12.0) * W * W;
  const double half = 0.5 * theta;
  const double coef = (1.0 - half * std::cos(half) / std::sin(half)) / theta2;
  return Mat3::Identity() - 0.5 * W + coef * W * W;
}

/// xi = (rotation axis-angle, translation part).
inline Pose se3_exp(const Vec6& xi) {
  if (!xi.allFinite()) throw GeometryError("se3_exp: non-finite input");
  const Vec3 w = xi.head<3>();
  const Vec3 v = xi.tail<3>();
  return {so3_exp(w), so3_left_jacobian(w) * v};
}

inline Vec6 se3_log(const Pose& p) {
  if (!p.is_valid(1e-8)) throw GeometryError("se3_log: rotation is not orthonormal");
  const Vec3 w = so3_log(p.rotation);
  Vec6 xi;
  xi.head<3>() = w;
  if (w.isZero(0.0)) {
    xi.tail<3>() = p.translation;
  } else {
    xi.tail<3>() = so3_left_jacobian_inverse(w) * p.translation;
  }
  return xi;
}

// ---------------------------------------------------------------------------
// Camera model

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const {
    if (!(fx > 0 && fy > 0)) throw GeometryError("Intrinsics: focal lengths must be positive");
    if (!(cx > 0 && cx < width && cy > 0 && cy < height))
      throw GeometryError("Intrinsics: principal point outside the image");
  }

  /// Intrinsics of pyramid level `level` (pixel centres preserved).
  Intrinsics at_level(int level) const {
    const double s = 1.0 / static_cast<double>(1 << level);
    Intrinsics k;
    k.fx = fx * s;
    k.fy = fy * s;
    k.cx = (cx + 0.5) * s - 0.5;
    k.cy = (cy + 0.5) * s - 0.5;
    k.width = (width + (1 << level) - 1) >> level;
    k.height = (height + (1 << level) - 1) >> level;
    return k;
  }

  bool operator==(const Intrinsics&) const = default;
};

struct StereoRig {
  Intrinsics intrinsics;
  double baseline = 0.0;

  void validate() const {
    intrinsics.validate();
    if (!(baseline > 0)) throw GeometryError("StereoRig: baseline must be positive");
  }
  /// fx * baseline: the disparity of a point at unit depth.
  double focal_baseline() const { return intrinsics.fx * baseline; }
  bool operator==(const StereoRig&) const = default;
};

/// Perspective division followed by K.
inline Vec2 project(const Vec3& point, const Intrinsics& k) {
  if (!(point.z() > kEpsilonDepth)) throw GeometryError("project: point behind camera");
  return {k.fx * point.x() / point.z() + k.cx, k.fy * point.y() / point.z() + k.cy};
}

inline Vec3 backproject(const Vec2& pixel, double depth, const Intrinsics& k) {
  if (!(depth > 0)) throw GeometryError("backproject: depth must be positive");
  return {(pixel.x() - k.cx) / k.fx * depth, (pixel.y() - k.cy) / k.fy * depth, depth};
}

struct WarpResult {
  Vec2 pixel = Vec2::Zero();
  double depth = 0.0;
  bool valid = false;      ///< in front of the target camera
  bool in_bounds = false;  ///< valid and inside [0, W-1] x [0, H-1]
};

/// Reprojects pixel `p` with depth `z` through the relative pose T
/// (source camera -> target camera): K R K^-1 p + K t / z, dehomogenised.
inline WarpResult warp_pixel(const Vec2& p, double z, const Pose& t_target_source,
                             const Intrinsics& k) {
  WarpResult r;
  if (!(z > 0)) throw GeometryError("warp_pixel: depth must be positive");
  const Vec3 x = t_target_source * backproject(p, z, k);
  r.depth = x.z();
  if (!(x.z() > kEpsilonDepth)) return r;
  r.valid = true;
  r.pixel = {k.fx * x.x() / x.z() + k.cx, k.fy * x.y() / x.z() + k.cy};
  r.in_bounds = r.pixel.x() >= 0 && r.pixel.y() >= 0 && r.pixel.x() <= k.width - 1 &&
                r.pixel.y() <= k.height - 1;
  return r;
}

// ---------------------------------------------------------------------------
// Sampling

struct BilinearTap {
  int x0 = 0, y0 = 0;
  double ax = 0, ay = 0;  // fractional offsets in [0, 1]
};

/// Locates the 2x2 neighbourhood of a continuous pixel; nullopt outside
/// [0, W-1] x [0, H-1].
inline std::optional<BilinearTap> bilinear_tap(double x, double y, int width, int height) {
  if (!(x >= 0.0 && y >= 0.0 && x <= width - 1 && y <= height - 1)) return std::nullopt;
  BilinearTap t;
  t.x0 = std::min(static_cast<int>(x), std::max(width - 2, 0));
  t.y0 = std::min(static_cast<int>(y), std::max(height - 2, 0));
  t.ax = x - t.x0;
  t.ay = y - t.y0;
  return t;
}

inline std::optional<double> sample_bilinear(const Image& img, const Vec2& p) {
  if (img.empty()) throw GeometryError("sample_bilinear: empty image");
  const auto tap = bilinear_tap(p.x(), p.y(), img.width(), img.height());
  if (!tap) return std::nullopt;
  const int x1 = std::min(tap->x0 + 1, img.width() - 1);
  const int y1 = std::min(tap->y0 + 1, img.height() - 1);
  const double top = (1 - tap->ax) * img(tap->x0, tap->y0) + tap->ax * img(x1, tap->y0);
  const double bot = (1 - tap->ax) * img(tap->x0, y1) + tap->ax * img(x1, y1);
  return (1 - tap->ay) * top + tap->ay * bot;
}

struct SampleWithGradient {
  double value = 0, dx = 0, dy = 0;
};

/// Bilinear value and its exact partial derivatives in x and y.
inline std::optional<SampleWithGradient> sample_bilinear_grad(const Image& img, const Vec2& p) {
  const auto tap = bilinear_tap(p.x(), p.y(), img.width(), img.height());
  if (!tap) return std::nullopt;
  const int x1 = std::min(tap->x0 + 1, img.width() - 1);
  const int y1 = std::min(tap->y0 + 1, img.height() - 1);
  const double v00 = img(tap->x0, tap->y0), v10 = img(x1, tap->y0);
  const double v01 = img(tap->x0, y1), v11 = img(x1, y1);
  SampleWithGradient s;
  const double top = (1 - tap->ax) * v00 + tap->ax * v10;
  const double bot = (1 - tap->ax) * v01 + tap->ax * v11;
  s.value = (1 - tap->ay) * top + tap->ay * bot;
  s.dx = (1 - tap->ay) * (v10 - v00) + tap->ay * (v11 - v01);
  s.dy = bot - top;
  return s;
}

// ---------------------------------------------------------------------------
// Disparity <-> depth: z = fx * baseline / d

inline std::optional<double> disparity_to_depth(double d, const StereoRig& rig) {
  if (!(d > kEpsilonDisparity) || !std::isfinite(d)) return std::nullopt;
  return rig.focal_baseline() / d;
}

inline std::optional<double> depth_to_disparity(double z, const StereoRig& rig) {
  if (!(z > kEpsilonDepth) || !std::isfinite(z)) return std::nullopt;
  return rig.focal_baseline() / z;
}

namespace detail {
template <typename F>
ScalarMap convert_map(const ScalarMap& in, F&& f) {
  ScalarMap out(in.width(), in.height());
  for (std::size_t i = 0; i < in.values.size(); ++i) {
    if (!in.valid[i]) continue;
    if (auto v = f(in.values[i])) {
      out.values[i] = *v;
      out.valid[i] = 1;
    }
  }
  return out;
}
}  // namespace detail

/// Entries with d <= 1e-6 become invalid.
inline DepthMap disparity_to_depth(const DisparityMap& d, const StereoRig& rig) {
  return detail::convert_map(d, [&](double v) { return disparity_to_depth(v, rig); });
}

inline DisparityMap depth_to_disparity(const DepthMap& z, const StereoRig& rig) {
  return detail::convert_map(z, [&](double v) { return depth_to_disparity(v, rig); });
}

}  // namespace vrvo
