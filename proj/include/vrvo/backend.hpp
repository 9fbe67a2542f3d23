#pragma once

// Direct sparse odometry: gradient-based point selection, coarse-to-fine
// photometric tracking and a sliding keyframe window optimised jointly over
// poses and inverse depths, optionally anchored by a virtual stereo term
// built from predicted disparities.
//
// Intensities are on [0, 1]; thresholds given on the 0..255 scale are
// divided by 255. Keyframe poses are kept as world-to-camera transforms W
// and updated on the left, W <- exp(delta) W, delta = (rotation, translation).

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "vrvo/forward_warp.hpp"
#include "vrvo/geometry.hpp"
#include "vrvo/io.hpp"

namespace vrvo::vo {

class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BackendConfig {
  double huber = 9.0 / 255.0;               ///< Huber threshold, intensity units on [0, 1]
  double gradient_threshold = 4.0 / 255.0;  ///< added to the regional median gradient
  double weight_c = 50.0 / 255.0;           ///< point weight g^2 / (g^2 + c^2)
  int region_size = 8;                      ///< adaptive-threshold regions (also the spread grid)
  int bucket_size = 1;                      ///< at most one point per bucket
  int levels = 3;
  int track_iterations = 15;
  int window_iterations = 10;
  int max_keyframes = 5;
  double keyframe_flow = 2.0;  ///< mean point flow in pixels that triggers a keyframe
  int keyframe_max_interval = 4;
  double lambda_vs = 1.0;
  bool use_depth_init = true;
  bool use_virtual_stereo = true;
  double threshold_jitter = 0.0;  ///< relative noise on region thresholds, drawn from `seed`
  std::uint64_t seed = 0;
  std::size_t min_points = 50;
  double lost_inlier_fraction = 0.3;

  void validate() const {
    if (!(huber > 0 && gradient_threshold > 0 && weight_c > 0 && keyframe_flow > 0))
      throw BackendError("BackendConfig: thresholds must be positive");
    if (region_size < 2 || bucket_size < 1 || levels < 1 || track_iterations < 1 || window_iterations < 1)
      throw BackendError("BackendConfig: sizes and iteration counts must be positive");
    if (max_keyframes < 2 || keyframe_max_interval < 1) throw BackendError("BackendConfig: window too small");
    if (!(lambda_vs >= 0) || !(threshold_jitter >= 0)) throw BackendError("BackendConfig: weights must be >= 0");
    if (!(lost_inlier_fraction >= 0 && lost_inlier_fraction < 1))
      throw BackendError("BackendConfig: lost_inlier_fraction must be in [0, 1)");
  }
  bool operator==(const BackendConfig&) const = default;
};

/// 8-pixel residual pattern (offsets in pixels of the current level).
inline constexpr int kPattern[8][2] = {{0, -2}, {-1, -1}, {1, -1}, {-2, 0}, {0, 0}, {2, 0}, {-1, 1}, {0, 2}};
inline constexpr int kPatternRadius = 2;

inline double huber(double r, double gamma) {
  const double a = std::abs(r);
  return a <= gamma ? 0.5 * r * r : gamma * (a - 0.5 * gamma);
}

/// IRLS weight: dh/dr = w * r.
inline double huber_weight(double r, double gamma) {
  const double a = std::abs(r);
  return a <= gamma ? 1.0 : gamma / a;
}

// ---------------------------------------------------------------------------
// Images

/// Level l+1 averages 2x2 blocks of level l; odd sizes round up and reuse
/// the last row/column.
inline std::vector<Image> build_pyramid(const Image& image, int levels) {
  if (image.empty()) throw BackendError("build_pyramid: empty image");
  std::vector<Image> pyr{image};
  for (int l = 1; l < levels; ++l) {
    const Image& f = pyr.back();
    const int w = (f.width() + 1) / 2, h = (f.height() + 1) / 2;
    Image c(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int x0 = 2 * x, y0 = 2 * y;
        const int x1 = std::min(x0 + 1, f.width() - 1), y1 = std::min(y0 + 1, f.height() - 1);
        c(x, y) = 0.25 * (f(x0, y0) + f(x1, y0) + f(x0, y1) + f(x1, y1));
      }
    pyr.push_back(std::move(c));
  }
  return pyr;
}

/// Central-difference gradient magnitude; zero on the one-pixel border.
inline Image gradient_magnitude(const Image& img) {
  Image g(img.width(), img.height(), 0.0);
  for (int y = 1; y + 1 < img.height(); ++y)
    for (int x = 1; x + 1 < img.width(); ++x) {
      const double gx = 0.5 * (img(x + 1, y) - img(x - 1, y));
      const double gy = 0.5 * (img(x, y + 1) - img(x, y - 1));
      g(x, y) = std::hypot(gx, gy);
    }
  return g;
}

// ---------------------------------------------------------------------------
// Points

enum class PointStatus { Active, Outlier };

struct CandidatePoint {
  Vec2 pixel = Vec2::Zero();  ///< level-0 pixel in the host keyframe
  double inv_depth = 1.0;
  double weight = 1.0;
  PointStatus status = PointStatus::Active;
};

struct Selection {
  std::vector<CandidatePoint> points;
  std::size_t regions = 0;           ///< spread grid cells
  std::size_t regions_covered = 0;   ///< cells holding at least one point
  bool low_count_warning = false;    ///< fewer than min_points selected
};

/// Pixels whose gradient exceeds the regional median plus a fixed offset,
/// at most one (the strongest) per bucket. Inverse depths are left at 1.
inline Selection select_points(const Image& image, const BackendConfig& cfg, std::mt19937_64* jitter_rng = nullptr) {
  if (image.empty()) throw BackendError("select_points: empty image");
  const int w = image.width(), h = image.height();
  const Image g = gradient_magnitude(image);
  const int rw = (w + cfg.region_size - 1) / cfg.region_size, rh = (h + cfg.region_size - 1) / cfg.region_size;
  std::vector<double> threshold(static_cast<std::size_t>(rw) * rh);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int ry = 0; ry < rh; ++ry)
    for (int rx = 0; rx < rw; ++rx) {
      std::vector<double> v;
      for (int y = ry * cfg.region_size; y < std::min(h, (ry + 1) * cfg.region_size); ++y)
        for (int x = rx * cfg.region_size; x < std::min(w, (rx + 1) * cfg.region_size); ++x) v.push_back(g(x, y));
      std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
      double t = v[v.size() / 2] + cfg.gradient_threshold;
      if (jitter_rng && cfg.threshold_jitter > 0) t *= std::max(0.0, 1.0 + cfg.threshold_jitter * noise(*jitter_rng));
      threshold[static_cast<std::size_t>(ry) * rw + rx] = t;
    }
  Selection out;
  out.regions = threshold.size();
  std::vector<char> covered(threshold.size(), 0);
  const int lo = kPatternRadius, hi_x = w - 1 - kPatternRadius, hi_y = h - 1 - kPatternRadius;
  const double c2 = cfg.weight_c * cfg.weight_c;
  for (int by = lo; by <= hi_y; by += cfg.bucket_size)
    for (int bx = lo; bx <= hi_x; bx += cfg.bucket_size) {
      int best_x = -1, best_y = -1;
      double best = 0;
      for (int y = by; y < std::min(by + cfg.bucket_size, hi_y + 1); ++y)
        for (int x = bx; x < std::min(bx + cfg.bucket_size, hi_x + 1); ++x) {
          const std::size_t region =
              static_cast<std::size_t>(y / cfg.region_size) * rw + static_cast<std::size_t>(x / cfg.region_size);
          if (g(x, y) > threshold[region] && g(x, y) > best) {
            best = g(x, y);
            best_x = x;
            best_y = y;
          }
        }
      if (best_x < 0) continue;
      CandidatePoint p;
      p.pixel = Vec2(best_x, best_y);
      p.weight = best * best / (best * best + c2);
      out.points.push_back(p);
      covered[static_cast<std::size_t>(best_y / cfg.region_size) * rw + static_cast<std::size_t>(best_x / cfg.region_size)] = 1;
    }
  out.regions_covered = static_cast<std::size_t>(std::count(covered.begin(), covered.end(), 1));
  out.low_count_warning = out.points.size() < cfg.min_points;
  return out;
}

// ---------------------------------------------------------------------------
// Keyframes

struct Keyframe {
  int frame_id = 0;
  std::vector<Image> pyramid;
  Pose world_to_camera;
  std::vector<CandidatePoint> points;
  std::optional<DisparityMap> disparity_left;
  std::optional<DisparityMap> disparity_right;

  Pose camera_to_world() const { return world_to_camera.inverse(); }
  std::size_t active_points() const {
    return static_cast<std::size_t>(std::count_if(points.begin(), points.end(),
                                                  [](const CandidatePoint& p) { return p.status == PointStatus::Active; }));
  }
};

/// Pixel on pyramid level `level` of a level-0 pixel.
inline Vec2 to_level(const Vec2& p, int level) {
  const double s = 1.0 / static_cast<double>(1 << level);
  return {(p.x() + 0.5) * s - 0.5, (p.y() + 0.5) * s - 0.5};
}

// ---------------------------------------------------------------------------
// Residuals

/// One pattern residual r = I_target(warp(p + o)) - I_host(p + o) and its
/// derivatives w.r.t. left perturbations of both world-to-camera poses and
/// the inverse depth.
struct PhotometricResidual {
  bool valid = false;
  double r = 0;
  Vec6 d_host = Vec6::Zero();
  Vec6 d_target = Vec6::Zero();
  double d_inv_depth = 0;
  Vec2 warped = Vec2::Zero();
};

/// `p` is the host pixel of the pattern sample (already offset) at the level
/// of `host`/`target` and `k`. `t_th` maps host-camera to target-camera.
inline PhotometricResidual photometric_residual(const Image& host, const Image& target, const Intrinsics& k,
                                                const Vec2& p, double inv_depth, const Pose& t_th,
                                                bool with_jacobian = true) {
  PhotometricResidual out;
  const auto ref = sample_bilinear(host, p);
  if (!ref || !(inv_depth > 0)) return out;
  const Vec3 bearing((p.x() - k.cx) / k.fx, (p.y() - k.cy) / k.fy, 1.0);
  const Vec3 xh = bearing / inv_depth;
  const Vec3 xt = t_th.rotation * xh + t_th.translation;
  if (!(xt.z() > kEpsilonDepth)) return out;
  const double iz = 1.0 / xt.z();
  out.warped = Vec2(k.fx * xt.x() * iz + k.cx, k.fy * xt.y() * iz + k.cy);
  const auto s = sample_bilinear_grad(target, out.warped);
  if (!s) return out;
  out.valid = true;
  out.r = s->value - *ref;
  if (!with_jacobian) return out;
  // d r / d X_t
  const Vec3 g3(s->dx * k.fx * iz, s->dy * k.fy * iz, -(s->dx * k.fx * xt.x() + s->dy * k.fy * xt.y()) * iz * iz);
  out.d_target.head<3>() = xt.cross(g3);
  out.d_target.tail<3>() = g3;
  const Vec3 gh = t_th.rotation.transpose() * g3;
  out.d_host.head<3>() = gh.cross(xh);
  out.d_host.tail<3>() = -gh;
  out.d_inv_depth = -g3.dot(t_th.rotation * xh) / inv_depth;
  return out;
}

/// Virtual stereo residual of one point: the point's disparity d = fb * rho
/// places it at p_s = p - (d, 0) in the right view; the right disparity map
/// sends p_s back to p_s + (D_R(p_s), 0) in the left image, where the
/// intensity is compared with I_L(p).
struct StereoResidual {
  bool valid = false;
  double r = 0;
  double d_inv_depth = 0;
};

inline StereoResidual virtual_stereo_residual(const Image& left, const DisparityMap& right_disp, const Vec2& p,
                                              double inv_depth, double focal_baseline) {
  StereoResidual out;
  if (!(inv_depth > 0)) return out;
  const Vec2 ps(p.x() - focal_baseline * inv_depth, p.y());
  const auto tap = bilinear_tap(ps.x(), ps.y(), right_disp.values.width(), right_disp.values.height());
  if (!tap) return out;
  const int x1 = std::min(tap->x0 + 1, right_disp.values.width() - 1);
  const int y1 = std::min(tap->y0 + 1, right_disp.values.height() - 1);
  if (!right_disp.valid(tap->x0, tap->y0) || !right_disp.valid(x1, tap->y0) || !right_disp.valid(tap->x0, y1) ||
      !right_disp.valid(x1, y1))
    return out;
  const auto d = sample_bilinear_grad(right_disp.values, ps);
  const Vec2 q(ps.x() + d->value, p.y());
  const auto iq = sample_bilinear_grad(left, q);
  const auto ip = sample_bilinear(left, p);
  if (!iq || !ip) return out;
  out.valid = true;
  out.r = iq->value - *ip;
  out.d_inv_depth = iq->dx * (-focal_baseline) * (1.0 + d->dx);
  return out;
}

// ---------------------------------------------------------------------------
// Window energy

/// One residual with the variables it touches. Slots index the keyframe
/// vector; `point` indexes the flattened active-point list.
struct ResidualRecord {
  std::size_t point = 0;
  int host = 0;
  int target = -1;  ///< -1 for virtual stereo terms (inverse depth only)
  double r = 0;
  double weight = 1;  ///< point weight times term weight
  Vec6 d_host = Vec6::Zero();
  Vec6 d_target = Vec6::Zero();
  double d_inv_depth = 0;
};

struct EnergyEvaluation {
  double energy = 0;
  std::size_t residuals = 0;
  std::size_t inliers = 0;  ///< |r| <= huber threshold
  std::vector<ResidualRecord> records;
};

struct PointRef {
  int slot;
  std::size_t index;
};

inline std::vector<PointRef> active_points(const std::vector<Keyframe>& kfs) {
  std::vector<PointRef> out;
  for (int s = 0; s < static_cast<int>(kfs.size()); ++s)
    for (std::size_t i = 0; i < kfs[s].points.size(); ++i)
      if (kfs[s].points[i].status == PointStatus::Active) out.push_back({s, i});
  return out;
}

/// Sum over active points, every other keyframe and the 8-pixel pattern of
/// weight * Huber(residual); residuals leaving the target image are dropped.
inline EnergyEvaluation photometric_energy(const std::vector<Keyframe>& kfs, const Intrinsics& k,
                                           const BackendConfig& cfg, bool with_jacobians = false) {
  EnergyEvaluation e;
  const auto pts = active_points(kfs);
  for (std::size_t j = 0; j < pts.size(); ++j) {
    const Keyframe& host = kfs[pts[j].slot];
    const CandidatePoint& pt = host.points[pts[j].index];
    for (int t = 0; t < static_cast<int>(kfs.size()); ++t) {
      if (t == pts[j].slot) continue;
      const Pose t_th = kfs[t].world_to_camera * host.camera_to_world();
      for (const auto& o : kPattern) {
        const Vec2 p = pt.pixel + Vec2(o[0], o[1]);
        const PhotometricResidual r =
            photometric_residual(host.pyramid[0], kfs[t].pyramid[0], k, p, pt.inv_depth, t_th, with_jacobians);
        if (!r.valid) continue;
        e.energy += pt.weight * huber(r.r, cfg.huber);
        ++e.residuals;
        if (std::abs(r.r) <= cfg.huber) ++e.inliers;
        if (with_jacobians)
          e.records.push_back({j, pts[j].slot, t, r.r, pt.weight, r.d_host, r.d_target, r.d_inv_depth});
      }
    }
  }
  return e;
}

/// Virtual stereo energy of every active point whose host carries a right
/// disparity map; the map is data and receives no gradient.
inline EnergyEvaluation virtual_stereo_energy(const std::vector<Keyframe>& kfs, double focal_baseline,
                                              const BackendConfig& cfg, bool with_jacobians = false) {
  EnergyEvaluation e;
  const auto pts = active_points(kfs);
  for (std::size_t j = 0; j < pts.size(); ++j) {
    const Keyframe& host = kfs[pts[j].slot];
    if (!host.disparity_right) continue;
    const CandidatePoint& pt = host.points[pts[j].index];
    const StereoResidual r =
        virtual_stereo_residual(host.pyramid[0], *host.disparity_right, pt.pixel, pt.inv_depth, focal_baseline);
    if (!r.valid) continue;
    e.energy += pt.weight * huber(r.r, cfg.huber);
    ++e.residuals;
    if (std::abs(r.r) <= cfg.huber) ++e.inliers;
    if (with_jacobians) {
      ResidualRecord rec;
      rec.point = j;
      rec.host = pts[j].slot;
      rec.r = r.r;
      rec.weight = pt.weight;
      rec.d_inv_depth = r.d_inv_depth;
      e.records.push_back(rec);
    }
  }
  return e;
}

inline double total_energy(const std::vector<Keyframe>& kfs, const Intrinsics& k, double focal_baseline,
                           const BackendConfig& cfg) {
  double e = photometric_energy(kfs, k, cfg).energy;
  if (cfg.use_virtual_stereo && cfg.lambda_vs > 0) e += cfg.lambda_vs * virtual_stereo_energy(kfs, focal_baseline, cfg).energy;
  return e;
}

// ---------------------------------------------------------------------------
// Window optimisation

struct WindowResult {
  int iterations = 0;
  int accepted_steps = 0;
  double initial_energy = 0;
  double final_energy = 0;
  bool degenerate = false;
};

/// Levenberg-damped Gauss-Newton over all window poses except the first
/// (gauge) and all active inverse depths, with the depths eliminated by a
/// Schur complement. Only energy-decreasing steps are accepted.
inline WindowResult optimize_window(std::vector<Keyframe>& kfs, const Intrinsics& k, double focal_baseline,
                                    const BackendConfig& cfg) {
  if (kfs.size() < 2) throw BackendError("optimize_window: at least 2 keyframes required");
  const bool vs = cfg.use_virtual_stereo && cfg.lambda_vs > 0;
  const int np = 6 * (static_cast<int>(kfs.size()) - 1);
  WindowResult res;
  double energy = total_energy(kfs, k, focal_baseline, cfg);
  res.initial_energy = energy;
  double lambda = 1e-3;
  for (int it = 0; it < cfg.window_iterations; ++it) {
    res.iterations = it + 1;
    const auto pts = active_points(kfs);
    const std::size_t m = pts.size();
    EnergyEvaluation ph = photometric_energy(kfs, k, cfg, true);
    std::vector<ResidualRecord> records = std::move(ph.records);
    if (vs) {
      EnergyEvaluation st = virtual_stereo_energy(kfs, focal_baseline, cfg, true);
      for (auto& r : st.records) {
        r.weight *= cfg.lambda_vs;
        records.push_back(r);
      }
    }
    Eigen::MatrixXd hpp = Eigen::MatrixXd::Zero(np, np);
    Eigen::VectorXd bp = Eigen::VectorXd::Zero(np);
    std::vector<double> hdd(m, 0.0), bd(m, 0.0);
    std::vector<Eigen::VectorXd> hpd(m, Eigen::VectorXd::Zero(np));
    for (const ResidualRecord& rec : records) {
      const double w = rec.weight * huber_weight(rec.r, cfg.huber);
      Eigen::Matrix<double, 12, 1> jp = Eigen::Matrix<double, 12, 1>::Zero();
      int idx[2] = {-1, -1};
      if (rec.target >= 0) {
        if (rec.host > 0) {
          idx[0] = 6 * (rec.host - 1);
          jp.head<6>() = rec.d_host;
        }
        if (rec.target > 0) {
          idx[1] = 6 * (rec.target - 1);
          jp.tail<6>() = rec.d_target;
        }
      }
      for (int a = 0; a < 2; ++a) {
        if (idx[a] < 0) continue;
        const auto ja = jp.segment<6>(6 * a);
        bp.segment<6>(idx[a]) += w * ja * rec.r;
        hpd[rec.point].segment<6>(idx[a]) += w * ja * rec.d_inv_depth;
        for (int b = 0; b < 2; ++b) {
          if (idx[b] < 0) continue;
          hpp.block<6, 6>(idx[a], idx[b]) += w * ja * jp.segment<6>(6 * b).transpose();
        }
      }
      hdd[rec.point] += w * rec.d_inv_depth * rec.d_inv_depth;
      bd[rec.point] += w * rec.d_inv_depth * rec.r;
    }
    double gmax = bp.size() ? bp.cwiseAbs().maxCoeff() : 0.0;
    for (double v : bd) gmax = std::max(gmax, std::abs(v));
    // Stationary, or residuals already at round-off level.
    if (gmax < 1e-12 || energy < 1e-20 * static_cast<double>(std::max<std::size_t>(records.size(), 1))) break;
    // Try damped steps until one decreases the energy.
    bool accepted = false, solved = false;
    while (!accepted && lambda < 1e8) {
      Eigen::MatrixXd s = hpp;
      for (int i = 0; i < np; ++i) s(i, i) += lambda * hpp(i, i) + 1e-12;
      Eigen::VectorXd rhs = -bp;
      std::vector<double> hdd_damped(m);
      for (std::size_t j = 0; j < m; ++j) {
        hdd_damped[j] = hdd[j] * (1 + lambda) + 1e-12;
        if (hdd[j] <= 0) continue;
        s.noalias() -= hpd[j] * hpd[j].transpose() / hdd_damped[j];
        rhs.noalias() += hpd[j] * (bd[j] / hdd_damped[j]);
      }
      Eigen::VectorXd dp = Eigen::VectorXd::Zero(np);
      if (np > 0) {
        Eigen::LDLT<Eigen::MatrixXd> ldlt(s);
        if (ldlt.info() != Eigen::Success) {
          lambda *= 10;
          continue;
        }
        dp = ldlt.solve(rhs);
        if (!dp.allFinite()) {
          lambda *= 10;
          continue;
        }
      }
      solved = true;
      std::vector<Keyframe> trial = kfs;
      for (int i = 1; i < static_cast<int>(kfs.size()); ++i) {
        trial[i].world_to_camera = se3_exp(dp.segment<6>(6 * (i - 1))) * kfs[i].world_to_camera;
        trial[i].world_to_camera.reorthonormalize();
      }
      bool positive = true;
      for (std::size_t j = 0; j < m; ++j) {
        if (hdd[j] <= 0) continue;
        const double dd = -(bd[j] + hpd[j].dot(dp)) / hdd_damped[j];
        double& rho = trial[pts[j].slot].points[pts[j].index].inv_depth;
        rho += dd;
        if (!(rho > 0)) positive = false;
      }
      const double e_new = positive ? total_energy(trial, k, focal_baseline, cfg) : INFINITY;
      if (e_new < energy) {
        accepted = true;
        ++res.accepted_steps;
        const double rel = (energy - e_new) / std::max(energy, 1e-300);
        kfs = std::move(trial);
        energy = e_new;
        lambda = std::max(lambda * 0.5, 1e-8);
        if (rel < 1e-6) {
          res.final_energy = energy;
          return res;
        }
      } else {
        lambda *= 10;
      }
    }
    if (!accepted) {
      res.degenerate = !solved;
      break;
    }
  }
  res.final_energy = energy;
  return res;
}

// ---------------------------------------------------------------------------
// Tracking

struct TrackResult {
  Pose target_from_reference;
  double mean_residual = 0;   ///< mean |r| at level 0
  double inlier_fraction = 0;
  std::size_t residuals = 0;
  bool lost = false;
};

/// Coarse-to-fine Gauss-Newton alignment of a new frame against the
/// reference keyframe's active points (Huber-weighted), starting at `init`.
inline TrackResult track_frame(const Keyframe& reference, const std::vector<Image>& frame_pyramid, const Pose& init,
                               const Intrinsics& k, const BackendConfig& cfg) {
  TrackResult out;
  Pose current = init;
  const int levels = std::min<int>({cfg.levels, static_cast<int>(reference.pyramid.size()),
                                    static_cast<int>(frame_pyramid.size())});
  auto evaluate = [&](const Pose& pose, int level, Eigen::Matrix<double, 6, 6>* h, Vec6* b, std::size_t* n,
                      std::size_t* inl, double* abs_sum) {
    const Intrinsics kl = k.at_level(level);
    double e = 0;
    if (h) h->setZero();
    if (b) b->setZero();
    std::size_t count = 0, inliers = 0;
    double asum = 0;
    for (const CandidatePoint& pt : reference.points) {
      if (pt.status != PointStatus::Active) continue;
      const Vec2 pl = to_level(pt.pixel, level);
      for (const auto& o : kPattern) {
        const PhotometricResidual r = photometric_residual(reference.pyramid[level], frame_pyramid[level], kl,
                                                           pl + Vec2(o[0], o[1]), pt.inv_depth, pose, h != nullptr);
        if (!r.valid) continue;
        e += pt.weight * huber(r.r, cfg.huber);
        ++count;
        asum += std::abs(r.r);
        if (std::abs(r.r) <= cfg.huber) ++inliers;
        if (h) {
          const double w = pt.weight * huber_weight(r.r, cfg.huber);
          *h += w * r.d_target * r.d_target.transpose();
          *b += w * r.d_target * r.r;
        }
      }
    }
    if (n) *n = count;
    if (inl) *inl = inliers;
    if (abs_sum) *abs_sum = asum;
    return e;
  };
  for (int level = levels - 1; level >= 0; --level) {
    double lambda = 1e-3;
    Eigen::Matrix<double, 6, 6> h;
    Vec6 b;
    std::size_t n0 = 0;
    double energy = evaluate(current, level, &h, &b, &n0, nullptr, nullptr);
    if (n0 == 0) continue;
    for (int it = 0; it < cfg.track_iterations; ++it) {
      bool accepted = false;
      while (!accepted && lambda < 1e8) {
        Eigen::Matrix<double, 6, 6> a = h;
        for (int i = 0; i < 6; ++i) a(i, i) += lambda * h(i, i) + 1e-12;
        const Vec6 delta = a.ldlt().solve(-b);
        if (!delta.allFinite()) {
          lambda *= 10;
          continue;
        }
        const Pose trial = se3_exp(delta) * current;
        std::size_t n = 0;
        const double e_new = evaluate(trial, level, nullptr, nullptr, &n, nullptr, nullptr);
        // Normalise by residual count so losing border residuals is not a win.
        if (n > 0 && e_new / n < energy / n0) {
          accepted = true;
          const double rel = (energy / n0 - e_new / n) / std::max(energy / n0, 1e-300);
          current = trial;
          lambda = std::max(lambda * 0.5, 1e-8);
          energy = evaluate(current, level, &h, &b, &n0, nullptr, nullptr);
          if (rel < 1e-6 || delta.norm() < 1e-10) it = cfg.track_iterations;
        } else {
          lambda *= 10;
        }
      }
      if (!accepted) break;
    }
  }
  std::size_t n = 0, inl = 0;
  double asum = 0;
  evaluate(current, 0, nullptr, nullptr, &n, &inl, &asum);
  current.reorthonormalize();
  out.target_from_reference = current;
  out.residuals = n;
  out.mean_residual = n ? asum / static_cast<double>(n) : 0.0;
  out.inlier_fraction = n ? static_cast<double>(inl) / static_cast<double>(n) : 0.0;
  out.lost = n == 0 || out.inlier_fraction < cfg.lost_inlier_fraction;
  return out;
}

// ---------------------------------------------------------------------------
// Odometry driver

struct OdometryInput {
  std::vector<Image> images;
  StereoRig rig;  ///< intrinsics and the virtual baseline used for disparity <-> depth
  std::vector<DisparityMap> disparity_left;   ///< empty or one per frame
  std::vector<DisparityMap> disparity_right;  ///< empty (derived by forward warping) or one per frame
};

struct FrameStats {
  int frame = 0;
  bool keyframe = false;
  double mean_residual = 0;
  double inlier_fraction = 0;
  double window_energy = 0;
  std::size_t points = 0;
};

struct OdometryResult {
  std::vector<Pose> trajectory;  ///< camera-to-world, one per tracked frame
  std::vector<FrameStats> stats;
  std::vector<int> keyframes;
  bool complete = true;
  std::size_t low_point_warnings = 0;
};

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return 1.0;
  std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
  return v[v.size() / 2];
}

/// Mean displacement of the reference's points under a relative pose.
inline double mean_flow(const Keyframe& ref, const Pose& t_fr, const Intrinsics& k) {
  double s = 0;
  std::size_t n = 0;
  for (const CandidatePoint& p : ref.points) {
    if (p.status != PointStatus::Active) continue;
    const WarpResult w = warp_pixel(p.pixel, 1.0 / p.inv_depth, t_fr, k);
    if (!w.valid) continue;
    s += (w.pixel - p.pixel).norm();
    ++n;
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

}  // namespace detail

/// Runs the full front-end/back-end loop over a sequence. The first frame
/// defines the world frame. Non-keyframes are expressed relative to their
/// reference keyframe's final optimised pose.
/// `on_window`, if set, sees the window after every optimisation.
using WindowObserver = std::function<void(const std::vector<Keyframe>&, const WindowResult&)>;

inline OdometryResult run_odometry(const OdometryInput& in, const BackendConfig& cfg,
                                   const WindowObserver& on_window = {}) {
  cfg.validate();
  in.rig.validate();
  const std::size_t n = in.images.size();
  if (n < 5) throw BackendError("run_odometry: at least 5 frames required");
  if (!in.disparity_left.empty() && in.disparity_left.size() != n)
    throw BackendError("run_odometry: one left disparity map per frame required");
  if (!in.disparity_right.empty() && in.disparity_right.size() != n)
    throw BackendError("run_odometry: one right disparity map per frame required");
  if (cfg.use_depth_init && in.disparity_left.empty())
    throw BackendError("run_odometry: depth initialisation requested without disparities");
  if (cfg.use_virtual_stereo && in.disparity_left.empty() && in.disparity_right.empty())
    throw BackendError("run_odometry: virtual stereo requested without disparities");
  const Intrinsics& k = in.rig.intrinsics;
  const double fb = in.rig.focal_baseline();
  std::mt19937_64 rng(cfg.seed);

  OdometryResult out;
  std::vector<Keyframe> window;
  std::map<int, Pose> kf_pose;  // frame id -> camera-to-world, frozen once dropped
  struct Relative {
    int ref;
    Pose target_from_ref;
  };
  std::vector<Relative> relative;

  auto make_keyframe = [&](int f, const Pose& world_to_camera) {
    Keyframe kf;
    kf.frame_id = f;
    kf.pyramid = build_pyramid(in.images[f], cfg.levels);
    kf.world_to_camera = world_to_camera;
    Selection sel = select_points(in.images[f], cfg, cfg.threshold_jitter > 0 ? &rng : nullptr);
    if (sel.low_count_warning) ++out.low_point_warnings;
    double fallback = 1.0;
    if (!cfg.use_depth_init && !window.empty()) {
      std::vector<double> rhos;
      for (const Keyframe& other : window) {
        const Pose t = world_to_camera * other.camera_to_world();
        for (const CandidatePoint& p : other.points) {
          if (p.status != PointStatus::Active) continue;
          const Vec3 x = t * backproject(p.pixel, 1.0 / p.inv_depth, k);
          if (x.z() > kEpsilonDepth) rhos.push_back(1.0 / x.z());
        }
      }
      fallback = detail::median(rhos);
    }
    for (CandidatePoint& p : sel.points) {
      p.inv_depth = fallback;
      if (cfg.use_depth_init) {
        const DisparityMap& d = in.disparity_left[f];
        const auto v = sample_bilinear(d.values, p.pixel);
        const int x = static_cast<int>(p.pixel.x()), y = static_cast<int>(p.pixel.y());
        if (!v || !d.valid(x, y) || !(*v > 0)) {
          p.status = PointStatus::Outlier;
          continue;
        }
        p.inv_depth = *v / fb;
      }
      kf.points.push_back(p);
    }
    if (!in.disparity_left.empty()) kf.disparity_left = in.disparity_left[f];
    if (cfg.use_virtual_stereo)
      kf.disparity_right = in.disparity_right.empty() ? forward_warp_disparity(in.disparity_left[f]) : in.disparity_right[f];
    return kf;
  };

  auto freeze = [&] {
    for (const Keyframe& kf : window) kf_pose[kf.frame_id] = kf.camera_to_world();
  };

  window.push_back(make_keyframe(0, Pose{}));
  freeze();
  out.keyframes.push_back(0);
  relative.push_back({0, Pose{}});
  out.stats.push_back({0, true, 0.0, 1.0, 0.0, window.back().active_points()});

  Pose prev_w2c, prev_prev_w2c;  // world-to-camera of the last two frames
  bool have_prev_prev = false;
  int since_kf = 0;
  for (std::size_t f = 1; f < n; ++f) {
    const Keyframe& ref = window.back();
    const Pose motion = have_prev_prev ? prev_w2c * prev_prev_w2c.inverse() : Pose{};
    Pose guess_w2c = motion * prev_w2c;
    guess_w2c.reorthonormalize();  // the motion prior would otherwise amplify round-off
    const auto pyr = build_pyramid(in.images[f], cfg.levels);
    TrackResult tr = track_frame(ref, pyr, guess_w2c * ref.camera_to_world(), k, cfg);
    if (tr.lost) {
      out.complete = false;
      break;
    }
    Pose w2c = tr.target_from_reference * ref.world_to_camera;
    w2c.reorthonormalize();
    ++since_kf;
    const double flow = detail::mean_flow(ref, tr.target_from_reference, k);
    FrameStats st{static_cast<int>(f), false, tr.mean_residual, tr.inlier_fraction, 0.0, 0};
    if (flow > cfg.keyframe_flow || since_kf >= cfg.keyframe_max_interval || f + 1 == n) {
      window.push_back(make_keyframe(static_cast<int>(f), w2c));
      if (static_cast<int>(window.size()) > cfg.max_keyframes) {
        kf_pose[window.front().frame_id] = window.front().camera_to_world();
        window.erase(window.begin());
      }
      WindowResult wr = optimize_window(window, k, fb, cfg);
      if (on_window) on_window(window, wr);
      st.keyframe = true;
      st.window_energy = wr.final_energy;
      out.keyframes.push_back(static_cast<int>(f));
      relative.push_back({static_cast<int>(f), Pose{}});
      since_kf = 0;
      freeze();
      prev_prev_w2c = prev_w2c;
      prev_w2c = window.back().world_to_camera;
    } else {
      relative.push_back({ref.frame_id, tr.target_from_reference});
      prev_prev_w2c = prev_w2c;
      prev_w2c = w2c;
    }
    have_prev_prev = true;
    st.points = window.back().active_points();
    out.stats.push_back(st);
  }
  freeze();
  for (const Relative& r : relative) out.trajectory.push_back(kf_pose.at(r.ref) * r.target_from_ref.inverse());
  return out;
}

inline void write_trajectory(const std::filesystem::path& path, const OdometryResult& r) {
  io::write_kitti_poses(path, r.trajectory);
}

inline std::string stats_csv(const OdometryResult& r) {
  std::ostringstream ss;
  ss << std::setprecision(10) << "frame,keyframe,mean_residual,inlier_fraction,window_energy,points\n";
  for (const FrameStats& s : r.stats)
    ss << s.frame << ',' << (s.keyframe ? 1 : 0) << ',' << s.mean_residual << ',' << s.inlier_fraction << ','
       << s.window_energy << ',' << s.points << "\n";
  return ss.str();
}

}  // namespace vrvo::vo
