#pragma once

// Two-domain synthetic data: a textured height-field wall ray-cast from a
// moving camera. Virtual sequences carry stereo partners and ground-truth
// disparity; real sequences are monocular with appearance shifted and
// keep their ground truth for evaluation only.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "vrvo/geometry.hpp"
#include "vrvo/io.hpp"

namespace vrvo::sim {

class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Domain { Virtual, Real };

inline std::string to_string(Domain d) { return d == Domain::Virtual ? "virtual" : "real"; }

inline Domain domain_from_string(const std::string& s) {
  if (s == "virtual") return Domain::Virtual;
  if (s == "real") return Domain::Real;
  throw SimulationError("unknown domain '" + s + "'");
}

/// Deterministic 64-bit mixing (splitmix64 finaliser).
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) { return mix64(a ^ mix64(b)); }

/// Uniform value in [-1, 1] attached to an integer lattice point.
inline double lattice_value(std::uint64_t seed, std::int64_t i, std::int64_t j) {
  const std::uint64_t h =
      hash_combine(hash_combine(seed, static_cast<std::uint64_t>(i)), static_cast<std::uint64_t>(j));
  return static_cast<double>(h >> 11) * (2.0 / 9007199254740992.0) - 1.0;
}

/// Smooth 2-D value noise in [-1, 1] with quintic fade.
inline double value_noise(std::uint64_t seed, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto i = static_cast<std::int64_t>(fx), j = static_cast<std::int64_t>(fy);
  const double u = x - fx, v = y - fy;
  auto fade = [](double t) { return t * t * t * (t * (t * 6 - 15) + 10); };
  const double a = fade(u), b = fade(v);
  const double v00 = lattice_value(seed, i, j), v10 = lattice_value(seed, i + 1, j);
  const double v01 = lattice_value(seed, i, j + 1), v11 = lattice_value(seed, i + 1, j + 1);
  return (1 - b) * ((1 - a) * v00 + a * v10) + b * ((1 - a) * v01 + a * v11);
}

struct SceneConfig {
  std::uint64_t seed = 1;
  int grid_width = 48;   ///< height-field nodes along world x
  int grid_height = 24;  ///< height-field nodes along world y
  double x_min = -10.0, x_max = 22.0;
  double y_min = -8.0, y_max = 8.0;
  double z_min = 4.0;  ///< nearest surface depth (world z)
  double z_max = 9.0;
  double relief_period = 6.0;     ///< world units per relief lattice cell
  double texture_period = 1.2;    ///< world units per base texture lattice cell
  int texture_octaves = 3;
  double texture_persistence = 0.45;
  double texture_contrast = 0.42;
  double ambient = 0.55;          ///< shading floor
  bool flat = false;              ///< fronto-parallel plane at z_min
  Vec3 light_dir = Vec3(-0.3, -0.5, -1.0).normalized();  ///< towards the light
};

/// Textured height field z = h(x, y) facing a camera that looks along +z.
class Scene {
 public:
  Scene() = default;
  explicit Scene(const SceneConfig& cfg) : cfg_(cfg) {
    if (cfg.grid_width < 4 || cfg.grid_height < 4)
      throw SimulationError("build_scene: height-field grid must be at least 4x4");
    if (!(cfg.x_max > cfg.x_min && cfg.y_max > cfg.y_min))
      throw SimulationError("build_scene: degenerate world extent");
    if (!(cfg.z_min >= 1.0 && cfg.z_max >= cfg.z_min))
      throw SimulationError("build_scene: depth range must satisfy 1 <= z_min < z_max");
    heights_ = Grid<double>(cfg.grid_width, cfg.grid_height);
    const std::uint64_t relief_seed = hash_combine(cfg.seed, 0x5eed);
    const double mid = 0.5 * (cfg.z_min + cfg.z_max), half = 0.5 * (cfg.z_max - cfg.z_min);
    for (int j = 0; j < cfg.grid_height; ++j) {
      for (int i = 0; i < cfg.grid_width; ++i) {
        const Vec2 w = node_world(i, j);
        double n = 0.75 * value_noise(relief_seed, w.x() / cfg.relief_period, w.y() / cfg.relief_period) +
                   0.25 * value_noise(relief_seed + 1, 2 * w.x() / cfg.relief_period,
                                      2 * w.y() / cfg.relief_period);
        heights_(i, j) = cfg.flat ? cfg.z_min : mid + half * std::clamp(n, -1.0, 1.0);
      }
    }
  }

  const SceneConfig& config() const { return cfg_; }
  const Grid<double>& heights() const { return heights_; }

  bool covers(double x, double y) const {
    return x >= cfg_.x_min && x <= cfg_.x_max && y >= cfg_.y_min && y <= cfg_.y_max;
  }

  /// Uniform cubic B-spline of the node grid (stays inside [z_min, z_max]).
  double height(double x, double y) const {
    double gx, gy;
    to_grid(x, y, gx, gy);
    const int ix = static_cast<int>(std::floor(gx)), iy = static_cast<int>(std::floor(gy));
    const double u = gx - ix, v = gy - iy;
    const auto bu = bspline_weights(u), bv = bspline_weights(v);
    double h = 0;
    for (int b = 0; b < 4; ++b) {
      const int yy = std::clamp(iy + b - 1, 0, heights_.height() - 1);
      double row = 0;
      for (int a = 0; a < 4; ++a) {
        const int xx = std::clamp(ix + a - 1, 0, heights_.width() - 1);
        row += bu[a] * heights_(xx, yy);
      }
      h += bv[b] * row;
    }
    return h;
  }

  Vec2 height_gradient(double x, double y) const {
    const double e = 1e-5;
    return {(height(x + e, y) - height(x - e, y)) / (2 * e), (height(x, y + e) - height(x, y - e)) / (2 * e)};
  }

  /// Multi-octave value-noise albedo in [0, 1].
  double albedo(double x, double y) const {
    double sum = 0, amp = 1, norm = 0, freq = 1.0 / cfg_.texture_period;
    const std::uint64_t tex_seed = hash_combine(cfg_.seed, 0x7e47);
    for (int o = 0; o < cfg_.texture_octaves; ++o) {
      sum += amp * value_noise(tex_seed + static_cast<std::uint64_t>(o), x * freq + 0.37 * o, y * freq + 0.71 * o);
      norm += amp;
      amp *= cfg_.texture_persistence;
      freq *= 2.0;
    }
    return std::clamp(0.5 + cfg_.texture_contrast * sum / norm, 0.0, 1.0);
  }

  /// Lambertian shading factor.
  double shading(double x, double y) const {
    const Vec2 g = height_gradient(x, y);
    const Vec3 n = Vec3(g.x(), g.y(), -1.0).normalized();
    return cfg_.ambient + (1.0 - cfg_.ambient) * std::max(0.0, n.dot(cfg_.light_dir));
  }

  double radiance(double x, double y) const { return albedo(x, y) * shading(x, y); }

  /// First intersection of the ray origin + t * dir (dir.z > 0) with the
  /// surface; returns t.
  std::optional<double> intersect(const Vec3& origin, const Vec3& dir) const {
    if (!(dir.z() > 1e-9)) return std::nullopt;
    auto f = [&](double t) {
      const Vec3 p = origin + t * dir;
      return p.z() - height(p.x(), p.y());
    };
    double t_lo = std::max(0.0, (cfg_.z_min - 1e-9 - origin.z()) / dir.z());
    const double t_hi = (cfg_.z_max + 1e-9 - origin.z()) / dir.z();
    if (!(t_hi > t_lo)) return std::nullopt;
    const int steps = 64;
    const double dt = (t_hi - t_lo) / steps;
    double f_lo = f(t_lo);
    if (f_lo >= 0) return std::nullopt;  // origin already behind the surface
    for (int s = 1; s <= steps; ++s) {
      const double t = t_lo + s * dt;
      const double ft = f(t);
      if (ft >= 0) {
        double a = t - dt, b = t;
        for (int it = 0; it < 60; ++it) {
          const double m = 0.5 * (a + b);
          (f(m) < 0 ? a : b) = m;
        }
        const double th = 0.5 * (a + b);
        const Vec3 p = origin + th * dir;
        if (!covers(p.x(), p.y())) return std::nullopt;
        return th;
      }
      f_lo = ft;
    }
    return std::nullopt;
  }

  bool operator==(const Scene& o) const { return heights_ == o.heights_ && cfg_.seed == o.cfg_.seed; }

 private:
  Vec2 node_world(int i, int j) const {
    return {cfg_.x_min + (cfg_.x_max - cfg_.x_min) * i / (cfg_.grid_width - 1),
            cfg_.y_min + (cfg_.y_max - cfg_.y_min) * j / (cfg_.grid_height - 1)};
  }
  void to_grid(double x, double y, double& gx, double& gy) const {
    gx = (x - cfg_.x_min) / (cfg_.x_max - cfg_.x_min) * (cfg_.grid_width - 1);
    gy = (y - cfg_.y_min) / (cfg_.y_max - cfg_.y_min) * (cfg_.grid_height - 1);
  }
  static std::array<double, 4> bspline_weights(double t) {
    const double t2 = t * t, t3 = t2 * t;
    return {(1 - 3 * t + 3 * t2 - t3) / 6.0, (4 - 6 * t2 + 3 * t3) / 6.0, (1 + 3 * t + 3 * t2 - 3 * t3) / 6.0,
            t3 / 6.0};
  }

  SceneConfig cfg_;
  Grid<double> heights_;
};

inline Scene build_scene(const SceneConfig& cfg) { return Scene(cfg); }

/// Camera intrinsics for a given image size (fov fixed by focal_ratio = fx / W).
inline Intrinsics make_intrinsics(int width, int height, double focal_ratio = 0.78) {
  Intrinsics k;
  k.width = width;
  k.height = height;
  k.fx = k.fy = focal_ratio * width;
  k.cx = 0.5 * width - 0.5;
  k.cy = 0.5 * height - 0.5;
  k.validate();
  return k;
}

// ---------------------------------------------------------------------------
// Appearance

/// Monotone intensity transform: knots(v^gamma) + offset + N(0, noise^2).
struct DomainAppearance {
  double gamma = 1.0;
  double offset = 0.0;
  double noise_sigma = 0.0;
  std::array<double, 4> curve{0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};  ///< values at 0, 1/3, 2/3, 1

  static DomainAppearance identity() { return {}; }

  void validate() const {
    if (!(gamma > 0) || !(noise_sigma >= 0)) throw SimulationError("appearance: gamma > 0, noise >= 0 required");
    for (int i = 0; i < 3; ++i)
      if (curve[i + 1] < curve[i]) throw SimulationError("appearance: colour curve must be monotone");
  }

  double apply_noiseless(double v) const {
    v = std::pow(std::clamp(v, 0.0, 1.0), gamma);
    const double s = v * 3.0;
    const int k = std::min(static_cast<int>(s), 2);
    const double a = s - k;
    return (1 - a) * curve[k] + a * curve[k + 1] + offset;
  }

  bool operator==(const DomainAppearance&) const = default;
};

/// Default virtual-domain look: the untouched render.
inline DomainAppearance default_virtual_appearance() { return DomainAppearance::identity(); }

/// Default real-domain look: darker, compressed contrast, sensor noise.
/// Darker or noisier than this and direct tracking at 32x24 starts to fail.
inline DomainAppearance default_real_appearance() {
  DomainAppearance a;
  a.gamma = 1.6;
  a.offset = 0.08;
  a.noise_sigma = 0.01;
  a.curve = {0.05, 0.25, 0.45, 0.7};
  return a;
}

struct RenderedView {
  Image image;
  DepthMap depth;
  double hit_fraction = 0.0;
};

inline std::uint64_t frame_stream(std::uint64_t seed, std::uint64_t frame) {
  return hash_combine(hash_combine(seed, 0xf4a3e), frame);
}

/// Ray-casts one view. `noise_seed` selects the appearance noise stream.
inline RenderedView render_frame(const Scene& scene, const Pose& camera_to_world, const Intrinsics& k,
                                 const DomainAppearance& appearance, std::uint64_t noise_seed = 0) {
  appearance.validate();
  RenderedView out;
  out.image = Image(k.width, k.height, 0.0);
  out.depth = DepthMap(k.width, k.height);
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::size_t hits = 0;
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) {
      const Vec3 dir_cam((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
      const Vec3 dir = camera_to_world.rotation * dir_cam;
      double value = 0.0;
      if (auto t = scene.intersect(camera_to_world.translation, dir)) {
        const Vec3 p = camera_to_world.translation + *t * dir;
        value = scene.radiance(p.x(), p.y());
        out.depth.values(u, v) = *t;  // dir_cam has unit z, so t is the depth
        out.depth.valid(u, v) = 1;
        ++hits;
      }
      value = appearance.apply_noiseless(value);
      if (appearance.noise_sigma > 0) value += appearance.noise_sigma * gauss(rng);
      out.image(u, v) = std::clamp(value, 0.0, 1.0);
    }
  }
  out.hit_fraction = static_cast<double>(hits) / static_cast<double>(k.width * k.height);
  return out;
}

/// Fraction of pixels whose central-difference gradient exceeds `threshold`
/// in a fronto-parallel view of the albedo.
inline double texture_gradient_coverage(const Scene& scene, const Intrinsics& k, double threshold = 0.5 / 255.0) {
  const auto& c = scene.config();
  const Pose pose(Mat3::Identity(), Vec3(0.5 * (c.x_min + c.x_max), 0.5 * (c.y_min + c.y_max), 0.0));
  const RenderedView view = render_frame(scene, pose, k, DomainAppearance::identity());
  std::size_t n = 0, total = 0;
  for (int y = 1; y + 1 < k.height; ++y) {
    for (int x = 1; x + 1 < k.width; ++x) {
      const double gx = 0.5 * (view.image(x + 1, y) - view.image(x - 1, y));
      const double gy = 0.5 * (view.image(x, y + 1) - view.image(x, y - 1));
      ++total;
      if (std::hypot(gx, gy) > threshold) ++n;
    }
  }
  return total ? static_cast<double>(n) / static_cast<double>(total) : 0.0;
}

// ---------------------------------------------------------------------------
// Trajectories

struct TrajectorySpec {
  int frames = 60;
  double speed = 0.15;         ///< scene units per frame (exact step length)
  double yaw_rate_max = 0.01;  ///< rad per frame
  Vec3 travel_direction = Vec3(1.0, 0.0, 0.1);  ///< camera frame; normalised on use
  Vec3 start = Vec3(0.0, 0.0, 0.0);
  std::uint64_t seed = 7;
};

/// Camera-to-world poses; consecutive camera centres are exactly `speed` apart.
inline std::vector<Pose> generate_trajectory(const TrajectorySpec& spec) {
  if (spec.frames < 1) throw SimulationError("trajectory: at least one frame required");
  std::mt19937_64 rng(hash_combine(spec.seed, 0x7a1));
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  const Vec3 dir = spec.travel_direction.normalized();
  std::vector<Pose> poses;
  double yaw = 0.0, rate = 0.0;
  Vec3 pos = spec.start;
  for (int i = 0; i < spec.frames; ++i) {
    const Mat3 r = Eigen::AngleAxisd(yaw, Vec3::UnitY()).toRotationMatrix();
    poses.emplace_back(r, pos);
    pos += spec.speed * (r * dir);
    rate = std::clamp(0.7 * rate + 0.3 * spec.yaw_rate_max * uni(rng), -spec.yaw_rate_max, spec.yaw_rate_max);
    yaw += rate;
  }
  return poses;
}

inline double path_length(const std::vector<Pose>& poses) {
  double len = 0;
  for (std::size_t i = 1; i < poses.size(); ++i) len += (poses[i].translation - poses[i - 1].translation).norm();
  return len;
}

// ---------------------------------------------------------------------------
// Sequences

/// What a training consumer may see: left images always, stereo partners
/// and disparity labels only in the virtual domain.
struct LearnerView {
  Domain domain = Domain::Virtual;
  StereoRig rig;
  const std::vector<Image>* left = nullptr;
  const std::vector<Image>* right = nullptr;            ///< null for real
  const std::vector<DisparityMap>* disparity = nullptr;  ///< null for real
  std::size_t size() const { return left ? left->size() : 0; }
};

struct SequenceBundle {
  Domain domain = Domain::Virtual;
  StereoRig rig;
  std::vector<Image> left;
  std::vector<Pose> gt_poses;  ///< camera-to-world
  std::vector<Image> right;                 ///< virtual only
  std::vector<DisparityMap> gt_disparity;   ///< virtual: training label; real: evaluation only
  std::vector<DepthMap> gt_depth;           ///< evaluation only

  std::size_t size() const { return left.size(); }

  LearnerView learner_view() const {
    LearnerView v;
    v.domain = domain;
    v.rig = rig;
    v.left = &left;
    if (domain == Domain::Virtual) {
      v.right = &right;
      v.disparity = &gt_disparity;
    }
    return v;
  }
};

struct SequenceConfig {
  SceneConfig scene;
  TrajectorySpec trajectory;
  DomainAppearance appearance;
  double min_hit_fraction = 0.5;
};

namespace detail {

inline DisparityMap depth_map_to_disparity(const DepthMap& depth, const StereoRig& rig) {
  return depth_to_disparity(depth, rig);
}

inline SequenceBundle render_sequence(const Scene& scene, const std::vector<Pose>& poses, const StereoRig& rig,
                                      const DomainAppearance& appearance, Domain domain,
                                      double min_hit_fraction, std::uint64_t noise_seed) {
  rig.validate();
  SequenceBundle b;
  b.domain = domain;
  b.rig = rig;
  b.gt_poses = poses;
  const Pose left_to_right = Pose(Mat3::Identity(), Vec3(rig.baseline, 0, 0));
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const std::uint64_t stream = frame_stream(noise_seed, i);
    RenderedView lv = render_frame(scene, poses[i], rig.intrinsics, appearance, stream);
    if (lv.hit_fraction < min_hit_fraction)
      throw SimulationError("frame " + std::to_string(i) + ": only " + std::to_string(lv.hit_fraction) +
                            " of pixels see the scene");
    b.gt_disparity.push_back(depth_to_disparity(lv.depth, rig));
    b.gt_depth.push_back(std::move(lv.depth));
    b.left.push_back(std::move(lv.image));
    if (domain == Domain::Virtual) {
      RenderedView rv = render_frame(scene, poses[i] * left_to_right, rig.intrinsics, appearance,
                                     hash_combine(stream, 0x6e7));
      b.right.push_back(std::move(rv.image));
    }
  }
  return b;
}

}  // namespace detail

/// Stereo sequence with right images, gt disparity and metric baseline.
inline SequenceBundle generate_virtual_sequence(const Scene& scene, const TrajectorySpec& traj, const StereoRig& rig,
                                                const DomainAppearance& appearance, int n,
                                                double min_hit_fraction = 0.5) {
  if (n < 3) throw SimulationError("generate_virtual_sequence: at least 3 frames required");
  TrajectorySpec t = traj;
  t.frames = n;
  return detail::render_sequence(scene, generate_trajectory(t), rig, appearance, Domain::Virtual, min_hit_fraction,
                                 hash_combine(scene.config().seed, t.seed));
}

/// Monocular sequence; the bundle keeps gt for evaluation but its learner
/// view exposes left images only.
inline SequenceBundle generate_real_sequence(const Scene& scene, const TrajectorySpec& traj, const StereoRig& rig,
                                             const DomainAppearance& appearance, int n,
                                             const DomainAppearance& virtual_appearance,
                                             const std::vector<std::uint64_t>& virtual_scene_seeds,
                                             double min_hit_fraction = 0.5) {
  if (n < 3) throw SimulationError("generate_real_sequence: at least 3 frames required");
  if (appearance == virtual_appearance)
    throw SimulationError("generate_real_sequence: real appearance must differ from the virtual one");
  for (std::uint64_t s : virtual_scene_seeds)
    if (s == scene.config().seed) throw SimulationError("generate_real_sequence: scene seed reused from virtual split");
  TrajectorySpec t = traj;
  t.frames = n;
  return detail::render_sequence(scene, generate_trajectory(t), rig, appearance, Domain::Real, min_hit_fraction,
                                 hash_combine(scene.config().seed, t.seed));
}

/// Pearson chi-square distance between two intensity histograms.
inline double histogram_chi_square(const std::vector<Image>& a, const std::vector<Image>& b, int bins = 32) {
  std::vector<double> ha(bins, 0.0), hb(bins, 0.0);
  double na = 0, nb = 0;
  auto fill = [&](const std::vector<Image>& imgs, std::vector<double>& h, double& n) {
    for (const Image& im : imgs)
      for (double v : im.data()) {
        h[std::clamp(static_cast<int>(v * bins), 0, bins - 1)] += 1;
        n += 1;
      }
  };
  fill(a, ha, na);
  fill(b, hb, nb);
  double chi = 0;
  for (int i = 0; i < bins; ++i) {
    const double pa = ha[i] / na, pb = hb[i] / nb;
    if (pa + pb > 0) chi += (pa - pb) * (pa - pb) / (pa + pb);
  }
  return 0.5 * chi;
}

// ---------------------------------------------------------------------------
// Dataset directories

inline std::string frame_name(std::size_t i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.%s", i, ext);
  return buf;
}

/// Writes the documented layout. Real-domain ground truth (poses are the
/// KITTI-style reference; disparity under eval/) is for evaluation only.
inline void write_dataset(const std::filesystem::path& dir, const SequenceBundle& b) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  for (std::size_t i = 0; i < b.size(); ++i) io::write_pgm(dir / "images" / frame_name(i, "pgm"), b.left[i]);
  if (b.domain == Domain::Virtual) {
    for (std::size_t i = 0; i < b.right.size(); ++i)
      io::write_pgm(dir / "right" / frame_name(i, "pgm"), b.right[i]);
    for (std::size_t i = 0; i < b.gt_disparity.size(); ++i)
      io::write_pfm(dir / "disp_gt" / frame_name(i, "pfm"), b.gt_disparity[i]);
  } else {
    for (std::size_t i = 0; i < b.gt_disparity.size(); ++i)
      io::write_pfm(dir / "eval" / "disp_gt" / frame_name(i, "pfm"), b.gt_disparity[i]);
  }
  io::write_kitti_poses(dir / "poses_gt.txt", b.gt_poses);
  io::write_calib(dir / "calib.txt", b.rig);
  io::write_text(dir / "domain.txt", to_string(b.domain) + "\n");
}

/// Loads a dataset directory. With `with_evaluation_data` false, real-domain
/// ground truth is left out so the bundle matches what a learner may see.
inline SequenceBundle read_dataset(const std::filesystem::path& dir, bool with_evaluation_data = true) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir / "domain.txt"))
    throw SimulationError("no dataset at " + dir.string() + " (missing domain.txt; run gen-data first)");
  SequenceBundle b;
  std::string dom = io::read_text(dir / "domain.txt");
  while (!dom.empty() && std::isspace(static_cast<unsigned char>(dom.back()))) dom.pop_back();
  b.domain = domain_from_string(dom);
  for (std::size_t i = 0;; ++i) {
    const fs::path p = dir / "images" / frame_name(i, "pgm");
    if (!fs::exists(p)) break;
    b.left.push_back(io::read_pgm(p));
  }
  if (b.left.empty()) throw SimulationError("dataset " + dir.string() + " has no images");
  b.rig = io::read_calib(dir / "calib.txt", b.left[0].width(), b.left[0].height());
  const bool virt = b.domain == Domain::Virtual;
  if (virt || with_evaluation_data) b.gt_poses = io::read_kitti_poses(dir / "poses_gt.txt");
  if (virt) {
    for (std::size_t i = 0; i < b.size(); ++i) {
      b.right.push_back(io::read_pgm(dir / "right" / frame_name(i, "pgm")));
      b.gt_disparity.push_back(io::read_pfm(dir / "disp_gt" / frame_name(i, "pfm")));
    }
  } else if (with_evaluation_data && fs::exists(dir / "eval" / "disp_gt")) {
    for (std::size_t i = 0; i < b.size(); ++i)
      b.gt_disparity.push_back(io::read_pfm(dir / "eval" / "disp_gt" / frame_name(i, "pfm")));
  }
  for (const auto& d : b.gt_disparity) b.gt_depth.push_back(disparity_to_depth(d, b.rig));
  return b;
}

}  // namespace vrvo::sim
