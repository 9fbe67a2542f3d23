#pragma once

// Trajectory and depth metrics: Umeyama alignment, ATE, path-length indexed
// relative errors, median depth scaling and multi-run aggregation, plus CSV
// and SVG writers.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "vrvo/geometry.hpp"
#include "vrvo/io.hpp"

namespace vrvo::eval {

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Camera-to-world poses with strictly increasing frame ids.
struct Trajectory {
  std::vector<int> ids;
  std::vector<Pose> poses;

  Trajectory() = default;
  explicit Trajectory(std::vector<Pose> p) : poses(std::move(p)) {
    ids.resize(poses.size());
    std::iota(ids.begin(), ids.end(), 0);
  }
  Trajectory(std::vector<int> i, std::vector<Pose> p) : ids(std::move(i)), poses(std::move(p)) { validate(); }

  std::size_t size() const { return poses.size(); }

  void validate() const {
    if (ids.size() != poses.size()) throw EvaluationError("Trajectory: ids and poses differ in length");
    for (std::size_t i = 1; i < ids.size(); ++i)
      if (ids[i] <= ids[i - 1]) throw EvaluationError("Trajectory: frame ids must be strictly increasing");
    for (const Pose& p : poses)
      if (!p.rotation.allFinite() || !p.translation.allFinite()) throw EvaluationError("Trajectory: non-finite pose");
  }

  std::vector<Vec3> positions() const {
    std::vector<Vec3> out;
    out.reserve(poses.size());
    for (const Pose& p : poses) out.push_back(p.translation);
    return out;
  }

  /// Cumulative path length at each pose.
  std::vector<double> distances() const {
    std::vector<double> d(poses.size(), 0.0);
    for (std::size_t i = 1; i < poses.size(); ++i)
      d[i] = d[i - 1] + (poses[i].translation - poses[i - 1].translation).norm();
    return d;
  }
};

enum class Alignment { None, Rigid, Similarity };

inline std::string to_string(Alignment a) {
  switch (a) {
    case Alignment::None: return "none";
    case Alignment::Rigid: return "6dof";
    case Alignment::Similarity: return "7dof";
  }
  return "?";
}

inline Alignment parse_alignment(const std::string& s) {
  if (s == "none") return Alignment::None;
  if (s == "6dof") return Alignment::Rigid;
  if (s == "7dof") return Alignment::Similarity;
  throw EvaluationError("unknown alignment '" + s + "' (expected none, 6dof or 7dof)");
}

/// ref ~ scale * rotation * est + translation.
struct SimilarityTransform {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return scale * rotation * p + translation; }
  Pose apply(const Pose& p) const { return {rotation * p.rotation, apply(p.translation)}; }
  Trajectory apply(const Trajectory& t) const {
    Trajectory out = t;
    for (Pose& p : out.poses) p = apply(p);
    return out;
  }
};

struct AlignmentResult {
  SimilarityTransform transform;
  Trajectory aligned;
  double residual_rms = 0;
};

namespace detail {

inline void require_matching(const Trajectory& est, const Trajectory& ref) {
  if (est.ids != ref.ids) throw EvaluationError("trajectories have different frame ids");
}

inline double rms(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]).squaredNorm();
  return std::sqrt(s / static_cast<double>(a.size()));
}

}  // namespace detail

/// Least-squares similarity (or rigid) fit of estimate positions onto
/// reference positions via the SVD of their cross-covariance.
inline SimilarityTransform umeyama(const std::vector<Vec3>& est, const std::vector<Vec3>& ref, bool with_scale) {
  const std::size_t n = est.size();
  if (n != ref.size()) throw EvaluationError("umeyama: point sets differ in size");
  if (n < 3) throw EvaluationError("umeyama: at least 3 positions required");
  Vec3 me = Vec3::Zero(), mr = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    me += est[i];
    mr += ref[i];
  }
  me /= static_cast<double>(n);
  mr /= static_cast<double>(n);
  Mat3 cov = Mat3::Zero(), spread = Mat3::Zero();
  double var_e = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 de = est[i] - me, dr = ref[i] - mr;
    cov += dr * de.transpose();
    spread += de * de.transpose();
    var_e += de.squaredNorm();
  }
  cov /= static_cast<double>(n);
  var_e /= static_cast<double>(n);
  Eigen::JacobiSVD<Mat3> rank_svd(spread);
  const auto sv = rank_svd.singularValues();
  if (!(sv(0) > 0) || sv(1) <= 1e-12 * sv(0))
    throw EvaluationError("umeyama: positions are collinear or coincident (rank < 2)");
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 s = Mat3::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) s(2, 2) = -1;
  SimilarityTransform out;
  out.rotation = svd.matrixU() * s * svd.matrixV().transpose();
  out.scale = with_scale ? (svd.singularValues().asDiagonal() * s).trace() / var_e : 1.0;
  out.translation = mr - out.scale * out.rotation * me;
  return out;
}

inline AlignmentResult align_umeyama(const Trajectory& est, const Trajectory& ref, bool with_scale) {
  detail::require_matching(est, ref);
  AlignmentResult r;
  r.transform = umeyama(est.positions(), ref.positions(), with_scale);
  r.aligned = r.transform.apply(est);
  r.residual_rms = detail::rms(r.aligned.positions(), ref.positions());
  return r;
}

inline Trajectory align(const Trajectory& est, const Trajectory& ref, Alignment a, SimilarityTransform* used = nullptr) {
  if (a == Alignment::None) {
    detail::require_matching(est, ref);
    if (used) *used = {};
    return est;
  }
  AlignmentResult r = align_umeyama(est, ref, a == Alignment::Similarity);
  if (used) *used = r.transform;
  return r.aligned;
}

/// Root-mean-square position error after the requested alignment.
inline double ate(const Trajectory& est, const Trajectory& ref, Alignment a) {
  detail::require_matching(est, ref);
  if (est.size() == 0) throw EvaluationError("ate: empty trajectories");
  return detail::rms(align(est, ref, a).positions(), ref.positions());
}

struct SublengthError {
  double length = 0;
  double t_err = 0;  ///< percent
  double r_err = 0;  ///< degrees per 100 length units
  std::size_t segments = 0;
};

struct RelativeErrors {
  double t_err = 0;  ///< percent, mean over all segments
  double r_err = 0;  ///< degrees per 100 units
  std::vector<SublengthError> table;
  std::vector<double> skipped_lengths;  ///< longer than the reference path
};

inline std::vector<double> default_sublengths() { return {5, 10, 15, 20, 25, 30, 35, 40}; }

/// Path-length indexed relative pose errors: for every start frame and
/// sublength L, the first frame whose travelled distance exceeds L closes a
/// segment; the segment's relative-pose discrepancy is divided by L.
inline RelativeErrors relative_errors(const Trajectory& est, const Trajectory& ref,
                                      const std::vector<double>& sublengths = default_sublengths(),
                                      std::size_t step = 1) {
  detail::require_matching(est, ref);
  if (step == 0) throw EvaluationError("relative_errors: step must be >= 1");
  const std::vector<double> dist = ref.distances();
  RelativeErrors out;
  double t_sum = 0, r_sum = 0;
  std::size_t total = 0;
  for (double len : sublengths) {
    if (!(len > 0)) throw EvaluationError("relative_errors: sublengths must be positive");
    SublengthError row;
    row.length = len;
    for (std::size_t first = 0; first < ref.size(); first += step) {
      std::size_t last = first;
      while (last < ref.size() && dist[last] <= dist[first] + len) ++last;
      if (last >= ref.size()) break;
      const Pose d_ref = ref.poses[first].inverse() * ref.poses[last];
      const Pose d_est = est.poses[first].inverse() * est.poses[last];
      const Pose err = d_est.inverse() * d_ref;
      const double t = err.translation.norm() / len;
      const double r = so3_log(err.rotation).norm() / len;
      row.t_err += t;
      row.r_err += r;
      ++row.segments;
    }
    if (row.segments == 0) {
      out.skipped_lengths.push_back(len);
      continue;
    }
    t_sum += row.t_err;
    r_sum += row.r_err;
    total += row.segments;
    row.t_err = 100.0 * row.t_err / row.segments;
    row.r_err = 100.0 * (180.0 / M_PI) * row.r_err / row.segments;
    out.table.push_back(row);
  }
  if (total > 0) {
    out.t_err = 100.0 * t_sum / total;
    out.r_err = 100.0 * (180.0 / M_PI) * r_sum / total;
  }
  return out;
}

/// median(gt) / median(pred) over pixels valid in both, pooled over frames.
inline double depth_scale_ratio(const std::vector<DepthMap>& predicted, const std::vector<DepthMap>& gt) {
  if (predicted.size() != gt.size()) throw EvaluationError("depth_scale_ratio: frame counts differ");
  std::vector<double> p, g;
  for (std::size_t f = 0; f < gt.size(); ++f) {
    if (predicted[f].values.size() != gt[f].values.size())
      throw EvaluationError("depth_scale_ratio: map sizes differ");
    for (std::size_t i = 0; i < gt[f].values.size(); ++i) {
      if (!predicted[f].valid.data()[i] || !gt[f].valid.data()[i]) continue;
      p.push_back(predicted[f].values.data()[i]);
      g.push_back(gt[f].values.data()[i]);
    }
  }
  if (p.empty()) throw EvaluationError("depth_scale_ratio: no overlapping valid pixels");
  auto median = [](std::vector<double> v) {
    const std::size_t m = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + m, v.end());
    double hi = v[m];
    if (v.size() % 2) return hi;
    return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + m));
  };
  return median(g) / median(p);
}

/// Mean absolute disparity error over pixels valid in both maps.
inline double disparity_mae(const std::vector<DisparityMap>& predicted, const std::vector<DisparityMap>& gt) {
  if (predicted.size() != gt.size()) throw EvaluationError("disparity_mae: frame counts differ");
  double s = 0;
  std::size_t n = 0;
  for (std::size_t f = 0; f < gt.size(); ++f)
    for (std::size_t i = 0; i < gt[f].values.size(); ++i) {
      if (!predicted[f].valid.data()[i] || !gt[f].valid.data()[i]) continue;
      s += std::abs(predicted[f].values.data()[i] - gt[f].values.data()[i]);
      ++n;
    }
  if (n == 0) throw EvaluationError("disparity_mae: no overlapping valid pixels");
  return s / static_cast<double>(n);
}

/// Umeyama scale per consecutive chunk; drift is flagged when the chunk
/// scales spread by more than `tolerance` relative to their mean.
struct ScaleDrift {
  std::vector<double> segment_scales;
  double spread = 0;
  bool drifting = false;
};

inline ScaleDrift scale_drift(const Trajectory& est, const Trajectory& ref, int segments = 4, double tolerance = 0.05) {
  detail::require_matching(est, ref);
  ScaleDrift out;
  const std::size_t n = est.size();
  const auto pe = est.positions(), pr = ref.positions();
  for (int s = 0; s < segments; ++s) {
    const std::size_t a = n * s / segments, b = n * (s + 1) / segments;
    if (b - a < 3) continue;
    try {
      out.segment_scales.push_back(umeyama({pe.begin() + a, pe.begin() + b}, {pr.begin() + a, pr.begin() + b}, true).scale);
    } catch (const EvaluationError&) {
      // Straight chunks have no well-defined rotation; skip them.
    }
  }
  if (out.segment_scales.size() >= 2) {
    const auto [lo, hi] = std::minmax_element(out.segment_scales.begin(), out.segment_scales.end());
    const double mean = std::accumulate(out.segment_scales.begin(), out.segment_scales.end(), 0.0) /
                        static_cast<double>(out.segment_scales.size());
    out.spread = (*hi - *lo) / mean;
    out.drifting = out.spread > tolerance;
  }
  return out;
}

struct MetricReport {
  double t_err = 0;
  double r_err = 0;
  double ate = 0;
  Alignment alignment = Alignment::Similarity;
  double scale = 1.0;  ///< similarity scale mapping estimate onto reference, whatever the alignment
  std::vector<SublengthError> table;
  std::vector<double> skipped_lengths;
};

/// Align (if requested), then ATE and relative errors on the aligned estimate.
inline MetricReport evaluate(const Trajectory& est, const Trajectory& ref, Alignment a,
                             const std::vector<double>& sublengths = default_sublengths()) {
  MetricReport m;
  m.alignment = a;
  SimilarityTransform t;
  const Trajectory aligned = align(est, ref, a, &t);
  m.scale = a == Alignment::Similarity ? t.scale : align_umeyama(est, ref, true).transform.scale;
  m.ate = detail::rms(aligned.positions(), ref.positions());
  RelativeErrors re = relative_errors(aligned, ref, sublengths);
  m.t_err = re.t_err;
  m.r_err = re.r_err;
  m.table = re.table;
  m.skipped_lengths = re.skipped_lengths;
  return m;
}

/// Sub-trajectory of `full` restricted to ids present in `subset_ids`.
inline Trajectory restrict_to(const Trajectory& full, const std::vector<int>& subset_ids) {
  Trajectory out;
  std::size_t j = 0;
  for (std::size_t i = 0; i < full.size() && j < subset_ids.size(); ++i) {
    if (full.ids[i] == subset_ids[j]) {
      out.ids.push_back(full.ids[i]);
      out.poses.push_back(full.poses[i]);
      ++j;
    }
  }
  if (j != subset_ids.size()) throw EvaluationError("restrict_to: ids missing from reference");
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation

struct AggregateRow {
  std::string metric;
  double mean = 0;
  double std = 0;  ///< sample standard deviation (n - 1)
  std::size_t runs = 0;
};

inline std::string format_pm(double mean, double std, int digits = 3) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << mean << "$\\pm$" << std;
  return ss.str();
}

/// Mean and sample standard deviation of every metric across runs. Metrics
/// are keyed by name; each run must report the same set.
inline std::vector<AggregateRow> aggregate_runs(const std::vector<std::map<std::string, double>>& runs) {
  if (runs.size() < 2) throw EvaluationError("aggregate_runs: at least 2 runs required");
  std::vector<AggregateRow> rows;
  for (const auto& [name, unused] : runs.front()) {
    (void)unused;
    AggregateRow row;
    row.metric = name;
    row.runs = runs.size();
    std::vector<double> v;
    for (const auto& r : runs) {
      auto it = r.find(name);
      if (it == r.end()) throw EvaluationError("aggregate_runs: metric '" + name + "' missing in a run");
      v.push_back(it->second);
    }
    row.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - row.mean) * (x - row.mean);
    row.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    rows.push_back(row);
  }
  return rows;
}

inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// ---------------------------------------------------------------------------
// Output

inline std::string metrics_csv(const MetricReport& m) {
  std::ostringstream ss;
  ss << std::setprecision(10);
  ss << "metric,value\n";
  ss << "t_err_percent," << m.t_err << "\n";
  ss << "r_err_deg_per_100," << m.r_err << "\n";
  ss << "ate," << m.ate << "\n";
  ss << "alignment," << to_string(m.alignment) << "\n";
  ss << "scale," << m.scale << "\n";
  ss << "\nsublength,t_err_percent,r_err_deg_per_100,segments\n";
  for (const auto& r : m.table) ss << r.length << ',' << r.t_err << ',' << r.r_err << ',' << r.segments << "\n";
  return ss.str();
}

/// Top-down (x, z) overlay of reference and estimates as standalone SVG.
inline std::string trajectory_svg(const Trajectory& ref, const std::vector<std::pair<std::string, Trajectory>>& estimates,
                                  int size = 480) {
  double xmin = 1e300, xmax = -1e300, zmin = 1e300, zmax = -1e300;
  auto extend = [&](const Trajectory& t) {
    for (const Pose& p : t.poses) {
      xmin = std::min(xmin, p.translation.x());
      xmax = std::max(xmax, p.translation.x());
      zmin = std::min(zmin, p.translation.z());
      zmax = std::max(zmax, p.translation.z());
    }
  };
  extend(ref);
  for (const auto& e : estimates) extend(e.second);
  if (xmin > xmax) xmin = xmax = zmin = zmax = 0;
  const double span = std::max({xmax - xmin, zmax - zmin, 1e-9});
  const double margin = 20, scale = (size - 2 * margin) / span;
  auto polyline = [&](const Trajectory& t, const std::string& colour, const std::string& dash) {
    std::ostringstream ss;
    ss << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\"" << dash << " points=\"";
    ss << std::fixed << std::setprecision(2);
    for (const Pose& p : t.poses)
      ss << margin + (p.translation.x() - xmin) * scale << ',' << size - margin - (p.translation.z() - zmin) * scale
         << ' ';
    ss << "\"/>\n";
    return ss.str();
  };
  static const char* colours[] = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"};
  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
      << "\" viewBox=\"0 0 " << size << ' ' << size << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << polyline(ref, "black", " stroke-dasharray=\"6,4\"");
  svg << "<text x=\"10\" y=\"16\" font-size=\"12\" fill=\"black\">ground truth</text>\n";
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    const char* c = colours[i % 5];
    svg << polyline(estimates[i].second, c, "");
    svg << "<text x=\"10\" y=\"" << 32 + 16 * i << "\" font-size=\"12\" fill=\"" << c << "\">" << estimates[i].first
        << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

inline Trajectory read_trajectory(const std::filesystem::path& path) { return Trajectory(io::read_kitti_poses(path)); }

}  // namespace vrvo::eval
