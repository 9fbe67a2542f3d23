#pragma once

// Training objectives over NCHW tapes: photometric reprojection (SSIM + L1),
// edge-aware smoothness, disparity supervision, stereo consistency, the
// WGAN-style adversarial pair with its gradient penalty, reconstruction, the
// aggregate task loss and the backend-pose regularizer.

#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vrvo/diffops.hpp"
#include "vrvo/geometry.hpp"
#include "vrvo/networks.hpp"

namespace vrvo::losses {

using ad::Shape;
using ad::Tape;
using ad::TensorBuffer;
using ad::Var;

class DegenerateBatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossWeights {
  double lambda_p = 1.0;
  double lambda_s = 0.1;
  double lambda_gt = 1.0;
  double lambda_sc = 1.0;
  double lambda_g = 10.0;
  double lambda_r = 10.0;
  double lambda_p_star = 0.01;
  double alpha_ssim = 0.85;

  void validate() const {
    for (double w : {lambda_p, lambda_s, lambda_gt, lambda_sc, lambda_g, lambda_r, lambda_p_star})
      if (!(w >= 0)) throw std::invalid_argument("LossWeights: weights must be >= 0");
    if (!(alpha_ssim >= 0 && alpha_ssim <= 1)) throw std::invalid_argument("LossWeights: alpha must be in [0, 1]");
  }
  bool operator==(const LossWeights&) const = default;
};

constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

/// Per-pixel alpha (1 - SSIM) / 2 + (1 - alpha) |a - b| with 3x3 windows.
inline Var pair_photometric(const Var& a, const Var& b, double alpha = 0.85) {
  if (!(a.shape() == b.shape()))
    throw ad::ShapeError("pair_photometric: shapes differ " + a.shape().str() + " vs " + b.shape().str());
  Var l1 = ad::abs(ad::sub(a, b));
  if (alpha == 0.0) return l1;
  Var mu_a = ad::box3(a), mu_b = ad::box3(b);
  Var sigma_a = ad::sub(ad::box3(ad::square(a)), ad::square(mu_a));
  Var sigma_b = ad::sub(ad::box3(ad::square(b)), ad::square(mu_b));
  Var sigma_ab = ad::sub(ad::box3(ad::mul(a, b)), ad::mul(mu_a, mu_b));
  Var num = ad::mul(ad::add_scalar(ad::mul_scalar(ad::mul(mu_a, mu_b), 2.0), kSsimC1),
                    ad::add_scalar(ad::mul_scalar(sigma_ab, 2.0), kSsimC2));
  Var den = ad::mul(ad::add_scalar(ad::add(ad::square(mu_a), ad::square(mu_b)), kSsimC1),
                    ad::add_scalar(ad::add(sigma_a, sigma_b), kSsimC2));
  Var dssim = ad::mul_scalar(ad::sub(a.tape()->scalar(1.0), ad::div(num, den)), 0.5);
  return ad::add(ad::mul_scalar(dssim, alpha), ad::mul_scalar(l1, 1.0 - alpha));
}

/// Sum of `map` over pixels where `mask` is 1, divided by the mask count.
inline Var masked_mean(const Var& map, const Var& mask, std::size_t* count_out = nullptr) {
  double count = 0;
  for (double m : mask.value()) count += m;
  if (count_out) *count_out = static_cast<std::size_t>(count);
  if (count <= 0) throw DegenerateBatchError("masked_mean: no valid pixels in batch");
  return ad::mul_scalar(ad::sum(ad::mul(map, mask)), 1.0 / count);
}

/// Where `mask` is 0 the warped image takes the reference intensity, so
/// samples that left the source frame do not disturb the SSIM windows of
/// their valid neighbours.
inline Var fill_invalid(const Var& warped, const Var& reference, const Var& mask) {
  TensorBuffer inv(mask.shape());
  for (std::size_t i = 0; i < inv.numel(); ++i) inv.value[i] = 1.0 - mask.value()[i];
  return ad::add(ad::mul(warped, mask), ad::mul(reference, mask.tape()->constant(std::move(inv))));
}

struct TemporalPhotometric {
  Var loss;                 ///< scalar
  Var per_pixel;            ///< min over branches (invalid pixels hold a large constant)
  Var branch_prev, branch_next;  ///< per-branch maps, invalid pixels hold a large constant
  Var valid_any;            ///< 1 where at least one branch is valid
  std::size_t valid_pixels = 0;
};

constexpr double kInvalidPhotometric = 1e3;

/// Reprojects I_L into both temporal neighbours using depth fb / D_L and
/// the poses target -> neighbour (pose vectors, (N, 6, 1, 1)), and averages
/// the per-pixel minimum of the two photometric maps over pixels valid in at
/// least one branch. `focal_baseline` is fx * t_b of the virtual rig for both
/// domains.
inline TemporalPhotometric temporal_photometric(const Var& target, const Var& prev, const Var& next,
                                                const Var& disparity, const Var& pose_to_prev,
                                                const Var& pose_to_next, const Intrinsics& k, double focal_baseline,
                                                double alpha = 0.85) {
  const Shape s = target.shape();
  if (!(prev.shape() == s) || !(next.shape() == s) || !(disparity.shape() == s))
    throw ad::ShapeError("temporal_photometric: image/disparity shapes differ");
  if (s.w != k.width || s.h != k.height) throw ad::ShapeError("temporal_photometric: intrinsics do not match images");
  TemporalPhotometric out;
  auto branch = [&](const Var& source, const Var& pose) {
    Var coords = ad::reproject_coords(disparity, pose, k, focal_baseline);
    Var mask = ad::sample_mask(coords, s.w, s.h);
    Var warped = fill_invalid(ad::sample_grid(source, coords), target, mask);
    Var e = pair_photometric(target, warped, alpha);
    // Invalid pixels carry a large constant so the min picks the other branch.
    TensorBuffer fill(mask.shape());
    for (std::size_t i = 0; i < fill.numel(); ++i) fill.value[i] = kInvalidPhotometric * (1.0 - mask.value()[i]);
    Var penalty = target.tape()->constant(std::move(fill));
    return std::make_pair(ad::add(ad::mul(e, mask), penalty), mask);
  };
  auto [ep, mp] = branch(prev, pose_to_prev);
  auto [en, mn] = branch(next, pose_to_next);
  out.branch_prev = ep;
  out.branch_next = en;
  out.per_pixel = ad::min2(ep, en);
  TensorBuffer any(mp.shape());
  for (std::size_t i = 0; i < any.numel(); ++i) any.value[i] = std::max(mp.value()[i], mn.value()[i]);
  out.valid_any = target.tape()->constant(std::move(any));
  try {
    out.loss = masked_mean(out.per_pixel, out.valid_any, &out.valid_pixels);
  } catch (const DegenerateBatchError&) {
    throw DegenerateBatchError("temporal_photometric: every pixel reprojects outside both neighbours");
  }
  return out;
}

/// Edge-aware smoothness: mean over both axes and pixels of
/// |dD| exp(-|dI|), forward differences.
inline Var smoothness(const Var& disparity, const Var& image) {
  const Shape s = disparity.shape();
  if (s.h != image.shape().h || s.w != image.shape().w || s.n != image.shape().n)
    throw ad::ShapeError("smoothness: spatial dims differ " + s.str() + " vs " + image.shape().str());
  auto dx = [](const Var& v) {
    const Shape q = v.shape();
    return ad::sub(ad::crop(v, 1, 0, q.w - 1, q.h), ad::crop(v, 0, 0, q.w - 1, q.h));
  };
  auto dy = [](const Var& v) {
    const Shape q = v.shape();
    return ad::sub(ad::crop(v, 0, 1, q.w, q.h - 1), ad::crop(v, 0, 0, q.w, q.h - 1));
  };
  Var tx = ad::mean(ad::mul(ad::abs(dx(disparity)), ad::exp(ad::mul_scalar(ad::abs(dx(image)), -1.0))));
  Var ty = ad::mean(ad::mul(ad::abs(dy(disparity)), ad::exp(ad::mul_scalar(ad::abs(dy(image)), -1.0))));
  return ad::mul_scalar(ad::add(tx, ty), 0.5);
}

/// Mean |D_pred - D_gt| over mask.
inline Var disparity_supervision(const Var& predicted, const Var& ground_truth, const Var& mask) {
  if (!(predicted.shape() == ground_truth.shape()) || !(mask.shape() == predicted.shape()))
    throw ad::ShapeError("disparity_supervision: shapes differ");
  try {
    return masked_mean(ad::abs(ad::sub(predicted, ground_truth)), mask);
  } catch (const DegenerateBatchError&) {
    throw DegenerateBatchError("disparity_supervision: empty ground-truth mask");
  }
}

/// Photometric error between I_L and I_R sampled at (x - d, y); samples
/// outside the right image are masked.
inline Var stereo_consistency(const Var& left, const Var& right, const Var& disparity, double alpha = 0.85,
                              std::size_t* valid_out = nullptr) {
  Var coords = ad::shift_coords_x(disparity, -1.0);
  Var mask = ad::sample_mask(coords, right.shape().w, right.shape().h);
  Var warped = fill_invalid(ad::sample_grid(right, coords), left, mask);
  return masked_mean(pair_photometric(left, warped, alpha), mask, valid_out);
}

// ---------------------------------------------------------------------------
// Adversarial pair

struct AdversarialResult {
  Var l_adv;                   ///< mean M(F_r) - mean M(F_v), on the tape
  double l_gp = 0;             ///< (||grad_F M(F~)|| - 1)^2, batch mean
  std::vector<double> epsilon; ///< interpolation weight per sample
};

/// Interpolated features eps F_r + (1 - eps) F_v per sample.
inline ad::TensorBuffer interpolate_features(const ad::TensorBuffer& real, const ad::TensorBuffer& virt,
                                             const std::vector<double>& eps) {
  ad::TensorBuffer out(real.shape);
  const std::size_t per = real.numel() / static_cast<std::size_t>(real.shape.n);
  for (int n = 0; n < real.shape.n; ++n)
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t j = n * per + i;
      out.value[j] = eps[n] * real.value[j] + (1 - eps[n]) * virt.value[j];
    }
  return out;
}

/// Gradient penalty of a critic at fixed interpolated features. Any type
/// with `sample_gradient_norm(features, n)` works.
template <class Critic>
double gradient_penalty(const Critic& critic, const ad::TensorBuffer& interpolated) {
  double acc = 0;
  for (int n = 0; n < interpolated.shape.n; ++n) {
    const double g = critic.sample_gradient_norm(interpolated, n);
    acc += (g - 1) * (g - 1);
  }
  return acc / interpolated.shape.n;
}

/// Central-difference gradient of the penalty w.r.t. every critic parameter.
inline std::vector<double> gradient_penalty_param_grad(nn::Discriminator& critic,
                                                       const ad::TensorBuffer& interpolated, double step = 1e-6) {
  std::vector<double> grad;
  for (auto& p : critic.params().params()) {
    for (double& v : p.tensor->value) {
      const double orig = v;
      v = orig + step;
      const double fp = gradient_penalty(critic, interpolated);
      v = orig - step;
      const double fm = gradient_penalty(critic, interpolated);
      v = orig;
      grad.push_back((fp - fm) / (2 * step));
    }
  }
  return grad;
}

/// L_adv on the tape plus L_gp at eps-interpolated features. `critic_trainable`
/// controls whether the critic's parameters receive gradients from L_adv.
inline AdversarialResult adversarial_losses(Tape& tape, const Var& real_features, const Var& virtual_features,
                                            const nn::Discriminator& critic, std::mt19937_64& rng,
                                            bool critic_trainable) {
  if (!(real_features.shape() == virtual_features.shape()))
    throw ad::ShapeError("adversarial_losses: feature shapes differ " + real_features.shape().str() + " vs " +
                         virtual_features.shape().str());
  AdversarialResult r;
  r.l_adv = ad::sub(ad::mean(critic.forward(tape, real_features, critic_trainable)),
                    ad::mean(critic.forward(tape, virtual_features, critic_trainable)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  r.epsilon.resize(real_features.shape().n);
  for (double& e : r.epsilon) e = u(rng);
  r.l_gp = gradient_penalty(critic,
                            interpolate_features(real_features.buffer(), virtual_features.buffer(), r.epsilon));
  return r;
}

// ---------------------------------------------------------------------------
// Reconstruction

struct Reconstruction {
  Var mean_square;      ///< per-pixel mean, summed over domains (used for training)
  double sum_square = 0;  ///< raw squared L2, summed over domains
};

/// ||I - M_S(I)||^2 for both domains.
inline Reconstruction reconstruction(const Var& real_image, const Var& real_features, const Var& virtual_image,
                                     const Var& virtual_features) {
  Reconstruction r;
  Var dr = ad::square(ad::sub(real_features, real_image));
  Var dv = ad::square(ad::sub(virtual_features, virtual_image));
  r.mean_square = ad::add(ad::mean(dr), ad::mean(dv));
  for (double v : dr.value()) r.sum_square += v;
  for (double v : dv.value()) r.sum_square += v;
  return r;
}

// ---------------------------------------------------------------------------
// Aggregate

/// Named terms with weights and the weighted total.
struct LossReport {
  std::vector<std::string> names;
  std::vector<double> values;
  std::vector<double> weights;
  std::map<std::string, std::size_t> valid_pixels;
  double total = 0;
  Var total_var;

  void add(const std::string& name, double value, double weight) {
    names.push_back(name);
    values.push_back(value);
    weights.push_back(weight);
    total += weight * value;
  }

  double value(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return values[i];
    throw std::out_of_range("LossReport: no term " + name);
  }

  std::string csv_header() const {
    std::string h = "iteration";
    for (const auto& n : names) h += "," + n;
    return h + ",total";
  }

  std::string csv_row(long iteration) const {
    std::ostringstream ss;
    ss << iteration << std::setprecision(10);
    for (double v : values) ss << ',' << v;
    ss << ',' << total;
    return ss.str();
  }
};

/// Real triplet: photometric and smoothness terms only.
struct RealTerms {
  Var target, prev, next;
  Var disparity;
  Var pose_to_prev, pose_to_next;
};

/// Virtual triplet with stereo partner and disparity labels.
struct VirtualTerms {
  Var target, prev, next, right;
  Var disparity;
  Var pose_to_prev, pose_to_next;
  Var gt_disparity, gt_mask;
};

/// lambda_p (L^r_pc + L^v_pc) + lambda_s (L^r_s + L^v_s) + lambda_gt L^v_gt + lambda_sc L^v_sc.
/// Either domain may be absent (virtual-only or real-only training).
inline LossReport task_loss(const std::optional<RealTerms>& real, const std::optional<VirtualTerms>& virt,
                            const Intrinsics& k, double focal_baseline, const LossWeights& w) {
  w.validate();
  if (!real && !virt) throw DegenerateBatchError("task_loss: no batch supplied");
  LossReport report;
  std::vector<Var> weighted;
  auto push = [&](const std::string& name, const Var& term, double weight) {
    report.add(name, term.item(), weight);
    weighted.push_back(ad::mul_scalar(term, weight));
  };
  if (real) {
    TemporalPhotometric pc = temporal_photometric(real->target, real->prev, real->next, real->disparity,
                                                  real->pose_to_prev, real->pose_to_next, k, focal_baseline,
                                                  w.alpha_ssim);
    report.valid_pixels["photometric_real"] = pc.valid_pixels;
    push("photometric_real", pc.loss, w.lambda_p);
    push("smoothness_real", smoothness(real->disparity, real->target), w.lambda_s);
  }
  if (virt) {
    TemporalPhotometric pc = temporal_photometric(virt->target, virt->prev, virt->next, virt->disparity,
                                                  virt->pose_to_prev, virt->pose_to_next, k, focal_baseline,
                                                  w.alpha_ssim);
    report.valid_pixels["photometric_virtual"] = pc.valid_pixels;
    push("photometric_virtual", pc.loss, w.lambda_p);
    push("smoothness_virtual", smoothness(virt->disparity, virt->target), w.lambda_s);
    push("supervision_virtual", disparity_supervision(virt->disparity, virt->gt_disparity, virt->gt_mask),
         w.lambda_gt);
    std::size_t sc_valid = 0;
    push("stereo_virtual", stereo_consistency(virt->target, virt->right, virt->disparity, w.alpha_ssim, &sc_valid),
         w.lambda_sc);
    report.valid_pixels["stereo_virtual"] = sc_valid;
  }
  Var total = weighted[0];
  for (std::size_t i = 1; i < weighted.size(); ++i) total = ad::add(total, weighted[i]);
  report.total_var = total;
  return report;
}

struct BackwardReinforcement {
  Var loss;  ///< unweighted; undefined when every sample was skipped
  std::size_t used = 0;
  std::size_t skipped = 0;
};

/// Photometric loss on real triplets with fixed backend poses (target ->
/// neighbour). Samples lacking either pose are skipped and counted.
inline BackwardReinforcement backward_reinforcement(const Var& target, const Var& prev, const Var& next,
                                                    const Var& disparity,
                                                    const std::vector<std::optional<Pose>>& to_prev,
                                                    const std::vector<std::optional<Pose>>& to_next,
                                                    const Intrinsics& k, double focal_baseline,
                                                    double alpha = 0.85) {
  const int n = target.shape().n;
  if (static_cast<int>(to_prev.size()) != n || static_cast<int>(to_next.size()) != n)
    throw ad::ShapeError("backward_reinforcement: one pose pair per sample required");
  BackwardReinforcement out;
  std::vector<int> keep;
  for (int i = 0; i < n; ++i) {
    if (to_prev[i] && to_next[i]) {
      keep.push_back(i);
    } else {
      ++out.skipped;
    }
  }
  out.used = keep.size();
  if (keep.empty()) return out;
  Tape& tape = *target.tape();
  auto select = [&](const Var& v) {
    if (static_cast<int>(keep.size()) == n) return v;
    std::vector<Var> parts;
    for (int i : keep) parts.push_back(ad::batch_slice(v, i, 1));
    return ad::batch_concat(parts);
  };
  auto poses = [&](const std::vector<std::optional<Pose>>& ps) {
    TensorBuffer b(Shape{static_cast<int>(keep.size()), 6, 1, 1});
    for (std::size_t j = 0; j < keep.size(); ++j) {
      const Vec6 v = ad::pose_to_vector(*ps[keep[j]]);
      for (int i = 0; i < 6; ++i) b.value[6 * j + i] = v[i];
    }
    return tape.constant(std::move(b));
  };
  out.loss = temporal_photometric(select(target), select(prev), select(next), select(disparity), poses(to_prev),
                                  poses(to_next), k, focal_baseline, alpha)
                 .loss;
  return out;
}

}  // namespace vrvo::losses
