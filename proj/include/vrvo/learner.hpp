#pragma once

// Training of the shared encoder, disparity decoder, pose regressor and
// critic: warm-start stages, adversarial domain adaptation, and
// finetuning against backend poses.

#include <algorithm>
#include <cmath>
#include <utility>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vrvo/diffops.hpp"
#include "vrvo/losses.hpp"
#include "vrvo/networks.hpp"
#include "vrvo/simulator.hpp"

namespace vrvo::learn {

using ad::Shape;
using ad::Tape;
using ad::TensorBuffer;
using ad::Var;
using losses::LossWeights;

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Loss became NaN/Inf; the last finite parameters were written to `checkpoint`.
class TrainingDiverged : public TrainingError {
 public:
  TrainingDiverged(const std::string& what, std::filesystem::path checkpoint)
      : TrainingError(what), checkpoint_(std::move(checkpoint)) {}
  const std::filesystem::path& checkpoint() const { return checkpoint_; }

 private:
  std::filesystem::path checkpoint_;
};

struct TrainConfig {
  int n_tr = 2000;  ///< domain-adaptation iterations
  int k_s = 5;      ///< encoder steps per iteration
  int k_f = 5;      ///< mutual-reinforcement alternations
  int n_ft = 200;   ///< finetuning iterations per alternation
  int pretrain_encoder = 500;  ///< encoder warm start on reconstruction
  int pretrain_virtual = 500;  ///< supervised warm start on virtual data
  double lr_da = 1e-4;
  double lr_mr = 1e-3;
  double lr_pretrain = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  int batch = 4;
  std::uint64_t seed = 0;

  /// Iteration counts of the full-scale schedule.
  static TrainConfig full_scale() {
    TrainConfig c;
    c.n_tr = 150000;
    c.k_s = 5;
    c.k_f = 5;
    return c;
  }

  void validate() const {
    if (n_tr < 1 || k_s < 1 || k_f < 1 || n_ft < 1 || batch < 1)
      throw TrainingError("TrainConfig: iteration counts and batch size must be >= 1");
    if (pretrain_encoder < 0 || pretrain_virtual < 0) throw TrainingError("TrainConfig: pretraining counts must be >= 0");
    if (!(lr_da > 0 && lr_mr > 0 && lr_pretrain > 0)) throw TrainingError("TrainConfig: learning rates must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && epsilon > 0))
      throw TrainingError("TrainConfig: invalid moment parameters");
  }
  bool operator==(const TrainConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Optimiser

/// Moment-based update over one parameter set; gradients are read from the
/// parameter tensors and cleared after each step.
class Adam {
 public:
  Adam(nn::ParameterSet& params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(&params), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : params.params()) {
      m_.emplace_back(p.tensor->numel(), 0.0);
      v_.emplace_back(p.tensor->numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    auto& ps = params_->params();
    for (std::size_t k = 0; k < ps.size(); ++k) {
      ad::TensorBuffer& t = *ps[k].tensor;
      if (t.grad.size() != t.value.size()) continue;
      for (std::size_t i = 0; i < t.value.size(); ++i) {
        const double g = t.grad[i];
        m_[k][i] = b1_ * m_[k][i] + (1 - b1_) * g;
        v_[k][i] = b2_ * v_[k][i] + (1 - b2_) * g * g;
        t.value[i] -= lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
      }
    }
    params_->zero_grad();
  }

  long steps() const { return t_; }

 private:
  nn::ParameterSet* params_;
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Model

struct Model {
  nn::SharedEncoder encoder;
  nn::DisparityDecoder decoder;
  nn::PoseRegressor pose;
  nn::Discriminator critic;

  Model(double max_disparity, std::uint64_t seed)
      : encoder(sim::hash_combine(seed, 1)),
        decoder(max_disparity, sim::hash_combine(seed, 2)),
        pose(sim::hash_combine(seed, 3)),
        critic(1, sim::hash_combine(seed, 4)) {}
  Model(const Model&) = delete;  // parameters are shared tensors
  Model& operator=(const Model&) = delete;

  std::vector<const nn::ParameterSet*> sets() const {
    return {&encoder.params(), &decoder.params(), &pose.params(), &critic.params()};
  }
  std::vector<nn::ParameterSet*> sets() {
    return {&encoder.params(), &decoder.params(), &pose.params(), &critic.params()};
  }
  void zero_grad() {
    for (auto* s : sets()) s->zero_grad();
  }
  bool all_finite() const {
    for (const auto* s : sets())
      if (!s->all_finite()) return false;
    return true;
  }
  void save(const std::filesystem::path& path) const { nn::write_checkpoint(path, sets()); }
  void load(const std::filesystem::path& path) { nn::read_checkpoint(path, sets()); }
};

/// Overwrites every parameter of `to` with those of `from`.
inline void copy_parameters(const Model& from, Model& to) {
  const auto src = from.sets();
  const auto dst = to.sets();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i]->assign(src[i]->flatten());
}

/// fx * t_b / z_min: the largest disparity the scene can produce.
inline double max_disparity(const StereoRig& rig, double z_min) {
  if (!(z_min > 0)) throw TrainingError("max_disparity: z_min must be positive");
  return rig.focal_baseline() / z_min;
}

// ---------------------------------------------------------------------------
// Data

/// Training frames of one domain; only what the domain may expose.
struct DomainData {
  sim::Domain domain = sim::Domain::Virtual;
  std::vector<sim::LearnerView> views;

  bool empty() const { return views.empty(); }
};

struct Batch {
  sim::Domain domain = sim::Domain::Virtual;
  TensorBuffer target, prev, next;
  TensorBuffer right, gt_disparity, gt_mask;  ///< virtual only
  std::vector<std::pair<std::size_t, int>> frames;  ///< (view, target frame)

  int size() const { return target.shape.n; }
};

namespace detail {

inline void copy_image(TensorBuffer& b, int n, const Image& img) {
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) b.at(n, 0, y, x) = img(x, y);
}

}  // namespace detail

/// Stacks images into an (N, 1, H, W) buffer.
inline TensorBuffer stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw TrainingError("stack_images: no images");
  const int w = images[0]->width(), h = images[0]->height();
  TensorBuffer b(Shape{static_cast<int>(images.size()), 1, h, w});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->width() != w || images[i]->height() != h) throw TrainingError("stack_images: sizes differ");
    detail::copy_image(b, static_cast<int>(i), *images[i]);
  }
  return b;
}

/// Builds a batch of (prev, target, next) triplets at explicit frames.
inline Batch make_batch(const DomainData& data, const std::vector<std::pair<std::size_t, int>>& frames) {
  if (frames.empty()) throw TrainingError("make_batch: no frames");
  Batch b;
  b.domain = data.domain;
  b.frames = frames;
  std::vector<const Image*> t, p, n, r;
  const bool virt = data.domain == sim::Domain::Virtual;
  for (const auto& [v, i] : frames) {
    if (v >= data.views.size()) throw TrainingError("make_batch: view index out of range");
    const sim::LearnerView& view = data.views[v];
    if (i < 1 || i + 1 >= static_cast<int>(view.size())) throw TrainingError("make_batch: frame has no neighbours");
    t.push_back(&(*view.left)[i]);
    p.push_back(&(*view.left)[i - 1]);
    n.push_back(&(*view.left)[i + 1]);
    if (virt) {
      if (!view.right || !view.disparity) throw TrainingError("make_batch: virtual view lacks stereo data");
      r.push_back(&(*view.right)[i]);
    }
  }
  b.target = stack_images(t);
  b.prev = stack_images(p);
  b.next = stack_images(n);
  if (virt) {
    b.right = stack_images(r);
    b.gt_disparity = TensorBuffer(b.target.shape);
    b.gt_mask = TensorBuffer(b.target.shape);
    for (std::size_t k = 0; k < frames.size(); ++k) {
      const DisparityMap& d = (*data.views[frames[k].first].disparity)[frames[k].second];
      for (int y = 0; y < d.height(); ++y)
        for (int x = 0; x < d.width(); ++x) {
          const bool ok = d.valid(x, y) != 0;
          b.gt_disparity.at(static_cast<int>(k), 0, y, x) = ok ? d.values(x, y) : 0.0;
          b.gt_mask.at(static_cast<int>(k), 0, y, x) = ok ? 1.0 : 0.0;
        }
    }
  }
  return b;
}

/// Uniform over views, then over frames with both neighbours.
inline Batch sample_batch(const DomainData& data, int size, std::mt19937_64& rng) {
  if (data.empty()) throw TrainingError("sample_batch: no data for domain " + sim::to_string(data.domain));
  std::vector<std::pair<std::size_t, int>> frames;
  std::uniform_int_distribution<std::size_t> pick_view(0, data.views.size() - 1);
  for (int k = 0; k < size; ++k) {
    const std::size_t v = pick_view(rng);
    const int n = static_cast<int>(data.views[v].size());
    if (n < 3) throw TrainingError("sample_batch: sequences need at least 3 frames");
    std::uniform_int_distribution<int> pick_frame(1, n - 2);
    frames.emplace_back(v, pick_frame(rng));
  }
  return make_batch(data, frames);
}

// ---------------------------------------------------------------------------
// Forward pass

/// Which networks receive gradients on this tape.
struct Trainable {
  bool encoder = false, decoder = false, pose = false, critic = false;
};

struct DomainOutputs {
  Var target, prev, next, right, gt_disparity, gt_mask;
  Var features, disparity, pose_to_prev, pose_to_next, critic;
};

struct ForwardOutputs {
  std::optional<DomainOutputs> real, virt;
};

/// All network outputs for one or both domains on one tape. Poses are
/// regressed on temporally ordered pairs; the pose towards the previous
/// frame is the inverse of the (previous, target) regression.
inline ForwardOutputs forward_pass(Tape& tape, const Model& model, const Batch* real, const Batch* virt,
                                   const Trainable& train, bool with_critic = true) {
  if (!real && !virt) throw TrainingError("forward_pass: no batch");
  auto run = [&](const Batch& b) {
    const Shape s = b.target.shape;
    if (s.c != 1 || !(b.prev.shape == s) || !(b.next.shape == s))
      throw TrainingError("forward_pass: malformed triplet " + s.str());
    DomainOutputs o;
    o.target = tape.constant(b.target);
    o.prev = tape.constant(b.prev);
    o.next = tape.constant(b.next);
    if (b.domain == sim::Domain::Virtual) {
      if (!(b.right.shape == s) || !(b.gt_disparity.shape == s) || !(b.gt_mask.shape == s))
        throw TrainingError("forward_pass: virtual batch lacks right image or labels");
      o.right = tape.constant(b.right);
      o.gt_disparity = tape.constant(b.gt_disparity);
      o.gt_mask = tape.constant(b.gt_mask);
    }
    o.features = model.encoder.forward(tape, o.target, train.encoder);
    o.disparity = model.decoder.forward(tape, o.features, train.decoder);
    o.pose_to_prev = ad::invert_pose(model.pose.forward(tape, o.prev, o.target, train.pose));
    o.pose_to_next = model.pose.forward(tape, o.target, o.next, train.pose);
    if (with_critic) o.critic = model.critic.forward(tape, o.features, train.critic);
    return o;
  };
  ForwardOutputs out;
  if (real) {
    if (real->domain != sim::Domain::Real) throw TrainingError("forward_pass: real slot holds a virtual batch");
    out.real = run(*real);
  }
  if (virt) {
    if (virt->domain != sim::Domain::Virtual) throw TrainingError("forward_pass: virtual slot holds a real batch");
    out.virt = run(*virt);
  }
  return out;
}

inline losses::LossReport task_loss(const ForwardOutputs& f, const StereoRig& rig, const LossWeights& w) {
  std::optional<losses::RealTerms> r;
  std::optional<losses::VirtualTerms> v;
  if (f.real) r = losses::RealTerms{f.real->target,   f.real->prev,         f.real->next,
                                    f.real->disparity, f.real->pose_to_prev, f.real->pose_to_next};
  if (f.virt)
    v = losses::VirtualTerms{f.virt->target,       f.virt->prev,         f.virt->next,         f.virt->right,
                             f.virt->disparity,    f.virt->pose_to_prev, f.virt->pose_to_next, f.virt->gt_disparity,
                             f.virt->gt_mask};
  return losses::task_loss(r, v, rig.intrinsics, rig.focal_baseline(), w);
}

// ---------------------------------------------------------------------------
// Loss curves

struct CurvePoint {
  std::string phase;
  long iteration = 0;
  std::map<std::string, double> values;
};

struct LossCurves {
  std::vector<CurvePoint> points;

  void add(const std::string& phase, long iteration, std::map<std::string, double> values) {
    points.push_back({phase, iteration, std::move(values)});
  }

  std::vector<double> series(const std::string& phase, const std::string& name) const {
    std::vector<double> out;
    for (const auto& p : points)
      if (p.phase == phase) {
        auto it = p.values.find(name);
        if (it != p.values.end()) out.push_back(it->second);
      }
    return out;
  }

  /// One row per point; columns are the union of value names, empty when absent.
  std::string csv() const {
    std::vector<std::string> cols;
    for (const auto& p : points)
      for (const auto& [k, v] : p.values)
        if (std::find(cols.begin(), cols.end(), k) == cols.end()) cols.push_back(k);
    std::sort(cols.begin(), cols.end());
    std::ostringstream ss;
    ss << std::setprecision(10) << "phase,iteration";
    for (const auto& c : cols) ss << ',' << c;
    ss << '\n';
    for (const auto& p : points) {
      ss << p.phase << ',' << p.iteration;
      for (const auto& c : cols) {
        ss << ',';
        auto it = p.values.find(c);
        if (it != p.values.end()) ss << it->second;
      }
      ss << '\n';
    }
    return ss.str();
  }
};

inline std::map<std::string, double> report_values(const losses::LossReport& r) {
  std::map<std::string, double> m;
  for (std::size_t i = 0; i < r.names.size(); ++i) m[r.names[i]] = r.values[i];
  m["task"] = r.total;
  return m;
}

// ---------------------------------------------------------------------------
// Training

enum class TrainMode { VirtualOnly, RealOnly, DomainAdaptation };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::VirtualOnly: return "virtual-only";
    case TrainMode::RealOnly: return "real-only";
    case TrainMode::DomainAdaptation: return "domain-adaptation";
  }
  return "?";
}

struct TrainData {
  StereoRig rig;  ///< virtual rig; its baseline converts disparity to depth in both domains
  DomainData virt{sim::Domain::Virtual, {}};
  DomainData real{sim::Domain::Real, {}};
};

struct TrainOptions {
  TrainMode mode = TrainMode::DomainAdaptation;
  bool verify_exclusivity = true;  ///< hash parameters around every update
  std::filesystem::path divergence_checkpoint = "diverged.ckpt";
  int log_every = 1;
  bool main_phase = true;  ///< false: stop after the warm-start stages
  std::function<void(const std::string& phase, long iteration, Model&)> on_iteration;
};

struct TrainResult {
  LossCurves curves;
  std::size_t exclusivity_checks = 0;
};

namespace detail {

struct Hashes {
  std::uint64_t s, d, p, a;
};

inline Hashes hashes(const Model& m) {
  return {m.encoder.params().hash(), m.decoder.params().hash(), m.pose.params().hash(), m.critic.params().hash()};
}

/// Throws unless exactly the networks flagged in `allowed` may have changed.
inline void check_exclusive(const Hashes& before, const Hashes& after, const Trainable& allowed,
                            const std::string& step) {
  auto bad = [&](bool changed, bool ok, const char* name) {
    if (changed && !ok) throw std::logic_error(step + " step modified " + name);
  };
  bad(before.s != after.s, allowed.encoder, "the encoder");
  bad(before.d != after.d, allowed.decoder, "the decoder");
  bad(before.p != after.p, allowed.pose, "the pose regressor");
  bad(before.a != after.a, allowed.critic, "the critic");
}

struct Stage {
  Model& model;
  const TrainOptions& opt;
  TrainResult& result;
  std::vector<std::vector<double>> last_good;

  void snapshot() {
    last_good.clear();
    for (const auto* s : std::as_const(model).sets()) last_good.push_back(s->flatten());
  }

  /// On a non-finite loss the model is rolled back to the last snapshot,
  /// written to the divergence checkpoint, and training stops.
  void guard(double loss, const std::string& phase, long it) {
    if (std::isfinite(loss) && model.all_finite()) return;
    if (!last_good.empty()) {
      auto sets = model.sets();
      for (std::size_t i = 0; i < sets.size(); ++i) sets[i]->assign(last_good[i]);
    }
    model.save(opt.divergence_checkpoint);
    throw TrainingDiverged(phase + " iteration " + std::to_string(it) + ": loss is not finite",
                           opt.divergence_checkpoint);
  }

  /// Runs `update` and checks that only `allowed` networks changed.
  template <class F>
  void exclusive(const Trainable& allowed, const std::string& step, F&& update) {
    if (!opt.verify_exclusivity) {
      update();
      return;
    }
    const Hashes before = hashes(model);
    update();
    check_exclusive(before, hashes(model), allowed, step);
    ++result.exclusivity_checks;
  }
};

}  // namespace detail

/// Critic update: minimise -L_adv + lambda_g L_gp w.r.t. the critic only.
/// Returns {L_adv, L_gp}.
inline std::pair<double, double> critic_step(Model& model, Adam& opt, const Batch& real, const Batch& virt,
                                             const LossWeights& w, std::mt19937_64& rng) {
  model.zero_grad();
  Tape tape;
  Var fr = model.encoder.forward(tape, tape.constant(real.target), false);
  Var fv = model.encoder.forward(tape, tape.constant(virt.target), false);
  losses::AdversarialResult adv = losses::adversarial_losses(tape, fr, fv, model.critic, rng, true);
  tape.backward(ad::mul_scalar(adv.l_adv, -1.0));
  if (w.lambda_g > 0) {
    const TensorBuffer mixed = losses::interpolate_features(fr.buffer(), fv.buffer(), adv.epsilon);
    const std::vector<double> g = losses::gradient_penalty_param_grad(model.critic, mixed);
    std::size_t k = 0;
    for (auto& p : model.critic.params().params()) {
      p.tensor->enable_grad();
      for (double& gi : p.tensor->grad) gi += w.lambda_g * g[k++];
    }
  }
  opt.step();
  return {adv.l_adv.item(), adv.l_gp};
}

/// Encoder update on L_adv + L_task + lambda_r L_rec; only the encoder moves.
inline losses::LossReport encoder_step(Model& model, Adam& opt, const Batch& real, const Batch& virt,
                                       const StereoRig& rig, const LossWeights& w, std::mt19937_64& rng,
                                       double* adversarial = nullptr, double* reconstruction = nullptr) {
  model.zero_grad();
  Tape tape;
  const Trainable tr{true, false, false, false};
  ForwardOutputs f = forward_pass(tape, model, &real, &virt, tr, false);
  losses::LossReport rep = task_loss(f, rig, w);
  losses::AdversarialResult adv = losses::adversarial_losses(tape, f.real->features, f.virt->features, model.critic,
                                                             rng, false);
  losses::Reconstruction rec =
      losses::reconstruction(f.real->target, f.real->features, f.virt->target, f.virt->features);
  Var total = ad::add(ad::add(adv.l_adv, rep.total_var), ad::mul_scalar(rec.mean_square, w.lambda_r));
  tape.backward(total);
  opt.step();
  if (adversarial) *adversarial = adv.l_adv.item();
  if (reconstruction) *reconstruction = rec.mean_square.item();
  rep.total = total.item();
  return rep;
}

/// L_task step on the networks flagged in `tr` (with the given optimisers).
inline losses::LossReport task_step(Model& model, const std::vector<Adam*>& opts, const Batch* real,
                                    const Batch* virt, const Trainable& tr, const StereoRig& rig,
                                    const LossWeights& w) {
  model.zero_grad();
  Tape tape;
  ForwardOutputs f = forward_pass(tape, model, real, virt, tr, false);
  losses::LossReport rep = task_loss(f, rig, w);
  tape.backward(rep.total_var);
  for (Adam* o : opts) o->step();
  return rep;
}

/// Encoder warm start: the encoder alone reproduces its input images.
inline double reconstruction_step(Model& model, Adam& opt, const std::vector<const Batch*>& batches) {
  model.zero_grad();
  Tape tape;
  Var total;
  for (const Batch* b : batches) {
    Var img = tape.constant(b->target);
    Var term = ad::mean(ad::square(ad::sub(model.encoder.forward(tape, img, true), img)));
    total = total.defined() ? ad::add(total, term) : term;
  }
  tape.backward(total);
  opt.step();
  return total.item();
}

/// Warm-start stages followed by the main schedule of `opt.mode`:
///  - DomainAdaptation: per iteration one critic step, k_s encoder steps and
///    one L_task step on the decoder and pose regressor;
///  - VirtualOnly / RealOnly: one joint L_task step on encoder, decoder and
///    pose regressor with that domain's data.
inline TrainResult train_da(Model& model, const TrainData& data, const TrainConfig& cfg, const LossWeights& w,
                            const TrainOptions& opt = {}) {
  cfg.validate();
  w.validate();
  const bool use_virt = opt.mode != TrainMode::RealOnly;
  const bool use_real = opt.mode != TrainMode::VirtualOnly;
  if (use_virt && data.virt.empty()) throw TrainingError("train_da: no virtual data");
  if (use_real && data.real.empty()) throw TrainingError("train_da: no real data");
  TrainResult result;
  detail::Stage stage{model, opt, result, {}};
  stage.snapshot();
  std::mt19937_64 rng(sim::hash_combine(cfg.seed, 0x7261696e));
  auto log = [&](const std::string& phase, long it, std::map<std::string, double> v) {
    if (opt.log_every > 0 && it % opt.log_every == 0) result.curves.add(phase, it, std::move(v));
    if (opt.on_iteration) opt.on_iteration(phase, it, model);
  };
  auto snapshot = [&] { stage.snapshot(); };

  // Encoder warm start on reconstruction.
  if (cfg.pretrain_encoder > 0) {
    Adam adam(model.encoder.params(), cfg.lr_pretrain, cfg.beta1, cfg.beta2, cfg.epsilon);
    for (int it = 0; it < cfg.pretrain_encoder; ++it) {
      std::vector<Batch> bs;
      if (use_virt) bs.push_back(sample_batch(data.virt, cfg.batch, rng));
      if (use_real) bs.push_back(sample_batch(data.real, cfg.batch, rng));
      std::vector<const Batch*> ptrs;
      for (const Batch& b : bs) ptrs.push_back(&b);
      double loss = 0;
      stage.exclusive({true, false, false, false}, "reconstruction warm-start",
                      [&] { loss = reconstruction_step(model, adam, ptrs); });
      stage.guard(loss, "pretrain-encoder", it);
      log("pretrain-encoder", it, {{"reconstruction", loss}});
    }
    snapshot();
  }

  // Supervised warm start on virtual data (all three task networks).
  if (use_virt && cfg.pretrain_virtual > 0) {
    Adam as(model.encoder.params(), cfg.lr_pretrain, cfg.beta1, cfg.beta2, cfg.epsilon);
    Adam ad_(model.decoder.params(), cfg.lr_pretrain, cfg.beta1, cfg.beta2, cfg.epsilon);
    Adam ap(model.pose.params(), cfg.lr_pretrain, cfg.beta1, cfg.beta2, cfg.epsilon);
    const Trainable tr{true, true, true, false};
    for (int it = 0; it < cfg.pretrain_virtual; ++it) {
      const Batch vb = sample_batch(data.virt, cfg.batch, rng);
      losses::LossReport rep;
      stage.exclusive(tr, "virtual warm-start",
                      [&] { rep = task_step(model, {&as, &ad_, &ap}, nullptr, &vb, tr, data.rig, w); });
      stage.guard(rep.total, "pretrain-virtual", it);
      log("pretrain-virtual", it, report_values(rep));
    }
    snapshot();
  }
  if (!opt.main_phase) return result;

  if (opt.mode != TrainMode::DomainAdaptation) {
    Adam as(model.encoder.params(), cfg.lr_da, cfg.beta1, cfg.beta2, cfg.epsilon);
    Adam ad_(model.decoder.params(), cfg.lr_da, cfg.beta1, cfg.beta2, cfg.epsilon);
    Adam ap(model.pose.params(), cfg.lr_da, cfg.beta1, cfg.beta2, cfg.epsilon);
    const Trainable tr{true, true, true, false};
    const std::string phase = to_string(opt.mode);
    for (int it = 0; it < cfg.n_tr; ++it) {
      const Batch b = sample_batch(use_virt ? data.virt : data.real, cfg.batch, rng);
      losses::LossReport rep;
      stage.exclusive(tr, phase, [&] {
        rep = task_step(model, {&as, &ad_, &ap}, use_virt ? nullptr : &b, use_virt ? &b : nullptr, tr, data.rig, w);
      });
      stage.guard(rep.total, phase, it);
      log(phase, it, report_values(rep));
      if (it % 50 == 49) snapshot();
    }
    return result;
  }

  Adam a_critic(model.critic.params(), cfg.lr_da, cfg.beta1, cfg.beta2, cfg.epsilon);
  Adam a_enc(model.encoder.params(), cfg.lr_da, cfg.beta1, cfg.beta2, cfg.epsilon);
  Adam a_dec(model.decoder.params(), cfg.lr_da, cfg.beta1, cfg.beta2, cfg.epsilon);
  Adam a_pose(model.pose.params(), cfg.lr_da, cfg.beta1, cfg.beta2, cfg.epsilon);
  for (int it = 0; it < cfg.n_tr; ++it) {
    std::map<std::string, double> v;
    {
      const Batch rb = sample_batch(data.real, cfg.batch, rng), vb = sample_batch(data.virt, cfg.batch, rng);
      stage.exclusive({false, false, false, true}, "critic", [&] {
        auto [l_adv, l_gp] = critic_step(model, a_critic, rb, vb, w, rng);
        v["critic_adv"] = l_adv;
        v["critic_gp"] = l_gp;
        v["critic_total"] = -l_adv + w.lambda_g * l_gp;
      });
      stage.guard(v["critic_total"], "domain-adaptation", it);
    }
    for (int k = 0; k < cfg.k_s; ++k) {
      const Batch rb = sample_batch(data.real, cfg.batch, rng), vb = sample_batch(data.virt, cfg.batch, rng);
      double adv = 0, rec = 0;
      losses::LossReport rep;
      stage.exclusive({true, false, false, false}, "encoder",
                      [&] { rep = encoder_step(model, a_enc, rb, vb, data.rig, w, rng, &adv, &rec); });
      stage.guard(rep.total, "domain-adaptation", it);
      if (k + 1 == cfg.k_s) {
        v["encoder_adv"] = adv;
        v["encoder_rec"] = rec;
        v["encoder_total"] = rep.total;
      }
    }
    {
      const Batch rb = sample_batch(data.real, cfg.batch, rng), vb = sample_batch(data.virt, cfg.batch, rng);
      const Trainable tr{false, true, true, false};
      losses::LossReport rep;
      stage.exclusive(tr, "task", [&] { rep = task_step(model, {&a_dec, &a_pose}, &rb, &vb, tr, data.rig, w); });
      stage.guard(rep.total, "domain-adaptation", it);
      for (const auto& [k, x] : report_values(rep)) v[k] = x;
    }
    log("domain-adaptation", it, std::move(v));
    if (it % 50 == 49) snapshot();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Prediction

/// Disparity maps for a list of images (every pixel valid).
inline std::vector<DisparityMap> predict_disparities(const Model& model, const std::vector<Image>& images,
                                                     int batch = 8) {
  std::vector<DisparityMap> out;
  for (std::size_t first = 0; first < images.size(); first += static_cast<std::size_t>(batch)) {
    std::vector<const Image*> chunk;
    for (std::size_t i = first; i < std::min(images.size(), first + static_cast<std::size_t>(batch)); ++i)
      chunk.push_back(&images[i]);
    Tape tape;
    Var d = model.decoder.forward(tape, model.encoder.forward(tape, tape.constant(stack_images(chunk)), false), false);
    const Shape s = d.shape();
    for (int n = 0; n < s.n; ++n) {
      DisparityMap m(s.w, s.h, 0.0, true);
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) m.values(x, y) = d.value(n, 0, y, x);
      out.push_back(std::move(m));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finetuning against backend poses

struct MrResult {
  LossCurves curves;
  std::size_t used = 0;     ///< samples with both backend poses
  std::size_t skipped = 0;  ///< samples lacking a backend pose
};

/// Camera-to-world trajectory -> pose mapping target-camera points into the
/// neighbour camera, or nothing when either frame is missing.
inline std::optional<Pose> backend_relative(const std::vector<Pose>& trajectory, int target, int neighbour) {
  if (target < 0 || neighbour < 0 || target >= static_cast<int>(trajectory.size()) ||
      neighbour >= static_cast<int>(trajectory.size()))
    return std::nullopt;
  return trajectory[neighbour].inverse() * trajectory[target];
}

/// n_ft iterations of L_task + lambda*_p L_pc(backend poses) on the real
/// domain (plus the virtual terms of L_task), updating only the decoder and
/// pose regressor. `trajectories[v]` belongs to `data.real.views[v]`.
inline MrResult mr_step(Model& model, const TrainData& data, const std::vector<std::vector<Pose>>& trajectories,
                        const TrainConfig& cfg, const LossWeights& w, std::uint64_t stream = 0) {
  cfg.validate();
  w.validate();
  if (data.real.empty()) throw TrainingError("mr_step: no real data");
  if (trajectories.size() != data.real.views.size())
    throw TrainingError("mr_step: one backend trajectory per real sequence required");
  const std::uint64_t s_hash = model.encoder.params().hash(), a_hash = model.critic.params().hash();
  std::mt19937_64 rng(sim::hash_combine(sim::hash_combine(cfg.seed, 0x6d72), stream));
  Adam a_dec(model.decoder.params(), cfg.lr_mr, cfg.beta1, cfg.beta2, cfg.epsilon);
  Adam a_pose(model.pose.params(), cfg.lr_mr, cfg.beta1, cfg.beta2, cfg.epsilon);
  const Trainable tr{false, true, true, false};
  MrResult out;
  for (int it = 0; it < cfg.n_ft; ++it) {
    const Batch rb = sample_batch(data.real, cfg.batch, rng);
    std::optional<Batch> vb;
    if (!data.virt.empty()) vb = sample_batch(data.virt, cfg.batch, rng);
    model.zero_grad();
    Tape tape;
    ForwardOutputs f = forward_pass(tape, model, &rb, vb ? &*vb : nullptr, tr, false);
    losses::LossReport rep = task_loss(f, data.rig, w);
    Var total = rep.total_var;
    std::map<std::string, double> v = report_values(rep);
    if (w.lambda_p_star > 0) {
      std::vector<std::optional<Pose>> to_prev, to_next;
      for (const auto& [view, i] : rb.frames) {
        to_prev.push_back(backend_relative(trajectories[view], i, i - 1));
        to_next.push_back(backend_relative(trajectories[view], i, i + 1));
      }
      losses::BackwardReinforcement br =
          losses::backward_reinforcement(f.real->target, f.real->prev, f.real->next, f.real->disparity, to_prev,
                                         to_next, data.rig.intrinsics, data.rig.focal_baseline(), w.alpha_ssim);
      out.used += br.used;
      out.skipped += br.skipped;
      if (br.loss.defined()) {
        total = ad::add(total, ad::mul_scalar(br.loss, w.lambda_p_star));
        v["backend_photometric"] = br.loss.item();
      }
    }
    tape.backward(total);
    a_dec.step();
    a_pose.step();
    v["total"] = total.item();
    if (!std::isfinite(total.item()) || !model.all_finite())
      throw TrainingDiverged("mr iteration " + std::to_string(it) + ": loss is not finite", {});
    out.curves.add("mutual-reinforcement", it, std::move(v));
  }
  if (model.encoder.params().hash() != s_hash || model.critic.params().hash() != a_hash)
    throw std::logic_error("mr_step modified the encoder or critic");
  return out;
}

}  // namespace vrvo::learn
