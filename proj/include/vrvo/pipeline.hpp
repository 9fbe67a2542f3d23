#pragma once

// End-to-end orchestration: dataset generation, training, the alternation
// between learner and backend, and ablation studies with their summaries.

#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vrvo/backend.hpp"
#include "vrvo/config.hpp"
#include "vrvo/evaluation.hpp"
#include "vrvo/learner.hpp"
#include "vrvo/simulator.hpp"

namespace vrvo::app {

namespace fs = std::filesystem;

/// Failure inside a named pipeline stage.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

template <class F>
auto run_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

/// Named random substream of the root seed.
inline std::uint64_t substream(std::uint64_t root, std::string_view name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return sim::hash_combine(root, h);
}

// ---------------------------------------------------------------------------
// Data

struct Datasets {
  std::vector<sim::SequenceBundle> virt, real;

  StereoRig rig() const {
    if (virt.empty()) throw StageError("data", "no virtual sequences");
    return virt.front().rig;
  }
};

inline std::vector<std::uint64_t> virtual_scene_seeds(const ExperimentConfig& c) {
  std::vector<std::uint64_t> out;
  const std::uint64_t s = substream(c.seed, "simulator");
  for (int i = 0; i < c.sim.virtual_sequences; ++i) out.push_back(sim::hash_combine(s, 0x100 + i));
  return out;
}

inline std::vector<std::uint64_t> real_scene_seeds(const ExperimentConfig& c) {
  std::vector<std::uint64_t> out;
  const std::uint64_t s = substream(c.seed, "simulator");
  for (int i = 0; i < c.sim.real_sequences; ++i) out.push_back(sim::hash_combine(s, 0x200 + i));
  return out;
}

inline Datasets generate_datasets(const ExperimentConfig& c) {
  return run_stage("gen-data", [&] {
    c.validate();
    Datasets d;
    const StereoRig rig = c.sim.rig();
    const auto vseeds = virtual_scene_seeds(c), rseeds = real_scene_seeds(c);
    auto scene_for = [&](std::uint64_t seed) {
      sim::SceneConfig sc;
      sc.seed = seed;
      sc.z_min = c.sim.z_min;
      sc.z_max = c.sim.z_max;
      return sim::build_scene(sc);
    };
    auto traj_for = [&](std::uint64_t seed) {
      sim::TrajectorySpec t;
      t.seed = seed;
      t.speed = c.sim.speed;
      t.yaw_rate_max = c.sim.yaw_rate_max;
      return t;
    };
    for (std::uint64_t s : vseeds)
      d.virt.push_back(sim::generate_virtual_sequence(scene_for(s), traj_for(s), rig,
                                                      sim::default_virtual_appearance(), c.sim.frames));
    for (std::uint64_t s : rseeds)
      d.real.push_back(sim::generate_real_sequence(scene_for(s), traj_for(s), rig, c.sim.real_appearance,
                                                   c.sim.frames, sim::default_virtual_appearance(), vseeds));
    return d;
  });
}

inline fs::path sequence_dir(const fs::path& root, sim::Domain d, std::size_t i) {
  std::ostringstream ss;
  ss << "seq_" << std::setw(2) << std::setfill('0') << i;
  return root / sim::to_string(d) / ss.str();
}

inline void write_datasets(const fs::path& root, const Datasets& d) {
  for (std::size_t i = 0; i < d.virt.size(); ++i) sim::write_dataset(sequence_dir(root, sim::Domain::Virtual, i), d.virt[i]);
  for (std::size_t i = 0; i < d.real.size(); ++i) sim::write_dataset(sequence_dir(root, sim::Domain::Real, i), d.real[i]);
}

/// Reads every sequence under root/virtual and root/real.
inline Datasets read_datasets(const fs::path& root, bool with_evaluation_data = true) {
  return run_stage("load-data", [&] {
    Datasets d;
    for (sim::Domain dom : {sim::Domain::Virtual, sim::Domain::Real}) {
      for (std::size_t i = 0;; ++i) {
        const fs::path dir = sequence_dir(root, dom, i);
        if (!fs::exists(dir)) break;
        (dom == sim::Domain::Virtual ? d.virt : d.real).push_back(sim::read_dataset(dir, with_evaluation_data));
      }
    }
    if (d.virt.empty() || d.real.empty())
      throw std::runtime_error("no dataset under " + root.string() + " (run gen-data first)");
    return d;
  });
}

/// Learner-facing views; real views carry no stereo data.
inline learn::TrainData train_data(const Datasets& d) {
  learn::TrainData t;
  t.rig = d.rig();
  for (const auto& b : d.virt) t.virt.views.push_back(b.learner_view());
  for (const auto& b : d.real) t.real.views.push_back(b.learner_view());
  return t;
}

inline std::unique_ptr<learn::Model> make_model(const ExperimentConfig& c, std::uint64_t seed) {
  return std::make_unique<learn::Model>(learn::max_disparity(c.sim.rig(), c.sim.z_min), seed);
}

// ---------------------------------------------------------------------------
// Backend and evaluation

struct VoOutcome {
  vo::OdometryResult odometry;
  eval::MetricReport metrics;
};

/// Backend run on one sequence. Disparities come from `model` when given,
/// and are only needed when depth init or the virtual stereo term is on.
inline VoOutcome run_backend(const learn::Model* model, const sim::SequenceBundle& seq, vo::BackendConfig bc,
                             const EvaluationConfig& ec) {
  return run_stage("run-vo", [&] {
    vo::OdometryInput in;
    in.images = seq.left;
    in.rig = seq.rig;
    if (bc.use_depth_init || bc.use_virtual_stereo) {
      if (!model) throw std::runtime_error("depth init / virtual stereo need a disparity model");
      in.disparity_left = learn::predict_disparities(*model, seq.left);
    }
    VoOutcome out;
    out.odometry = vo::run_odometry(in, bc);
    const eval::Trajectory ref(seq.gt_poses);
    eval::Trajectory est(out.odometry.trajectory);
    const eval::Trajectory ref_part =
        eval::restrict_to(ref, std::vector<int>(est.ids.begin(), est.ids.end()));
    out.metrics = eval::evaluate(est, ref_part, eval::parse_alignment(ec.alignment), ec.sublengths);
    return out;
  });
}

/// Pooled real-domain disparity MAE against the evaluation-only ground truth.
inline double real_disparity_mae(const learn::Model& model, const Datasets& d) {
  std::vector<DisparityMap> pred, gt;
  for (const auto& b : d.real) {
    for (auto& m : learn::predict_disparities(model, b.left)) pred.push_back(std::move(m));
    gt.insert(gt.end(), b.gt_disparity.begin(), b.gt_disparity.end());
  }
  return eval::disparity_mae(pred, gt);
}

/// Metrics of one model: real-domain disparity MAE plus backend errors
/// averaged over the real sequences (depth init + virtual stereo).
struct ModelMetrics {
  double disparity_mae = 0;
  double t_err = 0, r_err = 0, ate = 0, scale = 0;
  std::vector<vo::OdometryResult> runs;

  std::map<std::string, double> as_map() const {
    return {{"disp_mae", disparity_mae}, {"t_err", t_err}, {"r_err", r_err}, {"ate", ate}, {"scale", scale}};
  }
};

inline ModelMetrics evaluate_model(const learn::Model& model, const Datasets& d, const ExperimentConfig& c,
                                   std::uint64_t backend_seed, bool with_backend = true) {
  ModelMetrics m;
  m.disparity_mae = real_disparity_mae(model, d);
  if (!with_backend) return m;
  vo::BackendConfig bc = c.backend;
  bc.use_depth_init = true;
  bc.use_virtual_stereo = true;
  bc.seed = backend_seed;
  for (const auto& seq : d.real) {
    VoOutcome o = run_backend(&model, seq, bc, c.eval);
    m.t_err += o.metrics.t_err;
    m.r_err += o.metrics.r_err;
    m.ate += o.metrics.ate;
    m.scale += o.metrics.scale;
    m.runs.push_back(std::move(o.odometry));
  }
  const double n = static_cast<double>(d.real.size());
  m.t_err /= n;
  m.r_err /= n;
  m.ate /= n;
  m.scale /= n;
  return m;
}

// ---------------------------------------------------------------------------
// Alternation between learner and backend

struct MrLoopResult {
  std::vector<ModelMetrics> metrics;  ///< before the first step, then after each
  std::size_t used = 0, skipped = 0;
  learn::LossCurves curves;
};

/// `steps` rounds of: predict disparities, run the backend on every real
/// sequence with depth init and virtual stereo, finetune decoder and pose
/// regressor against the resulting trajectories.
inline MrLoopResult mutual_reinforcement(learn::Model& model, const Datasets& d, const ExperimentConfig& c,
                                         double lambda_p_star, int steps, std::uint64_t seed,
                                         const std::function<void(int, const learn::Model&)>& on_step = {}) {
  const learn::TrainData data = train_data(d);
  losses::LossWeights w = c.loss;
  w.lambda_p_star = lambda_p_star;
  learn::TrainConfig tc = c.train;
  tc.seed = substream(seed, "training");
  const std::uint64_t backend_seed = substream(seed, "backend");
  MrLoopResult out;
  out.metrics.push_back(run_stage("mr-evaluate", [&] { return evaluate_model(model, d, c, backend_seed); }));
  for (int f = 0; f < steps; ++f) {
    std::vector<std::vector<Pose>> trajectories;
    for (const auto& r : out.metrics.back().runs) trajectories.push_back(r.trajectory);
    learn::MrResult r = run_stage("mr-finetune", [&] {
      return learn::mr_step(model, data, trajectories, tc, w, static_cast<std::uint64_t>(f));
    });
    out.used += r.used;
    out.skipped += r.skipped;
    for (auto p : r.curves.points) {
      p.phase = "mr-" + std::to_string(f);
      out.curves.points.push_back(std::move(p));
    }
    if (on_step) on_step(f, model);
    out.metrics.push_back(run_stage("mr-evaluate", [&] { return evaluate_model(model, d, c, backend_seed); }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablation study

struct SeedResult {
  std::uint64_t seed = 0;
  std::map<std::string, ModelMetrics> rows;  ///< keyed by row label
};

struct AblationOptions {
  bool real_only_row = true;
  bool run_mr = true;
  int mr_steps = 5;
  bool backend_for_da_rows = true;
  std::function<void(const std::string&)> progress;
  fs::path checkpoint_dir;  ///< empty: no checkpoints written
};

inline std::string mr_label(double lambda) {
  std::ostringstream ss;
  ss << "+MR lambda=" << lambda;
  return ss.str();
}

/// Per seed: a shared warm start, then the virtual-only and domain
/// adaptation branches (and optionally an independently trained real-only
/// model), then the alternation from the adapted model at every grid value.
inline SeedResult ablation_seed(const Datasets& d, const ExperimentConfig& c, std::uint64_t seed,
                                const AblationOptions& opt) {
  const learn::TrainData data = train_data(d);
  auto say = [&](const std::string& s) {
    if (opt.progress) opt.progress("seed " + std::to_string(seed) + ": " + s);
  };
  auto save = [&](const learn::Model& m, const std::string& name) {
    if (!opt.checkpoint_dir.empty()) m.save(opt.checkpoint_dir / ("seed" + std::to_string(seed)) / name);
  };
  SeedResult out;
  out.seed = seed;
  learn::TrainConfig tc = c.train;
  tc.seed = substream(seed, "training");
  const std::uint64_t backend_seed = substream(seed, "backend");

  auto warm = make_model(c, substream(seed, "init"));
  run_stage("warm-start", [&] {
    learn::TrainOptions o;
    o.mode = learn::TrainMode::DomainAdaptation;
    o.main_phase = false;
    o.verify_exclusivity = false;
    return learn::train_da(*warm, data, tc, c.loss, o);
  });
  say("warm start done");
  learn::TrainConfig branch = tc;
  branch.pretrain_encoder = 0;
  branch.pretrain_virtual = 0;

  auto train_branch = [&](learn::TrainMode mode, const std::string& stage) {
    auto m = make_model(c, substream(seed, "init"));
    learn::copy_parameters(*warm, *m);
    run_stage(stage, [&] {
      learn::TrainOptions o;
      o.mode = mode;
      o.divergence_checkpoint = opt.checkpoint_dir.empty() ? fs::path("diverged.ckpt")
                                                           : opt.checkpoint_dir / ("diverged_" + stage + ".ckpt");
      return learn::train_da(*m, data, branch, c.loss, o);
    });
    return m;
  };

  auto v_only = train_branch(learn::TrainMode::VirtualOnly, "train-virtual-only");
  save(*v_only, "virtual_only.ckpt");
  out.rows["V only"] = evaluate_model(*v_only, d, c, backend_seed, opt.backend_for_da_rows);
  say("virtual-only done");

  if (opt.real_only_row) {
    auto r_only = make_model(c, substream(seed, "init"));
    run_stage("train-real-only", [&] {
      learn::TrainOptions o;
      o.mode = learn::TrainMode::RealOnly;
      return learn::train_da(*r_only, data, tc, c.loss, o);
    });
    save(*r_only, "real_only.ckpt");
    out.rows["R only"] = evaluate_model(*r_only, d, c, backend_seed, opt.backend_for_da_rows);
    say("real-only done");
  }

  auto da = train_branch(learn::TrainMode::DomainAdaptation, "train-da");
  save(*da, "da.ckpt");
  say("domain adaptation done");

  if (!opt.run_mr) {
    out.rows["V+R DA"] = evaluate_model(*da, d, c, backend_seed, opt.backend_for_da_rows);
    return out;
  }
  bool da_row = false;
  for (double lambda : c.pipeline.lambda_grid) {
    auto m = make_model(c, substream(seed, "init"));
    learn::copy_parameters(*da, *m);
    MrLoopResult r = mutual_reinforcement(*m, d, c, lambda, opt.mr_steps, seed);
    if (!da_row) {
      out.rows["V+R DA"] = r.metrics.front();
      da_row = true;
    }
    out.rows[mr_label(lambda)] = r.metrics.back();
    std::ostringstream tag;
    tag << "mr_lambda_" << lambda << ".ckpt";
    save(*m, tag.str());
    say(mr_label(lambda) + " done");
  }
  return out;
}

/// Table-III-shaped summary: one line per row, mean +- sample std across seeds.
inline std::string ablation_table(const std::vector<SeedResult>& seeds, const std::vector<std::string>& order) {
  std::ostringstream ss;
  ss << "row,seeds,disp_mae,t_err,r_err,ate,scale\n";
  for (const auto& label : order) {
    std::vector<std::map<std::string, double>> runs;
    for (const auto& s : seeds) {
      auto it = s.rows.find(label);
      if (it != s.rows.end()) runs.push_back(it->second.as_map());
    }
    if (runs.empty()) continue;
    ss << label << ',' << runs.size();
    for (const char* k : {"disp_mae", "t_err", "r_err", "ate", "scale"}) {
      std::vector<double> v;
      for (const auto& r : runs) v.push_back(r.at(k));
      double mean = 0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      ss << ',' << eval::format_pm(mean, eval::sample_std(v));
    }
    ss << '\n';
  }
  return ss.str();
}

inline std::vector<std::string> ablation_rows(const ExperimentConfig& c) {
  std::vector<std::string> rows{"V only", "R only", "V+R DA"};
  for (double l : c.pipeline.lambda_grid) rows.push_back(mr_label(l));
  return rows;
}

}  // namespace vrvo::app
