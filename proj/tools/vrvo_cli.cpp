// Command-line front end: gen-data, train, run-vo, evaluate, reproduce.
//
// Exit codes: 0 success, 1 acceptance gate failed, 2 usage error (bad flags,
// bad config, missing inputs), 3 a pipeline stage failed.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vrvo/config.hpp"
#include "vrvo/evaluation.hpp"
#include "vrvo/experiments.hpp"
#include "vrvo/io.hpp"
#include "vrvo/pipeline.hpp"

namespace fs = std::filesystem;
using namespace vrvo;
using namespace vrvo::app;

namespace {

constexpr int kOk = 0;
constexpr int kGateFailed = 1;
constexpr int kUsage = 2;
constexpr int kStageFailed = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key = value configuration file");
    cmd->add_option("--set", overrides, "override one key, e.g. --set train.n_tr=100")->take_all();
    cmd->add_option("--out", out, "output directory (default: $VRVO_OUTPUT_ROOT or output_dir)");
    cmd->add_option("--seed", seed, "root seed");
  }

  ExperimentConfig load() const {
    ExperimentConfig c = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + o + "'");
      set_value(c, o.substr(0, eq), o.substr(eq + 1));
    }
    if (seed) c.seed = *seed;
    if (!out.empty()) c.output_dir = out;
    else if (const char* root = std::getenv("VRVO_OUTPUT_ROOT")) c.output_dir = root;
    c.validate();
    return c;
  }
};

bool parse_switch(const std::string& v, const std::string& flag) {
  if (v == "on") return true;
  if (v == "off") return false;
  throw UsageError(flag + " expects on|off, got '" + v + "'");
}

void parse_size(const std::string& s, ExperimentConfig& c) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw UsageError("--size expects WxH, got '" + s + "'");
  try {
    c.sim.width = std::stoi(s.substr(0, x));
    c.sim.height = std::stoi(s.substr(x + 1));
  } catch (const std::exception&) {
    throw UsageError("--size expects WxH, got '" + s + "'");
  }
}

fs::path data_dir(const ExperimentConfig& c) { return fs::path(c.output_dir) / "data"; }

void write_manifest(RunManifest& m, const fs::path& root, const fs::path& dir) {
  m.add_tree(root, dir);
  m.write(dir / "manifest.json");
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const ExperimentConfig& c) {
  RunManifest m("gen-data");
  m.set_config(c);
  StageTimer t;
  const Datasets d = generate_datasets(c);
  const fs::path dir = data_dir(c);
  fs::remove_all(dir);
  write_datasets(dir, d);
  io::write_text(dir / "config.txt", dump_config(c));
  m.add_timing("gen-data", t.seconds());
  write_manifest(m, dir, dir);
  std::cout << "wrote " << d.virt.size() << " virtual and " << d.real.size() << " real sequences (" << c.sim.frames
            << " frames, " << c.sim.width << "x" << c.sim.height << ") to " << dir << "\n";
  return kOk;
}

learn::TrainMode parse_mode(const std::string& s) {
  if (s == "da") return learn::TrainMode::DomainAdaptation;
  if (s == "virtual-only") return learn::TrainMode::VirtualOnly;
  if (s == "real-only") return learn::TrainMode::RealOnly;
  throw UsageError("--mode expects da|virtual-only|real-only, got '" + s + "'");
}

std::string lambda_tag(double l) {
  std::ostringstream ss;
  ss << "lambda_" << l;
  return ss.str();
}

int cmd_train(const ExperimentConfig& c, const std::string& phase, const std::string& mode,
              std::optional<double> lambda, bool grid, const std::string& checkpoint) {
  const Datasets d = read_datasets(data_dir(c));
  const fs::path dir = fs::path(c.output_dir) / "train";
  fs::create_directories(dir);
  RunManifest m("train --phase " + phase);
  m.set_config(c);
  if (phase == "da") {
    auto model = make_model(c, substream(c.seed, "init"));
    learn::TrainConfig tc = c.train;
    tc.seed = substream(c.seed, "training");
    learn::TrainOptions opt;
    opt.mode = parse_mode(mode);
    opt.divergence_checkpoint = dir / "diverged.ckpt";
    StageTimer t;
    const learn::TrainResult r =
        run_stage("train-da", [&] { return learn::train_da(*model, train_data(d), tc, c.loss, opt); });
    m.add_timing("train-da", t.seconds());
    const std::string tag = mode == "da" ? "da" : mode;
    model->save(dir / (tag + ".ckpt"));
    io::write_text(dir / (tag + "_curves.csv"), r.curves.csv());
    m.add_metric("real_disparity_mae", real_disparity_mae(*model, d));
    m.add_note("exclusivity_checks", std::to_string(r.exclusivity_checks));
    write_manifest(m, dir, dir);
    std::cout << "wrote " << (dir / (tag + ".ckpt")) << " and curves\n";
    return kOk;
  }
  if (phase != "mr") throw UsageError("--phase expects da|mr, got '" + phase + "'");
  const fs::path start = checkpoint.empty() ? dir / "da.ckpt" : fs::path(checkpoint);
  if (!fs::exists(start)) throw UsageError("no checkpoint at " + start.string() + " (run `train --phase da` first)");
  std::vector<double> lambdas;
  if (grid) lambdas = c.pipeline.lambda_grid;
  else lambdas.push_back(lambda.value_or(c.loss.lambda_p_star));
  for (double l : lambdas) {
    auto model = make_model(c, substream(c.seed, "init"));
    model->load(start);
    const fs::path run = dir / ("mr_" + lambda_tag(l));
    fs::create_directories(run);
    StageTimer t;
    const MrLoopResult r = mutual_reinforcement(*model, d, c, l, c.train.k_f, c.seed,
                                                [&](int f, const learn::Model& mm) {
                                                  mm.save(run / ("step_" + std::to_string(f + 1) + ".ckpt"));
                                                });
    m.add_timing("mr " + lambda_tag(l), t.seconds());
    io::write_text(run / "curves.csv", r.curves.csv());
    std::ostringstream ss;
    ss << "step,disp_mae,t_err,r_err,ate,scale\n";
    for (std::size_t i = 0; i < r.metrics.size(); ++i) {
      const auto& x = r.metrics[i];
      ss << i << ',' << x.disparity_mae << ',' << x.t_err << ',' << x.r_err << ',' << x.ate << ',' << x.scale << '\n';
    }
    io::write_text(run / "steps.csv", ss.str());
    m.add_metric("disp_mae " + lambda_tag(l), r.metrics.back().disparity_mae);
    m.add_metric("t_err " + lambda_tag(l), r.metrics.back().t_err);
    m.add_note("skipped_samples " + lambda_tag(l), std::to_string(r.skipped));
    std::cout << lambda_tag(l) << ": disparity MAE " << r.metrics.front().disparity_mae << " -> "
              << r.metrics.back().disparity_mae << "\n";
  }
  write_manifest(m, dir, dir);
  return kOk;
}

int cmd_run_vo(const ExperimentConfig& c, const std::string& sequence, const std::string& checkpoint,
               const std::string& depth_init, const std::string& virtual_stereo, bool matrix) {
  const fs::path seq_dir = sequence.empty() ? sequence_dir(data_dir(c), sim::Domain::Real, 0) : fs::path(sequence);
  if (!fs::exists(seq_dir)) throw UsageError("no sequence at " + seq_dir.string() + " (run gen-data first)");
  const sim::SequenceBundle seq = sim::read_dataset(seq_dir);
  std::unique_ptr<learn::Model> model;
  if (!checkpoint.empty()) {
    if (!fs::exists(checkpoint)) throw UsageError("no checkpoint at " + checkpoint);
    model = make_model(c, 0);
    model->load(checkpoint);
  }
  std::vector<std::pair<bool, bool>> runs;
  if (matrix) runs = {{false, false}, {true, false}, {false, true}, {true, true}};
  else runs = {{parse_switch(depth_init, "--depth-init"), parse_switch(virtual_stereo, "--virtual-stereo")}};
  const fs::path dir = fs::path(c.output_dir) / "vo";
  fs::create_directories(dir);
  RunManifest m("run-vo");
  m.set_config(c);
  for (auto [di, vs] : runs) {
    if ((di || vs) && !model) throw UsageError("--depth-init/--virtual-stereo on need --checkpoint");
    vo::BackendConfig bc = c.backend;
    bc.use_depth_init = di;
    bc.use_virtual_stereo = vs;
    bc.seed = substream(c.seed, "backend");
    StageTimer t;
    const VoOutcome o = run_backend(model.get(), seq, bc, c.eval);
    const std::string tag = std::string("di_") + (di ? "on" : "off") + "_vs_" + (vs ? "on" : "off");
    m.add_timing(tag, t.seconds());
    vo::write_trajectory(dir / (tag + ".txt"), o.odometry);
    io::write_text(dir / (tag + "_stats.csv"), vo::stats_csv(o.odometry));
    m.add_metric("t_err " + tag, o.metrics.t_err);
    m.add_metric("scale " + tag, o.metrics.scale);
    std::cout << tag << ": " << o.odometry.trajectory.size() << " frames, t_err " << o.metrics.t_err << "%, scale "
              << o.metrics.scale << (o.odometry.complete ? "" : " (tracking lost)") << "\n";
  }
  write_manifest(m, dir, dir);
  return kOk;
}

int cmd_evaluate(const ExperimentConfig& c, const std::string& est_path, const std::string& ref_path,
                 const std::string& align) {
  if (!fs::exists(est_path)) throw UsageError("no estimate at " + est_path);
  if (!fs::exists(ref_path)) throw UsageError("no reference at " + ref_path);
  eval::Alignment a;
  try {
    a = eval::parse_alignment(align.empty() ? c.eval.alignment : align);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const eval::Trajectory est = eval::read_trajectory(est_path);
  const eval::Trajectory ref_full = eval::read_trajectory(ref_path);
  if (est.size() > ref_full.size()) throw UsageError("estimate has more poses than the reference");
  const eval::Trajectory ref = eval::restrict_to(ref_full, est.ids);
  const eval::MetricReport r = eval::evaluate(est, ref, a, c.eval.sublengths);
  const fs::path dir = fs::path(c.output_dir) / "eval";
  fs::create_directories(dir);
  io::write_text(dir / "metrics.csv", eval::metrics_csv(r));
  io::write_text(dir / "trajectory.svg", eval::trajectory_svg(ref, {{"estimate", eval::align(est, ref, a)}}));
  std::cout << "t_err " << r.t_err << "%  r_err " << r.r_err << " deg/100  ATE " << r.ate << "  scale " << r.scale
            << "\n";
  return kOk;
}

int cmd_reproduce(const ExperimentConfig& c, const std::string& experiment) {
  const fs::path dir = fs::path(c.output_dir) / "reproduce" / experiment;
  fs::remove_all(dir);
  fs::create_directories(dir);
  RunManifest m("reproduce --experiment " + experiment);
  m.set_config(c);
  std::vector<ExperimentReport> reports;
  StageTimer t;
  if (experiment == "scale-recovery") {
    reports.push_back(scale_recovery_experiment(c));
  } else if (experiment == "da-ablation" || experiment == "mr-ablation") {
    const Datasets d = generate_datasets(c);
    AblationOptions opt;
    opt.run_mr = experiment == "mr-ablation";
    opt.mr_steps = c.train.k_f;
    opt.checkpoint_dir = dir / "checkpoints";
    opt.progress = [](const std::string& s) { std::cerr << s << "\n"; };
    AblationReport r = ablation_experiment(c, d, opt);
    reports.push_back(r.da);
    if (opt.run_mr) reports.push_back(r.mr);
    for (const auto& s : r.seeds)
      for (const auto& [label, metrics] : s.rows)
        for (std::size_t i = 0; i < metrics.runs.size(); ++i) {
          std::string tag = label;
          for (char& ch : tag)
            if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '.') ch = '_';
          vo::write_trajectory(dir / "trajectories" / ("seed" + std::to_string(s.seed)) /
                                   (tag + "_seq" + std::to_string(i) + ".txt"),
                               metrics.runs[i]);
        }
  } else {
    throw UsageError("--experiment expects scale-recovery|da-ablation|mr-ablation, got '" + experiment + "'");
  }
  m.add_timing(experiment, t.seconds());
  std::string summary;
  for (const auto& r : reports) {
    summary += format_report(r);
    io::write_text(dir / (r.name + "_table.csv"), r.table);
    for (const auto& g : r.gates) m.add_metric("gate " + g.name, g.passed ? 1.0 : 0.0);
  }
  io::write_text(dir / "report.txt", summary);
  write_manifest(m, dir, dir);
  std::cout << summary;
  const bool ok = std::all_of(reports.begin(), reports.end(), [](const ExperimentReport& r) { return r.passed(); });
  return ok ? kOk : kGateFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scale-aware direct visual odometry with a domain-adapted disparity learner"};
  app.require_subcommand(1);

  Common gen_c, train_c, vo_c, eval_c, repro_c;
  int frames = 0;
  std::string size;
  auto* gen = app.add_subcommand("gen-data", "render virtual (stereo + gt) and real (mono) sequences");
  gen_c.attach(gen);
  gen->add_option("--frames", frames, "frames per sequence");
  gen->add_option("--size", size, "image size WxH");

  std::string phase = "da", mode = "da", checkpoint;
  std::optional<double> lambda;
  bool grid = false;
  auto* train = app.add_subcommand("train", "domain adaptation (--phase da) or finetuning against the backend (--phase mr)");
  train_c.attach(train);
  train->add_option("--phase", phase, "da | mr")->check(CLI::IsMember({"da", "mr"}));
  train->add_option("--mode", mode, "da | virtual-only | real-only (phase da)");
  train->add_option("--lambda-p-star", lambda, "backend-pose photometric weight (phase mr)");
  train->add_flag("--lambda-grid", grid, "run every value of pipeline.lambda_grid (phase mr)");
  train->add_option("--checkpoint", checkpoint, "starting checkpoint for phase mr");

  std::string sequence, vo_ckpt, depth_init = "on", vstereo = "on";
  bool matrix = false;
  auto* runvo = app.add_subcommand("run-vo", "run the odometry backend on one sequence");
  vo_c.attach(runvo);
  runvo->add_option("--sequence", sequence, "dataset sequence directory (default: first real sequence)");
  runvo->add_option("--checkpoint", vo_ckpt, "learner checkpoint providing disparities");
  runvo->add_option("--depth-init", depth_init, "on | off");
  runvo->add_option("--virtual-stereo", vstereo, "on | off");
  runvo->add_flag("--matrix", matrix, "run all four depth-init / virtual-stereo combinations");

  std::string est, ref, align;
  auto* evaluate = app.add_subcommand("evaluate", "trajectory metrics against a reference");
  eval_c.attach(evaluate);
  evaluate->add_option("--est", est, "estimated trajectory (KITTI pose format)")->required();
  evaluate->add_option("--ref", ref, "reference trajectory")->required();
  evaluate->add_option("--align", align, "none | 6dof | 7dof");

  std::string experiment;
  auto* repro = app.add_subcommand("reproduce", "run a named experiment and check its gates");
  repro_c.attach(repro);
  repro->add_option("--experiment", experiment, "scale-recovery | da-ablation | mr-ablation")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) {
      ExperimentConfig c = gen_c.load();
      if (frames > 0) c.sim.frames = frames;
      if (!size.empty()) parse_size(size, c);
      c.validate();
      return cmd_gen_data(c);
    }
    if (train->parsed()) return cmd_train(train_c.load(), phase, mode, lambda, grid, checkpoint);
    if (runvo->parsed()) return cmd_run_vo(vo_c.load(), sequence, vo_ckpt, depth_init, vstereo, matrix);
    if (evaluate->parsed()) return cmd_evaluate(eval_c.load(), est, ref, align);
    if (repro->parsed()) return cmd_reproduce(repro_c.load(), experiment);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const StageError& e) {
    std::cerr << "stage failed: " << e.what() << "\n";
    const std::string what = e.what();
    if (what.find("run gen-data first") != std::string::npos) return kUsage;
    return kStageFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kStageFailed;
  }
  return kUsage;
}
