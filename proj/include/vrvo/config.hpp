#pragma once

// Experiment configuration (line-based `section.key = value`) and the run
// manifest written next to every command's outputs.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vrvo/backend.hpp"
#include "vrvo/evaluation.hpp"
#include "vrvo/io.hpp"
#include "vrvo/learner.hpp"
#include "vrvo/simulator.hpp"

namespace vrvo::app {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SimulationConfig {
  int width = 64;
  int height = 48;
  int frames = 60;
  int virtual_sequences = 3;
  int real_sequences = 2;
  double baseline = 0.54;
  double z_min = 4.0;
  double z_max = 9.0;
  double speed = 0.15;
  double yaw_rate_max = 0.01;
  sim::DomainAppearance real_appearance = sim::default_real_appearance();

  StereoRig rig() const { return {sim::make_intrinsics(width, height), baseline}; }
  bool operator==(const SimulationConfig&) const = default;
};

struct EvaluationConfig {
  std::vector<double> sublengths{1, 2, 3, 4, 5, 6, 7, 8};  ///< scene units
  std::string alignment = "6dof";  ///< rigid keeps scale errors visible
  bool operator==(const EvaluationConfig&) const = default;
};

struct PipelineConfig {
  int seeds = 5;
  std::vector<double> lambda_grid{0.0, 0.001, 0.01, 0.1};
  bool operator==(const PipelineConfig&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs";
  SimulationConfig sim;
  learn::TrainConfig train;
  losses::LossWeights loss;
  vo::BackendConfig backend;
  EvaluationConfig eval;
  PipelineConfig pipeline;

  bool operator==(const ExperimentConfig&) const = default;
  void validate() const;
};

// ---------------------------------------------------------------------------
// Field registry

namespace detail {

struct Field {
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

inline std::string format(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream ss(text);
  T v{};
  ss >> v;
  std::string rest;
  if (ss.fail() || (ss >> rest)) throw ConfigError(key + ": cannot parse '" + text + "'");
  return v;
}

inline Field field(const std::string& key, double& v) {
  return {key, [&v] { return format(v); }, [&v, key](const std::string& s) { v = parse_number<double>(key, s); }};
}
inline Field field(const std::string& key, int& v) {
  return {key, [&v] { return std::to_string(v); }, [&v, key](const std::string& s) { v = parse_number<int>(key, s); }};
}
inline Field field(const std::string& key, std::uint64_t& v) {
  return {key, [&v] { return std::to_string(v); },
          [&v, key](const std::string& s) {
            if (!s.empty() && s[0] == '-') throw ConfigError(key + ": must be non-negative");
            v = parse_number<std::uint64_t>(key, s);
          }};
}
inline Field field(const std::string& key, bool& v) {
  return {key, [&v] { return std::string(v ? "true" : "false"); },
          [&v, key](const std::string& s) {
            if (s == "true" || s == "on" || s == "1") v = true;
            else if (s == "false" || s == "off" || s == "0") v = false;
            else throw ConfigError(key + ": expected true/false, got '" + s + "'");
          }};
}
inline Field field(const std::string& key, std::string& v) {
  return {key, [&v] { return v; }, [&v](const std::string& s) { v = s; }};
}
inline Field field(const std::string& key, std::vector<double>& v) {
  return {key,
          [&v] {
            std::string out;
            for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + format(v[i]);
            return out;
          },
          [&v, key](const std::string& s) {
            std::vector<double> out;
            std::stringstream ss(s);
            std::string item;
            while (std::getline(ss, item, ',')) {
              const auto a = item.find_first_not_of(" \t"), b = item.find_last_not_of(" \t");
              if (a == std::string::npos) throw ConfigError(key + ": empty list item");
              out.push_back(parse_number<double>(key, item.substr(a, b - a + 1)));
            }
            v = std::move(out);
          }};
}

inline std::vector<Field> fields(ExperimentConfig& c) {
  std::vector<Field> f;
  f.push_back(field("seed", c.seed));
  f.push_back(field("output_dir", c.output_dir));

  auto& s = c.sim;
  f.push_back(field("sim.width", s.width));
  f.push_back(field("sim.height", s.height));
  f.push_back(field("sim.frames", s.frames));
  f.push_back(field("sim.virtual_sequences", s.virtual_sequences));
  f.push_back(field("sim.real_sequences", s.real_sequences));
  f.push_back(field("sim.baseline", s.baseline));
  f.push_back(field("sim.z_min", s.z_min));
  f.push_back(field("sim.z_max", s.z_max));
  f.push_back(field("sim.speed", s.speed));
  f.push_back(field("sim.yaw_rate_max", s.yaw_rate_max));
  f.push_back(field("sim.real.gamma", s.real_appearance.gamma));
  f.push_back(field("sim.real.offset", s.real_appearance.offset));
  f.push_back(field("sim.real.noise_sigma", s.real_appearance.noise_sigma));
  for (int i = 0; i < 4; ++i) f.push_back(field("sim.real.curve" + std::to_string(i), s.real_appearance.curve[i]));

  auto& t = c.train;
  f.push_back(field("train.n_tr", t.n_tr));
  f.push_back(field("train.k_s", t.k_s));
  f.push_back(field("train.k_f", t.k_f));
  f.push_back(field("train.n_ft", t.n_ft));
  f.push_back(field("train.pretrain_encoder", t.pretrain_encoder));
  f.push_back(field("train.pretrain_virtual", t.pretrain_virtual));
  f.push_back(field("train.lr_da", t.lr_da));
  f.push_back(field("train.lr_mr", t.lr_mr));
  f.push_back(field("train.lr_pretrain", t.lr_pretrain));
  f.push_back(field("train.beta1", t.beta1));
  f.push_back(field("train.beta2", t.beta2));
  f.push_back(field("train.epsilon", t.epsilon));
  f.push_back(field("train.batch", t.batch));

  auto& w = c.loss;
  f.push_back(field("loss.lambda_p", w.lambda_p));
  f.push_back(field("loss.lambda_s", w.lambda_s));
  f.push_back(field("loss.lambda_gt", w.lambda_gt));
  f.push_back(field("loss.lambda_sc", w.lambda_sc));
  f.push_back(field("loss.lambda_g", w.lambda_g));
  f.push_back(field("loss.lambda_r", w.lambda_r));
  f.push_back(field("loss.lambda_p_star", w.lambda_p_star));
  f.push_back(field("loss.alpha_ssim", w.alpha_ssim));

  auto& b = c.backend;
  f.push_back(field("backend.huber", b.huber));
  f.push_back(field("backend.gradient_threshold", b.gradient_threshold));
  f.push_back(field("backend.weight_c", b.weight_c));
  f.push_back(field("backend.region_size", b.region_size));
  f.push_back(field("backend.bucket_size", b.bucket_size));
  f.push_back(field("backend.levels", b.levels));
  f.push_back(field("backend.track_iterations", b.track_iterations));
  f.push_back(field("backend.window_iterations", b.window_iterations));
  f.push_back(field("backend.max_keyframes", b.max_keyframes));
  f.push_back(field("backend.keyframe_flow", b.keyframe_flow));
  f.push_back(field("backend.keyframe_max_interval", b.keyframe_max_interval));
  f.push_back(field("backend.lambda_vs", b.lambda_vs));
  f.push_back(field("backend.use_depth_init", b.use_depth_init));
  f.push_back(field("backend.use_virtual_stereo", b.use_virtual_stereo));
  f.push_back(field("backend.threshold_jitter", b.threshold_jitter));
  f.push_back(field("backend.min_points", b.min_points));
  f.push_back(field("backend.lost_inlier_fraction", b.lost_inlier_fraction));

  f.push_back(field("eval.sublengths", c.eval.sublengths));
  f.push_back(field("eval.alignment", c.eval.alignment));
  f.push_back(field("pipeline.seeds", c.pipeline.seeds));
  f.push_back(field("pipeline.lambda_grid", c.pipeline.lambda_grid));
  return f;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
  if (sim.width < 16 || sim.height < 12) throw ConfigError("sim: image must be at least 16x12");
  if (sim.frames < 5) throw ConfigError("sim.frames must be >= 5");
  if (sim.virtual_sequences < 1 || sim.real_sequences < 1) throw ConfigError("sim: need >= 1 sequence per domain");
  if (!(sim.baseline > 0) || !(sim.z_min >= 1) || !(sim.z_max > sim.z_min) || !(sim.speed > 0))
    throw ConfigError("sim: baseline, depth range and speed must be positive and ordered");
  try {
    sim.real_appearance.validate();
    train.validate();
    loss.validate();
    backend.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (eval.sublengths.empty()) throw ConfigError("eval.sublengths must not be empty");
  for (double l : eval.sublengths)
    if (!(l > 0)) throw ConfigError("eval.sublengths must be positive");
  try {
    eval::parse_alignment(eval.alignment);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (pipeline.seeds < 1) throw ConfigError("pipeline.seeds must be >= 1");
  for (double l : pipeline.lambda_grid)
    if (!(l >= 0)) throw ConfigError("pipeline.lambda_grid entries must be >= 0");
}

/// Applies `key = value` lines on top of `base`. '#' starts a comment.
/// Unknown or repeated keys are errors.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
  auto fs = detail::fields(base);
  std::map<std::string, detail::Field*> index;
  for (auto& f : fs) index[f.key] = &f;
  std::map<std::string, int> seen;
  std::istringstream in(text);
  std::string line;
  int no = 0;
  while (std::getline(in, line)) {
    ++no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(no) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    auto it = index.find(key);
    if (it == index.end()) throw ConfigError("line " + std::to_string(no) + ": unknown key '" + key + "'");
    if (seen.count(key))
      throw ConfigError("line " + std::to_string(no) + ": '" + key + "' already set on line " +
                        std::to_string(seen[key]));
    seen[key] = no;
    it->second->set(value);
  }
  return base;
}

/// Every key, one per line; parse_config(dump_config(c)) == c.
inline std::string dump_config(const ExperimentConfig& c) {
  ExperimentConfig copy = c;
  std::string out;
  for (const auto& f : detail::fields(copy)) out += f.key + " = " + f.get() + "\n";
  return out;
}

/// Sets one key, e.g. from a command-line override.
inline void set_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  c = parse_config(key + " = " + value, c);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse_config(io::read_text(path));
}

// ---------------------------------------------------------------------------
// Manifest

class RunManifest {
 public:
  explicit RunManifest(std::string command) : command_(std::move(command)) {}

  void set_config(const ExperimentConfig& c) { config_ = dump_config(c); }

  /// Records a file with its checksum; paths are stored relative to `root`.
  void add_artifact(const std::filesystem::path& root, const std::filesystem::path& file) {
    artifacts_[std::filesystem::relative(file, root).generic_string()] = io::file_checksum(file);
  }

  /// Adds every regular file under `dir`.
  void add_tree(const std::filesystem::path& root, const std::filesystem::path& dir) {
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
      if (e.is_regular_file() && e.path().filename() != "manifest.json") add_artifact(root, e.path());
  }

  void add_timing(const std::string& stage, double seconds) { timings_.emplace_back(stage, seconds); }
  void add_metric(const std::string& name, double value) { metrics_[name] = value; }
  void add_note(const std::string& key, const std::string& value) { notes_[key] = value; }

  const std::map<std::string, std::string>& artifacts() const { return artifacts_; }
  const std::map<std::string, double>& metrics() const { return metrics_; }

  std::string json() const {
    nlohmann::ordered_json j;
    j["command"] = command_;
    j["config"] = config_;
    j["artifacts"] = artifacts_;
    nlohmann::ordered_json t = nlohmann::ordered_json::array();
    for (const auto& [k, v] : timings_) t.push_back({{"stage", k}, {"seconds", v}});
    j["timings"] = t;
    j["metrics"] = metrics_;
    j["notes"] = notes_;
    return j.dump(2) + "\n";
  }

  void write(const std::filesystem::path& path) const { io::write_text(path, json()); }

 private:
  std::string command_;
  std::string config_;
  std::map<std::string, std::string> artifacts_;
  std::vector<std::pair<std::string, double>> timings_;
  std::map<std::string, double> metrics_;
  std::map<std::string, std::string> notes_;
};

/// Wall-clock timer for manifest stage timings.
class StageTimer {
 public:
  StageTimer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace vrvo::app
