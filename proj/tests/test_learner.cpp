#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <random>

#include "vrvo/evaluation.hpp"
#include "vrvo/learner.hpp"
#include "vrvo/simulator.hpp"

using namespace vrvo;
using namespace vrvo::learn;
using namespace vrvo::sim;

namespace {

StereoRig small_rig() { return {make_intrinsics(32, 24), 0.54}; }

struct Corpus {
  std::vector<SequenceBundle> virt, real;
  TrainData data;
};

const Corpus& corpus() {
  static Corpus* c = [] {
    auto* out = new Corpus;
    const StereoRig rig = small_rig();
    for (std::uint64_t s : {11, 12}) {
      SceneConfig sc;
      sc.seed = s;
      out->virt.push_back(generate_virtual_sequence(build_scene(sc), TrajectorySpec{}, rig,
                                                    default_virtual_appearance(), 8));
    }
    SceneConfig rc;
    rc.seed = 21;
    out->real.push_back(generate_real_sequence(build_scene(rc), TrajectorySpec{}, rig, default_real_appearance(), 8,
                                               default_virtual_appearance(), {11, 12}));
    out->data.rig = rig;
    for (const auto& b : out->virt) out->data.virt.views.push_back(b.learner_view());
    for (const auto& b : out->real) out->data.real.views.push_back(b.learner_view());
    return out;
  }();
  return *c;
}

double d_max() { return max_disparity(small_rig(), SceneConfig{}.z_min); }

TrainConfig quick_config() {
  TrainConfig c;
  c.n_tr = 2;
  c.k_s = 2;
  c.n_ft = 2;
  c.pretrain_encoder = 1;
  c.pretrain_virtual = 1;
  c.batch = 2;
  return c;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("vrvo_learner_" + name);
}

}  // namespace

TEST(ForwardPass, ShapesForBatchOfTwo) {
  const Corpus& c = corpus();
  Model m(d_max(), 0);
  const Batch rb = make_batch(c.data.real, {{0, 1}, {0, 4}});
  const Batch vb = make_batch(c.data.virt, {{0, 2}, {1, 5}});
  ad::Tape tape;
  ForwardOutputs f = forward_pass(tape, m, &rb, &vb, {});
  const ad::Shape img{2, 1, 24, 32};
  for (const DomainOutputs* o : {&*f.real, &*f.virt}) {
    EXPECT_EQ(o->features.shape(), img);
    EXPECT_EQ(o->disparity.shape(), img);
    EXPECT_EQ(o->pose_to_prev.shape(), (ad::Shape{2, 6, 1, 1}));
    EXPECT_EQ(o->pose_to_next.shape(), (ad::Shape{2, 6, 1, 1}));
    EXPECT_EQ(o->critic.shape(), (ad::Shape{2, 1, 1, 1}));
  }
  EXPECT_FALSE(f.real->right.defined());
  EXPECT_TRUE(f.virt->right.defined());
}

TEST(ForwardPass, DeterministicUnderSeed) {
  const Corpus& c = corpus();
  Model a(d_max(), 7), b(d_max(), 7), other(d_max(), 8);
  const Batch vb = make_batch(c.data.virt, {{0, 3}});
  ad::Tape ta, tb, tc;
  auto fa = forward_pass(ta, a, nullptr, &vb, {});
  auto fb = forward_pass(tb, b, nullptr, &vb, {});
  auto fc = forward_pass(tc, other, nullptr, &vb, {});
  EXPECT_EQ(fa.virt->disparity.value(), fb.virt->disparity.value());
  EXPECT_EQ(fa.virt->pose_to_next.value(), fb.virt->pose_to_next.value());
  EXPECT_NE(fa.virt->disparity.value(), fc.virt->disparity.value());

  std::mt19937_64 r1(3), r2(3);
  EXPECT_EQ(sample_batch(c.data.virt, 3, r1).frames, sample_batch(c.data.virt, 3, r2).frames);
}

TEST(ForwardPass, DisparityWithinBoundsOnRandomInputs) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.5, 2.0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Model m(d_max(), seed);
    std::vector<Image> imgs(2, Image(32, 24));
    for (auto& im : imgs)
      for (double& v : im.data()) v = n(rng);
    for (const DisparityMap& d : predict_disparities(m, imgs))
      for (double v : d.values.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, d_max());
      }
  }
}

TEST(ForwardPass, RejectsMalformedBatches) {
  const Corpus& c = corpus();
  Model m(d_max(), 0);
  Batch vb = make_batch(c.data.virt, {{0, 1}});
  const Batch rb = make_batch(c.data.real, {{0, 1}});
  ad::Tape tape;
  EXPECT_THROW(forward_pass(tape, m, nullptr, nullptr, {}), TrainingError);
  EXPECT_THROW(forward_pass(tape, m, &vb, nullptr, {}), TrainingError);
  EXPECT_THROW(forward_pass(tape, m, nullptr, &rb, {}), TrainingError);
  Batch no_right = vb;
  no_right.right = ad::TensorBuffer();
  EXPECT_THROW(forward_pass(tape, m, nullptr, &no_right, {}), TrainingError);
  EXPECT_THROW(make_batch(c.data.virt, {{0, 0}}), TrainingError);
  EXPECT_THROW(make_batch(c.data.virt, {{0, 7}}), TrainingError);
  EXPECT_THROW(make_batch(c.data.virt, {{5, 2}}), TrainingError);
}

TEST(ForwardPass, RealViewsExposeNoStereoData) {
  for (const auto& v : corpus().data.real.views) {
    EXPECT_EQ(v.right, nullptr);
    EXPECT_EQ(v.disparity, nullptr);
  }
  const Batch rb = make_batch(corpus().data.real, {{0, 2}});
  EXPECT_EQ(rb.right.numel(), 0u);
  EXPECT_EQ(rb.gt_disparity.numel(), 0u);
}

TEST(Optimizer, MatchesClosedFormFirstStep) {
  nn::ParameterSet ps;
  auto t = ps.add("w", ad::Shape{1, 1, 1, 3});
  t->value = {1.0, -2.0, 0.5};
  t->grad = {0.3, -4.0, 0.0};
  Adam adam(ps, 0.1);
  adam.step();
  // Bias-corrected first step moves each coordinate by lr * sign(g).
  EXPECT_NEAR(t->value[0], 0.9, 1e-6);
  EXPECT_NEAR(t->value[1], -1.9, 1e-6);
  EXPECT_DOUBLE_EQ(t->value[2], 0.5);
  for (double g : t->grad) EXPECT_EQ(g, 0.0);
}

TEST(Optimizer, MinimisesQuadratic) {
  nn::ParameterSet ps;
  auto t = ps.add("w", ad::Shape{1, 1, 1, 2});
  t->value = {3.0, -1.0};
  Adam adam(ps, 0.05);
  for (int i = 0; i < 2000; ++i) {
    t->grad = {2 * (t->value[0] - 1.0), 2 * (t->value[1] + 2.0)};
    adam.step();
  }
  EXPECT_NEAR(t->value[0], 1.0, 1e-2);
  EXPECT_NEAR(t->value[1], -2.0, 1e-2);
}

TEST(TrainConfig, ValidatesAndKeepsPresets) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.n_tr, 2000);
  EXPECT_EQ(c.n_ft, 200);
  EXPECT_DOUBLE_EQ(c.lr_da, 1e-4);
  EXPECT_DOUBLE_EQ(c.lr_mr, 1e-3);
  EXPECT_EQ(TrainConfig::full_scale().n_tr, 150000);
  for (auto bad : {&TrainConfig::n_tr, &TrainConfig::k_s, &TrainConfig::k_f, &TrainConfig::n_ft, &TrainConfig::batch}) {
    TrainConfig b;
    b.*bad = 0;
    EXPECT_THROW(b.validate(), TrainingError);
  }
  TrainConfig b;
  b.beta2 = 1.0;
  EXPECT_THROW(b.validate(), TrainingError);
}

TEST(TrainDa, EachStepTouchesOnlyItsNetworks) {
  const Corpus& c = corpus();
  Model m(d_max(), 1);
  const std::uint64_t s0 = m.encoder.params().hash(), d0 = m.decoder.params().hash(),
                      p0 = m.pose.params().hash(), a0 = m.critic.params().hash();
  const TrainConfig cfg = quick_config();
  TrainResult r = train_da(m, c.data, cfg, {});
  // warm starts + per iteration (critic, k_s encoder, task)
  EXPECT_EQ(r.exclusivity_checks, static_cast<std::size_t>(1 + 1 + cfg.n_tr * (2 + cfg.k_s)));
  EXPECT_NE(m.encoder.params().hash(), s0);
  EXPECT_NE(m.decoder.params().hash(), d0);
  EXPECT_NE(m.pose.params().hash(), p0);
  EXPECT_NE(m.critic.params().hash(), a0);
  EXPECT_EQ(r.curves.series("domain-adaptation", "critic_total").size(), 2u);
}

TEST(TrainDa, ExclusivityCheckDetectsViolations) {
  const learn::detail::Hashes a{1, 2, 3, 4};
  EXPECT_NO_THROW(learn::detail::check_exclusive(a, {9, 2, 3, 4}, {true, false, false, false}, "encoder"));
  EXPECT_THROW(learn::detail::check_exclusive(a, {1, 2, 3, 9}, {true, false, false, false}, "encoder"), std::logic_error);
  EXPECT_THROW(learn::detail::check_exclusive(a, {9, 2, 3, 4}, {false, false, false, true}, "critic"), std::logic_error);
  EXPECT_NO_THROW(learn::detail::check_exclusive(a, {1, 8, 9, 4}, {false, true, true, false}, "task"));
}

TEST(TrainDa, CriticStepMovesOnlyCritic) {
  const Corpus& c = corpus();
  Model m(d_max(), 2);
  Adam opt(m.critic.params(), 1e-3);
  std::mt19937_64 rng(0);
  const auto s0 = m.encoder.params().hash(), d0 = m.decoder.params().hash(), p0 = m.pose.params().hash();
  const Batch rb = make_batch(c.data.real, {{0, 1}, {0, 3}}), vb = make_batch(c.data.virt, {{0, 1}, {1, 2}});
  auto [adv, gp] = critic_step(m, opt, rb, vb, {}, rng);
  EXPECT_TRUE(std::isfinite(adv));
  EXPECT_GE(gp, 0.0);
  EXPECT_EQ(m.encoder.params().hash(), s0);
  EXPECT_EQ(m.decoder.params().hash(), d0);
  EXPECT_EQ(m.pose.params().hash(), p0);
}

TEST(TrainDa, DeterministicGivenSeed) {
  const Corpus& c = corpus();
  Model a(d_max(), 3), b(d_max(), 3);
  TrainConfig cfg = quick_config();
  cfg.seed = 9;
  const TrainResult ra = train_da(a, c.data, cfg, {});
  const TrainResult rb = train_da(b, c.data, cfg, {});
  for (int i = 0; i < 4; ++i) EXPECT_EQ(a.sets()[i]->hash(), b.sets()[i]->hash());
  EXPECT_EQ(ra.curves.csv(), rb.curves.csv());
}

TEST(TrainDa, VirtualTaskLossDecreases) {
  const Corpus& c = corpus();
  for (std::uint64_t seed : {0, 1}) {
    Model m(d_max(), seed);
    TrainConfig cfg;
    cfg.n_tr = 40;
    cfg.batch = 2;
    cfg.pretrain_encoder = 0;
    cfg.pretrain_virtual = 0;
    cfg.lr_da = 1e-3;
    cfg.seed = seed;
    TrainOptions opt;
    opt.mode = TrainMode::VirtualOnly;
    opt.verify_exclusivity = false;
    const auto series = train_da(m, c.data, cfg, {}, opt).curves.series("virtual-only", "task");
    ASSERT_EQ(series.size(), 40u);
    double head = 0, tail = 0;
    for (int i = 0; i < 5; ++i) {
      head += series[i];
      tail += series[series.size() - 1 - i];
    }
    EXPECT_LT(tail, head) << "seed " << seed;
  }
}

TEST(TrainDa, RejectsMissingDomain) {
  TrainData empty;
  empty.rig = small_rig();
  Model m(d_max(), 0);
  EXPECT_THROW(train_da(m, empty, quick_config(), {}), TrainingError);
  TrainData virt_only = empty;
  virt_only.virt = corpus().data.virt;
  EXPECT_THROW(train_da(m, virt_only, quick_config(), {}), TrainingError);
  TrainOptions opt;
  opt.mode = TrainMode::VirtualOnly;
  EXPECT_NO_THROW(train_da(m, virt_only, quick_config(), {}, opt));
}

TEST(TrainDa, DivergenceGuardWritesLastFiniteCheckpoint) {
  const Corpus& c = corpus();
  Model m(d_max(), 4);
  TrainConfig cfg = quick_config();
  cfg.n_tr = 5;
  TrainOptions opt;
  opt.divergence_checkpoint = temp_path("diverged.ckpt");
  std::filesystem::remove(opt.divergence_checkpoint);
  opt.on_iteration = [](const std::string& phase, long it, Model& model) {
    if (phase == "domain-adaptation" && it == 2) model.decoder.params().params()[0].tensor->value[0] = std::nan("");
  };
  try {
    train_da(m, c.data, cfg, {}, opt);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.checkpoint(), opt.divergence_checkpoint);
  }
  ASSERT_TRUE(std::filesystem::exists(opt.divergence_checkpoint));
  Model restored(d_max(), 99);
  restored.load(opt.divergence_checkpoint);
  EXPECT_TRUE(restored.all_finite());
  std::filesystem::remove(opt.divergence_checkpoint);
}

TEST(Checkpoint, ReloadGivesBitIdenticalForward) {
  const Corpus& c = corpus();
  Model m(d_max(), 5);
  train_da(m, c.data, quick_config(), {});
  const auto path = temp_path("roundtrip.ckpt");
  m.save(path);
  Model r(d_max(), 6);
  r.load(path);
  const auto imgs = std::vector<Image>(c.real[0].left.begin(), c.real[0].left.begin() + 3);
  const auto a = predict_disparities(m, imgs), b = predict_disparities(r, imgs);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].values, b[i].values);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(m.sets()[i]->hash(), r.sets()[i]->hash());
  std::filesystem::remove(path);
}

TEST(BackendPoses, RelativePoseConventionMatchesGroundTruth) {
  // gt poses + gt disparity should reproduce the target almost exactly.
  const Corpus& c = corpus();
  const SequenceBundle& s = c.virt[0];
  ad::Tape tape;
  auto img = [&](int i) { return tape.constant(stack_images({&s.left[i]})); };
  ad::TensorBuffer disp(ad::Shape{1, 1, 24, 32});
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 32; ++x) disp.at(0, 0, y, x) = s.gt_disparity[3].values(x, y);
  const auto rig = small_rig();
  auto loss = [&](const std::optional<Pose>& prev, const std::optional<Pose>& next) {
    return losses::backward_reinforcement(img(3), img(2), img(4), tape.constant(disp), {prev}, {next},
                                          rig.intrinsics, rig.focal_baseline(), 0.85);
  };
  const auto good = loss(backend_relative(s.gt_poses, 3, 2), backend_relative(s.gt_poses, 3, 4));
  const auto swapped = loss(backend_relative(s.gt_poses, 2, 3), backend_relative(s.gt_poses, 4, 3));
  ASSERT_TRUE(good.loss.defined());
  EXPECT_LT(good.loss.item(), 0.5 * swapped.loss.item());
  EXPECT_FALSE(backend_relative(s.gt_poses, 3, 8).has_value());
  EXPECT_FALSE(backend_relative(s.gt_poses, -1, 0).has_value());
}

TEST(MutualReinforcement, FreezesEncoderAndCritic) {
  const Corpus& c = corpus();
  Model m(d_max(), 6);
  const auto s0 = m.encoder.params().hash(), a0 = m.critic.params().hash(), d0 = m.decoder.params().hash(),
             p0 = m.pose.params().hash();
  TrainConfig cfg = quick_config();
  MrResult r = mr_step(m, c.data, {c.real[0].gt_poses}, cfg, {});
  EXPECT_EQ(m.encoder.params().hash(), s0);
  EXPECT_EQ(m.critic.params().hash(), a0);
  EXPECT_NE(m.decoder.params().hash(), d0);
  EXPECT_NE(m.pose.params().hash(), p0);
  EXPECT_EQ(r.used, static_cast<std::size_t>(cfg.n_ft * cfg.batch));
  EXPECT_EQ(r.skipped, 0u);
}

TEST(MutualReinforcement, ZeroWeightIsPlainTaskFinetuning) {
  const Corpus& c = corpus();
  LossWeights w;
  w.lambda_p_star = 0;
  Model a(d_max(), 7), b(d_max(), 7);
  TrainConfig cfg = quick_config();
  mr_step(a, c.data, {c.real[0].gt_poses}, cfg, w);
  // Trajectory content cannot matter when the backend term is off.
  std::vector<Pose> junk(c.real[0].gt_poses.size(), Pose::identity());
  mr_step(b, c.data, {junk}, cfg, w);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(a.sets()[i]->hash(), b.sets()[i]->hash());

  Model d(d_max(), 7);
  mr_step(d, c.data, {c.real[0].gt_poses}, cfg, {});
  EXPECT_NE(d.decoder.params().hash(), a.decoder.params().hash());
}

TEST(MutualReinforcement, MissingPosesAreSkippedAndCounted) {
  const Corpus& c = corpus();
  Model m(d_max(), 8);
  TrainConfig cfg = quick_config();
  std::vector<Pose> short_traj(c.real[0].gt_poses.begin(), c.real[0].gt_poses.begin() + 2);
  MrResult r = mr_step(m, c.data, {short_traj}, cfg, {});
  EXPECT_EQ(r.used, 0u);
  EXPECT_EQ(r.skipped, static_cast<std::size_t>(cfg.n_ft * cfg.batch));
  EXPECT_THROW(mr_step(m, c.data, {}, cfg, {}), TrainingError);
}

TEST(LossCurves, CsvHasUnionOfColumns) {
  LossCurves c;
  c.add("a", 0, {{"x", 1.0}});
  c.add("b", 3, {{"y", 2.5}});
  EXPECT_EQ(c.csv(), "phase,iteration,x,y\na,0,1,\nb,3,,2.5\n");
  EXPECT_EQ(c.series("a", "x"), std::vector<double>{1.0});
}

TEST(Timing, DomainAdaptationIteration) {
  // Records the cost of one full iteration at the evaluation resolution.
  const StereoRig rig{make_intrinsics(64, 48), 0.54};
  SceneConfig sc;
  sc.seed = 11;
  const auto v = generate_virtual_sequence(build_scene(sc), TrajectorySpec{}, rig, default_virtual_appearance(), 5);
  sc.seed = 21;
  const auto r = generate_real_sequence(build_scene(sc), TrajectorySpec{}, rig, default_real_appearance(), 5,
                                        default_virtual_appearance(), {11});
  TrainData d;
  d.rig = rig;
  d.virt.views.push_back(v.learner_view());
  d.real.views.push_back(r.learner_view());
  Model m(max_disparity(rig, 4.0), 0);
  TrainConfig cfg;
  cfg.n_tr = 1;
  cfg.pretrain_encoder = 0;
  cfg.pretrain_virtual = 0;
  const auto t0 = std::chrono::steady_clock::now();
  train_da(m, d, cfg, {});
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  RecordProperty("seconds_per_iteration", std::to_string(sec));
  std::printf("domain-adaptation iteration (batch %d, 64x48): %.3f s\n", cfg.batch, sec);
  EXPECT_GT(sec, 0.0);
}
