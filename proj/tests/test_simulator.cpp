#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "vrvo/io.hpp"
#include "vrvo/simulator.hpp"

using namespace vrvo;
using namespace vrvo::sim;

namespace {

StereoRig default_rig() { return {make_intrinsics(64, 48), 0.54}; }

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("vrvo_sim_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Scene, DeterministicPerSeed) {
  SceneConfig c;
  c.seed = 42;
  Scene a = build_scene(c), b = build_scene(c);
  EXPECT_TRUE(a == b);
  c.seed = 43;
  EXPECT_FALSE(a == build_scene(c));
  const Intrinsics k = make_intrinsics(64, 48);
  RenderedView r1 = render_frame(a, Pose::identity(), k, DomainAppearance::identity());
  RenderedView r2 = render_frame(a, Pose::identity(), k, DomainAppearance::identity());
  EXPECT_TRUE(r1.image == r2.image);
  EXPECT_TRUE(r1.depth == r2.depth);
}

TEST(Scene, RejectsDegenerateConfig) {
  SceneConfig c;
  c.grid_width = 2;
  EXPECT_THROW(build_scene(c), SimulationError);
  c = SceneConfig{};
  c.z_min = 0.5;
  EXPECT_THROW(build_scene(c), SimulationError);
}

TEST(Scene, DepthsWithinRange) {
  SceneConfig c;
  Scene s = build_scene(c);
  for (int j = 0; j < 50; ++j)
    for (int i = 0; i < 50; ++i) {
      double h = s.height(c.x_min + (c.x_max - c.x_min) * i / 49.0, c.y_min + (c.y_max - c.y_min) * j / 49.0);
      EXPECT_GE(h, c.z_min - 1e-12);
      EXPECT_LE(h, c.z_max + 1e-12);
    }
}

TEST(Scene, GradientCoverageOnTwentySeeds) {
  const Intrinsics k = make_intrinsics(64, 48);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SceneConfig c;
    c.seed = seed;
    EXPECT_GE(texture_gradient_coverage(build_scene(c), k), 0.6) << "seed " << seed;
  }
}

TEST(Render, FlatPlaneMatchesHandRaycast) {
  SceneConfig c;
  c.flat = true;
  c.z_min = c.z_max = 5.0;
  Scene s = build_scene(c);
  const Intrinsics k = make_intrinsics(64, 48);
  const Pose cam(Mat3::Identity(), Vec3(1.0, -0.5, 0.0));
  RenderedView v = render_frame(s, cam, k, DomainAppearance::identity());
  const int pixels[10][2] = {{0, 0}, {63, 47}, {32, 24}, {5, 40}, {60, 3}, {17, 29}, {44, 11}, {23, 7}, {51, 36}, {9, 18}};
  for (auto& px : pixels) {
    // Ray through the pixel meets z = 5 at parameter 5 (unit-z direction).
    const double dx = (px[0] - k.cx) / k.fx, dy = (px[1] - k.cy) / k.fy;
    const double wx = 1.0 + 5.0 * dx, wy = -0.5 + 5.0 * dy;
    ASSERT_TRUE(v.depth.is_valid(px[0], px[1]));
    EXPECT_NEAR(v.depth.values(px[0], px[1]), 5.0, 1e-9);
    // Flat surface: normal (0,0,-1), shading is ambient + (1-ambient) * max(0, -l.z).
    const double shade = c.ambient + (1 - c.ambient) * std::max(0.0, -c.light_dir.z());
    EXPECT_NEAR(v.image(px[0], px[1]), std::clamp(s.albedo(wx, wy) * shade, 0.0, 1.0), 1e-9);
  }
}

TEST(Render, FlatPlaneGivesConstantDisparity) {
  SceneConfig c;
  c.flat = true;
  c.z_min = c.z_max = 4.0;
  Scene s = build_scene(c);
  StereoRig rig = default_rig();
  TrajectorySpec t;
  t.yaw_rate_max = 0.0;
  t.travel_direction = Vec3(1, 0, 0);
  SequenceBundle b = generate_virtual_sequence(s, t, rig, DomainAppearance::identity(), 3);
  const double expect = rig.intrinsics.fx * rig.baseline / 4.0;
  for (const auto& d : b.gt_disparity)
    for (std::size_t i = 0; i < d.values.size(); ++i) {
      ASSERT_TRUE(d.valid[i]);
      EXPECT_NEAR(d.values[i], expect, 1e-6);
    }
}

TEST(Appearance, IdentityIsNoOp) {
  DomainAppearance a;
  for (double v = 0; v <= 1.0; v += 0.01) EXPECT_NEAR(a.apply_noiseless(v), v, 1e-12);
  DomainAppearance r = default_real_appearance();
  for (double v = 0; v < 1.0; v += 0.01) EXPECT_LT(r.apply_noiseless(v), r.apply_noiseless(v + 0.01) + 1e-15);
  DomainAppearance bad;
  bad.curve = {0.0, 0.5, 0.4, 1.0};
  EXPECT_THROW(bad.validate(), SimulationError);
}

class SequenceTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    SceneConfig vc;
    vc.seed = 1;
    SceneConfig rc;
    rc.seed = 2;
    virt_ = new SequenceBundle(
        generate_virtual_sequence(build_scene(vc), TrajectorySpec{}, default_rig(), default_virtual_appearance(), 20));
    real_ = new SequenceBundle(generate_real_sequence(build_scene(rc), TrajectorySpec{}, default_rig(),
                                                      default_real_appearance(), 20, default_virtual_appearance(),
                                                      {1}));
  }
  static void TearDownTestSuite() {
    delete virt_;
    delete real_;
  }
  static SequenceBundle* virt_;
  static SequenceBundle* real_;
};

SequenceBundle* SequenceTest::virt_ = nullptr;
SequenceBundle* SequenceTest::real_ = nullptr;

TEST_F(SequenceTest, DisparityDepthConsistency) {
  const double fb = virt_->rig.focal_baseline();
  for (std::size_t f = 0; f < virt_->size(); ++f) {
    const auto& d = virt_->gt_disparity[f];
    const auto& z = virt_->gt_depth[f];
    for (std::size_t i = 0; i < d.values.size(); ++i) {
      ASSERT_EQ(d.valid[i], z.valid[i]);
      if (d.valid[i]) {
        EXPECT_NEAR(d.values[i], fb / z.values[i], 1e-6);
      }
    }
  }
}

TEST_F(SequenceTest, WarpingModelIsSelfConsistent) {
  const Intrinsics& k = virt_->rig.intrinsics;
  for (std::size_t f = 0; f + 1 < virt_->size(); ++f) {
    const Pose rel = virt_->gt_poses[f + 1].inverse() * virt_->gt_poses[f];
    double sq = 0;
    int n = 0;
    for (int y = 0; y < k.height; ++y)
      for (int x = 0; x < k.width; ++x) {
        if (!virt_->gt_depth[f].is_valid(x, y)) continue;
        WarpResult w = warp_pixel(Vec2(x, y), virt_->gt_depth[f].values(x, y), rel, k);
        if (!w.in_bounds) continue;
        auto v = sample_bilinear(virt_->left[f + 1], w.pixel);
        const double r = *v - virt_->left[f](x, y);
        sq += r * r;
        ++n;
      }
    ASSERT_GT(n, 1000);
    EXPECT_LT(sq / n, 1e-3) << "frame " << f;
  }
}

TEST_F(SequenceTest, RightImageMatchesLeftThroughDisparity) {
  const auto& k = virt_->rig.intrinsics;
  for (std::size_t f = 0; f < virt_->size(); f += 5) {
    double err = 0;
    int n = 0;
    for (int y = 0; y < k.height; ++y)
      for (int x = 0; x < k.width; ++x) {
        if (!virt_->gt_disparity[f].is_valid(x, y)) continue;
        auto v = sample_bilinear(virt_->right[f], Vec2(x - virt_->gt_disparity[f].values(x, y), y));
        if (!v) continue;
        err += std::abs(*v - virt_->left[f](x, y));
        ++n;
      }
    EXPECT_LT(err / n, 0.01);
  }
}

TEST_F(SequenceTest, RealLearnerViewHidesLabels) {
  LearnerView v = real_->learner_view();
  EXPECT_EQ(v.domain, Domain::Real);
  EXPECT_EQ(v.right, nullptr);
  EXPECT_EQ(v.disparity, nullptr);
  EXPECT_EQ(v.size(), 20u);
  LearnerView vv = virt_->learner_view();
  EXPECT_NE(vv.right, nullptr);
  EXPECT_NE(vv.disparity, nullptr);
}

TEST_F(SequenceTest, DomainsDifferInHistogram) {
  EXPECT_GT(histogram_chi_square(virt_->left, real_->left), 0.05);
  EXPECT_LT(histogram_chi_square(virt_->left, virt_->left), 1e-15);
}

TEST_F(SequenceTest, PathLengthHasAbsoluteScale) {
  EXPECT_NEAR(path_length(real_->gt_poses), 0.15 * 19, 1e-9);
  EXPECT_NEAR(path_length(virt_->gt_poses), 0.15 * 19, 1e-9);
}

TEST_F(SequenceTest, SceneStaysInView) {
  for (const auto& z : virt_->gt_depth) EXPECT_GE(static_cast<double>(z.valid_count()) / z.values.size(), 0.5);
}

TEST(Sequence, RealRejectsSharedAppearanceOrSeed) {
  SceneConfig c;
  c.seed = 5;
  Scene s = build_scene(c);
  EXPECT_THROW(generate_real_sequence(s, TrajectorySpec{}, default_rig(), default_virtual_appearance(), 5,
                                      default_virtual_appearance(), {1}),
               SimulationError);
  EXPECT_THROW(generate_real_sequence(s, TrajectorySpec{}, default_rig(), default_real_appearance(), 5,
                                      default_virtual_appearance(), {5}),
               SimulationError);
  EXPECT_THROW(generate_virtual_sequence(s, TrajectorySpec{}, default_rig(), default_virtual_appearance(), 2),
               SimulationError);
}

TEST(Io, KittiPoseRoundtripIsExact) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<Pose> poses;
  for (int i = 0; i < 30; ++i) {
    Vec6 xi;
    for (int j = 0; j < 6; ++j) xi[j] = u(rng) * (j < 3 ? 1.0 : 50.0);
    poses.push_back(se3_exp(xi));
  }
  auto dir = temp_dir("poses");
  io::write_kitti_poses(dir / "p.txt", poses);
  auto back = io::read_kitti_poses(dir / "p.txt");
  ASSERT_EQ(back.size(), poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i) {
    EXPECT_EQ(back[i].rotation, poses[i].rotation);
    EXPECT_EQ(back[i].translation, poses[i].translation);
  }
}

TEST(Io, PfmAndPgmRoundtrip) {
  auto dir = temp_dir("maps");
  ScalarMap m(7, 5);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 7; ++x) {
      m.values(x, y) = 0.25 * (x + 10 * y) + 0.5;
      m.valid(x, y) = (x + y) % 3 != 0;
      if (!m.valid(x, y)) m.values(x, y) = 0;
    }
  io::write_pfm(dir / "m.pfm", m);
  EXPECT_TRUE(io::read_pfm(dir / "m.pfm") == m);
  // PFM stores the bottom row first.
  std::ifstream in(dir / "m.pfm", std::ios::binary);
  std::string magic, dims, scale;
  std::getline(in, magic);
  std::getline(in, dims);
  std::getline(in, scale);
  EXPECT_EQ(magic, "Pf");
  EXPECT_EQ(dims, "7 5");
  EXPECT_EQ(scale, "-1.0");
  float first;
  in.read(reinterpret_cast<char*>(&first), 4);
  EXPECT_FLOAT_EQ(first, static_cast<float>(m.values(0, 4)));

  Image img(6, 4);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i * 10) / 255.0;
  io::write_pgm(dir / "i.pgm", img);
  Image back = io::read_pgm(dir / "i.pgm");
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], img[i], 1e-12);
}

TEST(Io, DatasetLayoutAndMissingDataset) {
  SceneConfig c;
  Scene s = build_scene(c);
  SequenceBundle v = generate_virtual_sequence(s, TrajectorySpec{}, default_rig(), default_virtual_appearance(), 4);
  auto dir = temp_dir("dataset");
  write_dataset(dir / "virtual", v);
  for (const char* f : {"images/000003.pgm", "right/000000.pgm", "disp_gt/000002.pfm", "poses_gt.txt", "calib.txt",
                        "domain.txt"})
    EXPECT_TRUE(std::filesystem::exists(dir / "virtual" / f)) << f;
  SequenceBundle back = read_dataset(dir / "virtual");
  EXPECT_EQ(back.domain, Domain::Virtual);
  EXPECT_EQ(back.size(), 4u);
  EXPECT_EQ(back.rig.intrinsics.width, 64);
  EXPECT_NEAR(back.rig.baseline, 0.54, 1e-15);

  SceneConfig rc;
  rc.seed = 9;
  SequenceBundle r = generate_real_sequence(build_scene(rc), TrajectorySpec{}, default_rig(),
                                            default_real_appearance(), 4, default_virtual_appearance(), {c.seed});
  write_dataset(dir / "real", r);
  EXPECT_FALSE(std::filesystem::exists(dir / "real" / "right"));
  EXPECT_FALSE(std::filesystem::exists(dir / "real" / "disp_gt"));
  SequenceBundle learner_side = read_dataset(dir / "real", false);
  EXPECT_TRUE(learner_side.gt_disparity.empty());
  EXPECT_TRUE(learner_side.gt_poses.empty());
  EXPECT_EQ(read_dataset(dir / "real", true).gt_disparity.size(), 4u);

  try {
    read_dataset(dir / "nothing_here");
    FAIL();
  } catch (const SimulationError& e) {
    EXPECT_NE(std::string(e.what()).find("gen-data"), std::string::npos);
  }
}
