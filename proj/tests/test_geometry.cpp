#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "vrvo/geometry.hpp"

using namespace vrvo;

namespace {

// Rodrigues written out component-wise, independent of the library's code path.
Mat3 rodrigues(const Vec3& w) {
  const double th = w.norm();
  if (th < 1e-12) return Mat3::Identity();
  const double kx = w.x() / th, ky = w.y() / th, kz = w.z() / th;
  const double c = std::cos(th), s = std::sin(th), v = 1 - c;
  Mat3 r;
  r << kx * kx * v + c, kx * ky * v - kz * s, kx * kz * v + ky * s,  //
      ky * kx * v + kz * s, ky * ky * v + c, ky * kz * v - kx * s,  //
      kz * kx * v - ky * s, kz * ky * v + kx * s, kz * kz * v + c;
  return r;
}

Intrinsics test_k(double f = 100, int w = 64, int h = 48) {
  Intrinsics k;
  k.fx = k.fy = f;
  k.cx = 32;
  k.cy = 24;
  k.width = w;
  k.height = h;
  return k;
}

Vec6 random_xi(std::mt19937_64& rng, double mag) {
  std::uniform_real_distribution<double> u(-1, 1);
  Vec6 xi;
  for (int i = 0; i < 6; ++i) xi[i] = u(rng);
  return xi.normalized() * mag * std::abs(u(rng));
}

}  // namespace

TEST(Se3, ExpOfZeroIsIdentity) {
  Pose p = se3_exp(Vec6::Zero());
  EXPECT_LT((p.rotation - Mat3::Identity()).norm(), 1e-15);
  EXPECT_LT(p.translation.norm(), 1e-15);
}

TEST(Se3, QuarterTurnAboutZ) {
  Vec6 xi = Vec6::Zero();
  xi[2] = M_PI / 2;
  Pose p = se3_exp(xi);
  EXPECT_LT((p.rotation * Vec3::UnitX() - Vec3::UnitY()).norm(), 1e-9);
}

TEST(Se3, RotationMatchesIndependentRodrigues) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 100; ++i) {
    Vec6 xi = random_xi(rng, 1.0);
    EXPECT_LT((se3_exp(xi).rotation - rodrigues(xi.head<3>())).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Se3, LogExpRoundtrip) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    Vec6 xi = random_xi(rng, 1.0);
    EXPECT_LT((se3_log(se3_exp(xi)) - xi).cwiseAbs().maxCoeff(), 1e-8);
    // Build the pose from the independent Rodrigues rotation and check exp(log(p)) = p.
    Pose p(rodrigues(xi.head<3>()), xi.tail<3>() * 3.0);
    Pose q = se3_exp(se3_log(p));
    EXPECT_LT((q.rotation - p.rotation).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((q.translation - p.translation).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Se3, SmallAngleBranch) {
  Vec6 xi;
  xi << 1e-10, -2e-10, 3e-11, 0.5, -0.2, 0.1;
  Pose p = se3_exp(xi);
  EXPECT_TRUE(p.is_valid());
  EXPECT_LT((se3_log(p) - xi).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Se3, LogOfIdentityAndPureTranslation) {
  EXPECT_LT(se3_log(Pose::identity()).norm(), 1e-15);
  Vec6 xi;
  xi << 0, 0, 0, 1, 2, 3;
  EXPECT_EQ(se3_log(se3_exp(xi)), xi);
}

TEST(Se3, RotationByPiUsesStableAxis) {
  for (Vec3 axis : {Vec3(1, 0, 0), Vec3(0, 1, 1).normalized(), Vec3(1, -2, 0.5).normalized()}) {
    Pose p(rodrigues(axis * M_PI), Vec3(0.1, 0.2, 0.3));
    Pose q = se3_exp(se3_log(p));
    EXPECT_LT((q.rotation - p.rotation).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((q.translation - p.translation).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Se3, RejectsBadInput) {
  Vec6 xi = Vec6::Zero();
  xi[0] = std::nan("");
  EXPECT_THROW(se3_exp(xi), GeometryError);
  Pose bad;
  bad.rotation(0, 1) = 0.3;
  EXPECT_THROW(se3_log(bad), GeometryError);
}

TEST(Pose, InverseAndAssociativity) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    Pose a = se3_exp(random_xi(rng, 2)), b = se3_exp(random_xi(rng, 2)), c = se3_exp(random_xi(rng, 2));
    Pose e = a * a.inverse();
    EXPECT_LT((e.rotation - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT(e.translation.norm(), 1e-9);
    Pose l = (a * b) * c, r = a * (b * c);
    EXPECT_LT((l.rotation - r.rotation).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((l.translation - r.translation).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_TRUE(a.is_valid());
  }
}

TEST(Pose, LongChainsStayOrthonormal) {
  std::mt19937_64 rng(9);
  std::vector<Pose> chain;
  for (int i = 0; i < 1000; ++i) chain.push_back(se3_exp(random_xi(rng, 0.3)));
  EXPECT_TRUE(compose_chain(chain).is_valid(1e-9));
}

TEST(Camera, ProjectHandCases) {
  Intrinsics k = test_k();
  EXPECT_EQ(project(Vec3(0, 0, 1), k), Vec2(32, 24));
  EXPECT_LT((project(Vec3(0.5, 0, 2), k) - Vec2(57, 24)).norm(), 1e-12);
  EXPECT_THROW(project(Vec3(1, 1, 0), k), GeometryError);
  EXPECT_THROW(project(Vec3(1, 1, 5e-7), k), GeometryError);
}

TEST(Camera, BackprojectInverse) {
  Intrinsics k = test_k();
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 60), z(0.5, 20);
  for (int i = 0; i < 100; ++i) {
    Vec2 px(u(rng), u(rng) * 0.75);
    double d = z(rng);
    EXPECT_LT((project(backproject(px, d, k), k) - px).norm(), 1e-9);
    Vec3 p = backproject(px, d, k);
    EXPECT_LT((backproject(project(p, k), d, k) - p).norm(), 1e-9 * d);
  }
  EXPECT_EQ(backproject(Vec2(32, 24), 3, k), Vec3(0, 0, 3));
  EXPECT_LT((backproject(Vec2(57, 24), 2, k) - Vec3(0.5, 0, 2)).norm(), 1e-12);
  EXPECT_THROW(backproject(Vec2(1, 1), 0.0, k), GeometryError);
}

TEST(Warp, IdentityAndPlaneShift) {
  Intrinsics k = test_k();
  Vec2 p(10.25, 17.5);
  WarpResult r = warp_pixel(p, 3.0, Pose::identity(), k);
  EXPECT_LT((r.pixel - p).norm(), 1e-12);
  EXPECT_TRUE(r.in_bounds);
  // Camera moves +0.4 in x: in target coordinates points move by -0.4.
  Pose t_target_source(Mat3::Identity(), Vec3(-0.4, 0, 0));
  for (int y = 0; y < 48; y += 7)
    for (int x = 0; x < 64; x += 9) {
      WarpResult w = warp_pixel(Vec2(x, y), 4.0, t_target_source, k);
      EXPECT_NEAR(w.pixel.x(), x - 10.0, 1e-12);
      EXPECT_NEAR(w.pixel.y(), y, 1e-12);
    }
}

TEST(Warp, ScaleAmbiguity) {
  Intrinsics k = test_k();
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0, 63), z(2, 10);
  for (int i = 0; i < 100; ++i) {
    Pose t = se3_exp(random_xi(rng, 0.3));
    Vec2 p(u(rng), u(rng) * 0.7);
    double d = z(rng);
    WarpResult a = warp_pixel(p, d, t, k);
    for (double s : {0.5, 2.0, 10.0}) {
      WarpResult b = warp_pixel(p, s * d, t.scaled(s), k);
      EXPECT_LT((a.pixel - b.pixel).norm(), 1e-12);
    }
  }
}

TEST(Warp, BehindCameraIsInvalidNotThrow) {
  Intrinsics k = test_k();
  Pose back(Mat3::Identity(), Vec3(0, 0, -5));
  WarpResult r = warp_pixel(Vec2(30, 20), 2.0, back, k);
  EXPECT_FALSE(r.valid);
  EXPECT_FALSE(r.in_bounds);
}

TEST(Bilinear, HandCases) {
  Image img(4, 3, 0.0);
  img(1, 1) = 10;
  img(2, 1) = 20;
  EXPECT_EQ(*sample_bilinear(img, Vec2(1, 1)), 10);
  EXPECT_DOUBLE_EQ(*sample_bilinear(img, Vec2(1.5, 1)), 15);
  EXPECT_FALSE(sample_bilinear(img, Vec2(-0.01, 1)).has_value());
  EXPECT_FALSE(sample_bilinear(img, Vec2(3.01, 1)).has_value());
  EXPECT_TRUE(sample_bilinear(img, Vec2(3, 2)).has_value());
}

TEST(Bilinear, MatchesScalarOracle) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  Image img(13, 9);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = u(rng);
  auto oracle = [&](double x, double y) {
    double acc = 0;
    for (int yy = 0; yy < img.height(); ++yy)
      for (int xx = 0; xx < img.width(); ++xx) {
        double wx = std::max(0.0, 1 - std::abs(x - xx)), wy = std::max(0.0, 1 - std::abs(y - yy));
        acc += wx * wy * img(xx, yy);
      }
    return acc;
  };
  for (int i = 0; i < 1000; ++i) {
    double x = u(rng) * 12, y = u(rng) * 8;
    auto v = sample_bilinear(img, Vec2(x, y));
    ASSERT_TRUE(v.has_value());
    EXPECT_NEAR(*v, oracle(x, y), 1e-9);
    auto g = sample_bilinear_grad(img, Vec2(x, y));
    ASSERT_TRUE(g.has_value());
    const double h = 1e-6;
    if (std::abs(x - std::round(x)) > 1e-3 && x > 0.01 && x < 11.99) {
      EXPECT_NEAR(g->dx, (oracle(x + h, y) - oracle(x - h, y)) / (2 * h), 1e-5);
    }
    if (std::abs(y - std::round(y)) > 1e-3 && y > 0.01 && y < 7.99) {
      EXPECT_NEAR(g->dy, (oracle(x, y + h) - oracle(x, y - h)) / (2 * h), 1e-5);
    }
  }
}

TEST(Disparity, HandCasesAndRoundtrip) {
  StereoRig rig;
  rig.intrinsics = test_k();
  rig.baseline = 0.5;
  EXPECT_DOUBLE_EQ(*disparity_to_depth(25.0, rig), 2.0);
  EXPECT_DOUBLE_EQ(*disparity_to_depth(rig.focal_baseline(), rig), 1.0);
  EXPECT_FALSE(disparity_to_depth(1e-6, rig).has_value());
  EXPECT_FALSE(disparity_to_depth(-3.0, rig).has_value());

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.1, 40);
  DisparityMap d(16, 12);
  for (std::size_t i = 0; i < d.values.size(); ++i) {
    d.values[i] = u(rng);
    d.valid[i] = 1;
  }
  d.valid(3, 3) = 0;
  DisparityMap back = depth_to_disparity(disparity_to_depth(d, rig), rig);
  EXPECT_FALSE(back.is_valid(3, 3));
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 16; ++x) {
      if (!d.is_valid(x, y)) continue;
      EXPECT_NEAR(back.values(x, y) / d.values(x, y), 1.0, 1e-9);
    }
}

TEST(Intrinsics, PyramidLevels) {
  Intrinsics k = test_k(50, 65, 47);
  Intrinsics k1 = k.at_level(1);
  EXPECT_EQ(k1.width, 33);
  EXPECT_EQ(k1.height, 24);
  EXPECT_DOUBLE_EQ(k1.fx, 25);
  // Pixel centre of the principal point is preserved across levels.
  EXPECT_DOUBLE_EQ((k1.cx + 0.5) * 2 - 0.5, k.cx);
  Intrinsics bad = k;
  bad.cx = 80;
  EXPECT_THROW(bad.validate(), GeometryError);
}
