#include <gtest/gtest.h>

#include <random>

#include "vrvo/diffops.hpp"

using namespace vrvo;
using namespace vrvo::ad;

namespace {

// Values bounded away from zero so abs/relu kinks are never crossed by FD steps.
TensorPtr away_from_kinks(Shape s, std::mt19937_64& rng) {
  auto t = random_tensor(s, rng, -1.0, 1.0);
  for (double& v : t->value)
    if (std::abs(v) < 1e-3) v = v < 0 ? -0.05 : 0.05;
  return t;
}

void expect_pass(const GradCheckReport& r, const std::string& what) {
  EXPECT_TRUE(r.passed()) << what << ": max rel error " << r.max_rel_error << ", " << r.failures.size()
                          << " failing coordinates";
  EXPECT_GT(r.checked, 0u);
}

}  // namespace

TEST(Conv2d, UnitKernelIsIdentity) {
  std::mt19937_64 rng(1);
  Tape tape;
  Var x = tape.leaf(random_tensor({2, 1, 5, 6}, rng), false);
  Var k = tape.constant(Shape{1, 1, 1, 1}, 1.0);
  Var y = conv2d(x, k, Var());
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(y.value(), x.value());
}

TEST(Conv2d, AveragingKernelOnConstant) {
  Tape tape;
  Var x = tape.constant(Shape{1, 1, 6, 6}, 0.7);
  Var k = tape.constant(Shape{1, 1, 3, 3}, 1.0 / 9.0);
  Var y = conv2d(x, k, Var());
  EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  for (double v : y.value()) EXPECT_NEAR(v, 0.7, 1e-15);
}

TEST(Conv2d, ShapeMismatchNamesDimensions) {
  Tape tape;
  Var x = tape.constant(Shape{1, 2, 6, 6}, 0.0);
  Var k = tape.constant(Shape{4, 3, 3, 3}, 0.0);
  try {
    conv2d(x, k, Var());
    FAIL();
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("(1,2,6,6)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(4,3,3,3)"), std::string::npos) << msg;
  }
}

TEST(Conv2d, GradCheckFiveSeeds) {
  for (int seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto x = random_tensor({2, 3, 8, 8}, rng);
    auto w = random_tensor({2, 3, 3, 3}, rng, -0.5, 0.5);
    auto b = random_tensor({1, 2, 1, 1}, rng);
    auto proj = random_tensor({2, 2, 4, 4}, rng);
    auto f = [proj](Tape& t, const std::vector<Var>& v) {
      return sum(mul(conv2d(v[0], v[1], v[2], {2, 1}), t.leaf(proj, false)));
    };
    expect_pass(grad_check(f, {x, w, b}), "conv2d stride 2");
    auto g = [](Tape&, const std::vector<Var>& v) { return mean(square(conv2d(v[0], v[1], v[2], {1, 1}))); };
    expect_pass(grad_check(g, {x, w, b}), "conv2d stride 1");
  }
}

TEST(SampleGrid, IdentityGridReturnsInputAndImageGradient) {
  std::mt19937_64 rng(2);
  Tape tape;
  const int H = 6, W = 7;
  Var img = tape.leaf(random_tensor({1, 1, H, W}, rng), false);
  TensorBuffer grid(Shape{1, 2, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      grid.at(0, 0, y, x) = x;
      grid.at(0, 1, y, x) = y;
    }
  auto gp = std::make_shared<TensorBuffer>(grid);
  Var g = tape.leaf(gp, true);
  Var out = sample_grid(img, g);
  EXPECT_EQ(out.value(), img.value());
  tape.backward(sum(out));
  // At lattice points the tap owns the forward-difference cell (the last
  // row/column reuses the previous cell).
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const int x0 = std::min(x, W - 2), y0 = std::min(y, H - 2);
      const double dx = img.value(0, 0, y, x0 + 1) - img.value(0, 0, y, x0);
      const double dy = img.value(0, 0, y0 + 1, x) - img.value(0, 0, y0, x);
      EXPECT_NEAR(gp->grad[gp->index(0, 0, y, x)], dx, 1e-14);
      EXPECT_NEAR(gp->grad[gp->index(0, 1, y, x)], dy, 1e-14);
    }
}

TEST(SampleGrid, ConstantImageHasZeroCoordinateGradient) {
  std::mt19937_64 rng(3);
  Tape tape;
  Var img = tape.constant(Shape{1, 2, 5, 5}, 0.3);
  auto coords = random_tensor({1, 2, 4, 4}, rng, 0.2, 3.8);
  Var c = tape.leaf(coords);
  tape.backward(sum(sample_grid(img, c)));
  for (double g : coords->grad) EXPECT_EQ(g, 0.0);
}

TEST(SampleGrid, OutOfBoundsIsZeroWithZeroGradient) {
  Tape tape;
  auto img = make_tensor({1, 1, 4, 4}, 1.0);
  auto coords = make_tensor({1, 2, 1, 2}, 0.0);
  coords->at(0, 0, 0, 0) = -0.5;
  coords->at(0, 1, 0, 0) = 1.0;
  coords->at(0, 0, 0, 1) = 1.5;
  coords->at(0, 1, 0, 1) = 3.2;
  Var out = sample_grid(tape.leaf(img), tape.leaf(coords));
  EXPECT_EQ(out.value()[0], 0.0);
  EXPECT_EQ(out.value()[1], 0.0);
  tape.backward(sum(out));
  for (double g : img->grad) EXPECT_EQ(g, 0.0);
  for (double g : coords->grad) EXPECT_EQ(g, 0.0);
  Var m = sample_mask(tape.leaf(coords, false), 4, 4);
  EXPECT_EQ(m.value(), (std::vector<double>{0.0, 0.0}));
}

TEST(SampleGrid, GradCheckFiveSeeds) {
  for (int seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(100 + seed);
    auto img = random_tensor({2, 2, 6, 7}, rng);
    auto coords = random_tensor({2, 2, 5, 5}, rng, 0.0, 5.0);
    // Keep samples away from lattice lines where bilinear is not differentiable.
    for (double& v : coords->value) {
      double fr = v - std::floor(v);
      if (fr < 0.05) v += 0.1;
      if (fr > 0.95) v -= 0.1;
    }
    auto f = [](Tape&, const std::vector<Var>& v) { return sum(square(sample_grid(v[0], v[1]))); };
    expect_pass(grad_check(f, {img, coords}), "sample_grid");
  }
}

TEST(Elementwise, MeanOfConstant) {
  Tape tape;
  auto t = make_tensor({1, 1, 3, 4}, 2.5);
  Var m = mean(tape.leaf(t));
  EXPECT_DOUBLE_EQ(m.item(), 2.5);
  tape.backward(m);
  for (double g : t->grad) EXPECT_DOUBLE_EQ(g, 1.0 / 12.0);
}

TEST(Elementwise, Min2TieGoesToFirst) {
  Tape tape;
  auto a = make_tensor({1, 1, 2, 2}, 1.0);
  Var va = tape.leaf(a);
  tape.backward(sum(min2(va, va)));
  for (double g : a->grad) EXPECT_EQ(g, 1.0);

  Tape t2;
  auto p = make_tensor({1, 1, 1, 2}, 1.0), q = make_tensor({1, 1, 1, 2}, 1.0);
  q->value[1] = 0.5;
  t2.backward(sum(min2(t2.leaf(p), t2.leaf(q))));
  EXPECT_EQ(p->grad, (std::vector<double>{1.0, 0.0}));
  EXPECT_EQ(q->grad, (std::vector<double>{0.0, 1.0}));
}

TEST(Elementwise, KinkSubgradientIsZero) {
  Tape tape;
  auto z = make_tensor({1, 1, 1, 1}, 0.0);
  Var v = tape.leaf(z);
  tape.backward(add(sum(abs(v)), sum(relu(v))));
  EXPECT_EQ(z->grad[0], 0.0);
}

TEST(Elementwise, IncompatibleShapesRejected) {
  Tape tape;
  Var a = tape.constant(Shape{1, 1, 2, 3}, 1.0), b = tape.constant(Shape{1, 1, 3, 2}, 1.0);
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(min2(a, tape.scalar(1.0)), ShapeError);
  EXPECT_NO_THROW(mul(a, tape.scalar(2.0)));
}

TEST(Elementwise, FullSuiteGradCheckFiveSeeds) {
  using Op = std::function<Var(const Var&, const Var&)>;
  const std::vector<std::pair<std::string, Op>> ops = {
      {"add", [](const Var& a, const Var& b) { return add(a, b); }},
      {"sub", [](const Var& a, const Var& b) { return sub(a, b); }},
      {"mul", [](const Var& a, const Var& b) { return mul(a, b); }},
      {"div", [](const Var& a, const Var& b) { return div(a, add_scalar(square(b), 0.5)); }},
      {"abs", [](const Var& a, const Var&) { return abs(a); }},
      {"exp", [](const Var& a, const Var&) { return exp(a); }},
      {"tanh", [](const Var& a, const Var&) { return tanh(a); }},
      {"relu", [](const Var& a, const Var&) { return relu(a); }},
      {"sigmoid", [](const Var& a, const Var&) { return sigmoid(a); }},
      {"min2", [](const Var& a, const Var& b) { return min2(a, b); }},
      {"scalar-mul", [](const Var& a, const Var& b) { return mul(a, mean(b)); }},
      {"box3", [](const Var& a, const Var&) { return box3(a); }},
      {"crop", [](const Var& a, const Var&) { return crop(a, 1, 2, 3, 2); }},
      {"concat", [](const Var& a, const Var& b) { return concat_channels(a, b); }},
      {"gap", [](const Var& a, const Var&) { return global_avg_pool(a); }},
      {"batch", [](const Var& a, const Var& b) { return batch_concat({batch_slice(a, 1, 1), b}); }},
  };
  for (const auto& [name, op] : ops) {
    for (int seed = 0; seed < 5; ++seed) {
      std::mt19937_64 rng(seed * 31 + 7);
      auto a = away_from_kinks({2, 2, 4, 5}, rng);
      auto b = away_from_kinks({2, 2, 4, 5}, rng);
      // min2 is only differentiable away from ties.
      if (name == "min2")
        for (std::size_t i = 0; i < a->value.size(); ++i)
          if (std::abs(a->value[i] - b->value[i]) < 1e-3) b->value[i] += 0.01;
      auto f = [&op](Tape&, const std::vector<Var>& v) {
        Var y = op(v[0], v[1]);
        return add(sum(mul_scalar(y, 0.7)), sum(square(y)));
      };
      expect_pass(grad_check(f, {a, b}), name + " seed " + std::to_string(seed));
    }
  }
}

TEST(Linear, GradCheck) {
  for (int seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto x = random_tensor({3, 2, 2, 2}, rng);
    auto w = random_tensor({1, 1, 4, 8}, rng);
    auto b = random_tensor({1, 4, 1, 1}, rng);
    auto f = [](Tape&, const std::vector<Var>& v) { return sum(tanh(linear(v[0], v[1], v[2]))); };
    expect_pass(grad_check(f, {x, w, b}), "linear");
  }
}

TEST(ReprojectCoords, GradCheck) {
  Intrinsics k;
  k.fx = k.fy = 40;
  k.cx = 7.5;
  k.cy = 5.5;
  k.width = 16;
  k.height = 12;
  for (int seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto d = random_tensor({2, 1, 6, 8}, rng, 2.0, 6.0);
    auto pose = random_tensor({2, 6, 1, 1}, rng, -0.05, 0.05);
    auto f = [&k](Tape&, const std::vector<Var>& v) {
      Var c = reproject_coords(v[0], v[1], k, 20.0);
      return sum(square(mul_scalar(c, 0.1)));
    };
    expect_pass(grad_check(f, {d, pose}), "reproject_coords");
  }
}

TEST(ReprojectCoords, IdentityPoseKeepsPixels) {
  Intrinsics k;
  k.fx = k.fy = 40;
  k.cx = 7.5;
  k.cy = 5.5;
  k.width = 16;
  k.height = 12;
  Tape tape;
  Var d = tape.constant(Shape{1, 1, 3, 4}, 3.0);
  Var p = tape.constant(Shape{1, 6, 1, 1}, 0.0);
  Var c = reproject_coords(d, p, k, 20.0);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 4; ++x) {
      EXPECT_NEAR(c.value(0, 0, y, x), x, 1e-12);
      EXPECT_NEAR(c.value(0, 1, y, x), y, 1e-12);
    }
}

TEST(GradCheck, LinearFunctionIsExact) {
  std::mt19937_64 rng(4);
  auto x = random_tensor({1, 1, 3, 3}, rng);
  auto f = [](Tape&, const std::vector<Var>& v) { return sum(mul_scalar(v[0], 3.0)); };
  GradCheckReport r = grad_check(f, {x});
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradCheck, ConvTanhMeanComposition) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({1, 2, 6, 6}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto f = [](Tape&, const std::vector<Var>& v) { return mean(tanh(conv2d(v[0], v[1], Var(), {1, 1}))); };
  expect_pass(grad_check(f, {x, w}), "conv->tanh->mean");
}

TEST(GradCheck, DetectsCorruptedBackward) {
  std::mt19937_64 rng(6);
  auto x = random_tensor({1, 1, 3, 3}, rng);
  // Doubling op whose backward claims slope 2.2 at one coordinate.
  auto f = [](Tape& t, const std::vector<Var>& v) {
    Var out = t.make(v[0].shape(), v[0].requires_grad());
    for (std::size_t i = 0; i < out.numel(); ++i) out.buffer().value[i] = 2 * v[0].value()[i];
    if (v[0].requires_grad()) {
      Var in = v[0];
      t.record([in, out] {
        for (std::size_t i = 0; i < out.numel(); ++i)
          in.buffer().grad[i] += out.grad()[i] * (i == 4 ? 2.2 : 2.0);
      });
    }
    return sum(out);
  };
  GradCheckReport r = grad_check(f, {x});
  EXPECT_FALSE(r.passed());
  ASSERT_EQ(r.failures.size(), 1u);
  EXPECT_EQ(r.failures[0].index, 4u);
}

TEST(Tape, SecondBackwardWithoutResetIsError) {
  Tape tape;
  auto x = make_tensor({1, 1, 1, 1}, 2.0);
  Var y = square(tape.leaf(x));
  tape.backward(y);
  EXPECT_THROW(tape.backward(y), TapeError);
  tape.reset();
  x->zero_grad();
  Var z = square(tape.leaf(x));
  tape.backward(z);
  EXPECT_DOUBLE_EQ(x->grad[0], 4.0);
}

TEST(Tape, AccumulationIsLinear) {
  std::mt19937_64 rng(7);
  auto x = random_tensor({1, 2, 5, 5}, rng);
  auto w = random_tensor({2, 2, 3, 3}, rng);
  auto loss_a = [](const Var& x, const Var& w) { return mean(tanh(conv2d(x, w, Var(), {1, 1}))); };
  auto loss_b = [](const Var& x, const Var&) { return sum(square(x)); };

  auto grads_of = [&](int which) {
    x->zero_grad();
    w->zero_grad();
    Tape t;
    Var vx = t.leaf(x), vw = t.leaf(w);
    Var l = which == 0 ? loss_a(vx, vw) : which == 1 ? loss_b(vx, vw) : add(loss_a(vx, vw), loss_b(vx, vw));
    t.backward(l);
    std::vector<double> g = x->grad;
    g.insert(g.end(), w->grad.begin(), w->grad.end());
    return g;
  };
  auto ga = grads_of(0), gb = grads_of(1), gs = grads_of(2);
  for (std::size_t i = 0; i < gs.size(); ++i) EXPECT_NEAR(gs[i], ga[i] + gb[i], 1e-12);
}

TEST(Tape, ReplayIsDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(8);
    auto x = random_tensor({2, 1, 6, 6}, rng);
    auto w = random_tensor({4, 1, 3, 3}, rng);
    Tape t;
    t.backward(mean(sigmoid(conv2d(t.leaf(x), t.leaf(w), Var(), {1, 1}))));
    return w->grad;
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, ConstantSubgraphsRecordNothing) {
  Tape t;
  Var a = t.constant(Shape{1, 1, 4, 4}, 1.0);
  Var b = tanh(exp(a));
  EXPECT_FALSE(b.requires_grad());
  EXPECT_EQ(t.size(), 0u);
}
