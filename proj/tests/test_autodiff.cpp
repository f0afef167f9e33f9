#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "tcagu/autodiff.hpp"
#include "tcagu/errors.hpp"
#include "support.hpp"

using namespace tcagu;
using namespace tcagu::ad;

namespace {

using namespace tcagu::testing_support;

constexpr int kShapes = 10;

}  // namespace

TEST(Matmul, IdentityAndAnnihilator) {
  Tape t;
  std::mt19937_64 rng(1);
  Var b = t.constant(random_tensor({3, 4}, rng));
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.data[i * 3 + i] = 1.0;
  EXPECT_EQ(matmul(t.constant(eye), b).value(), b.value());

  Var z = matmul(t.constant(Tensor::zeros({2, 3})), b);
  EXPECT_EQ(z.shape(), (Shape{2, 4}));
  for (double v : z.value()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, HandExpanded) {
  Tape t;
  Var c = matmul(t.constant(Tensor({2, 2}, {1, 2, 3, 4})), t.constant(Tensor({2, 1}, {5, 6})));
  EXPECT_EQ(c.value(), (std::vector<double>{17, 39}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    matmul(t.constant(Tensor::zeros({2, 3})), t.constant(Tensor::zeros({2, 3})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos) << e.what();
  }
}

TEST(Conv2d, IdentityKernelAndConstantBias) {
  Tape t;
  std::mt19937_64 rng(2);
  Var x = t.constant(random_tensor({3, 4, 5}, rng));
  Tensor w = Tensor::zeros({3, 3, 1, 1});
  for (int c = 0; c < 3; ++c) w.data[c * 3 + c] = 1.0;
  Var y = conv2d(x, t.constant(w), t.constant(Tensor::zeros({3})), 0);
  EXPECT_EQ(y.value(), x.value());

  Var k = conv2d(x, t.constant(Tensor::zeros({2, 3, 3, 3})), t.constant(Tensor({2}, {0.7, 0.7})), 1);
  EXPECT_EQ(k.shape(), (Shape{2, 4, 5}));
  for (double v : k.value()) EXPECT_EQ(v, 0.7);
}

TEST(Conv2d, BoxKernelCenterSum) {
  Tape t;
  Var y = conv2d(t.constant(Tensor::filled({1, 3, 3}, 1.0)), t.constant(Tensor::filled({1, 1, 3, 3}, 1.0)),
                 std::nullopt, 1);
  // Direct summation: centre sees all 9 ones, corners see 4, edges 6.
  EXPECT_EQ(y.value(), (std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4}));
}

TEST(Conv2d, TiledConvolutionDoesNotCrossTiles) {
  Tape t;
  Var y = conv2d(t.constant(Tensor::filled({1, 4, 4}, 1.0)), t.constant(Tensor::filled({1, 1, 3, 3}, 1.0)),
                 std::nullopt, 1, 2);
  // Every pixel is a corner of its own 2x2 tile.
  for (double v : y.value()) EXPECT_EQ(v, 4.0);
}

TEST(Conv2d, ChannelMismatch) {
  Tape t;
  EXPECT_THROW(conv2d(t.constant(Tensor::zeros({2, 3, 3})), t.constant(Tensor::zeros({1, 3, 1, 1})),
                      std::nullopt, 0),
               DimensionError);
}

TEST(Softmax, ClosedFormValues) {
  Tape t;
  auto u = softmax(t.constant(Tensor({3}, {0, 0, 0})), 0).value();
  for (double v : u) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);

  auto s = softmax(t.constant(Tensor({3}, {1, 2, 3})), 0).value();
  EXPECT_NEAR(s[0], 0.09003, 1e-5);
  EXPECT_NEAR(s[1], 0.24473, 1e-5);
  EXPECT_NEAR(s[2], 0.66524, 1e-5);

  const double x = 0.3, c = 1.7;
  auto p = softmax(t.constant(Tensor({2}, {x, x + c})), 0).value();
  EXPECT_NEAR(p[0], 1.0 / (1.0 + std::exp(c)), 1e-15);
  EXPECT_NEAR(p[1], std::exp(c) / (1.0 + std::exp(c)), 1e-15);
}

TEST(Softmax, RowStochasticAndShiftInvariant) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tape t;
    const std::size_t rows = draw(rng, 1, 6), cols = draw(rng, 1, 9);
    Tensor x = random_tensor({rows, cols}, rng, -20, 20);
    Tensor shifted = x;
    const double c = std::uniform_real_distribution<double>(-5, 5)(rng);
    for (double& v : shifted.data) v += c;
    auto a = softmax(t.constant(x), 1).value();
    auto b = softmax(t.constant(shifted), 1).value();
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t q = 0; q < cols; ++q) {
        s += a[r * cols + q];
        EXPECT_GT(a[r * cols + q], 0.0);
        EXPECT_NEAR(a[r * cols + q], b[r * cols + q], 1e-12);
      }
      EXPECT_NEAR(s, 1.0, 1e-10);
    }
  }
}

TEST(Elementwise, BasicValues) {
  Tape t;
  EXPECT_EQ(exp(t.constant(Tensor({1}, {0.0}))).value()[0], 1.0);
  EXPECT_NEAR(arccos(t.constant(Tensor({1}, {1.0 - kArccosEps}))).value()[0], 0.0, 1e-3);
  EXPECT_DOUBLE_EQ(l2_norm(t.constant(Tensor({2}, {3, 4})), 0).value()[0], 5.0);
}

TEST(Elementwise, DivideByTinyValueIsDomainError) {
  Tape t;
  EXPECT_THROW(divide(t.constant(Tensor({2}, {1, 1})), t.constant(Tensor({2}, {1, 1e-13}))),
               NumericDomainError);
}

TEST(Elementwise, ArccosClampHasZeroSlopeOutside) {
  Tensor x({2}, {1.0, 0.5}, true);
  Tape t;
  t.backward(sum(arccos(t.param(x))));
  EXPECT_EQ(x.grad[0], 0.0);
  EXPECT_NEAR(x.grad[1], -1.0 / std::sqrt(0.75), 1e-12);
}

TEST(VectorAngle, MatchesArccosOfCosine) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t l = draw(rng, 2, 6), n = draw(rng, 1, 5);
    Tensor a = random_tensor({l, n}, rng), b = random_tensor({l, n}, rng);
    Tape t;
    const auto& y = vector_angle(t.constant(a), t.constant(b), 0).value();
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0, na = 0, nb = 0;
      for (std::size_t i = 0; i < l; ++i) {
        dot += a.data[i * n + j] * b.data[i * n + j];
        na += a.data[i * n + j] * a.data[i * n + j];
        nb += b.data[i * n + j] * b.data[i * n + j];
      }
      EXPECT_NEAR(y[j], std::acos(dot / std::sqrt(na * nb)), 1e-12);
    }
  }
}

TEST(VectorAngle, SmallAngleKeepsPrecision) {
  const double theta = 1e-3;
  Tape t;
  Var a = t.constant(Tensor({2, 1}, {1.0, 0.0}));
  Var b = t.constant(Tensor({2, 1}, {std::cos(theta), std::sin(theta)}));
  EXPECT_NEAR(vector_angle(a, b, 0).value()[0], theta, 1e-15);
}

TEST(VectorAngle, ClampAndFloor) {
  Tensor a({3, 1}, {1.0, 2.0, 2.0}, true);
  Tensor same({3, 1}, {2.0, 4.0, 4.0}, true);
  {
    Tape t;
    Var y = vector_angle(t.param(a), t.param(same), 0);
    EXPECT_DOUBLE_EQ(y.value()[0], std::acos(1.0 - kArccosEps));
    t.backward(sum(y));
    for (double g : a.grad) EXPECT_EQ(g, 0.0);
  }
  Tape t;
  Var zero = t.constant(Tensor({3, 1}, {0.0, 0.0, 0.0}));
  EXPECT_DOUBLE_EQ(vector_angle(t.constant(a), zero, 0).value()[0], std::acos(0.0));
  // |a||b| below 1e-8 uses the floored denominator
  Var tiny = t.constant(Tensor({3, 1}, {1e-9, 0.0, 0.0}));
  EXPECT_NEAR(vector_angle(t.constant(a), tiny, 0).value()[0], std::acos(1e-9 / 1e-8), 1e-12);
  EXPECT_THROW(vector_angle(t.constant(a), t.constant(Tensor({3}, {1, 2, 3})), 0), DimensionError);
}

TEST(Backward, SumAndSquare) {
  Tensor x({5}, {1, -2, 3, 0.5, 4}, true);
  {
    Tape t;
    t.backward(sum(t.param(x)));
    for (double g : x.grad) EXPECT_EQ(g, 1.0);
  }
  x.zero_grad();
  {
    Tape t;
    Var v = t.param(x);
    t.backward(sum(mul(v, v)));
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(x.grad[i], 2.0 * x.data[i]);
  }
}

TEST(Backward, FanOutAccumulates) {
  Tensor x({4}, {0.1, 0.2, 0.3, 0.4}, true);
  Tape t;
  Var v = t.param(x);
  t.backward(add(sum(v), sum(v)));
  for (double g : x.grad) EXPECT_EQ(g, 2.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor x({3}, {1, 2, 3}, true);
  Tape t;
  EXPECT_THROW(t.backward(t.param(x)), ContractError);
}

TEST(Backward, VisitsEachReachableNodeOnce) {
  Tensor x({3}, {1, 2, 3}, true);
  Tape t;
  Var v = t.param(x);
  Var a = square(v);
  Var b = scale(a, 2.0);
  Var loss = sum(add(a, b));
  t.backward(loss);
  // param, square, scale, add, sum
  EXPECT_EQ(t.last_backward_visits(), 5u);
}

TEST(FiniteDiff, ScalarOracles) {
  Tensor x({1}, {3.0});
  const double err = finite_diff_check([&](Tape& t) { Var v = t.param(x); return sum(mul(v, v)); }, x, 1e-5);
  EXPECT_LT(err, 1e-6);

  Tensor c({2}, {1.0, 2.0});
  EXPECT_EQ(finite_diff_check([&](Tape& t) { t.param(c); return t.constant(Tensor({1}, {4.2})); }, c, 1e-5), 0.0);
}

TEST(FiniteDiff, RejectsBadStepAndNonFiniteLoss) {
  Tensor x({1}, {1.0});
  auto f = [&](Tape& t) { return sum(t.param(x)); };
  EXPECT_THROW(finite_diff_check(f, x, 1e-2), ContractError);
  auto inf = [&](Tape& t) { return scale(sum(t.param(x)), INFINITY); };
  EXPECT_THROW(finite_diff_check(inf, x, 1e-5), NumericDomainError);
}

// Randomized gradient checks: every differentiable kernel against central
// differences on kShapes random shapes.

class KernelGradient : public ::testing::TestWithParam<int> {};

TEST_P(KernelGradient, UnaryKernels) {
  std::mt19937_64 rng(100 + GetParam());
  const Shape shape{draw(rng, 1, 4), draw(rng, 1, 5)};
  struct Case {
    const char* name;
    std::function<Var(Var)> fn;
    double lo, hi;
  };
  const std::vector<Case> cases = {
      {"exp", [](Var v) { return exp(v); }, -2, 2},
      {"sqrt", [](Var v) { return sqrt(v); }, 0.2, 3},
      {"square", [](Var v) { return square(v); }, -2, 2},
      {"scale", [](Var v) { return scale(v, -1.3); }, -2, 2},
      {"add_scalar", [](Var v) { return add_scalar(v, 0.4); }, -2, 2},
      {"relu", [](Var v) { return relu(v); }, -2, 2},
      {"leaky_relu", [](Var v) { return leaky_relu(v, 0.01); }, -2, 2},
      {"clamp_min", [](Var v) { return clamp_min(v, 0.1); }, -2, 2},
      {"arccos", [](Var v) { return arccos(v); }, -0.95, 0.95},
      {"softmax0", [](Var v) { return softmax(v, 0); }, -3, 3},
      {"softmax1", [](Var v) { return softmax(v, 1); }, -3, 3},
      {"sum0", [](Var v) { return sum(v, 0); }, -2, 2},
      {"sum1", [](Var v) { return sum(v, 1); }, -2, 2},
      {"l2_norm0", [](Var v) { return l2_norm(v, 0); }, -2, 2},
      {"l2_norm1", [](Var v) { return l2_norm(v, 1); }, -2, 2},
      {"mean", [](Var v) { return mean(v); }, -2, 2},
      {"transpose", [](Var v) { return transpose(v); }, -2, 2},
  };
  for (const auto& c : cases) {
    Tensor x = random_tensor(shape, rng, c.lo, c.hi);
    const double err =
        finite_diff_check([&](Tape& t) { return weighted_sum(t, c.fn(t.param(x)), 7); }, x, kStep);
    EXPECT_LT(err, kTol) << c.name << " " << shape_str(shape);
  }
}

TEST_P(KernelGradient, BinaryKernels) {
  std::mt19937_64 rng(200 + GetParam());
  const Shape shape{draw(rng, 1, 4), draw(rng, 1, 5)};
  Tensor a = random_tensor(shape, rng);
  Tensor b = random_tensor(shape, rng, 0.5, 2.0);
  const std::vector<std::pair<const char*, std::function<Var(Var, Var)>>> cases = {
      {"add", [](Var x, Var y) { return add(x, y); }},
      {"sub", [](Var x, Var y) { return sub(x, y); }},
      {"mul", [](Var x, Var y) { return mul(x, y); }},
      {"divide", [](Var x, Var y) { return divide(x, y); }},
      {"mul_scalar", [](Var x, Var y) { return mul_scalar(x, element(y, 0)); }},
  };
  for (const auto& [name, fn] : cases) {
    for (Tensor* wrt : {&a, &b}) {
      const double err = finite_diff_check(
          [&](Tape& t) { return weighted_sum(t, fn(t.param(a), t.param(b)), 9); }, *wrt, kStep);
      EXPECT_LT(err, kTol) << name;
    }
  }
}

TEST_P(KernelGradient, VectorAngle) {
  std::mt19937_64 rng(250 + GetParam());
  const Shape shape{draw(rng, 2, 5), draw(rng, 2, 5)};
  Tensor a = random_tensor(shape, rng), b = random_tensor(shape, rng);
  for (std::size_t axis : {0, 1}) {
    for (Tensor* wrt : {&a, &b}) {
      const double err = finite_diff_check(
          [&](Tape& t) { return weighted_sum(t, vector_angle(t.param(a), t.param(b), axis), 6); }, *wrt, kStep);
      EXPECT_LT(err, kTol) << "axis " << axis;
    }
  }
}

TEST_P(KernelGradient, MatmulAndLayout) {
  std::mt19937_64 rng(300 + GetParam());
  const std::size_t m = draw(rng, 1, 4), k = draw(rng, 1, 4), n = draw(rng, 1, 4);
  Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng), bias = random_tensor({n}, rng);
  for (Tensor* wrt : {&a, &b, &bias}) {
    EXPECT_LT(finite_diff_check(
                  [&](Tape& t) { return weighted_sum(t, linear(t.param(a), t.param(b), t.param(bias)), 3); },
                  *wrt, kStep),
              kTol);
  }
  Tensor c = random_tensor({draw(rng, 1, 3), k}, rng);
  for (Tensor* wrt : {&a, &c}) {
    EXPECT_LT(finite_diff_check(
                  [&](Tape& t) {
                    Var rows = concat_rows(t.param(a), t.param(c));
                    return weighted_sum(t, slice_rows(rows, 1, rows.shape()[0]), 4);
                  },
                  *wrt, kStep),
              kTol);
  }
  Tensor d = random_tensor({m, draw(rng, 1, 3)}, rng);
  EXPECT_LT(finite_diff_check(
                [&](Tape& t) { return weighted_sum(t, concat_cols(t.param(a), t.param(d)), 5); }, d, kStep),
            kTol);
}

TEST_P(KernelGradient, Convolution) {
  std::mt19937_64 rng(400 + GetParam());
  const std::size_t cin = draw(rng, 1, 3), cout = draw(rng, 1, 3), h = draw(rng, 2, 5), w = draw(rng, 2, 5);
  for (std::size_t k : {1, 3}) {
    const std::size_t pad = k / 2;
    Tensor x = random_tensor({cin, h, w}, rng), kern = random_tensor({cout, cin, k, k}, rng),
           bias = random_tensor({cout}, rng);
    for (Tensor* wrt : {&x, &kern, &bias}) {
      EXPECT_LT(finite_diff_check(
                    [&](Tape& t) {
                      return weighted_sum(t, conv2d(t.param(x), t.param(kern), t.param(bias), pad), 11);
                    },
                    *wrt, kStep),
                kTol)
          << "k=" << k;
    }
  }
  // Tiled 3x3 convolution.
  const std::size_t m = 2, hp = 2 * draw(rng, 1, 3), wp = 2 * draw(rng, 1, 3);
  Tensor x = random_tensor({cin, hp, wp}, rng), kern = random_tensor({cout, cin, 3, 3}, rng);
  for (Tensor* wrt : {&x, &kern}) {
    EXPECT_LT(finite_diff_check(
                  [&](Tape& t) { return weighted_sum(t, conv2d(t.param(x), t.param(kern), std::nullopt, 1, m), 12); },
                  *wrt, kStep),
              kTol);
  }
}

TEST_P(KernelGradient, PatchOps) {
  std::mt19937_64 rng(500 + GetParam());
  const std::size_t c = draw(rng, 1, 3), m = draw(rng, 1, 3);
  const std::size_t h = draw(rng, 1, 2 * m), w = draw(rng, 1, 2 * m);
  const std::size_t hp = (h + m - 1) / m * m, wp = (w + m - 1) / m * m;
  Tensor x = random_tensor({c, h, w}, rng);
  EXPECT_LT(finite_diff_check(
                [&](Tape& t) {
                  Var padded = pad2d(t.param(x), hp, wp);
                  Var loss = add(weighted_sum(t, patch_mean(padded, m), 1), weighted_sum(t, patchify(padded, m), 2));
                  Var back = unpatchify(patchify(padded, m), c, hp, wp, m);
                  return add(loss, weighted_sum(t, crop2d(back, h, w), 3));
                },
                x, kStep),
            kTol);
}

TEST_P(KernelGradient, SparseGraphKernels) {
  std::mt19937_64 rng(600 + GetParam());
  const std::size_t n = draw(rng, 2, 7), b = draw(rng, 1, 4);
  // Random symmetric pattern with every self loop present.
  auto pattern = std::make_shared<SparsePattern>();
  pattern->n = n;
  std::vector<std::vector<bool>> adj(n, std::vector<bool>(n, false));
  for (std::size_t i = 0; i < n; ++i) {
    adj[i][i] = true;
    for (std::size_t j = i + 1; j < n; ++j) adj[i][j] = adj[j][i] = (rng() % 2 == 0);
  }
  pattern->row_ptr.push_back(0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (!adj[i][j]) continue;
      pattern->row.push_back(i);
      pattern->col.push_back(j);
    }
    pattern->row_ptr.push_back(pattern->col.size());
  }
  Tensor f = random_tensor({b, n}, rng), z = random_tensor({b, n}, rng);
  for (Tensor* wrt : {&f, &z}) {
    EXPECT_LT(finite_diff_check(
                  [&](Tape& t) {
                    Var w = exp(scale(edge_sqdist(t.param(f), pattern), -0.5));
                    return weighted_sum(t, spmm(t.param(z), pattern, sym_normalize(w, pattern)), 13);
                  },
                  *wrt, kStep),
              kTol);
  }
}

INSTANTIATE_TEST_SUITE_P(RandomShapes, KernelGradient, ::testing::Range(0, kShapes));

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(77);
    Tensor x = random_tensor({3, 6, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng);
    Tape t;
    Var y = softmax(conv2d(t.constant(x), t.param(w), std::nullopt, 1), 0);
    w.requires_grad = true;
    return y.value();
  };
  EXPECT_EQ(run(), run());
}

TEST(FaultInjection, CorruptedRuleIsDetected) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({3, 3}, rng);
  auto f = [&](Tape& t) { return weighted_sum(t, exp(t.param(x)), 1); };
  EXPECT_LT(finite_diff_check(f, x, kStep), kTol);
  set_backward_fault("exp", 1.01);
  EXPECT_GT(finite_diff_check(f, x, kStep), kTol);
  set_backward_fault("", 1.0);
}
