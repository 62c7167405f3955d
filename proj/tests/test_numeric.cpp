#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "amad/numeric/ops.hpp"
#include "amad/numeric/param_set.hpp"
#include "grad_check.hpp"

using namespace amad;

namespace {

Tensor random_tensor(Shape s, std::mt19937_64& rng) { return Tensor::randn(std::move(s), rng); }

std::vector<double> triple_loop_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(1);
  std::vector<double> c(p * r, 0.0);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < r; ++j)
      for (std::size_t k = 0; k < q; ++k) c[i * r + j] += a[i * q + k] * b[k * r + j];
  return c;
}

std::vector<double> loop_conv2d(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad) {
  const std::size_t ci = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> y(co * Ho * Wo, 0.0);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double s = 0.0;
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t dy = 0; dy < kh; ++dy)
            for (std::size_t dx = 0; dx < kw; ++dx) {
              const long iy = static_cast<long>(oy * stride + dy) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + dx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
              s += x[(c * H + iy) * W + ix] * k[((o * ci + c) * kh + dy) * kw + dx];
            }
        y[(o * Ho + oy) * Wo + ox] = s;
      }
  return y;
}

}  // namespace

TEST(Matmul, IdentityAndScalar) {
  Tensor id({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 2}, {3, 4, 5, 6});
  EXPECT_EQ(matmul(id, b).values(), b.values());
  EXPECT_EQ(matmul(Tensor({1, 1}, {2}), Tensor({1, 1}, {3})).item(), 6.0);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  std::mt19937_64 rng(7);
  for (std::size_t p = 1; p <= 8; p += 3) {
    for (std::size_t q = 1; q <= 8; q += 2) {
      Tensor a = random_tensor({p, q}, rng);
      Tensor b = random_tensor({q, 8 - p + 1}, rng);
      const auto c = matmul(a, b);
      const auto ref = triple_loop_matmul(a, b);
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12);
    }
  }
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  const auto ref = triple_loop_matmul(a, b);
  const auto c = matmul(a, b);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12);
}

TEST(Matmul, BatchBroadcast) {
  std::mt19937_64 rng(3);
  Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({4, 5}, rng);
  Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
  Tensor a1 = slice(a, 0, 1, 2);
  const auto ref = triple_loop_matmul(reshape(a1, {3, 4}), b);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(c[15 + i], ref[i], 1e-12);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3] x [2,3]"), std::string::npos);
  }
}

TEST(Softmax, KnownValues) {
  auto s = softmax_lastdim(Tensor({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
  auto m = softmax_lastdim(Tensor({2}, {-1e9, 0}));
  EXPECT_LT(m[0], 1e-300);
  EXPECT_DOUBLE_EQ(m[1], 1.0);
  auto t = softmax_lastdim(Tensor({3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(t[i], std::exp(i + 1.0) / z, 1e-12);
}

TEST(Softmax, RowsSumToOneOnRandomInputs) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = Tensor::randn({5, 7}, rng, 30.0);
    auto s = softmax_lastdim(x);
    for (std::size_t r = 0; r < 5; ++r) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 7; ++j) sum += s[r * 7 + j];
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
  }
}

TEST(Conv2d, IdentityAndZeroKernels) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({1, 3, 3}, rng);
  EXPECT_EQ(conv2d(x, Tensor({1, 1, 1, 1}, 1.0)).values(), x.values());
  auto z = conv2d(x, Tensor({1, 1, 3, 3}, 0.0), std::nullopt, {1, 1});
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, MatchesLoopOracle) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({2, 5, 5}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      auto y = conv2d(x, k, std::nullopt, {stride, pad});
      const auto ref = loop_conv2d(x, k, stride, pad);
      ASSERT_EQ(y.numel(), ref.size());
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
    }
  }
  // up to extent 8
  Tensor x8 = random_tensor({3, 8, 7}, rng);
  Tensor k8 = random_tensor({4, 3, 5, 3}, rng);
  auto y8 = conv2d(x8, k8, std::nullopt, {1, 2});
  const auto ref8 = loop_conv2d(x8, k8, 1, 2);
  for (std::size_t i = 0; i < ref8.size(); ++i) EXPECT_NEAR(y8[i], ref8[i], 1e-12);
}

TEST(Conv2d, EvenKernelIsConfigError) {
  EXPECT_THROW(conv2d(Tensor({1, 4, 4}), Tensor({1, 1, 2, 2})), ConfigError);
}

TEST(Conv2d, BatchedMatchesPerSample) {
  std::mt19937_64 rng(9);
  Tensor x = random_tensor({3, 2, 4, 4}, rng);
  Tensor k = random_tensor({2, 2, 3, 3}, rng);
  auto y = conv2d(x, k, std::nullopt, {1, 1});
  for (std::size_t n = 0; n < 3; ++n) {
    auto xn = reshape(slice(x, 0, n, n + 1), {2, 4, 4});
    const auto ref = loop_conv2d(xn, k, 1, 1);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[n * ref.size() + i], ref[i], 1e-12);
  }
}

TEST(Backward, TrivialGradients) {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({2, 3}, rng).set_requires_grad(true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  Tensor y = random_tensor({4}, rng).set_requires_grad(true);
  scale(sum(mul(y, y)), 0.5).backward();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y.grad()[i], y[i]);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x({3}, {1, 2, 3});
  x.set_requires_grad(true);
  Tensor loss = sum(square(x));
  loss.backward();
  loss.backward();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 4.0 * x[i]);
}

TEST(Backward, NonScalarIsShapeError) {
  Tensor x({2}, {1, 2});
  x.set_requires_grad(true);
  EXPECT_THROW(scale(x, 2.0).backward(), ShapeError);
}

TEST(Backward, NoGradGuardStopsRecording) {
  Tensor x({2}, {1, 2});
  x.set_requires_grad(true);
  NoGradGuard ng;
  EXPECT_FALSE(sum(x).requires_grad());
}

TEST(Backward, ElementwiseAndLayoutOpsMatchFiniteDifferences) {
  std::mt19937_64 rng(21);
  Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({3, 1}, rng), c = random_tensor({4}, rng);
  auto res = test::grad_check({a, b, c}, [&] {
    Tensor t = add(mul(a, b), c);                      // broadcasting
    t = permute(silu(t), {2, 0, 1});                   // [4,2,3]
    t = concat({t, softplus(reshape(a, {4, 2, 3}))}, 1);
    t = slice(tanh(t), 1, 1, 4);
    return sum(square(sub(t, scale(add_scalar(t, 0.3), 0.5))));
  });
  EXPECT_LT(res.max_rel_err, 1e-4);
}

TEST(Backward, MatmulSoftmaxConvMatchFiniteDifferences) {
  std::mt19937_64 rng(22);
  Tensor q = random_tensor({2, 4, 3}, rng), k = random_tensor({2, 4, 3}, rng), v = random_tensor({2, 4, 3}, rng);
  auto res = test::grad_check({q, k, v}, [&] {
    auto w = softmax_lastdim(scale(matmul(q, transpose_last2(k)), 0.7));
    return sum(square(matmul(w, v)));
  });
  EXPECT_LT(res.max_rel_err, 1e-4);

  Tensor x = random_tensor({2, 5, 5}, rng), kern = random_tensor({3, 2, 3, 3}, rng), bias = random_tensor({3}, rng);
  auto res2 = test::grad_check({x, kern, bias}, [&] {
    auto y = conv2d(x, kern, bias, {2, 1});
    return sum(square(y));
  });
  EXPECT_LT(res2.max_rel_err, 1e-4);
}

TEST(Backward, GroupNormAndUpsampleMatchFiniteDifferences) {
  std::mt19937_64 rng(23);
  Tensor x = random_tensor({4, 3, 3}, rng), g = random_tensor({4}, rng), b = random_tensor({4}, rng);
  Tensor w = random_tensor({4, 6, 6}, rng);
  auto res = test::grad_check({x, g, b}, [&] { return sum(mul(upsample_nearest2x(group_norm(x, 2, g, b)), w)); });
  EXPECT_LT(res.max_rel_err, 1e-4);
}

// Property: randomly composed graphs of the implemented ops agree with
// finite differences.
TEST(Backward, RandomCompositeGraphsMatchFiniteDifferences) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 15; ++trial) {
    Tensor a = random_tensor({3, 3}, rng), b = random_tensor({3, 3}, rng);
    std::vector<int> ops;
    std::uniform_int_distribution<int> pick(0, 6);
    for (int i = 0; i < 5; ++i) ops.push_back(pick(rng));
    auto res = test::grad_check({a, b}, [&] {
      Tensor t = a;
      for (int op : ops) {
        switch (op) {
          case 0: t = matmul(t, b); break;
          case 1: t = softmax_lastdim(t); break;
          case 2: t = add(t, b); break;
          case 3: t = mul(t, b); break;
          case 4: t = silu(t); break;
          case 5: t = transpose_last2(t); break;
          default: t = tanh(t); break;
        }
      }
      return sum(square(t));
    });
    EXPECT_LT(res.max_rel_err, 1e-4) << "trial " << trial;
  }
}

TEST(Tensor, ShapeInvariants) {
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(reshape(Tensor({2, 3}), {4}), ShapeError);
}

TEST(Tensor, FiniteCheckFlagsNaN) {
  const bool prev = finite_checks();
  set_finite_checks(true);
  Tensor x({1}, {std::numeric_limits<double>::quiet_NaN()});
  EXPECT_THROW(scale(x, 1.0), StateError);
  set_finite_checks(prev);
}

TEST(AdamW, FrozenParamUnchanged) {
  ParamSet ps;
  ps.add("a", Tensor({2}, {1.0, 2.0}), /*frozen=*/true);
  ps.at("a").mutable_grad()[0] = 5.0;
  ps.adamw_step({.lr = 0.1});
  EXPECT_EQ(ps.at("a")[0], 1.0);
  EXPECT_EQ(ps.at("a")[1], 2.0);
}

TEST(AdamW, FirstStepClosedForm) {
  ParamSet ps;
  ps.add("w", Tensor({1}, {0.5}));
  ps.zero_grad();
  ps.at("w").mutable_grad()[0] = 1.0;
  const AdamWConfig cfg{.lr = 1e-5, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.01};
  ps.adamw_step(cfg);
  // m̂ = 1, v̂ = 1 after bias correction.
  const double expected = 0.5 * (1.0 - 1e-5 * 0.01) - 1e-5 * 1.0 / (1.0 + 1e-8);
  EXPECT_NEAR(ps.at("w")[0], expected, 1e-15);
  EXPECT_LT(ps.at("w")[0], 0.5);
}

TEST(AdamW, ZeroGradZeroDecayUnchanged) {
  ParamSet ps;
  ps.add("w", Tensor({3}, {1.0, -2.0, 3.0}));
  ps.zero_grad();
  ps.adamw_step({.lr = 1e-3, .weight_decay = 0.0});
  EXPECT_EQ(ps.at("w").values(), (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(AdamW, MissingGradIsStateError) {
  ParamSet ps;
  ps.add("w", Tensor({1}, {1.0}));
  EXPECT_THROW(ps.adamw_step({}), StateError);
}

TEST(ParamSet, DuplicatePathRejected) {
  ParamSet ps;
  ps.add("x", Tensor({1}));
  EXPECT_THROW(ps.add("x", Tensor({1})), ConfigError);
}

TEST(ParamSet, CheckpointRoundTripAndLayout) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "amad_test_numeric";
  fs::create_directories(dir);
  ParamSet ps;
  std::mt19937_64 rng(4);
  ps.add("adapter.L1.w", Tensor::randn({2, 3}, rng));
  ps.add("net.b", Tensor::randn({4}, rng), true);
  ps.save(dir / "ck.bin");

  // magic, then the first entry (map order: "adapter.L1.w")
  std::ifstream is(dir / "ck.bin", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(is)), {});
  ASSERT_EQ(bytes.substr(0, 7), "AMAD01\n");
  EXPECT_EQ(static_cast<unsigned char>(bytes[7]), 12u);  // path length, u32 LE
  EXPECT_EQ(bytes.substr(11, 12), "adapter.L1.w");
  EXPECT_EQ(static_cast<unsigned char>(bytes[23]), 2u);  // rank
  const std::size_t entry1 = 4 + 12 + 4 + 16 + 48 + 1;
  const std::size_t entry2 = 4 + 5 + 4 + 8 + 32 + 1;
  EXPECT_EQ(bytes.size(), 7 + entry1 + entry2);
  EXPECT_EQ(bytes.back(), 1);  // frozen flag of net.b

  ParamSet back = ParamSet::load(dir / "ck.bin");
  EXPECT_EQ(back.hash(), ps.hash());
  EXPECT_TRUE(back.frozen("net.b"));
  EXPECT_FALSE(back.frozen("adapter.L1.w"));

  std::ofstream(dir / "trunc.bin", std::ios::binary) << bytes.substr(0, 40);
  EXPECT_THROW(ParamSet::load(dir / "trunc.bin"), IoError);
  fs::remove_all(dir);
}
