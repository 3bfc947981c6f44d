#include <cmath>

#include <gtest/gtest.h>

#include "crystalign/checkpoint.hpp"
#include "crystalign/optim.hpp"
#include "crystalign/tensor.hpp"
#include "gradcheck.hpp"

using namespace crystalign;
using namespace crystalign::tensor;

TEST(TensorOps, L2NormalizeExample) {
  const Tensor<double> x({1, 2}, {3, 4});
  const auto y = l2_normalize(x);
  EXPECT_NEAR(y[0], 0.6, 1e-12);
  EXPECT_NEAR(y[1], 0.8, 1e-12);
}

TEST(TensorOps, CosineOfOrthogonalRows) {
  const Tensor<double> a({1, 2}, {1, 0}), b({1, 2}, {0, 1});
  EXPECT_EQ(cosine_rows(a, b)[0], 0.0);
}

TEST(TensorOps, SegmentSumExample) {
  const Tensor<double> x({3, 1}, {1, 2, 3});
  const std::vector<std::uint32_t> seg = {0, 0, 1};
  const auto y = segment_sum<double>(x, seg, 2);
  ASSERT_EQ(y.shape(), (Shape{2, 1}));
  EXPECT_EQ(y[0], 3.0);
  EXPECT_EQ(y[1], 3.0);
}

TEST(TensorOps, SquareGradient) {
  Tensor<double> x = Tensor<double>::scalar(3.0, true);
  auto loss = mul(x, x);
  backward(loss);
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(TensorOps, ShapeMismatchNamesBothShapes) {
  const Tensor<double> a({2, 3}, std::vector<double>(6)), b({3, 2}, std::vector<double>(6));
  try {
    add(a, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ShapeMismatch);
    EXPECT_NE(std::string(e.what()).find("[2, 3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[3, 2]"), std::string::npos);
  }
}

TEST(TensorOps, BackwardNeedsScalar) {
  Tensor<double> x({2}, {1, 2}, true);
  auto y = scale(x, 2.0);
  try {
    backward(y);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NotScalar);
  }
  Tape<double>::current().clear();
}

TEST(TensorOps, ZeroRowNormalizesToZeroWithWarning) {
  const auto before = numerical_warnings();
  const auto y = l2_normalize(Tensor<double>({2, 2}, {0, 0, 3, 4}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(numerical_warnings(), before + 1);
}

TEST(TensorOps, NormalizedRowsAreUnit) {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(5 * 7);
    for (auto& x : v) x = rng.uniform(-10, 10);
    const auto y = l2_normalize(Tensor<double>({5, 7}, v));
    for (std::size_t r = 0; r < 5; ++r) {
      double sq = 0;
      for (std::size_t c = 0; c < 7; ++c) sq += y.at(r, c) * y.at(r, c);
      EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-6);
    }
  }
}

TEST(TensorOps, CheckedModeCatchesNonFinite) {
  set_checked_mode(true);
  const Tensor<double> x({1}, {1e308});
  EXPECT_THROW(scale(x, 10.0), Error);
  set_checked_mode(false);
}

TEST(TensorOps, NoGradGuardRecordsNothing) {
  Tensor<double> x({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    const auto y = scale(x, 2.0);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(Tape<double>::current().size(), 0u);
}

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const auto cases = gradcheck::op_cases();
  const auto& c = cases[GetParam()];
  Rng rng(100 + GetParam());
  for (int trial = 0; trial < 5; ++trial) {
    EXPECT_LT(gradcheck::check(c.fn, c.inputs, rng, c.away_from_zero), 1e-6) << c.name;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, gradcheck::op_cases().size()),
                         [](const auto& info) { return gradcheck::op_cases()[info.param].name; });

TEST(TensorGradient, CosineAtOrthonormalInputs) {
  const auto fn = [](const std::vector<Tensor<double>>& x) { return cosine_rows(x[0], x[1]); };
  Tensor<double> a({1, 2}, {1, 0}, true), b({1, 2}, {0, 1}, true);
  auto loss = sum(fn({a, b}));
  backward(loss);
  const std::vector<double> ga(a.grad().begin(), a.grad().end());
  const auto f = [&](const std::vector<double>& v) {
    NoGradGuard g;
    return sum(fn({Tensor<double>({1, 2}, v), b.detach()})).item();
  };
  EXPECT_LT(oracle::max_rel_error(f, {1, 0}, ga, 1e-4), 1e-6);
}

TEST(TensorGradient, TwoLayerMlpFloatAgainstDoubleDifferences) {
  Rng rng(8);
  const std::size_t in = 5, hidden = 6;
  std::vector<double> w1(in * hidden), w2(hidden), x(2 * in);
  for (auto& v : w1) v = rng.uniform(-1, 1);
  for (auto& v : w2) v = rng.uniform(-1, 1);
  for (auto& v : x) v = rng.uniform(-1, 1);

  Tensor<float> W1({in, hidden}, std::vector<float>(w1.begin(), w1.end()), true);
  const Tensor<float> W2({hidden, 1}, std::vector<float>(w2.begin(), w2.end()));
  const Tensor<float> X({2, in}, std::vector<float>(x.begin(), x.end()));
  auto loss = sum(matmul(tanh(matmul(X, W1)), W2));
  backward(loss);
  const std::vector<double> analytic(W1.grad().begin(), W1.grad().end());

  const auto f = [&](const std::vector<double>& w) {
    NoGradGuard g;
    return sum(matmul(tanh(matmul(Tensor<double>({2, in}, x), Tensor<double>({in, hidden}, w))),
                      Tensor<double>({hidden, 1}, w2)))
        .item();
  };
  EXPECT_LT(oracle::max_rel_error(f, w1, analytic), 1e-4);
}

TEST(AdamW, ZeroGradientNoDecayLeavesParams) {
  std::vector<Tensor<float>> p = {Tensor<float>({2}, {1.5f, -2.0f}, true)};
  AdamWState<float> st;
  adamw_step<float>(p, st, {.lr = 0.1, .weight_decay = 0.0});
  EXPECT_EQ(p[0][0], 1.5f);
  EXPECT_EQ(p[0][1], -2.0f);
}

TEST(AdamW, FirstStepUnitGradient) {
  std::vector<Tensor<double>> p = {Tensor<double>::scalar(1.0, true)};
  p[0].mutable_grad()[0] = 1.0;
  AdamWState<double> st;
  adamw_step<double>(p, st, {.lr = 0.1, .weight_decay = 0.0});
  EXPECT_NEAR(p[0].item(), 0.9, 1e-6);
}

TEST(AdamW, DecoupledDecay) {
  std::vector<Tensor<double>> p = {Tensor<double>::scalar(2.0, true)};
  AdamWState<double> st;
  adamw_step<double>(p, st, {.lr = 0.1, .weight_decay = 0.1});
  EXPECT_NEAR(p[0].item(), 2.0 * (1 - 0.01), 1e-12);
}

TEST(AdamW, MatchesScalarFormulaOverSteps) {
  Rng rng(3);
  const AdamWConfig cfg{.lr = 0.05, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.02};
  std::vector<Tensor<double>> p = {Tensor<double>({3}, {0.5, -1.0, 2.0}, true)};
  AdamWState<double> st;
  std::vector<double> ref = {0.5, -1.0, 2.0}, m(3, 0.0), v(3, 0.0);
  for (int t = 1; t <= 20; ++t) {
    p[0].zero_grad();
    auto g = p[0].mutable_grad();
    for (std::size_t i = 0; i < 3; ++i) {
      const double gi = rng.uniform(-1, 1);
      g[i] = gi;
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * gi * gi;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] = ref[i] - cfg.lr * cfg.weight_decay * ref[i] - cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    }
    adamw_step<double>(p, st, cfg);
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[0][i], ref[i], 1e-12);
  EXPECT_EQ(st.step, 20u);
}

TEST(AdamW, ShapeMismatchAgainstState) {
  std::vector<Tensor<double>> p = {Tensor<double>::zeros({2}, true)};
  AdamWState<double> st;
  adamw_step<double>(p, st, {});
  std::vector<Tensor<double>> q = {Tensor<double>::zeros({3}, true)};
  EXPECT_THROW(adamw_step<double>(q, st, {}), Error);
}

TEST(CheckpointFormat, RoundTripAndShapeCheck) {
  Checkpoint ck;
  ck.put("a/w", Tensor<float>({2, 2}, {1, 2, 3, 4}));
  ck.put("b", Tensor<double>({3}, {0.5, 0.25, 0.125}));
  ck.metadata()["note"] = "x";
  const auto bytes = ck.serialize();
  const auto back = Checkpoint::deserialize(bytes);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_EQ(back.get<float>("a/w")[3], 4.0f);
  EXPECT_EQ(back.get<double>("b")[2], 0.125);
  auto wrong = Tensor<float>::zeros({4});
  EXPECT_THROW(back.get_into("a/w", wrong), Error);
  EXPECT_THROW(back.entry("missing"), Error);
}

TEST(CheckpointFormat, TruncatedBytesRejected) {
  Checkpoint ck;
  ck.put("w", Tensor<float>({8}, std::vector<float>(8, 1.0f)));
  auto bytes = ck.serialize();
  bytes.resize(bytes.size() - 4);
  EXPECT_THROW(Checkpoint::deserialize(bytes), Error);
}
