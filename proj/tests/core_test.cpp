#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "compscale/gradcheck.hpp"
#include "compscale/ops.hpp"
#include "gtest/gtest.h"

namespace compscale {
namespace {

template <typename T = double>
Tensor<T> RandomTensor(Shape shape, std::mt19937& gen, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(gen));
  return t;
}

TEST(TensorTest, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), ShapeError);
  Tensor<double> t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(MatmulTest, Identity) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  auto b = tape.constant(Tensor<double>({2, 2}, {5, 6, 7, 8}));
  EXPECT_EQ(tape.value(matmul(tape, a, b)).vec(), (std::vector<double>{5, 6, 7, 8}));
}

TEST(MatmulTest, RowTimesColumn) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({1, 2}, {1, 2}));
  auto b = tape.constant(Tensor<double>({2, 1}, {3, 4}));
  EXPECT_EQ(tape.value(matmul(tape, a, b)).vec(), (std::vector<double>{11}));
}

TEST(MatmulTest, MatchesTripleLoop) {
  std::mt19937 gen(7);
  const auto A = RandomTensor({3, 4}, gen);
  const auto B = RandomTensor({4, 2}, gen);
  Tape<double> tape;
  const auto& C = tape.value(matmul(tape, tape.constant(A), tape.constant(B)));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 4; ++k) acc += A.at(i, k) * B.at(k, j);
      EXPECT_NEAR(C.at(i, j), acc, 1e-14);
    }
  }
}

TEST(MatmulTest, ShapeMismatch) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({2, 3}));
  EXPECT_THROW(matmul(tape, a, b), ShapeError);
  EXPECT_THROW(linear(tape, a, tape.constant(Tensor<double>({3, 2}))), ShapeError);
}

TEST(ElementwiseTest, AddAndSilu) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2}, {1, 2}));
  auto b = tape.constant(Tensor<double>({2}, {3, 4}));
  EXPECT_EQ(tape.value(add(tape, a, b)).vec(), (std::vector<double>{4, 6}));
  auto x = tape.constant(Tensor<double>({2}, {0.0, 1.0}));
  const auto& s = tape.value(silu(tape, x));
  EXPECT_EQ(s[0], 0.0);
  // 1 * sigmoid(1), evaluated to 40 digits offline.
  EXPECT_NEAR(s[1], 0.7310585786300048792, 1e-15);
}

TEST(ElementwiseTest, BroadcastRules) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  auto row = tape.constant(Tensor<double>({2}, {10, 20}));
  auto scalar = tape.constant(Tensor<double>::scalar(2));
  EXPECT_EQ(tape.value(add(tape, a, row)).vec(), (std::vector<double>{11, 22, 13, 24}));
  EXPECT_EQ(tape.value(mul(tape, a, scalar)).vec(), (std::vector<double>{2, 4, 6, 8}));
  EXPECT_EQ(tape.value(sub(tape, a, scalar)).vec(), (std::vector<double>{-1, 0, 1, 2}));
  auto bad = tape.constant(Tensor<double>({3}, {1, 2, 3}));
  EXPECT_THROW(add(tape, a, bad), ShapeError);
}

TEST(ElementwiseTest, NonFiniteIsAnError) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2}, {1, 2}));
  auto inf = tape.constant(Tensor<double>::scalar(std::numeric_limits<double>::infinity()));
  EXPECT_THROW(mul(tape, a, inf), NumericError);
  EXPECT_THROW(scale(tape, a, std::numeric_limits<double>::max()), NumericError);
}

TEST(RmsnormTest, UnitRms) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({4}, {1, 1, 1, 1}));
  auto g = tape.constant(Tensor<double>({4}, {1, 1, 1, 1}));
  const auto& y = tape.value(rmsnorm(tape, x, g, 1e-12));
  for (double v : y.data()) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(RmsnormTest, ScaleInvariantMagnitude) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({2}, {2, 2}));
  auto g = tape.constant(Tensor<double>({2}, {1, 1}));
  EXPECT_EQ(tape.value(rmsnorm(tape, x, g, 0.0)).vec(), (std::vector<double>{1, 1}));
  EXPECT_THROW(rmsnorm(tape, x, g, -1.0), DomainError);
}

TEST(RmsnormTest, GradientMatchesFiniteDifferences) {
  std::mt19937 gen(11);
  const std::vector<Tensor<double>> pts = {RandomTensor({2, 4}, gen), RandomTensor({4}, gen)};
  const double err = gradient_check(
      [](Tape<double>& t, std::span<const Var> v) {
        auto y = rmsnorm(t, v[0], v[1], 1e-5);
        return sum(t, mul(t, y, y));
      },
      pts, 1e-5);
  EXPECT_LE(err, 1e-6);
}

// Independent attention oracle: explicit rotary rotation, dense scores,
// mask, softmax and weighted sum in long double.
std::vector<long double> AttentionOracle(const Tensor<double>& q, const Tensor<double>& k,
                                         const Tensor<double>& v, double theta) {
  const std::size_t H = q.dim(0), t = q.dim(1), dh = q.dim(2);
  auto rot = [&](const Tensor<double>& x, std::size_t h, std::size_t pos) {
    std::vector<long double> r(dh);
    for (std::size_t p = 0; p < dh / 2; ++p) {
      const long double ang = pos * std::pow((long double)theta, -2.0L * p / dh);
      const long double x0 = x[h * t * dh + pos * dh + 2 * p], x1 = x[h * t * dh + pos * dh + 2 * p + 1];
      r[2 * p] = x0 * std::cos(ang) - x1 * std::sin(ang);
      r[2 * p + 1] = x0 * std::sin(ang) + x1 * std::cos(ang);
    }
    return r;
  };
  std::vector<long double> out(q.size(), 0.0L);
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<long double> w(t, 0.0L);
      long double z = 0.0L;
      const auto qi = rot(q, h, i);
      for (std::size_t j = 0; j < t; ++j) {
        if (j > i) continue;  // masked, -inf before softmax
        const auto kj = rot(k, h, j);
        long double s = 0.0L;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        w[j] = std::exp(s / std::sqrt((long double)dh));
        z += w[j];
      }
      for (std::size_t j = 0; j <= i; ++j) {
        for (std::size_t c = 0; c < dh; ++c) out[h * t * dh + i * dh + c] += w[j] / z * v[h * t * dh + j * dh + c];
      }
    }
  }
  return out;
}

TEST(AttentionTest, SinglePositionReturnsValues) {
  std::mt19937 gen(3);
  Tape<double> tape;
  auto q = tape.constant(RandomTensor({2, 1, 4}, gen));
  auto k = tape.constant(RandomTensor({2, 1, 4}, gen));
  const auto V = RandomTensor({2, 1, 4}, gen);
  auto o = causal_attention(tape, q, k, tape.constant(V));
  for (std::size_t i = 0; i < V.size(); ++i) EXPECT_NEAR(tape.value(o)[i], V[i], 1e-15);
}

TEST(AttentionTest, EqualScoresGiveRunningMean) {
  std::mt19937 gen(5);
  Tape<double> tape;
  // q = 0 makes every score 0 regardless of k.
  auto q = tape.constant(Tensor<double>({1, 4, 2}));
  auto k = tape.constant(RandomTensor({1, 4, 2}, gen));
  const auto V = RandomTensor({1, 4, 2}, gen);
  const auto& o = tape.value(causal_attention(tape, q, k, tape.constant(V)));
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0;
      for (std::size_t j = 0; j <= i; ++j) m += V[j * 2 + c];
      EXPECT_NEAR(o[i * 2 + c], m / (i + 1), 1e-14);
    }
  }
}

TEST(AttentionTest, MatchesDenseOracle) {
  std::mt19937 gen(9);
  const auto Q = RandomTensor({1, 3, 4}, gen), K = RandomTensor({1, 3, 4}, gen), V = RandomTensor({1, 3, 4}, gen);
  Tape<double> tape;
  const auto& o = tape.value(causal_attention(tape, tape.constant(Q), tape.constant(K), tape.constant(V), 10000.0));
  const auto ref = AttentionOracle(Q, K, V, 10000.0);
  for (std::size_t i = 0; i < o.size(); ++i) EXPECT_NEAR(o[i], static_cast<double>(ref[i]), 1e-13);
}

TEST(AttentionTest, BatchedLayoutMatchesPerHeadLayout) {
  std::mt19937 gen(21);
  const std::size_t B = 2, H = 2, t = 3, dh = 4;
  Tensor<double> q({B * t, H * dh}), k({B * t, H * dh}), v({B * t, H * dh});
  for (auto* x : {&q, &k, &v}) *x = RandomTensor({B * t, H * dh}, gen);
  Tape<double> tape;
  const auto& o = tape.value(multihead_causal_attention(tape, tape.constant(q), tape.constant(k), tape.constant(v), B, H, 500.0));
  for (std::size_t b = 0; b < B; ++b) {
    auto slice = [&](const Tensor<double>& x) {
      Tensor<double> s({H, t, dh});
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t c = 0; c < dh; ++c) s[h * t * dh + i * dh + c] = x.at(b * t + i, h * dh + c);
      return s;
    };
    const auto ref = AttentionOracle(slice(q), slice(k), slice(v), 500.0);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t c = 0; c < dh; ++c)
          EXPECT_NEAR(o.at(b * t + i, h * dh + c), static_cast<double>(ref[h * t * dh + i * dh + c]), 1e-13);
  }
}

TEST(AttentionTest, FutureTokensDoNotLeak) {
  std::mt19937 gen(13);
  const std::size_t t = 5;
  auto Q = RandomTensor({2, t, 4}, gen), K = RandomTensor({2, t, 4}, gen), V = RandomTensor({2, t, 4}, gen);
  Tape<double> tape;
  const Tensor<double> base = tape.value(causal_attention(tape, tape.constant(Q), tape.constant(K), tape.constant(V)));
  for (std::size_t pos = 1; pos < t; ++pos) {
    auto K2 = K, V2 = V, Q2 = Q;
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t c = 0; c < 4; ++c) {
        K2[h * t * 4 + pos * 4 + c] += 3.0;
        V2[h * t * 4 + pos * 4 + c] -= 5.0;
        Q2[h * t * 4 + pos * 4 + c] *= -1.0;
      }
    Tape<double> t2;
    const auto& o = t2.value(causal_attention(t2, t2.constant(Q2), t2.constant(K2), t2.constant(V2)));
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < pos; ++i)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(o[h * t * 4 + i * 4 + c], base[h * t * 4 + i * 4 + c]);
  }
}

TEST(AttentionTest, OddHeadDimensionRejected) {
  Tape<double> tape;
  auto q = tape.constant(Tensor<double>({1, 2, 3}));
  EXPECT_THROW(causal_attention(tape, q, q, q), ShapeError);
}

// Softmax cross-entropy in long double.
long double CrossEntropyOracle(const Tensor<double>& logits, const std::vector<std::uint32_t>& targets) {
  long double total = 0.0L;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    long double z = 0.0L;
    for (std::size_t j = 0; j < logits.cols(); ++j) z += std::exp((long double)logits.at(r, j));
    total += -((long double)logits.at(r, targets[r]) - std::log(z));
  }
  return total / logits.rows();
}

TEST(CrossEntropyTest, UniformLogits) {
  Tape<double> tape;
  const std::vector<std::uint32_t> tgt = {2};
  auto l = cross_entropy(tape, tape.constant(Tensor<double>({1, 4})), tgt);
  EXPECT_NEAR(tape.value(l)[0], std::log(4.0), 1e-15);
}

TEST(CrossEntropyTest, HugeMarginIsStable) {
  Tape<double> tape;
  Tensor<double> logits({1, 3});
  logits[1] = 1e9;
  const std::vector<std::uint32_t> tgt = {1};
  EXPECT_NEAR(tape.value(cross_entropy(tape, tape.constant(logits), tgt))[0], 0.0, 1e-12);
}

TEST(CrossEntropyTest, MatchesExtendedPrecisionOracle) {
  std::mt19937 gen(17);
  const auto logits = RandomTensor({2, 5}, gen);
  const std::vector<std::uint32_t> tgt = {4, 0};
  Tape<double> tape;
  const double got = tape.value(cross_entropy(tape, tape.constant(logits), tgt))[0];
  EXPECT_NEAR(got, static_cast<double>(CrossEntropyOracle(logits, tgt)), 1e-14);
}

TEST(CrossEntropyTest, TargetOutOfRange) {
  Tape<double> tape;
  const std::vector<std::uint32_t> tgt = {4};
  EXPECT_THROW(cross_entropy(tape, tape.constant(Tensor<double>({1, 4})), tgt), DomainError);
}

Tensor<double> RoundToHalf(const Tensor<double>& w) {
  Tensor<double> q(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) q[i] = std::round(w[i] * 2.0) / 2.0;
  return q;
}

TEST(CustomGradTest, ForwardAndIdentityBackward) {
  std::mt19937 gen(23);
  const auto W = RandomTensor({3, 4}, gen);
  Tape<double> tape;
  auto w = tape.leaf(W);
  auto q = custom_grad(tape, tape.constant(RoundToHalf(W)), w);
  EXPECT_EQ(tape.value(q), RoundToHalf(W));
  tape.backward(sum(tape, q));
  for (double g : tape.grad(w).data()) EXPECT_EQ(g, 1.0);
}

TEST(CustomGradTest, ChainRuleThroughQuantizedPoint) {
  std::mt19937 gen(29);
  const auto W = RandomTensor({2, 3}, gen), X = RandomTensor({4, 3}, gen), Y = RandomTensor({4, 2}, gen);
  const auto Wq = RoundToHalf(W);
  Tape<double> tape;
  auto w = tape.leaf(W);
  auto pred = linear(tape, tape.constant(X), custom_grad(tape, tape.constant(Wq), w));
  auto r = sub(tape, pred, tape.constant(Y));
  tape.backward(sum(tape, mul(tape, r, r)));
  // Manual oracle: dL/dW = 2 (X Wq^T - Y)^T X evaluated at Wq.
  for (std::size_t o = 0; o < 2; ++o) {
    for (std::size_t c = 0; c < 3; ++c) {
      double g = 0.0;
      for (std::size_t n = 0; n < 4; ++n) {
        double p = 0.0;
        for (std::size_t k = 0; k < 3; ++k) p += X.at(n, k) * Wq.at(o, k);
        g += 2.0 * (p - Y.at(n, o)) * X.at(n, c);
      }
      EXPECT_NEAR(tape.grad(w).at(o, c), g, 1e-12);
    }
  }
}

TEST(CustomGradTest, ShapeMismatch) {
  Tape<double> tape;
  EXPECT_THROW(custom_grad(tape, tape.constant(Tensor<double>({2})), tape.leaf(Tensor<double>({3}))), ShapeError);
}

TEST(TapeTest, BackwardRunsInReverseOrderAndRezeroes) {
  Tape<double> tape;
  std::vector<int> order;
  auto x = tape.leaf(Tensor<double>::scalar(1.0));
  auto a = tape.record(Tensor<double>::scalar(1.0), true, [&](Tape<double>& t, Var, const Tensor<double>& g) {
    order.push_back(1);
    t.grad_buffer(x)[0] += g[0];
  });
  auto b = tape.record(Tensor<double>::scalar(1.0), true, [&](Tape<double>& t, Var, const Tensor<double>& g) {
    order.push_back(2);
    t.grad_buffer(a)[0] += 2.0 * g[0];
  });
  tape.backward(b);
  tape.backward(b);
  EXPECT_EQ(order, (std::vector<int>{2, 1, 2, 1}));
  EXPECT_EQ(tape.grad(x)[0], 2.0);
}

TEST(GradientCheckTest, Square) {
  const double err = gradient_check([](Tape<double>& t, Var x) { return mul(t, x, x); },
                                    Tensor<double>::scalar(3.0), 1e-5);
  EXPECT_LT(err, 1e-10);
}

TEST(GradientCheckTest, SumOfSilu) {
  std::mt19937 gen(31);
  const double err = gradient_check([](Tape<double>& t, Var x) { return sum(t, silu(t, x)); },
                                    RandomTensor({8}, gen), 1e-5);
  EXPECT_LE(err, 1e-6);
}

// Every differentiable op against central differences, random inputs in
// [-2, 2], step 1e-5.
TEST(GradientProperty, AllOpsAgreeWithFiniteDifferences) {
  std::mt19937 gen(37);
  const double step = 1e-5, tol = 1e-6;
  auto weights = RandomTensor({3, 5}, gen);  // fixed projection to a scalar
  for (int trial = 0; trial < 5; ++trial) {
    auto project = [&](Tape<double>& t, Var y) {
      const auto& v = t.value(y);
      Tensor<double> w(v.shape());
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = weights[i % weights.size()];
      return sum(t, mul(t, y, t.constant(w)));
    };
    std::vector<Tensor<double>> ab = {RandomTensor({3, 4}, gen), RandomTensor({4, 5}, gen)};
    EXPECT_LE(gradient_check([&](Tape<double>& t, std::span<const Var> v) { return project(t, matmul(t, v[0], v[1])); }, ab, step), tol);
    std::vector<Tensor<double>> xw = {RandomTensor({3, 4}, gen), RandomTensor({5, 4}, gen)};
    EXPECT_LE(gradient_check([&](Tape<double>& t, std::span<const Var> v) { return project(t, linear(t, v[0], v[1])); }, xw, step), tol);
    std::vector<Tensor<double>> same = {RandomTensor({3, 5}, gen), RandomTensor({3, 5}, gen)};
    std::vector<Tensor<double>> row = {RandomTensor({3, 5}, gen), RandomTensor({5}, gen)};
    std::vector<Tensor<double>> scl = {RandomTensor({3, 5}, gen), RandomTensor({1}, gen)};
    for (const auto* args : {&same, &row, &scl}) {
      EXPECT_LE(gradient_check([&](Tape<double>& t, std::span<const Var> v) { return project(t, add(t, v[0], v[1])); }, *args, step), tol);
      EXPECT_LE(gradient_check([&](Tape<double>& t, std::span<const Var> v) { return project(t, sub(t, v[0], v[1])); }, *args, step), tol);
      EXPECT_LE(gradient_check([&](Tape<double>& t, std::span<const Var> v) { return project(t, mul(t, v[0], v[1])); }, *args, step), tol);
    }
    EXPECT_LE(gradient_check([&](Tape<double>& t, Var x) { return project(t, scale(t, x, -1.7)); }, RandomTensor({3, 5}, gen), step), tol);
    EXPECT_LE(gradient_check([&](Tape<double>& t, Var x) { return project(t, silu(t, x)); }, RandomTensor({3, 5}, gen), step), tol);
    std::vector<Tensor<double>> norm = {RandomTensor({3, 5}, gen), RandomTensor({5}, gen)};
    EXPECT_LE(gradient_check([&](Tape<double>& t, std::span<const Var> v) { return project(t, rmsnorm(t, v[0], v[1], 1e-6)); }, norm, step), tol);
    const std::vector<std::uint32_t> ids = {0, 2, 2, 1};
    EXPECT_LE(gradient_check([&](Tape<double>& t, Var e) { return project(t, embedding(t, e, ids)); }, RandomTensor({3, 5}, gen), step), tol);
    const std::vector<std::uint32_t> tgt = {4, 1, 0};
    EXPECT_LE(gradient_check([&](Tape<double>& t, Var l) { return cross_entropy(t, l, tgt); }, RandomTensor({3, 5}, gen), step), tol);
    std::vector<Tensor<double>> qkv = {RandomTensor({2, 3, 4}, gen), RandomTensor({2, 3, 4}, gen), RandomTensor({2, 3, 4}, gen)};
    EXPECT_LE(gradient_check([&](Tape<double>& t, std::span<const Var> v) { return project(t, causal_attention(t, v[0], v[1], v[2])); }, qkv, step), tol);
    std::vector<Tensor<double>> qkv2 = {RandomTensor({6, 4}, gen), RandomTensor({6, 4}, gen), RandomTensor({6, 4}, gen)};
    EXPECT_LE(gradient_check([&](Tape<double>& t, std::span<const Var> v) { return project(t, multihead_causal_attention(t, v[0], v[1], v[2], 2, 2)); }, qkv2, step), tol);
  }
}

TEST(DeterminismTest, RepeatedRunsAreBitwiseIdentical) {
  auto run = [] {
    std::mt19937 gen(41);
    Tape<float> tape;
    auto x = tape.leaf(RandomTensor<float>({4, 8}, gen));
    auto w = tape.leaf(RandomTensor<float>({8, 8}, gen));
    auto g = tape.leaf(RandomTensor<float>({8}, gen));
    auto h = silu(tape, linear(tape, rmsnorm(tape, x, g, 1e-5f), w));
    auto o = multihead_causal_attention(tape, h, h, h, 2, 2);
    const std::vector<std::uint32_t> tgt = {1, 2, 3, 4};
    auto loss = cross_entropy(tape, o, tgt);
    tape.backward(loss);
    return std::make_tuple(tape.value(loss), tape.grad(x), tape.grad(w), tape.grad(g));
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace compscale
