#include <gtest/gtest.h>

#include <cmath>

#include "causalvln/diffcore.hpp"
#include "support/gradcheck.hpp"

using namespace causalvln;
using causalvln::testing::grad_check;
using causalvln::testing::random_param;

namespace {

Tensor eval_unary(const Tensor& in, Var (*op)(Var)) {
  Tape t;
  return op(t.constant(in)).value();
}

}  // namespace

TEST(Linear, IdentityWeights) {
  Tape t;
  Var y = linear(t.constant(Tensor::from_rows({{1, 2}})), t.constant(Tensor::identity(2)));
  EXPECT_EQ(y.value(), Tensor::from_rows({{1, 2}}));
}

TEST(Linear, WithBias) {
  Tape t;
  Var y = linear(t.constant(Tensor::from_rows({{1, 0}})), t.constant(Tensor::from_rows({{2, 3}, {4, 5}})),
                 t.constant(Tensor::from_rows({{1, 1}})));
  EXPECT_EQ(y.value(), Tensor::from_rows({{3, 4}}));
}

TEST(Linear, ZeroInputGivesBias) {
  Tape t;
  Var y = linear(t.constant(Tensor::from_rows({{0, 0}})), t.constant(Tensor::from_rows({{9, -3}, {0.5, 2}})),
                 t.constant(Tensor::from_rows({{7, 7}})));
  EXPECT_EQ(y.value(), Tensor::from_rows({{7, 7}}));
}

TEST(Linear, ShapeMismatchThrows) {
  Tape t;
  EXPECT_THROW(linear(t.constant(Tensor(1, 3)), t.constant(Tensor(2, 2))), DimensionError);
}

TEST(Softmax, Examples) {
  Tape t;
  auto a = softmax_rows(t.constant(Tensor::from_rows({{0, 0}}))).value();
  EXPECT_DOUBLE_EQ(a[0], 0.5);
  EXPECT_DOUBLE_EQ(a[1], 0.5);
  auto b = softmax_rows(t.constant(Tensor::from_rows({{1000, 1000}}))).value();
  EXPECT_DOUBLE_EQ(b[0], 0.5);
  EXPECT_DOUBLE_EQ(b[1], 0.5);
  auto c = softmax_rows(t.constant(Tensor::from_rows({{0.7071, 0}}))).value();
  const double e = std::exp(0.7071);
  EXPECT_NEAR(c[0], e / (e + 1.0), 1e-12);
  EXPECT_NEAR(c[0], 0.6698, 1e-3);
  EXPECT_NEAR(c[1], 0.3302, 1e-3);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.index(8), m = 1 + rng.index(8);
    Tensor x = rng.normal_tensor(n, m, 5.0);
    Tensor shifted = x;
    const double c = rng.uniform(-50, 50);
    for (auto& v : shifted.data()) v += c;
    Tape t;
    const Tensor& y = softmax_rows(t.constant(x)).value();
    const Tensor& ys = softmax_rows(t.constant(shifted)).value();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        EXPECT_GT(y(i, j), 0.0);
        s += y(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    EXPECT_LE(max_abs_diff(y, ys), 1e-12);
  }
}

TEST(Attention, UniformCollapse) {
  Tape t;
  Tensor K(3, 2, 0.25), V = Tensor::from_rows({{1, 2, 3}, {1, 2, 3}, {1, 2, 3}});
  Var out = attention(t.constant(Tensor::from_rows({{0.3, -1}, {5, 2}})), t.constant(K), t.constant(V));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out.value()(i, j), V(0, j), 1e-12);
}

TEST(Attention, SingleKeyReturnsValue) {
  Tape t;
  Var out = attention(t.constant(Tensor::from_rows({{10, -4}, {0, 0}})), t.constant(Tensor::from_rows({{1, 1}})),
                      t.constant(Tensor::from_rows({{4, 5, 6}})));
  EXPECT_EQ(out.value(), Tensor::from_rows({{4, 5, 6}, {4, 5, 6}}));
}

TEST(Attention, HandFixture) {
  Tape t;
  Var out = attention(t.constant(Tensor::from_rows({{1, 0}})), t.constant(Tensor::identity(2)),
                      t.constant(Tensor::identity(2)));
  const double e = std::exp(1.0 / std::sqrt(2.0));
  EXPECT_NEAR(out.value()[0], e / (e + 1), 1e-12);
  EXPECT_NEAR(out.value()[0], 0.6698, 1e-3);
  EXPECT_NEAR(out.value()[1], 0.3302, 1e-3);
}

TEST(Attention, AllMaskedThrows) {
  Tape t;
  Mask mask{false, false};
  EXPECT_THROW(attention(t.constant(Tensor(1, 2, 1.0)), t.constant(Tensor::identity(2)),
                         t.constant(Tensor::identity(2)), &mask),
               std::domain_error);
}

TEST(Attention, WidthMismatchThrows) {
  Tape t;
  EXPECT_THROW(attention(t.constant(Tensor(1, 3)), t.constant(Tensor(2, 2)), t.constant(Tensor(2, 2))),
               DimensionError);
}

TEST(Attention, OutputsAreConvexCombinationsOfValues) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t L = 1 + rng.index(6), M = 1 + rng.index(6), dh = 1 + rng.index(5), dv = 1 + rng.index(5);
    Tape t;
    Tensor V = rng.normal_tensor(M, dv, 3.0);
    Mask mask(M, true);
    for (std::size_t j = 0; j + 1 < M; ++j) mask[j] = rng.bernoulli(0.7);
    Var out = attention(t.constant(rng.normal_tensor(L, dh, 2.0)), t.constant(rng.normal_tensor(M, dh, 2.0)),
                        t.constant(V), &mask);
    for (std::size_t j = 0; j < dv; ++j) {
      double lo = INFINITY, hi = -INFINITY;
      for (std::size_t k = 0; k < M; ++k)
        if (mask[k]) lo = std::min(lo, V(k, j)), hi = std::max(hi, V(k, j));
      for (std::size_t i = 0; i < L; ++i) {
        EXPECT_GE(out.value()(i, j), lo - 1e-12);
        EXPECT_LE(out.value()(i, j), hi + 1e-12);
      }
    }
  }
}

TEST(Activations, Basics) {
  EXPECT_EQ(eval_unary(Tensor(1, 1, 0.0), causalvln::tanh)[0], 0.0);
  EXPECT_EQ(eval_unary(Tensor(1, 1, 0.0), causalvln::sigmoid)[0], 0.5);
  Tape t;
  Var ln = layer_norm(t.constant(Tensor::from_rows({{1, 1, 1}})), t.constant(Tensor(1, 3, 1.0)),
                      t.constant(Tensor(1, 3, 0.0)));
  EXPECT_EQ(ln.value(), Tensor(1, 3, 0.0));
  Var ce = cross_entropy(t.constant(Tensor::from_rows({{0, 0}})), 0);
  EXPECT_NEAR(ce.value()[0], std::log(2.0), 1e-15);
  EXPECT_THROW(cross_entropy(t.constant(Tensor::from_rows({{0, 0}})), 2), std::out_of_range);
}

TEST(Activations, LayerNormMomentsPerRow) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(8), m = 2 + rng.index(7);
    Tape t;
    const Tensor& y = layer_norm(t.constant(rng.normal_tensor(n, m, 4.0)), t.constant(Tensor(1, m, 1.0)),
                                 t.constant(Tensor(1, m, 0.0)))
                          .value();
    for (std::size_t i = 0; i < n; ++i) {
      double mean = 0, var = 0;
      for (std::size_t j = 0; j < m; ++j) mean += y(i, j);
      mean /= m;
      for (std::size_t j = 0; j < m; ++j) var += (y(i, j) - mean) * (y(i, j) - mean);
      var /= m;
      EXPECT_NEAR(mean, 0.0, 1e-9);
      EXPECT_NEAR(var, 1.0, 1e-9);
    }
  }
}

TEST(Backward, LinearMapGradientIsInput) {
  Parameter W(Tensor::from_rows({{0.5, -1, 2}}));
  Tensor x = Tensor::from_rows({{3, -2, 7}});
  Tape t;
  t.backward(sum(mul(t.param(W), t.constant(x))));
  EXPECT_EQ(W.grad, x);
}

TEST(Backward, UnusedParameterHasZeroGradient) {
  Parameter used(Tensor(2, 2, 1.0)), unused(Tensor(2, 2, 1.0));
  Tape t;
  t.param(unused);
  t.backward(sum(t.param(used)));
  EXPECT_EQ(unused.grad, Tensor(2, 2, 0.0));
  EXPECT_EQ(used.grad, Tensor(2, 2, 1.0));
}

TEST(Backward, NonScalarLossThrows) {
  Parameter W(Tensor(2, 2, 1.0));
  Tape t;
  EXPECT_THROW(t.backward(t.param(W)), DimensionError);
}

TEST(Backward, NonFiniteValueIsRejected) {
  Tape t;
  EXPECT_THROW(t.constant(Tensor(1, 1, NAN)), NumericError);
}

// Randomized finite-difference checks over every differentiable op.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  Rng rng(1000 + GetParam());
  const std::size_t n = 1 + rng.index(4), k = 1 + rng.index(4), m = 1 + rng.index(4);
  Parameter A = random_param(rng, n, k), B = random_param(rng, k, m), C = random_param(rng, n, m),
            r = random_param(rng, 1, m), g = random_param(rng, 1, m), w = random_param(rng, m, 1),
            emb = random_param(rng, 5, m), col = random_param(rng, n, 1);
  Tensor proj = rng.normal_tensor(n, m, 1.0);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i) idx.push_back(rng.index(5));
  const std::size_t target = rng.index(m);
  Mask kmask(n, true);
  for (std::size_t j = 0; j + 1 < n; ++j) kmask[j] = rng.bernoulli(0.6);

  auto loss = [&](Tape& t) {
    Var a = t.param(A), b = t.param(B), c = t.param(C);
    Var h = add(matmul(a, b), c);                                       // n x m
    h = layer_norm(add_row(h, t.param(r)), t.param(g), t.param(r));     // n x m
    h = add(tanh(h), mul(gelu(h), sigmoid(gather_rows(t.param(emb), idx))));
    h = add(h, mul(broadcast_cols(t.param(col), m), one_minus(h)));
    Var att = attention(h, scale(h, 0.7), concat_cols({h, transpose(transpose(c))}), &kmask);  // n x 2m
    Var pooled = matmul(softmax_rows(transpose(matmul(h, t.param(w)))), slice_rows(concat_rows({att, att}), 0, n));
    Var logits = gather_cols(add(slice_rows(pooled, 0, 1), slice_rows(pooled, 0, 1)), [&] {
      std::vector<std::size_t> cols;
      for (std::size_t j = 0; j < m; ++j) cols.push_back(j);
      return cols;
    }());
    Var ce = cross_entropy(add(logits, broadcast_rows(t.param(r), 1)), target);
    Var tail = scale(sum(mul(slice_cols(att, m, 2 * m), t.constant(proj))), 0.2);
    return add(add(add(ce, scale(sum(mul(h, t.constant(proj))), 0.1)), scale(sum(matmul_tn(h, c)), 0.05)), tail);
  };
  auto res = grad_check({&A, &B, &C, &r, &g, &w, &emb, &col}, loss);
  EXPECT_LE(res.max_rel_error, 1e-4) << "worst " << res.worst << " analytic " << res.worst_analytic
                                       << " numeric " << res.worst_numeric;
}

INSTANTIATE_TEST_SUITE_P(Randomized, OpGradient, ::testing::Range(0, 120));

TEST(AdamW, ZeroGradientZeroDecayLeavesParameter) {
  Parameter p(Tensor::from_rows({{1.5, -2}}));
  Parameter* ps[] = {&p};
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  for (int i = 0; i < 10; ++i) adamw_step(ps, cfg);
  EXPECT_EQ(p.value, Tensor::from_rows({{1.5, -2}}));
  EXPECT_EQ(p.steps, 10u);
}

TEST(AdamW, ConstantGradientStepApproachesLearningRate) {
  // Closed form for a constant gradient: m_t = g(1-b1^t), v_t = g^2(1-b2^t),
  // so the corrected ratio is g/|g| and each step moves lr*|g|/(|g|+eps).
  const double g = 0.3;
  Parameter p(Tensor(1, 1, 0.0));
  Parameter* ps[] = {&p};
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  double prev = 0.0;
  for (int i = 0; i < 500; ++i) {
    p.grad[0] = g;
    adamw_step(ps, cfg);
    const double step = prev - p.value[0];
    EXPECT_NEAR(step, cfg.lr * g / (g + cfg.eps), 1e-12);
    prev = p.value[0];
  }
  EXPECT_NEAR(prev, -500 * cfg.lr, 1e-6);
}

TEST(AdamW, DecayOnlyPath) {
  Parameter p(Tensor(1, 1, 2.0));
  Parameter* ps[] = {&p};
  AdamWConfig cfg;
  cfg.weight_decay = 0.01;
  double expect = 2.0;
  for (int i = 0; i < 20; ++i) {
    adamw_step(ps, cfg);
    expect *= (1.0 - cfg.lr * 0.01);
    EXPECT_DOUBLE_EQ(p.value[0], expect);
  }
}

TEST(AdamW, NonFiniteGradientAbortsWholeStep) {
  Parameter a(Tensor(1, 1, 1.0)), b(Tensor(1, 1, 1.0));
  a.grad[0] = 1.0;
  b.grad[0] = INFINITY;
  Parameter* ps[] = {&a, &b};
  EXPECT_THROW(adamw_step(ps, AdamWConfig{}), NumericError);
  EXPECT_EQ(a.value[0], 1.0);
  EXPECT_EQ(a.steps, 0u);
}

TEST(Determinism, SameSeedSameOpsBitIdentical) {
  auto run = [] {
    Rng rng(99);
    Parameter W = random_param(rng, 4, 4);
    Tape t;
    Var x = t.constant(rng.normal_tensor(3, 4, 1.0));
    Var y = softmax_rows(matmul(tanh(x), t.param(W)));
    t.backward(sum(mul(y, y)));
    return std::make_pair(y.value(), W.grad);
  };
  auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(RngState, RoundTrip) {
  Rng a(17);
  a.normal();
  Rng b;
  b.set_state(a.state());
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.normal(), b.normal());
}
