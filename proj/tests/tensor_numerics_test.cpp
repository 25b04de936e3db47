#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "coughvit/gradcheck.hpp"
#include "coughvit/ops.hpp"
#include "coughvit/optim.hpp"
#include "coughvit/rng.hpp"
#include "test_util.hpp"

namespace cv = coughvit;
using cv::Tape;
using cv::Tensor;
using cv::Var;
using cv::testing::random_tensor;

// ---- rng ---------------------------------------------------------------------

TEST(Rng, SameSeedAndLabelRepeat) {
  cv::Rng a = cv::seeded_rng(42, "mask"), b = cv::seeded_rng(42, "mask");
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, LabelsSeparateStreams) {
  cv::Rng a = cv::seeded_rng(42, "mask"), b = cv::seeded_rng(42, "init");
  int equal = 0;
  for (int i = 0; i < 100; ++i) equal += a.next_u64() == b.next_u64();
  EXPECT_EQ(equal, 0);
}

TEST(Rng, GoldenFirstDraws) {
  // Produced by a separate Python implementation of the same counter-based mix.
  cv::Rng mask = cv::seeded_rng(42, "mask");
  EXPECT_EQ(mask.next_u64(), 0xcaf80f3252f17085ULL);
  EXPECT_EQ(mask.next_u64(), 0x00c19069da10b463ULL);
  EXPECT_EQ(mask.next_u64(), 0xaeae7b5aa8b61c4aULL);
  EXPECT_EQ(mask.next_u64(), 0xf78b0bb597dcda9eULL);
  cv::Rng init = cv::seeded_rng(42, "init");
  EXPECT_EQ(init.next_u64(), 0xc85772706673f041ULL);
  EXPECT_EQ(init.next_u64(), 0x9b0a45e2fe943721ULL);
  EXPECT_EQ(init.next_u64(), 0x4ccd9356274a934dULL);
  EXPECT_EQ(init.next_u64(), 0xe1cee7ced466792fULL);
}

TEST(Rng, ForkDoesNotAdvanceParent) {
  cv::Rng a = cv::seeded_rng(1, "x"), b = cv::seeded_rng(1, "x");
  (void)a.fork("child");
  EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(a.fork("p").next_u64(), a.fork("q").next_u64());
}

TEST(Rng, UniformAndBelowRanges) {
  cv::Rng r = cv::seeded_rng(3, "range");
  std::vector<int> hist(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ++hist[r.below(7)];
  }
  for (int h : hist) EXPECT_NEAR(h, 10000, 500);
}

TEST(Rng, TruncatedNormalWithinTwoSigma) {
  cv::Rng r = cv::seeded_rng(5, "tn");
  double s = 0.0, s2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = r.truncated_normal(0.02);
    ASSERT_LE(std::abs(z), 0.04);
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 1e-3);
  // Variance of a unit normal truncated to +-2 is about 0.774.
  EXPECT_NEAR(std::sqrt(s2 / n) / 0.02, std::sqrt(0.7737), 0.02);
}

// ---- forward ops ------------------------------------------------------------

TEST(Ops, SoftmaxOfZerosIsUniform) {
  Tape t;
  Var p = cv::ops::softmax(t.constant(Tensor({1, 2}, 0.0)));
  EXPECT_DOUBLE_EQ(p.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(p.value()[1], 0.5);
}

TEST(Ops, SoftmaxSumsToOneAndIsShiftInvariant) {
  cv::Rng rng = cv::seeded_rng(11, "softmax");
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({3, 9}, rng, -20.0, 20.0);
    Tensor shifted = x;
    const double c = rng.uniform(-50.0, 50.0);
    for (auto& v : shifted.storage()) v += c;
    Tape t;
    const Tensor p = cv::ops::softmax(t.constant(x)).value();
    const Tensor q = cv::ops::softmax(t.constant(shifted)).value();
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (double v : p.row(r)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    EXPECT_LE(cv::testing::max_abs_diff(p, q), 1e-12);
  }
}

TEST(Ops, MaskedSoftmaxGivesExactZeros) {
  Tape t;
  Tensor x({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  Var p = cv::ops::masked_softmax(t.constant(x), {1, 0, 1, 0, 1, 1});
  EXPECT_EQ(p.value().at(0, 1), 0.0);
  EXPECT_EQ(p.value().at(1, 0), 0.0);
  EXPECT_NEAR(p.value().at(0, 0) + p.value().at(0, 2), 1.0, 1e-15);
}

TEST(Ops, LayerNormOfConstantIsZero) {
  Tape t;
  Var y = cv::ops::layer_norm(t.constant(Tensor({1, 8}, 3.5)), t.constant(Tensor({8}, 1.0)), t.constant(Tensor({8}, 0.0)));
  for (double v : y.value().storage()) EXPECT_EQ(v, 0.0);
}

TEST(Ops, LayerNormStandardizes) {
  cv::Rng rng = cv::seeded_rng(12, "ln");
  Tape t;
  Tensor x = random_tensor({20, 64}, rng, -3.0, 5.0);
  Var y = cv::ops::layer_norm(t.constant(x), t.constant(Tensor({64}, 1.0)), t.constant(Tensor({64}, 0.0)));
  for (std::size_t r = 0; r < 20; ++r) {
    double mu = 0.0, var = 0.0;
    for (double v : y.value().row(r)) mu += v;
    mu /= 64.0;
    for (double v : y.value().row(r)) var += (v - mu) * (v - mu);
    var /= 64.0;
    EXPECT_LT(std::abs(mu), 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(Ops, MatmulIdentity) {
  cv::Rng rng = cv::seeded_rng(13, "mm");
  Tensor eye({3, 3}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  Tensor a = random_tensor({3, 5}, rng);
  Tape t;
  EXPECT_EQ(cv::ops::matmul(t.constant(eye), t.constant(a)).value(), a);
}

TEST(Ops, MatmulVariantsAgreeWithNaiveProduct) {
  cv::Rng rng = cv::seeded_rng(14, "mm");
  Tensor a = random_tensor({4, 6}, rng), b = random_tensor({6, 5}, rng), bt({5, 6});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 5; ++j) bt.at(j, i) = b.at(i, j);
  Tensor naive({4, 5}, 0.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t k = 0; k < 6; ++k) naive.at(i, j) += a.at(i, k) * b.at(k, j);
  Tape t;
  EXPECT_LE(cv::testing::max_abs_diff(cv::ops::matmul(t.constant(a), t.constant(b)).value(), naive), 1e-14);
  EXPECT_LE(cv::testing::max_abs_diff(cv::ops::matmul_nt(t.constant(a), t.constant(bt)).value(), naive), 1e-14);
  EXPECT_EQ(cv::ops::transpose(t.constant(b)).value(), bt);
}

TEST(Ops, GeluTanhApproximation) {
  Tape t;
  Var y = cv::ops::gelu(t.constant(Tensor({3}, std::vector<double>{0.0, 1.0, -1.0})));
  EXPECT_EQ(y.value()[0], 0.0);
  EXPECT_NEAR(y.value()[1], 0.8411919906082768, 1e-15);
  EXPECT_NEAR(y.value()[2], -0.1588080093917232, 1e-15);
}

TEST(Ops, ShapeMismatchThrows) {
  Tape t;
  EXPECT_THROW(cv::ops::add(t.constant(Tensor({2, 3})), t.constant(Tensor({3, 2}))), cv::InputError);
  EXPECT_THROW(cv::ops::matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({2, 3}))), cv::InputError);
}

TEST(Ops, NonFiniteResultThrows) {
  Tape t;
  Tensor big({1}, 1e200);
  EXPECT_THROW(cv::ops::square(t.constant(big)), cv::NumericError);
}

TEST(Ops, ScatterAndGatherAreInverse) {
  cv::Rng rng = cv::seeded_rng(15, "sg");
  Tensor x = random_tensor({3, 4}, rng);
  Tape t;
  Var s = cv::ops::scatter_rows(t.constant(x), {4, 0, 2}, 6);
  Var g = cv::ops::gather_rows(s, {4, 0, 2});
  EXPECT_EQ(g.value(), x);
  for (double v : s.value().row(1)) EXPECT_EQ(v, 0.0);
}

// ---- backward ------------------------------------------------------------------

TEST(Backward, SumOfSquares) {
  Tape t;
  Var x = t.variable(Tensor({2}, std::vector<double>{1.0, 2.0}));
  t.backward(cv::ops::sum(cv::ops::square(x)));
  EXPECT_EQ(t.grad(x)[0], 2.0);
  EXPECT_EQ(t.grad(x)[1], 4.0);
}

TEST(Backward, ConstantLossLeavesParametersZero) {
  cv::Parameter p("w", Tensor({3}, 1.0));
  Tape t;
  (void)t.param(p);
  t.backward(t.constant(Tensor::scalar(5.0)));
  for (double g : p.grad.storage()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, SecondCallDoublesParameterGradients) {
  cv::Parameter p("w", Tensor({2}, std::vector<double>{0.5, -1.5}));
  Tape t;
  Var loss = cv::ops::sum(cv::ops::square(t.param(p)));
  t.backward(loss);
  const Tensor once = p.grad;
  t.backward(loss);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(p.grad[i], 2.0 * once[i]);
}

TEST(Backward, RejectsNonScalarAndForeignLoss) {
  Tape t, other;
  Var x = t.variable(Tensor({2}, 1.0));
  EXPECT_THROW(t.backward(x), cv::InputError);
  Var y = other.variable(Tensor({1}, 1.0));
  EXPECT_THROW(t.backward(y), cv::InputError);
}

TEST(Backward, GatherAccumulatesRepeatedRows) {
  Tape t;
  Var x = t.variable(Tensor({2, 2}, std::vector<double>{1, 2, 3, 4}));
  t.backward(cv::ops::sum(cv::ops::gather_rows(x, {0, 0, 1})));
  EXPECT_EQ(t.grad(x).storage(), (std::vector<double>{2, 2, 1, 1}));
}

// ---- gradient checks -----------------------------------------------------------

namespace {

using Fn = cv::ScalarFn;

// Sums the op output against fixed random weights so every output cell matters.
Var weighted(Tape& t, Var y, std::uint64_t seed) {
  cv::Rng rng = cv::seeded_rng(seed, "weights");
  return cv::ops::sum(cv::ops::mul(y, t.constant(random_tensor(y.value().shape(), rng))));
}

void expect_grad_ok(const char* name, const Fn& f, cv::Shape shape, double lo = -1.0, double hi = 1.0) {
  cv::Rng rng = cv::seeded_rng(99, name);
  for (int point = 0; point < 10; ++point) {
    const double err = cv::grad_check(f, random_tensor(shape, rng, lo, hi));
    EXPECT_LT(err, 1e-4) << name << " point " << point;
  }
}

}  // namespace

TEST(GradCheck, QuadraticIsNearlyExact) {
  const double err = cv::grad_check([](Tape&, Var x) { return cv::ops::sum(cv::ops::square(x)); },
                                    Tensor({4}, std::vector<double>{0.3, -1.2, 2.0, 0.7}));
  EXPECT_LT(err, 1e-8);
}

TEST(GradCheck, EveryLearnableOp) {
  cv::Rng rng = cv::seeded_rng(7, "fixed");
  const Tensor w = random_tensor({5, 3}, rng), b = random_tensor({3}, rng), m = random_tensor({4, 5}, rng);
  const Tensor g = random_tensor({5}, rng, 0.5, 1.5), beta = random_tensor({5}, rng);
  std::vector<std::uint8_t> allow(4 * 5, 1);
  for (std::size_t i = 0; i < 4; ++i) allow[i * 5 + (i + 1) % 5] = 0;

  expect_grad_ok("matmul", [&](Tape& t, Var x) { return weighted(t, cv::ops::matmul(x, t.constant(w)), 1); }, {4, 5});
  expect_grad_ok("matmul_rhs", [&](Tape& t, Var x) { return weighted(t, cv::ops::matmul(t.constant(m), x), 2); }, {5, 3});
  expect_grad_ok("matmul_nt", [&](Tape& t, Var x) { return weighted(t, cv::ops::matmul_nt(x, t.constant(m)), 3); }, {2, 5});
  expect_grad_ok("linear", [&](Tape& t, Var x) { return weighted(t, cv::ops::linear(x, t.constant(w), t.constant(b)), 4); },
                 {4, 5});
  expect_grad_ok("linear_bias", [&](Tape& t, Var x) { return weighted(t, cv::ops::linear(t.constant(m), t.constant(w), x), 5); },
                 {3});
  expect_grad_ok("transpose", [&](Tape& t, Var x) { return weighted(t, cv::ops::transpose(x), 6); }, {4, 5});
  expect_grad_ok("add", [&](Tape& t, Var x) { return weighted(t, cv::ops::add(x, cv::ops::square(x)), 7); }, {4, 5});
  expect_grad_ok("sub", [&](Tape& t, Var x) { return weighted(t, cv::ops::sub(t.constant(m), cv::ops::square(x)), 8); }, {4, 5});
  expect_grad_ok("mul", [&](Tape& t, Var x) { return weighted(t, cv::ops::mul(x, x), 9); }, {4, 5});
  expect_grad_ok("add_row", [&](Tape& t, Var x) { return weighted(t, cv::ops::add_row(t.constant(m), cv::ops::square(x)), 10); },
                 {5});
  expect_grad_ok("scale", [&](Tape& t, Var x) { return weighted(t, cv::ops::scale(x, -2.5), 11); }, {4, 5});
  expect_grad_ok("square", [&](Tape& t, Var x) { return weighted(t, cv::ops::square(x), 12); }, {4, 5});
  expect_grad_ok("gelu", [&](Tape& t, Var x) { return weighted(t, cv::ops::gelu(x), 13); }, {4, 5}, -3.0, 3.0);
  expect_grad_ok("mean", [&](Tape&, Var x) { return cv::ops::mean(cv::ops::square(x)); }, {4, 5});
  expect_grad_ok("mean_rows", [&](Tape& t, Var x) { return weighted(t, cv::ops::mean_rows(cv::ops::square(x)), 14); }, {4, 5});
  expect_grad_ok("reshape", [&](Tape& t, Var x) { return weighted(t, cv::ops::reshape(x, {5, 4}), 15); }, {4, 5});
  expect_grad_ok("concat_rows",
                 [&](Tape& t, Var x) { return weighted(t, cv::ops::concat_rows({x, cv::ops::square(x), t.constant(m)}), 16); },
                 {4, 5});
  expect_grad_ok("concat_cols",
                 [&](Tape& t, Var x) { return weighted(t, cv::ops::concat_cols({cv::ops::square(x), t.constant(m), x}), 17); },
                 {4, 5});
  expect_grad_ok("slice_cols", [&](Tape& t, Var x) { return weighted(t, cv::ops::slice_cols(cv::ops::square(x), 1, 3), 18); },
                 {4, 5});
  expect_grad_ok("gather_rows", [&](Tape& t, Var x) { return weighted(t, cv::ops::gather_rows(x, {3, 0, 3, 1}), 19); }, {4, 5});
  expect_grad_ok("scatter_rows", [&](Tape& t, Var x) { return weighted(t, cv::ops::scatter_rows(x, {5, 1, 2, 0}, 7), 20); },
                 {4, 5});
  expect_grad_ok("softmax", [&](Tape& t, Var x) { return weighted(t, cv::ops::softmax(x), 21); }, {4, 5}, -3.0, 3.0);
  expect_grad_ok("masked_softmax", [&](Tape& t, Var x) { return weighted(t, cv::ops::masked_softmax(x, allow), 22); }, {4, 5},
                 -3.0, 3.0);
  expect_grad_ok("log_softmax", [&](Tape& t, Var x) { return weighted(t, cv::ops::log_softmax(x), 23); }, {4, 5}, -3.0, 3.0);
  expect_grad_ok("layer_norm_x",
                 [&](Tape& t, Var x) { return weighted(t, cv::ops::layer_norm(x, t.constant(g), t.constant(beta)), 24); },
                 {4, 5}, -2.0, 2.0);
  expect_grad_ok("layer_norm_gain",
                 [&](Tape& t, Var x) { return weighted(t, cv::ops::layer_norm(t.constant(m), x, t.constant(beta)), 25); }, {5});
  expect_grad_ok("layer_norm_bias",
                 [&](Tape& t, Var x) { return weighted(t, cv::ops::layer_norm(t.constant(m), t.constant(g), x), 26); }, {5});
  expect_grad_ok("cross_entropy", [&](Tape&, Var x) { return cv::ops::cross_entropy(x, 1); }, {1, 2}, -4.0, 4.0);
}

TEST(GradCheck, TwoLayerPerceptronWithGelu) {
  cv::Rng rng = cv::seeded_rng(8, "mlp");
  const Tensor w2 = random_tensor({6, 2}, rng), b1 = random_tensor({6}, rng), b2 = random_tensor({2}, rng);
  const Tensor x = random_tensor({3, 4}, rng);
  const double err = cv::grad_check(
      [&](Tape& t, Var w1) {
        Var h = cv::ops::gelu(cv::ops::linear(t.constant(x), w1, t.constant(b1)));
        return cv::ops::mean(cv::ops::square(cv::ops::linear(h, t.constant(w2), t.constant(b2))));
      },
      random_tensor({4, 6}, rng));
  EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, SoftmaxCrossEntropyHead) {
  cv::Rng rng = cv::seeded_rng(9, "head");
  const Tensor feat = random_tensor({1, 8}, rng);
  const double err = cv::grad_check(
      [&](Tape& t, Var w) { return cv::ops::cross_entropy(cv::ops::matmul(t.constant(feat), w), 0); },
      random_tensor({8, 2}, rng));
  EXPECT_LT(err, 1e-4);
}

// ---- optimizer -----------------------------------------------------------------

TEST(AdamW, ZeroGradientNoDecayIsFixedPoint) {
  cv::Parameter p("p", Tensor({3}, std::vector<double>{1.0, -2.0, 0.5}));
  cv::AdamW opt({0.1, 0.9, 0.95, 1e-8, 0.0});
  const Tensor before = p.value;
  opt.step({&p});
  EXPECT_EQ(p.value, before);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  cv::Parameter p("p", Tensor({1}, 1.0));
  p.grad[0] = 1.0;
  cv::AdamW opt({0.1, 0.9, 0.95, 1e-8, 0.0});
  opt.step({&p});
  // m_hat = v_hat = 1 after bias correction: p = 1 - 0.1 / (1 + 1e-8).
  EXPECT_NEAR(p.value[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p.value[0], 0.9, 1e-8);
}

TEST(AdamW, DecoupledDecayShrinksByLrTimesWd) {
  cv::Parameter p("p", Tensor({1}, 2.0));
  cv::AdamW opt({0.1, 0.9, 0.95, 1e-8, 0.05});
  opt.step({&p});
  EXPECT_NEAR(p.value[0], 2.0 - 0.1 * 0.05 * 2.0, 1e-15);
}

TEST(AdamW, NoDecayFlagSkipsDecay) {
  cv::Parameter p("bias", Tensor({1}, 2.0), false);
  cv::AdamW opt({0.1, 0.9, 0.95, 1e-8, 0.05});
  opt.step({&p});
  EXPECT_EQ(p.value[0], 2.0);
}

TEST(AdamW, MatchesHandRolledRecurrence) {
  cv::Parameter p("p", Tensor({1}, 0.3));
  cv::AdamW opt({0.01, 0.9, 0.95, 1e-8, 0.05});
  double w = 0.3, m = 0.0, v = 0.0;
  const double grads[] = {0.5, -0.2, 1.1, 0.0, -0.7};
  for (int t = 1; t <= 5; ++t) {
    const double g = grads[t - 1];
    p.grad[0] = g;
    opt.step({&p});
    m = 0.9 * m + 0.1 * g;
    v = 0.95 * v + 0.05 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.95, t));
    w -= 0.01 * (mh / (std::sqrt(vh) + 1e-8) + 0.05 * w);
    EXPECT_NEAR(p.value[0], w, 1e-15) << "step " << t;
  }
}

TEST(Schedule, WarmupThenCosine) {
  const long total = 100;
  EXPECT_DOUBLE_EQ(cv::warmup_cosine(0, total, 0.05), 0.2);
  EXPECT_DOUBLE_EQ(cv::warmup_cosine(4, total, 0.05), 1.0);
  EXPECT_DOUBLE_EQ(cv::warmup_cosine(5, total, 0.05), 1.0);
  EXPECT_NEAR(cv::warmup_cosine(total, total, 0.05), 0.0, 1e-15);
  double prev = 2.0;
  for (long s = 5; s <= total; ++s) {
    const double v = cv::warmup_cosine(s, total, 0.05);
    EXPECT_LE(v, prev);
    prev = v;
  }
}

TEST(Determinism, OpsAreBitReproducible) {
  auto run = [] {
    cv::Rng rng = cv::seeded_rng(77, "det");
    Tape t;
    Var x = t.variable(random_tensor({6, 8}, rng));
    Var y = cv::ops::layer_norm(cv::ops::gelu(x), t.constant(Tensor({8}, 1.0)), t.constant(Tensor({8}, 0.0)));
    Var loss = cv::ops::mean(cv::ops::square(cv::ops::softmax(y)));
    t.backward(loss);
    return std::make_pair(loss.value(), t.grad(x));
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}
