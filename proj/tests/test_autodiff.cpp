#include <bit>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "safe/gradcheck.hpp"

using namespace safe;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t({r, c});
  for (auto& v : t.data()) v = u(rng);
  return t;
}

double max_abs_diff(const Tensor& a, const oracle::Mat& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b.v[i]));
  return m;
}

}  // namespace

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_THROW(Tensor({0, 3}), DimensionError);
}

TEST(Tensor, MatrixLiteral) {
  auto t = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t(1, 2), 6.0);
}

TEST(MatMul, IdentityLeavesMatrixUnchanged) {
  Graph g;
  Var out = matmul(g.constant(Tensor::matrix({{1, 0}, {0, 1}})), g.constant(Tensor::matrix({{3, 4}, {5, 6}})));
  EXPECT_EQ(out.value(), Tensor::matrix({{3, 4}, {5, 6}}));
}

TEST(MatMul, RowTimesColumn) {
  Graph g;
  Var out = matmul(g.constant(Tensor::matrix({{1, 2}})), g.constant(Tensor::matrix({{3}, {4}})));
  EXPECT_EQ(out.value()[0], 11.0);
}

TEST(MatMul, MatchesTripleLoop) {
  std::mt19937_64 rng(1);
  Graph g;
  auto a = random_matrix(3, 4, rng), b = random_matrix(4, 2, rng);
  Var out = matmul(g.constant(a), g.constant(b));
  EXPECT_LT(max_abs_diff(out.value(), oracle::matmul(oracle::from_tensor(a), oracle::from_tensor(b))), 1e-12);
}

TEST(MatMul, ShapeMismatchNamesBothShapes) {
  Graph g;
  try {
    matmul(g.constant(Tensor({2, 3})), g.constant(Tensor({2, 3})));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos) << e.what();
  }
}

TEST(MatMulNT, MatchesExplicitTranspose) {
  std::mt19937_64 rng(2);
  Graph g;
  auto a = random_matrix(3, 5, rng), b = random_matrix(4, 5, rng);
  Var out = matmul_nt(g.constant(a), g.constant(b));
  auto ref = oracle::matmul(oracle::from_tensor(a), oracle::transpose(oracle::from_tensor(b)));
  EXPECT_LT(max_abs_diff(out.value(), ref), 1e-12);
}

TEST(Softmax, SymmetricPairIsHalf) {
  Graph g;
  Var s = softmax_rows(g.constant(Tensor::matrix({{0, 0}})));
  EXPECT_EQ(s.value()[0], 0.5);
  EXPECT_EQ(s.value()[1], 0.5);
}

TEST(Softmax, LargeEqualLogitsDoNotOverflow) {
  Graph g;
  Var s = softmax_rows(g.constant(Tensor::matrix({{1000, 1000}})));
  EXPECT_EQ(s.value()[0], 0.5);
  EXPECT_EQ(s.value()[1], 0.5);
}

TEST(Softmax, MatchesDirectExponentiation) {
  Graph g;
  auto x = Tensor::matrix({{1, 2, 3}});
  Var s = softmax_rows(g.constant(x));
  EXPECT_LT(max_abs_diff(s.value(), oracle::softmax(oracle::from_tensor(x))), 1e-12);
}

TEST(Softmax, NonFiniteInputRaises) {
  Graph g;
  EXPECT_THROW(softmax_rows(g.constant(Tensor::matrix({{1, NAN}}))), NumericError);
  EXPECT_THROW(softmax_rows(g.constant(Tensor::matrix({{1, INFINITY}}))), NumericError);
}

TEST(Softmax, ShiftInvariance) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Graph g;
    auto x = random_matrix(4, 6, rng, -5, 5);
    auto shifted = x;
    const double c = std::uniform_real_distribution<double>(-50, 50)(rng);
    for (auto& v : shifted.data()) v += c;
    auto a = softmax_rows(g.constant(x)).value(), b = softmax_rows(g.constant(shifted)).value();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (double v : a.row(r)) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Attention, SingleKeyReturnsItsValue) {
  Graph g;
  Var out = scaled_dot_attention(g.constant(Tensor::matrix({{0.3, -1}})), g.constant(Tensor::matrix({{0.3, -1}})),
                                 g.constant(Tensor::matrix({{7}})));
  EXPECT_DOUBLE_EQ(out.value()[0], 7.0);
}

TEST(Attention, IdenticalKeysAverageValues) {
  Graph g;
  Var out = scaled_dot_attention(g.constant(Tensor::matrix({{1, 2}})), g.constant(Tensor::matrix({{0.5, 0.5}, {0.5, 0.5}})),
                                 g.constant(Tensor::matrix({{1}, {3}})));
  EXPECT_DOUBLE_EQ(out.value()[0], 2.0);
}

TEST(Attention, MatchesComposedOracle) {
  std::mt19937_64 rng(4);
  Graph g;
  auto q = random_matrix(2, 4, rng), k = random_matrix(3, 4, rng), v = random_matrix(3, 5, rng);
  Var out = scaled_dot_attention(g.constant(q), g.constant(k), g.constant(v));
  auto ref = oracle::attention(oracle::from_tensor(q), oracle::from_tensor(k), oracle::from_tensor(v));
  EXPECT_LT(max_abs_diff(out.value(), ref), 1e-12);
}

TEST(RowOps, ConcatThenSplitIsIdentity) {
  std::mt19937_64 rng(5);
  Graph g;
  auto a = random_matrix(2, 3, rng), b = random_matrix(4, 3, rng);
  auto [x, y] = split_rows(concat_rows({g.constant(a), g.constant(b)}), 2);
  EXPECT_EQ(x.value(), a);
  EXPECT_EQ(y.value(), b);
}

TEST(RowOps, MeanRows) {
  Graph g;
  Var m = mean_rows(g.constant(Tensor::matrix({{1, 3}, {5, 7}})));
  EXPECT_EQ(m.value(), Tensor::matrix({{3, 5}}));
}

TEST(RowOps, SplitOutOfRangeRaises) {
  Graph g;
  EXPECT_THROW(split_rows(g.constant(Tensor({3, 2})), 4), DimensionError);
  EXPECT_THROW(concat_rows({g.constant(Tensor({1, 2})), g.constant(Tensor({1, 3}))}), DimensionError);
}

TEST(LayerNorm, ConstantRowGivesBias) {
  Graph g;
  Var out = layer_norm(g.constant(Tensor::matrix({{2, 2, 2}})), g.constant(Tensor({3}, {1.5, -2, 3})),
                       g.constant(Tensor({3}, {0.25, 0.5, -1})));
  EXPECT_EQ(out.value(), Tensor::matrix({{0.25, 0.5, -1}}));
}

TEST(LayerNorm, MatchesOracle) {
  std::mt19937_64 rng(6);
  Graph g;
  auto x = random_matrix(3, 6, rng), gain = random_matrix(1, 6, rng), bias = random_matrix(1, 6, rng);
  Var out = layer_norm(g.constant(x), g.constant(gain), g.constant(bias));
  auto ref = oracle::layer_norm(oracle::from_tensor(x), oracle::from_tensor(gain), oracle::from_tensor(bias));
  EXPECT_LT(max_abs_diff(out.value(), ref), 1e-12);
}

TEST(Activation, GeluAndRelu) {
  Graph g;
  auto x = Tensor::matrix({{-2, -0.5, 0, 0.5, 3}});
  auto ge = gelu(g.constant(x)).value();
  auto re = relu(g.constant(x)).value();
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(ge[i], oracle::gelu(x[i]), 1e-15);
    EXPECT_EQ(re[i], std::max(0.0, x[i]));
  }
}

TEST(Backward, SumGivesOnes) {
  Graph g;
  Var x = g.leaf(Tensor({2, 3}, 0.7));
  g.backward(sum(x));
  for (double v : g.grad(x)->data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SquareGivesTwiceInput) {
  Graph g;
  Var x = g.leaf(Tensor({2}, {1, 2}));
  g.backward(sum(mul(x, x)));
  EXPECT_EQ(g.grad(x)->vec(), (std::vector<double>{2, 4}));
}

TEST(Backward, NonScalarLossRaises) {
  Graph g;
  Var x = g.leaf(Tensor({2}, {1, 2}));
  EXPECT_THROW(g.backward(x), ContractError);
}

TEST(Backward, FanOutAccumulates) {
  Graph g;
  Var x = g.leaf(Tensor::scalar(3.0));
  g.backward(sum(add(mul(x, x), scale(x, 4.0))));
  EXPECT_EQ(g.grad(x)->data()[0], 10.0);
}

TEST(Backward, ConstantsReceiveNoGradient) {
  Graph g;
  Var c = g.constant(Tensor::scalar(2.0));
  Var x = g.leaf(Tensor::scalar(3.0));
  g.backward(sum(mul(c, x)));
  EXPECT_EQ(g.grad(c), nullptr);
  EXPECT_EQ(g.grad(x)->data()[0], 2.0);
}

TEST(Backward, TapeIsTopological) {
  Graph g;
  Var x = g.leaf(Tensor({2, 2}, 1.0));
  Var y = matmul(x, transpose(x));
  Var z = sum(softmax_rows(y));
  for (std::size_t id = 0; id < g.size(); ++id)
    for (auto in : g.inputs(id)) EXPECT_LT(in, id);
  (void)z;
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
  Graph g;
  Var z = g.leaf(Tensor::matrix({{0.2, -1.3, 2.0, 0.7}}));
  g.backward(cross_entropy(z, 2));
  auto p = oracle::softmax(oracle::from_tensor(z.value()));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g.grad(z)->data()[i], p.v[i] - (i == 2 ? 1.0 : 0.0), 1e-12);
}

TEST(Determinism, ForwardIsBitIdentical) {
  std::mt19937_64 rng(7);
  auto a = random_matrix(5, 8, rng), b = random_matrix(8, 3, rng);
  auto run = [&] {
    Graph g;
    return softmax_rows(matmul(gelu(g.constant(a)), g.constant(b))).value();
  };
  auto x = run(), y = run();
  for (std::size_t i = 0; i < x.size(); ++i)
    EXPECT_EQ(std::bit_cast<std::uint64_t>(x[i]), std::bit_cast<std::uint64_t>(y[i]));
}

TEST(GradCheck, QuadraticFormIsExact) {
  ParamStore p;
  p.add("w", Tensor::matrix({{0.3, -1.2, 2.0}}));
  const auto A = Tensor::matrix({{2, 0.5, 0}, {0.5, 1, -0.3}, {0, -0.3, 3}});
  LossBuilder f = [&](ParamBinder& b) {
    Var w = b("w");
    return sum(mul(matmul(w, b.graph().constant(A)), w));
  };
  std::vector<ParamCoord> coords{{"w", 0}, {"w", 1}, {"w", 2}};
  EXPECT_LT(finite_diff_check(f, p, 1e-5, coords).max_rel_error, 1e-8);
}

TEST(GradCheck, InjectedFaultIsCaught) {
  ParamStore p;
  std::mt19937_64 rng(8);
  p.add("a", random_matrix(3, 4, rng));
  p.add("b", random_matrix(4, 2, rng));
  LossBuilder f = [](ParamBinder& b) { return sum(gelu(matmul(b("a"), b("b")))); };
  auto coords = sample_coords(p, {"a", "b"}, 8, 1);
  Graph::Options opts;
  opts.inject_fault = true;
  EXPECT_GT(finite_diff_check(f, p, 1e-5, coords, opts).max_rel_error, 1e-1);
  EXPECT_LT(finite_diff_check(f, p, 1e-5, coords).max_rel_error, 1e-6);
}

TEST(GradCheck, NondeterministicLossRaises) {
  ParamStore p;
  p.add("w", Tensor::scalar(1.0));
  int calls = 0;
  LossBuilder f = [&](ParamBinder& b) { return scale(sum(b("w")), 1.0 + 1e-3 * ++calls); };
  std::vector<ParamCoord> coords{{"w", 0}};
  EXPECT_THROW(finite_diff_check(f, p, 1e-5, coords), ContractError);
}

TEST(GradCheck, EpsOutsideRangeRaises) {
  ParamStore p;
  p.add("w", Tensor::scalar(1.0));
  LossBuilder f = [](ParamBinder& b) { return sum(b("w")); };
  std::vector<ParamCoord> coords{{"w", 0}};
  EXPECT_THROW(finite_diff_check(f, p, 0.0, coords), ContractError);
  EXPECT_THROW(finite_diff_check(f, p, 0.5, coords), ContractError);
}

TEST(GradCheck, PerturbationRestoresParameters) {
  ParamStore p;
  std::mt19937_64 rng(9);
  p.add("a", random_matrix(2, 2, rng));
  const auto before = p.at("a");
  LossBuilder f = [](ParamBinder& b) { return sum(mul(b("a"), b("a"))); };
  auto coords = sample_coords(p, {"a"}, 4, 2);
  finite_diff_check(f, p, 1e-5, coords);
  EXPECT_EQ(p.at("a"), before);
}
