#include <gtest/gtest.h>

#include <optional>

#include <cmath>
#include <limits>

#include "kinfuse/error.hpp"
#include "kinfuse/numcore.hpp"

using namespace kinfuse;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.uniform(-1.0, 1.0);
  return m;
}

}  // namespace

TEST(Matrix, CheckedRejectsNonFinite) {
  EXPECT_THROW(Matrix::checked(1, 2, {1.0, std::nan("")}), NumericError);
  EXPECT_THROW(Matrix::checked(1, 1, {std::numeric_limits<double>::infinity()}), NumericError);
  EXPECT_THROW(Matrix::checked(2, 2, {1.0, 2.0, 3.0}), ShapeError);
  EXPECT_NO_THROW(Matrix::checked(1, 2, {1.0, 2.0}));
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix m = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(matmul(Matrix::identity(2), m), m);
}

TEST(Matmul, HandProduct) {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix b = Matrix::from_rows({{0}, {1}});
  EXPECT_EQ(matmul(a, b), Matrix::from_rows({{2}, {4}}));
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
  EXPECT_THROW(matmul_nt(Matrix(2, 3), Matrix(2, 2)), ShapeError);
  EXPECT_THROW(matmul_tn(Matrix(2, 3), Matrix(3, 3)), ShapeError);
}

TEST(Matmul, TransposedVariantsAgree) {
  Rng rng(3);
  for (std::size_t rows : {1, 3, 5}) {
    const Matrix a = random_matrix(rows, 4, rng);
    const Matrix b = random_matrix(6, 4, rng);
    const Matrix c = random_matrix(rows, 6, rng);
    EXPECT_LT(max_abs_diff(matmul_nt(a, b), matmul(a, transpose(b))), 1e-14);
    EXPECT_LT(max_abs_diff(matmul_tn(c, a), matmul(transpose(c), a)), 1e-14);
  }
}

TEST(Matmul, AssociativeOnRandomMatrices) {
  Rng rng(11);
  for (int t = 0; t < 50; ++t) {
    const std::size_t p = 1 + rng.below(5), q = 1 + rng.below(5), r = 1 + rng.below(5),
                      s = 1 + rng.below(5);
    const Matrix a = random_matrix(p, q, rng), b = random_matrix(q, r, rng),
                 c = random_matrix(r, s, rng);
    EXPECT_LT(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-9);
  }
}

TEST(Softmax, UniformRow) {
  const Matrix s = softmax_rows(Matrix::from_rows({{0, 0, 0}}));
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LogTwoRow) {
  // e^{ln 2} / (e^{ln 2} + e^0) = 2/3
  const Matrix s = softmax_rows(Matrix::from_rows({{std::log(2.0), 0.0}}));
  EXPECT_NEAR(s[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(s[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeInputsDoNotOverflow) {
  const Matrix s = softmax_rows(Matrix::from_rows({{1000, 0}}));
  EXPECT_TRUE(s.all_finite());
  EXPECT_NEAR(s[0], 1.0, 1e-15);
  EXPECT_NEAR(s[1], 0.0, 1e-15);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    Matrix m = random_matrix(1 + rng.below(6), 1 + rng.below(9), rng);
    m *= 50.0;
    const Matrix s = softmax_rows(m);
    for (std::size_t i = 0; i < s.rows(); ++i) {
      double sum = 0.0;
      for (double v : s.row(i)) sum += v;
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, ColumnsMatchTransposedRows) {
  Rng rng(8);
  const Matrix m = random_matrix(4, 3, rng);
  EXPECT_LT(max_abs_diff(softmax_cols(m), transpose(softmax_rows(transpose(m)))), 1e-15);
}

TEST(Softmax, BackwardMatchesFiniteDifference) {
  Rng rng(9);
  const Matrix x = random_matrix(3, 4, rng);
  const Matrix w = random_matrix(3, 4, rng);
  const auto f = [&](const Matrix& in) {
    const Matrix y = softmax_rows(in);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
    return s;
  };
  const Matrix g = softmax_rows_backward(softmax_rows(x), w);
  const Matrix gc = softmax_cols_backward(softmax_cols(x), w);
  const auto fc = [&](const Matrix& in) {
    const Matrix y = softmax_cols(in);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
    return s;
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Matrix p = x, m = x;
    p[i] += h;
    m[i] -= h;
    EXPECT_NEAR(g[i], (f(p) - f(m)) / (2 * h), 1e-9);
    EXPECT_NEAR(gc[i], (fc(p) - fc(m)) / (2 * h), 1e-9);
  }
}

TEST(Activations, KnownValues) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_EQ(tanh(Matrix(1, 1))[0], 0.0);
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const double x = rng.uniform(-30, 30);
    EXPECT_NEAR(sigmoid(x) + sigmoid(-x), 1.0, 1e-15);
  }
  EXPECT_TRUE(std::isfinite(sigmoid(-1000.0)));
  EXPECT_TRUE(std::isfinite(sigmoid(1000.0)));
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, MatchesReferenceEngine) {
  // mt19937_64 with the default seed produces 9981545732273789042 as its
  // 10000th output (C++ standard requirement).
  Rng r(5489);
  std::uint64_t x = 0;
  for (int i = 0; i < 10000; ++i) x = r.next_u64();
  EXPECT_EQ(x, 9981545732273789042ULL);
}

TEST(Rng, UniformAndBelowRanges) {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(r.below(7), 7u);
  }
}

TEST(Glorot, DeterministicAndBounded) {
  Rng a(7), b(7);
  const Matrix x = glorot_init(4, 4, a), y = glorot_init(4, 4, b);
  EXPECT_EQ(x, y);
  const double bound = std::sqrt(6.0 / 8.0);
  for (double v : x.data()) EXPECT_LE(std::fabs(v), bound);
}

TEST(Glorot, MeanNearZero) {
  Rng rng(7);
  const Matrix m = glorot_init(1, 100000, rng);
  double sum = 0.0;
  for (double v : m.data()) sum += v;
  const double mean = sum / 1e5;
  const double a = std::sqrt(6.0 / 100001.0);
  const double sigma = a / std::sqrt(3.0) / std::sqrt(1e5);  // sd of the sample mean
  EXPECT_LT(std::fabs(mean), 3 * sigma);
}

TEST(ParamStore, InsertionOrderAndUniqueNames) {
  ParamStore ps;
  ps.add("b", Matrix(1, 2));
  ps.add("a", Matrix(3, 1));
  EXPECT_EQ(ps.name(0), "b");
  EXPECT_EQ(ps.name(1), "a");
  EXPECT_EQ(ps.at("a"), 1u);
  EXPECT_FALSE(ps.find("c").has_value());
  EXPECT_THROW(ps.add("a", Matrix(1, 1)), std::invalid_argument);
  EXPECT_TRUE(ps.grad(1).same_shape(ps.value(1)));
  EXPECT_EQ(ps.num_scalars(), 5u);
}

TEST(GradCheck, Quadratic) {
  ParamStore ps;
  ps.add("theta", Matrix::from_rows({{3.0}}));
  const LossFn f = [](ParamStore& p, bool with_grads) {
    const double t = p.value(0)[0];
    if (with_grads) p.grad(0)[0] = 2 * t;
    return t * t;
  };
  const GradCheckReport r = check_gradients(f, ps, 1e-5, 1e-8);
  ASSERT_EQ(r.tensors.size(), 1u);
  EXPECT_NEAR(r.tensors[0].analytic, 6.0, 1e-12);
  EXPECT_NEAR(r.tensors[0].numeric, 6.0, 1e-8);
  EXPECT_TRUE(r.passed());
  EXPECT_EQ(ps.value(0)[0], 3.0);
}

TEST(GradCheck, DetectsWrongGradient) {
  ParamStore ps;
  ps.add("theta", Matrix::from_rows({{1.0, -2.0}}));
  const LossFn f = [](ParamStore& p, bool with_grads) {
    const Matrix& t = p.value(0);
    if (with_grads) p.grad(0) = Matrix::from_rows({{3 * t[0] * t[0], 1.0}});
    return t[0] * t[0] * t[0] + 2.0 * t[1];
  };
  const GradCheckReport r = check_gradients(f, ps, 1e-5, 1e-4);
  EXPECT_FALSE(r.passed());
  EXPECT_EQ(r.tensors[0].worst_index, 1u);
}

TEST(GradCheck, RefineReplacesSuspectNumerics) {
  ParamStore ps;
  ps.add("theta", Matrix::from_rows({{1.0, -2.0}}));
  const LossFn f = [](ParamStore& p, bool with_grads) {
    const Matrix& t = p.value(0);
    if (with_grads) p.grad(0) = Matrix::from_rows({{3 * t[0] * t[0], 1.0}});
    return t[0] * t[0] * t[0] + 2.0 * t[1];
  };
  std::vector<std::size_t> asked;
  const RefineFn refine = [&](ParamId, std::size_t k) -> std::optional<Real> {
    asked.push_back(k);
    return k == 1 ? std::optional<Real>(1.0) : std::nullopt;
  };
  const GradCheckReport r = check_gradients(f, ps, 1e-5, 1e-4, refine);
  EXPECT_EQ(asked, (std::vector<std::size_t>{1}));
  EXPECT_EQ(r.refined, 1u);
  EXPECT_EQ(r.entries, 2u);
  EXPECT_TRUE(r.passed());
}

TEST(GradCheck, NonFiniteLossThrows) {
  ParamStore ps;
  ps.add("theta", Matrix::from_rows({{0.0}}));
  const LossFn f = [](ParamStore& p, bool with_grads) {
    if (with_grads) p.grad(0)[0] = 0.0;
    return std::log(p.value(0)[0] > 0 ? p.value(0)[0] : -1.0);
  };
  EXPECT_THROW(check_gradients(f, ps, 1e-5, 1e-4), NumericError);
}

TEST(GradCheck, RelativeErrorFloor) {
  EXPECT_EQ(grad_rel_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(grad_rel_error(1e-12, 0.0), 1e-4);
  EXPECT_DOUBLE_EQ(grad_rel_error(1.0, 3.0), 0.5);
}
