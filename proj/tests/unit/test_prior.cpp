#include <gtest/gtest.h>

#include <cmath>

#include "kinfuse/error.hpp"
#include "kinfuse/prior.hpp"

using namespace kinfuse;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double a = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.uniform(-a, a);
  return m;
}

const std::vector<std::string> kA = {"a1", "a2"};
const std::vector<std::string> kB = {"b1", "b2"};

}  // namespace

TEST(KnowledgeScore, Substitution) {
  const std::vector<double> x{0.5, 0.0}, y{1.0, 3.0};
  const RelationVector ant{{0, 1, 0, 0}}, syn{{1, 0, 0, 0}}, none{};
  EXPECT_DOUBLE_EQ(knowledge_score(x, y, ant, 1.0), 1.5);
  EXPECT_DOUBLE_EQ(knowledge_score(x, y, none, 1.0), 0.5);
  const std::vector<double> z{-0.2, 0.0};
  EXPECT_DOUBLE_EQ(knowledge_score(z, y, syn, 0.0), -0.2);
  EXPECT_THROW(knowledge_score(x, std::vector<double>{1.0}, none, 1.0), ShapeError);
}

TEST(CoAttention, UniformWhenNoSignal) {
  const Matrix ha(2, 3);
  const Matrix hb = Matrix::from_rows({{1, 2, 3}, {3, 0, -1}});
  const CoAttention co = coattention(ha, hb, LexicalKB{}, kA, kB, 1.0);
  for (double w : co.omega_a.data()) EXPECT_DOUBLE_EQ(w, 0.5);
  for (double w : co.omega_b.data()) EXPECT_DOUBLE_EQ(w, 0.5);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_DOUBLE_EQ(co.ctx_a(i, 0), 2.0);
    EXPECT_DOUBLE_EQ(co.ctx_a(i, 1), 1.0);
    EXPECT_DOUBLE_EQ(co.ctx_a(i, 2), 1.0);
  }
}

TEST(CoAttention, SynonymBoostRaisesWeightToTwoThirds) {
  LexicalKB kb;
  kb.add("a1", "b1", RelationKind::Synonym);
  const Matrix zero(2, 2);
  const CoAttention before = coattention(zero, zero, kb, kA, kB, 0.0);
  const CoAttention after = coattention(zero, zero, kb, kA, kB, std::log(2.0));
  EXPECT_DOUBLE_EQ(before.omega_a(0, 0), 0.5);
  EXPECT_NEAR(after.omega_a(0, 0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(after.omega_a(0, 1), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(after.scores(0, 0), std::log(2.0), 1e-15);
}

TEST(CoAttention, LemmaCountMismatchThrows) {
  const Matrix h(2, 2);
  EXPECT_THROW(coattention(h, h, LexicalKB{}, kA, std::vector<std::string>{"b1"}, 1.0),
               ShapeError);
}

TEST(CoAttention, StochasticAndConvexContexts) {
  Rng rng(21);
  LexicalKB kb;
  kb.add("a1", "b2", RelationKind::Antonym);
  kb.add("a3", "b1", RelationKind::Hypernym);
  const std::vector<std::string> la{"a1", "a2", "a3"}, lb{"b1", "b2", "b3", "b4"};
  for (int t = 0; t < 50; ++t) {
    const Matrix ha = random_matrix(3, 5, rng, 2.0), hb = random_matrix(4, 5, rng, 2.0);
    const CoAttention co = coattention(ha, hb, kb, la, lb, rng.uniform(0, 3));
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 4; ++j) s += co.omega_a(i, j);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < 3; ++i) s += co.omega_b(i, j);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
    for (double w : co.omega_a.data()) EXPECT_TRUE(w >= 0.0 && w <= 1.0);
    for (std::size_t c = 0; c < 5; ++c) {
      double lo = hb(0, c), hi = hb(0, c);
      for (std::size_t j = 1; j < 4; ++j) lo = std::min(lo, hb(j, c)), hi = std::max(hi, hb(j, c));
      for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_GE(co.ctx_a(i, c), lo - 1e-12);
        EXPECT_LE(co.ctx_a(i, c), hi + 1e-12);
      }
    }
  }
}

TEST(CoAttention, GammaMonotonicity) {
  Rng rng(3);
  LexicalKB kb;
  kb.add("a2", "b1", RelationKind::Synonym);
  const std::vector<std::string> la{"a1", "a2"}, lb{"b1", "b2", "b3"};
  const Matrix ha = random_matrix(2, 4, rng), hb = random_matrix(3, 4, rng);
  CoAttention prev = coattention(ha, hb, kb, la, lb, 0.0);
  for (double g : {0.25, 0.5, 1.0, 2.0}) {
    const CoAttention co = coattention(ha, hb, kb, la, lb, g);
    EXPECT_GT(co.omega_a(1, 0), prev.omega_a(1, 0));
    EXPECT_LT(co.omega_a(1, 1), prev.omega_a(1, 1));
    EXPECT_LT(co.omega_a(1, 2), prev.omega_a(1, 2));
    EXPECT_GT(co.omega_b(1, 0), prev.omega_b(1, 0));
    EXPECT_LT(co.omega_b(0, 0), prev.omega_b(0, 0));
    prev = co;
  }
}

TEST(CoAttention, EmptyKbOrZeroGammaIsPlainDotProduct) {
  Rng rng(5);
  LexicalKB kb;
  kb.add("a1", "b1", RelationKind::Antonym);
  const Matrix ha = random_matrix(2, 3, rng), hb = random_matrix(2, 3, rng);
  const Matrix dots = matmul_nt(ha, hb);
  const CoAttention empty = coattention(ha, hb, LexicalKB{}, kA, kB, 3.0);
  const CoAttention zero = coattention(ha, hb, kb, kA, kB, 0.0);
  EXPECT_LE(max_abs_diff(empty.scores, dots), 1e-15);
  EXPECT_LE(max_abs_diff(zero.scores, dots), 1e-15);
  EXPECT_LE(max_abs_diff(empty.omega_a, softmax_rows(dots)), 1e-15);
  EXPECT_LE(max_abs_diff(zero.omega_b, softmax_cols(dots)), 1e-15);
}

TEST(PriorMatrix, UniformCoAttentionRawAndBoost) {
  const Matrix zero(2, 2);
  const CoAttention co = coattention(zero, zero, LexicalKB{}, kA, kB, 0.0);
  const PairLayout layout{2, 2};
  const PriorMatrix raw = build_prior_matrix(co, layout, PriorMode::Raw, 1.0);
  const PriorMatrix boost = build_prior_matrix(co, layout, PriorMode::Boost, 1.0);
  ASSERT_EQ(raw.k.rows(), 7u);
  for (std::size_t r = 0; r < 7; ++r) {
    for (std::size_t c = 0; c < 7; ++c) {
      const bool cross = (r >= 1 && r <= 2 && c >= 4 && c <= 5) || (c >= 1 && c <= 2 && r >= 4 && r <= 5);
      EXPECT_EQ(raw.k(r, c), cross ? 0.5 : 1.0);
      EXPECT_EQ(boost.k(r, c), cross ? 1.5 : 1.0);
    }
  }
}

TEST(PriorMatrix, SingleTokenTexts) {
  const Matrix h = Matrix::from_rows({{0.3, -1.0}});
  const std::vector<std::string> a{"x"}, b{"y"};
  const CoAttention co = coattention(h, h, LexicalKB{}, a, b, 1.0);
  const PriorMatrix raw = build_prior_matrix(co, {1, 1}, PriorMode::Raw, 1.0);
  EXPECT_EQ(raw.k(1, 3), 1.0);
  EXPECT_EQ(raw.k(3, 1), 1.0);
}

TEST(PriorMatrix, BlockInvariantsOnRandomInputs) {
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const std::size_t m = 1 + rng.below(4), n = 1 + rng.below(4);
    std::vector<std::string> la, lb;
    LexicalKB kb;
    for (std::size_t i = 0; i < m; ++i) la.push_back("a" + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) lb.push_back("b" + std::to_string(j));
    for (int r = 0; r < 3; ++r) kb.add(la[rng.below(m)], lb[rng.below(n)], RelationKind::Synonym);
    const CoAttention co =
        coattention(random_matrix(m, 3, rng, 2.0), random_matrix(n, 3, rng, 2.0), kb, la, lb, 1.0);
    const double kappa = rng.uniform(0, 2);
    const PairLayout layout{m, n};
    for (PriorMode mode : {PriorMode::Raw, PriorMode::Boost}) {
      const PriorMatrix p = build_prior_matrix(co, layout, mode, kappa);
      const std::size_t L = layout.length();
      ASSERT_EQ(p.k.rows(), L);
      for (std::size_t r = 0; r < L; ++r) {
        for (std::size_t c = 0; c < L; ++c) {
          const bool ra = r >= 1 && r <= m, rb = r >= m + 2 && r < m + 2 + n;
          const bool ca = c >= 1 && c <= m, cb = c >= m + 2 && c < m + 2 + n;
          const bool cross = (ra && cb) || (rb && ca);
          if (!cross) {
            EXPECT_EQ(p.k(r, c), 1.0);
            continue;
          }
          EXPECT_EQ(p.k(r, c), p.k(c, r));
          if (mode == PriorMode::Raw) {
            EXPECT_GE(p.k(r, c), 0.0);
            EXPECT_LE(p.k(r, c), 1.0);
          } else {
            EXPECT_GE(p.k(r, c), 1.0);
            EXPECT_LE(p.k(r, c), 1.0 + kappa);
          }
        }
      }
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double avg = 0.5 * (co.omega_a(i, j) + co.omega_b(i, j));
          const double want = mode == PriorMode::Raw ? avg : 1.0 + kappa * avg;
          EXPECT_NEAR(p.k(layout.a_pos(i), layout.b_pos(j)), want, 1e-15);
        }
    }
  }
}

TEST(PriorMatrix, LayoutMismatchAndBadKappa) {
  const Matrix h(2, 2);
  const CoAttention co = coattention(h, h, LexicalKB{}, kA, kB, 1.0);
  EXPECT_THROW(build_prior_matrix(co, {2, 3}, PriorMode::Raw, 1.0), ShapeError);
  EXPECT_THROW(build_prior_matrix(co, {2, 2}, PriorMode::Boost, -1.0), std::invalid_argument);
}

TEST(PriorMatrix, BackwardMatchesFiniteDifference) {
  Rng rng(13);
  LexicalKB kb;
  kb.add("a1", "b2", RelationKind::Synonym);
  const std::vector<std::string> la{"a1", "a2"}, lb{"b1", "b2", "b3"};
  const Matrix ha = random_matrix(2, 3, rng), hb = random_matrix(3, 3, rng);
  const Matrix ind = knowledge_indicators(kb, la, lb);
  const PairLayout layout{2, 3};
  const Matrix w = random_matrix(layout.length(), layout.length(), rng);
  for (PriorMode mode : {PriorMode::Raw, PriorMode::Boost}) {
    const auto f = [&](const Matrix& a, const Matrix& b) {
      const PriorMatrix p = build_prior_matrix(coattention(a, b, ind, 1.3), layout, mode, 0.7);
      double s = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * p.k[i];
      return s;
    };
    const CoAttention co = coattention(ha, hb, ind, 1.3);
    const PriorMatrix p = build_prior_matrix(co, layout, mode, 0.7);
    const CoAttentionGrads g = prior_backward(co, ha, hb, p, w);
    const double h = 1e-6;
    for (std::size_t i = 0; i < ha.size(); ++i) {
      Matrix up = ha, dn = ha;
      up[i] += h;
      dn[i] -= h;
      EXPECT_NEAR(g.d_ha[i], (f(up, hb) - f(dn, hb)) / (2 * h), 1e-8);
    }
    for (std::size_t i = 0; i < hb.size(); ++i) {
      Matrix up = hb, dn = hb;
      up[i] += h;
      dn[i] -= h;
      EXPECT_NEAR(g.d_hb[i], (f(ha, up) - f(ha, dn)) / (2 * h), 1e-8);
    }
  }
}

TEST(PriorMode, Names) {
  EXPECT_EQ(parse_prior_mode("raw"), PriorMode::Raw);
  EXPECT_EQ(parse_prior_mode("boost"), PriorMode::Boost);
  EXPECT_EQ(to_string(PriorMode::Boost), "boost");
  EXPECT_THROW(parse_prior_mode("sharp"), std::invalid_argument);
}
