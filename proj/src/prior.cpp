#include "kinfuse/prior.hpp"

#include <stdexcept>

#include "kinfuse/error.hpp"

namespace kinfuse {

std::string_view to_string(PriorMode mode) {
  return mode == PriorMode::Raw ? "raw" : "boost";
}

PriorMode parse_prior_mode(std::string_view s) {
  if (s == "raw") return PriorMode::Raw;
  if (s == "boost") return PriorMode::Boost;
  throw std::invalid_argument("unknown prior mode '" + std::string(s) + "' (raw|boost)");
}

PriorMatrix PriorMatrix::neutral(std::size_t length) {
  PriorMatrix p;
  p.k = Matrix(length, length, 1.0);
  return p;
}

Real knowledge_score(std::span<const Real> ha_i, std::span<const Real> hb_j,
                       const RelationVector& k, Real gamma) {
  return dot(ha_i, hb_j) + gamma * indicator(k);
}

Matrix knowledge_indicators(const LexicalKB& kb, std::span<const std::string> lemmas_a,
                            std::span<const std::string> lemmas_b) {
  Matrix ind(lemmas_a.size(), lemmas_b.size());
  if (kb.empty()) return ind;
  for (std::size_t i = 0; i < lemmas_a.size(); ++i)
    for (std::size_t j = 0; j < lemmas_b.size(); ++j)
      ind(i, j) = indicator(kb.relation_vector(lemmas_a[i], lemmas_b[j]));
  return ind;
}

CoAttention coattention(const Matrix& ha, const Matrix& hb, const Matrix& indicators,
                        Real gamma) {
  if (ha.rows() == 0 || hb.rows() == 0) throw ShapeError("coattention: empty text");
  if (ha.cols() != hb.cols()) {
    throw ShapeError("coattention: hidden sizes differ " + shape_str(ha) + " vs " + shape_str(hb));
  }
  if (indicators.rows() != ha.rows() || indicators.cols() != hb.rows()) {
    throw ShapeError("coattention: indicator matrix " + shape_str(indicators) +
                     " does not match m=" + std::to_string(ha.rows()) +
                     ", n=" + std::to_string(hb.rows()));
  }
  CoAttention co;
  co.scores = matmul_nt(ha, hb);
  if (gamma != 0.0)
    for (std::size_t i = 0; i < co.scores.size(); ++i) co.scores[i] += gamma * indicators[i];
  co.omega_a = softmax_rows(co.scores);
  co.omega_b = softmax_cols(co.scores);
  co.ctx_a = matmul(co.omega_a, hb);
  co.ctx_b = matmul_tn(co.omega_b, ha);
  return co;
}

CoAttention coattention(const Matrix& ha, const Matrix& hb, const LexicalKB& kb,
                        std::span<const std::string> lemmas_a,
                        std::span<const std::string> lemmas_b, Real gamma) {
  if (lemmas_a.size() != ha.rows() || lemmas_b.size() != hb.rows()) {
    throw ShapeError("coattention: lemma counts (" + std::to_string(lemmas_a.size()) + "," +
                     std::to_string(lemmas_b.size()) + ") differ from m=" +
                     std::to_string(ha.rows()) + ", n=" + std::to_string(hb.rows()));
  }
  return coattention(ha, hb, knowledge_indicators(kb, lemmas_a, lemmas_b), gamma);
}

PriorMatrix build_prior_matrix(const CoAttention& co, const PairLayout& layout, PriorMode mode,
                               Real kappa) {
  if (co.omega_a.rows() != layout.m || co.omega_a.cols() != layout.n ||
      !co.omega_b.same_shape(co.omega_a)) {
    throw ShapeError("build_prior_matrix: co-attention " + shape_str(co.omega_a) +
                     " does not match layout m=" + std::to_string(layout.m) +
                     ", n=" + std::to_string(layout.n));
  }
  if (kappa < 0.0) throw std::invalid_argument("build_prior_matrix: kappa must be >= 0");
  PriorMatrix p = PriorMatrix::neutral(layout.length());
  p.mode = mode;
  p.kappa = kappa;
  p.layout = layout;
  for (std::size_t i = 0; i < layout.m; ++i) {
    for (std::size_t j = 0; j < layout.n; ++j) {
      const Real avg = 0.5 * (co.omega_a(i, j) + co.omega_b(i, j));
      const Real v = mode == PriorMode::Raw ? avg : 1.0 + kappa * avg;
      p.k(layout.a_pos(i), layout.b_pos(j)) = v;
      p.k(layout.b_pos(j), layout.a_pos(i)) = v;
    }
  }
  return p;
}

CoAttentionGrads prior_backward(const CoAttention& co, const Matrix& ha, const Matrix& hb,
                                const PriorMatrix& prior, const Matrix& d_k) {
  const PairLayout& lay = prior.layout;
  if (!d_k.same_shape(prior.k)) throw ShapeError("prior_backward: dK shape mismatch");
  const Real scale = prior.mode == PriorMode::Raw ? 1.0 : prior.kappa;
  // K entry = scale·(ωA + ωB)/2 (+1), placed twice.
  Matrix d_half(lay.m, lay.n);
  for (std::size_t i = 0; i < lay.m; ++i)
    for (std::size_t j = 0; j < lay.n; ++j)
      d_half(i, j) =
          0.5 * scale * (d_k(lay.a_pos(i), lay.b_pos(j)) + d_k(lay.b_pos(j), lay.a_pos(i)));

  Matrix d_s = softmax_rows_backward(co.omega_a, d_half);
  d_s += softmax_cols_backward(co.omega_b, d_half);

  CoAttentionGrads g;
  g.d_ha = matmul(d_s, hb);
  g.d_hb = matmul_tn(d_s, ha);
  return g;
}

}  // namespace kinfuse
