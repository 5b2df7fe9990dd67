#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kinfuse/lexkb.hpp"
#include "kinfuse/numcore.hpp"
#include "kinfuse/textio.hpp"

namespace kinfuse {

enum class PriorMode { Raw, Boost };

std::string_view to_string(PriorMode mode);
PriorMode parse_prior_mode(std::string_view s);

/// Positions of the two texts inside `[CLS] A [SEP] B [SEP]`.
struct PairLayout {
  std::size_t m = 0;
  std::size_t n = 0;

  static PairLayout of(const TokenizedPair& p) { return {p.m(), p.n()}; }
  std::size_t length() const noexcept { return m + n + 3; }
  std::size_t a_pos(std::size_t i) const noexcept { return 1 + i; }
  std::size_t b_pos(std::size_t j) const noexcept { return m + 2 + j; }
};

/// Knowledge-augmented co-attention between the two texts.
struct CoAttention {
  Matrix scores;   ///< m×n, s_ij = hA_i·hB_j + γ·𝕀(k_ij)
  Matrix omega_a;  ///< m×n, row softmax of scores
  Matrix omega_b;  ///< m×n, column softmax of scores
  Matrix ctx_a;    ///< m×d, row i = Σ_j ω^A_ij hB_j
  Matrix ctx_b;    ///< n×d, row j = Σ_i ω^B_ij hA_i
};

struct PriorMatrix {
  Matrix k;  ///< L×L
  PriorMode mode = PriorMode::Boost;
  Real kappa = 1.0;
  PairLayout layout;

  /// All-ones prior, which leaves attention scores untouched.
  static PriorMatrix neutral(std::size_t length);
};

Real knowledge_score(std::span<const Real> ha_i, std::span<const Real> hb_j,
                       const RelationVector& k, Real gamma);

/// m×n matrix of 𝕀(k_ij) over the lemma pairs.
Matrix knowledge_indicators(const LexicalKB& kb, std::span<const std::string> lemmas_a,
                            std::span<const std::string> lemmas_b);

CoAttention coattention(const Matrix& ha, const Matrix& hb, const Matrix& indicators,
                        Real gamma);
CoAttention coattention(const Matrix& ha, const Matrix& hb, const LexicalKB& kb,
                        std::span<const std::string> lemmas_a,
                        std::span<const std::string> lemmas_b, Real gamma);

/// Cross-block entries (A×B and its mirror) hold avg_ij = (ω^A_ij + ω^B_ij)/2
/// (Raw) or 1 + κ·avg_ij (Boost); every other entry is 1.
PriorMatrix build_prior_matrix(const CoAttention& co, const PairLayout& layout, PriorMode mode,
                               Real kappa);

struct CoAttentionGrads {
  Matrix d_ha;
  Matrix d_hb;
};

/// Back-propagates dLoss/dK through the prior placement and the co-attention
/// softmaxes into the hidden states. Context vectors do not feed K and get no
/// gradient.
CoAttentionGrads prior_backward(const CoAttention& co, const Matrix& ha, const Matrix& hb,
                                const PriorMatrix& prior, const Matrix& d_k);

}  // namespace kinfuse
