#pragma once

#include <string>
#include <vector>

#include "kinfuse/numcore.hpp"
#include "kinfuse/prior.hpp"

namespace kinfuse {

/// Weights of one knowledge-attention head. Matrices are stored out×in and
/// applied to row vectors as x·Wᵀ. Alignment and fusion widths are tied to the
/// value width d_v.
struct HeadParams {
  // Q/K/V projections: d_k×d_h, d_k×d_h, d_v×d_h.
  Matrix wq, wk, wv;
  // Knowledge-signal alignment guided by the semantic token.
  Matrix knw_keys;        // d×d_v, applied to every o^knw_j
  Matrix knw_query;       // d×d_v, applied to o^sem_i
  Matrix knw_query_bias;  // 1×d
  Matrix knw_score;       // 1×d
  Matrix knw_score_bias;  // 1×1
  // Semantic-signal alignment guided by the refined knowledge token.
  Matrix sem_keys, sem_query, sem_query_bias, sem_score, sem_score_bias;
  // Gated fusion.
  Matrix knw_proj, knw_proj_bias;  // d×d_v, 1×d
  Matrix sem_proj, sem_proj_bias;
  Matrix fuse_gate, fuse_gate_bias;  // 1×2d ([t_knw ; t_sem]), 1×1
  // Filtration gate and output map.
  Matrix filter_gate, filter_gate_bias;  // 1×(d_v + d) ([o_sem ; u]), 1×1
  Matrix out_proj, out_proj_bias;        // d_v×d, 1×d_v

  static HeadParams zeros(std::size_t d_h, std::size_t d_k, std::size_t d_v);
  /// Glorot weights, zero biases.
  static HeadParams glorot(std::size_t d_h, std::size_t d_k, std::size_t d_v, Rng& rng);

  std::size_t d_h() const noexcept { return wq.cols(); }
  std::size_t d_k() const noexcept { return wq.rows(); }
  std::size_t d_v() const noexcept { return wv.rows(); }

  /// Visits (name, tensor) in a fixed order.
  template <typename Self, typename F>
  static void visit(Self& p, F&& f) {
    f("wq", p.wq);
    f("wk", p.wk);
    f("wv", p.wv);
    f("knw_keys", p.knw_keys);
    f("knw_query", p.knw_query);
    f("knw_query_bias", p.knw_query_bias);
    f("knw_score", p.knw_score);
    f("knw_score_bias", p.knw_score_bias);
    f("sem_keys", p.sem_keys);
    f("sem_query", p.sem_query);
    f("sem_query_bias", p.sem_query_bias);
    f("sem_score", p.sem_score);
    f("sem_score_bias", p.sem_score_bias);
    f("knw_proj", p.knw_proj);
    f("knw_proj_bias", p.knw_proj_bias);
    f("sem_proj", p.sem_proj);
    f("sem_proj_bias", p.sem_proj_bias);
    f("fuse_gate", p.fuse_gate);
    f("fuse_gate_bias", p.fuse_gate_bias);
    f("filter_gate", p.filter_gate);
    f("filter_gate_bias", p.filter_gate_bias);
    f("out_proj", p.out_proj);
    f("out_proj_bias", p.out_proj_bias);
  }
  template <typename F>
  void for_each(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, std::forward<F>(f));
  }
};

struct DualAttnOutput {
  Matrix o_sem, o_knw;  ///< L×d_v
  Matrix a_sem, a_knw;  ///< L×L row-stochastic
  // Intermediates kept for the backward pass.
  Matrix q, k, v;
  Matrix raw_scores;  ///< Q·Kᵀ before scaling
};

struct MutualAlignment {
  Matrix o_knw_hat, o_sem_hat;      ///< L×d_v
  Matrix alpha_knw, alpha_sem;      ///< L×L row-stochastic
  Matrix z_knw, z_sem;              ///< (L·L)×d, row i·L+j = tanh(keys_j + query_i)
};

struct GatedFusion {
  Matrix t_knw, t_sem;  ///< L×d
  Matrix gate;          ///< L×1, weight on the semantic branch
  Matrix u;             ///< L×d
};

struct Filtration {
  Matrix gate;  ///< L×1
  Matrix t_y;   ///< L×d_v, tanh(u·W_yᵀ + b_y)
  Matrix y;     ///< L×d_v
};

/// Per-token gate values for inspection.
struct FusionTrace {
  std::vector<Real> g_fuse;
  std::vector<Real> g_filter;
};

struct HeadTrace {
  DualAttnOutput dual;
  MutualAlignment mutual;
  GatedFusion fusion;
  Filtration filter;

  FusionTrace gates() const;
};

/// Semantic and prior-modulated scaled dot-product attention over shared
/// Q/K/V.
DualAttnOutput dual_attention(const Matrix& h, const PriorMatrix& prior, const HeadParams& p);

/// Each path attends over the other: the knowledge signal is re-read under
/// semantic guidance, then the semantic signal under the refined knowledge
/// token (additive attention).
MutualAlignment mutual_align(const Matrix& o_sem, const Matrix& o_knw, const HeadParams& p);

/// Row-wise gated fusion; rows may be single tokens (1×d_v inputs).
GatedFusion gated_fuse(const Matrix& o_sem_hat, const Matrix& o_knw_hat, const HeadParams& p);

Filtration filtration(const Matrix& o_sem, const Matrix& u, const HeadParams& p);

HeadTrace head_forward(const Matrix& h, const PriorMatrix& prior, const HeadParams& p);

/// Accumulates parameter gradients into `grads` and input gradients into
/// `d_h` (L×d_h) and, when non-null, `d_prior` (L×L).
void head_backward(const HeadTrace& trace, const Matrix& h, const PriorMatrix& prior,
                   const HeadParams& p, const Matrix& d_y, HeadParams& grads, Matrix& d_h,
                   Matrix* d_prior);

struct AttentionLayerOutput {
  Matrix out;     ///< L×d_h
  Matrix concat;  ///< L×(heads·d_v) after the optional dropout mask
  std::vector<HeadTrace> heads;
};

/// Runs every head, concatenates Y along features and applies the output
/// projection. `concat_mask` (optional) scales the concatenation elementwise
/// before projection (dropout).
AttentionLayerOutput knowledge_attention_layer(const Matrix& h, const PriorMatrix& prior,
                                               const std::vector<HeadParams>& heads,
                                               const Matrix& proj, const Matrix& proj_bias,
                                               const Matrix* concat_mask = nullptr);

struct AttentionLayerGrads {
  std::vector<HeadParams> heads;
  Matrix proj, proj_bias;
};

void knowledge_attention_layer_backward(const AttentionLayerOutput& fwd, const Matrix& h,
                                        const PriorMatrix& prior,
                                        const std::vector<HeadParams>& heads,
                                        const Matrix& proj, const Matrix* concat_mask,
                                        const Matrix& d_out, AttentionLayerGrads& grads,
                                        Matrix& d_h, Matrix* d_prior);

}  // namespace kinfuse
