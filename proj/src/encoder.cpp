#include "kinfuse/encoder.hpp"

#include <cmath>
#include <memory>
#include <optional>
#include <stdexcept>

#include "extended.hpp"
#include "kinfuse/error.hpp"

namespace kinfuse {

void EncoderConfig::validate() const {
  const auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("EncoderConfig: ") + what);
  };
  need(d_h >= 1 && d_k >= 1 && d_v >= 1 && n_heads >= 1 && d_ff >= 1, "dimensions must be >= 1");
  need(n_classes >= 2, "n_classes must be >= 2");
  need(max_a >= 1 && max_b >= 1, "max_a/max_b must be >= 1");
  need(n_heads * d_v == d_h, "n_heads * d_v must equal d_h");
  need(dropout_rate >= 0.0 && dropout_rate < 1.0, "dropout_rate must be in [0,1)");
  need(gamma >= 0.0, "gamma must be >= 0");
  need(kappa >= 0.0, "kappa must be >= 0");
}

Matrix layer_norm(const Matrix& x, const Matrix& scale, const Matrix& offset, Matrix* xhat,
                  std::vector<Real>* inv_std) {
  const std::size_t rows = x.rows(), d = x.cols();
  Matrix y(rows, d);
  if (xhat) *xhat = Matrix(rows, d);
  if (inv_std) inv_std->assign(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    Real mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += x(i, c);
    mean /= static_cast<Real>(d);
    Real var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (x(i, c) - mean) * (x(i, c) - mean);
    var /= static_cast<Real>(d);
    const Real is = 1.0 / std::sqrt(var + kLayerNormEps);
    if (inv_std) (*inv_std)[i] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const Real xh = (x(i, c) - mean) * is;
      if (xhat) (*xhat)(i, c) = xh;
      y(i, c) = scale[c] * xh + offset[c];
    }
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& xhat, const std::vector<Real>& inv_std,
                           const Matrix& scale, const Matrix& dy, Matrix& g_scale,
                           Matrix& g_offset) {
  const std::size_t rows = xhat.rows(), d = xhat.cols();
  Matrix dx(rows, d);
  std::vector<Real> dxh(d);
  for (std::size_t i = 0; i < rows; ++i) {
    Real mean_dxh = 0.0, mean_dxh_xh = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      g_scale[c] += dy(i, c) * xhat(i, c);
      g_offset[c] += dy(i, c);
      dxh[c] = dy(i, c) * scale[c];
      mean_dxh += dxh[c];
      mean_dxh_xh += dxh[c] * xhat(i, c);
    }
    mean_dxh /= static_cast<Real>(d);
    mean_dxh_xh /= static_cast<Real>(d);
    for (std::size_t c = 0; c < d; ++c)
      dx(i, c) = inv_std[i] * (dxh[c] - mean_dxh - xhat(i, c) * mean_dxh_xh);
  }
  return dx;
}

namespace {

/// Parameter values gathered for one forward/backward sweep.
struct LayerWeights {
  std::vector<HeadParams> heads;
  const Matrix* proj;
  const Matrix* proj_bias;
  const Matrix* norm1_scale;
  const Matrix* norm1_offset;
  const Matrix* ffn_in;
  const Matrix* ffn_in_bias;
  const Matrix* ffn_out;
  const Matrix* ffn_out_bias;
  const Matrix* norm2_scale;
  const Matrix* norm2_offset;
};

struct LayerGrads {
  AttentionLayerGrads attn;
  Matrix norm1_scale, norm1_offset;
  Matrix ffn_in, ffn_in_bias, ffn_out, ffn_out_bias;
  Matrix norm2_scale, norm2_offset;
};

/// Dropout mask scaled by 1/(1−p), or empty when dropout is off.
std::optional<Matrix> dropout_mask(std::size_t rows, std::size_t cols, Real rate, Rng* rng) {
  if (!rng || rate <= 0.0) return std::nullopt;
  Matrix m(rows, cols);
  const Real keep = 1.0 - rate;
  for (Real& v : m.data()) v = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
  return m;
}

Matrix apply_mask(const Matrix& x, const std::optional<Matrix>& mask) {
  return mask ? hadamard(x, *mask) : x;
}

Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y = matmul_nt(x, w);
  add_row_inplace(y, b);
  return y;
}

struct LayerCache {
  Matrix x;  // block input
  std::optional<Matrix> mask_attn, mask_concat, mask_ffn_in, mask_ffn_out;
  Matrix x_attn;  // masked attention input
  AttentionLayerOutput attn;
  Matrix xhat1;
  std::vector<Real> inv_std1;
  Matrix h1;
  Matrix ffn_in;      // masked h1
  Matrix ffn_hidden;  // tanh activations
  Matrix ffn_hidden_masked;
  Matrix xhat2;
  std::vector<Real> inv_std2;
};

struct ExampleCache {
  std::optional<Matrix> mask_embed;
  Matrix h0;
  Matrix ha, hb;
  CoAttention co;
  PriorMatrix prior;
  std::vector<LayerCache> layers;
  Matrix h_final;
  std::optional<Matrix> mask_cls;
  Matrix cls_in;
  ClassifierOutput out;
};

Matrix gather_rows(const Matrix& h, std::size_t first, std::size_t count) {
  Matrix out(count, h.cols());
  for (std::size_t i = 0; i < count; ++i)
    std::copy(h.row(first + i).begin(), h.row(first + i).end(), out.row(i).begin());
  return out;
}

}  // namespace

Model::Model(EncoderConfig config, Vocab vocab) : config_(config), vocab_(std::move(vocab)) {
  config_.validate();
  Rng rng(config_.seed);
  register_params(params_, &rng);
  resolve_ids();
}

Model::Model(EncoderConfig config, Vocab vocab, ParamStore params)
    : config_(config), vocab_(std::move(vocab)) {
  config_.validate();
  ParamStore expected;
  register_params(expected, nullptr);
  if (expected.size() != params.size()) {
    throw DataError("checkpoint has " + std::to_string(params.size()) + " tensors, expected " +
                    std::to_string(expected.size()));
  }
  for (ParamId id = 0; id < expected.size(); ++id) {
    if (expected.name(id) != params.name(id) ||
        !expected.value(id).same_shape(params.value(id))) {
      throw DataError("checkpoint tensor '" + params.name(id) + "' " +
                      shape_str(params.value(id)) + " does not match expected '" +
                      expected.name(id) + "' " + shape_str(expected.value(id)));
    }
  }
  params_ = std::move(params);
  resolve_ids();
}

void Model::register_params(ParamStore& store, Rng* rng) const {
  const auto& c = config_;
  const auto weight = [&](std::size_t r, std::size_t cl) {
    return rng ? glorot_init(r, cl, *rng) : zeros(r, cl);
  };
  store.add("embed.tokens", weight(vocab_.size(), c.d_h));
  store.add("embed.positions", weight(c.max_len(), c.d_h));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      HeadParams hp = rng ? HeadParams::glorot(c.d_h, c.d_k, c.d_v, *rng)
                          : HeadParams::zeros(c.d_h, c.d_k, c.d_v);
      const std::string hpre = pre + "heads." + std::to_string(h) + ".";
      hp.for_each([&](const char* name, Matrix& m) { store.add(hpre + name, std::move(m)); });
    }
    store.add(pre + "attn_proj", weight(c.d_h, c.n_heads * c.d_v));
    store.add(pre + "attn_proj_bias", zeros(1, c.d_h));
    store.add(pre + "norm1_scale", Matrix(1, c.d_h, 1.0));
    store.add(pre + "norm1_offset", zeros(1, c.d_h));
    store.add(pre + "ffn_in", weight(c.d_ff, c.d_h));
    store.add(pre + "ffn_in_bias", zeros(1, c.d_ff));
    store.add(pre + "ffn_out", weight(c.d_h, c.d_ff));
    store.add(pre + "ffn_out_bias", zeros(1, c.d_h));
    store.add(pre + "norm2_scale", Matrix(1, c.d_h, 1.0));
    store.add(pre + "norm2_offset", zeros(1, c.d_h));
  }
  store.add("classifier", weight(c.n_classes, c.d_h));
  store.add("classifier_bias", zeros(1, c.n_classes));
}

void Model::resolve_ids() {
  tok_emb_ = params_.at("embed.tokens");
  pos_emb_ = params_.at("embed.positions");
  cls_w_ = params_.at("classifier");
  cls_b_ = params_.at("classifier_bias");
  layers_.clear();
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    LayerIds ids;
    for (std::size_t h = 0; h < config_.n_heads; ++h) {
      const std::string hpre = pre + "heads." + std::to_string(h) + ".";
      std::vector<ParamId> head;
      const HeadParams proto;
      proto.for_each([&](const char* name, const Matrix&) {
        head.push_back(params_.at(hpre + name));
      });
      ids.heads.push_back(std::move(head));
    }
    ids.attn_proj = params_.at(pre + "attn_proj");
    ids.attn_proj_bias = params_.at(pre + "attn_proj_bias");
    ids.norm1_scale = params_.at(pre + "norm1_scale");
    ids.norm1_offset = params_.at(pre + "norm1_offset");
    ids.ffn_in = params_.at(pre + "ffn_in");
    ids.ffn_in_bias = params_.at(pre + "ffn_in_bias");
    ids.ffn_out = params_.at(pre + "ffn_out");
    ids.ffn_out_bias = params_.at(pre + "ffn_out_bias");
    ids.norm2_scale = params_.at(pre + "norm2_scale");
    ids.norm2_offset = params_.at(pre + "norm2_offset");
    layers_.push_back(std::move(ids));
  }
}

TokenizedPair Model::encode_text(std::string_view text_a, std::string_view text_b) const {
  return encode_pair(vocab_, text_a, text_b, config_.max_a, config_.max_b);
}

EncodedExample prepare_example(const Model& model, const LexicalKB& kb, const Example& ex) {
  EncodedExample e;
  e.pair = model.encode_text(ex.text_a, ex.text_b);
  e.pair.label = ex.label;
  e.label = ex.label;
  e.indicators = knowledge_indicators(kb, e.pair.lemmas_a, e.pair.lemmas_b);
  return e;
}

std::vector<EncodedExample> prepare_dataset(const Model& model, const LexicalKB& kb,
                                            const LabeledDataset& data) {
  if (static_cast<std::size_t>(data.num_classes) > model.config().n_classes) {
    throw DataError("dataset declares " + std::to_string(data.num_classes) +
                    " classes but the model has " + std::to_string(model.config().n_classes));
  }
  std::vector<EncodedExample> out;
  out.reserve(data.size());
  for (const Example& ex : data.examples) out.push_back(prepare_example(model, kb, ex));
  return out;
}

namespace {

class Pass {
 public:
  Pass(const Model& model, const ParamStore& ps, const std::vector<Model::LayerIds>& ids,
       ParamId tok, ParamId pos, ParamId cw, ParamId cb)
      : model_(model), ps_(ps), ids_(ids), tok_(tok), pos_(pos), cw_(cw), cb_(cb) {
    for (const auto& lid : ids) {
      LayerWeights w;
      for (const auto& hids : lid.heads) {
        HeadParams hp;
        std::size_t k = 0;
        hp.for_each([&](const char*, Matrix& m) { m = ps.value(hids[k++]); });
        w.heads.push_back(std::move(hp));
      }
      w.proj = &ps.value(lid.attn_proj);
      w.proj_bias = &ps.value(lid.attn_proj_bias);
      w.norm1_scale = &ps.value(lid.norm1_scale);
      w.norm1_offset = &ps.value(lid.norm1_offset);
      w.ffn_in = &ps.value(lid.ffn_in);
      w.ffn_in_bias = &ps.value(lid.ffn_in_bias);
      w.ffn_out = &ps.value(lid.ffn_out);
      w.ffn_out_bias = &ps.value(lid.ffn_out_bias);
      w.norm2_scale = &ps.value(lid.norm2_scale);
      w.norm2_offset = &ps.value(lid.norm2_offset);
      layers_.push_back(std::move(w));
    }
  }

  void init_grads() {
    grads_ = ps_.zeros_like();
    for (const LayerWeights& w : layers_) {
      LayerGrads g;
      for (const HeadParams& hp : w.heads) {
        HeadParams z = hp;
        z.for_each([](const char*, Matrix& m) { m.fill(0.0); });
        g.attn.heads.push_back(std::move(z));
      }
      g.attn.proj = Matrix(w.proj->rows(), w.proj->cols());
      g.attn.proj_bias = Matrix(1, w.proj_bias->cols());
      g.norm1_scale = Matrix(1, w.norm1_scale->cols());
      g.norm1_offset = Matrix(1, w.norm1_offset->cols());
      g.ffn_in = Matrix(w.ffn_in->rows(), w.ffn_in->cols());
      g.ffn_in_bias = Matrix(1, w.ffn_in_bias->cols());
      g.ffn_out = Matrix(w.ffn_out->rows(), w.ffn_out->cols());
      g.ffn_out_bias = Matrix(1, w.ffn_out_bias->cols());
      g.norm2_scale = Matrix(1, w.norm2_scale->cols());
      g.norm2_offset = Matrix(1, w.norm2_offset->cols());
      layer_grads_.push_back(std::move(g));
    }
  }

  Matrix embed(const TokenizedPair& pair, Rng* rng, std::optional<Matrix>* mask_out) const {
    const auto& cfg = model_.config();
    const std::size_t len = pair.length();
    if (len > cfg.max_len()) {
      throw DataError("sequence length " + std::to_string(len) + " exceeds " +
                      std::to_string(cfg.max_len()));
    }
    const Matrix& tok = ps_.value(tok_);
    const Matrix& pos = ps_.value(pos_);
    Matrix h(len, cfg.d_h);
    for (std::size_t p = 0; p < len; ++p) {
      const int id = pair.ids[p];
      if (id < 0 || static_cast<std::size_t>(id) >= tok.rows()) {
        throw DataError("token id " + std::to_string(id) + " out of range");
      }
      for (std::size_t c = 0; c < cfg.d_h; ++c)
        h(p, c) = tok(static_cast<std::size_t>(id), c) + pos(p, c);
    }
    auto mask = dropout_mask(len, cfg.d_h, cfg.dropout_rate, rng);
    if (mask) h = hadamard(h, *mask);
    if (mask_out) *mask_out = std::move(mask);
    return h;
  }

  PriorMatrix prior(const Matrix& h0, const EncodedExample& ex, Matrix* ha, Matrix* hb,
                    CoAttention* co_out) const {
    const auto& cfg = model_.config();
    const PairLayout lay = PairLayout::of(ex.pair);
    Matrix a = gather_rows(h0, lay.a_pos(0), lay.m);
    Matrix b = gather_rows(h0, lay.b_pos(0), lay.n);
    CoAttention co = coattention(a, b, ex.indicators, cfg.gamma);
    PriorMatrix p = build_prior_matrix(co, lay, cfg.prior_mode, cfg.kappa);
    if (ha) *ha = std::move(a);
    if (hb) *hb = std::move(b);
    if (co_out) *co_out = std::move(co);
    return p;
  }

  Matrix block(std::size_t l, const Matrix& x, const PriorMatrix& prior, Rng* rng,
               LayerCache* cache) const {
    const auto& cfg = model_.config();
    const LayerWeights& w = layers_[l];
    const std::size_t len = x.rows();
    auto mask_attn = dropout_mask(len, cfg.d_h, cfg.dropout_rate, rng);
    auto mask_concat = dropout_mask(len, cfg.n_heads * cfg.d_v, cfg.dropout_rate, rng);
    Matrix x_attn = apply_mask(x, mask_attn);
    AttentionLayerOutput attn = knowledge_attention_layer(
        x_attn, prior, w.heads, *w.proj, *w.proj_bias, mask_concat ? &*mask_concat : nullptr);
    Matrix r1 = x + attn.out;
    Matrix xhat1;
    std::vector<Real> inv1;
    Matrix h1 = layer_norm(r1, *w.norm1_scale, *w.norm1_offset, &xhat1, &inv1);

    auto mask_in = dropout_mask(len, cfg.d_h, cfg.dropout_rate, rng);
    Matrix f_in = apply_mask(h1, mask_in);
    Matrix hidden = tanh(linear(f_in, *w.ffn_in, *w.ffn_in_bias));
    auto mask_out = dropout_mask(len, cfg.d_ff, cfg.dropout_rate, rng);
    Matrix hidden_m = apply_mask(hidden, mask_out);
    Matrix r2 = h1 + linear(hidden_m, *w.ffn_out, *w.ffn_out_bias);
    Matrix xhat2;
    std::vector<Real> inv2;
    Matrix out = layer_norm(r2, *w.norm2_scale, *w.norm2_offset, &xhat2, &inv2);

    if (cache) {
      cache->x = x;
      cache->mask_attn = std::move(mask_attn);
      cache->mask_concat = std::move(mask_concat);
      cache->mask_ffn_in = std::move(mask_in);
      cache->mask_ffn_out = std::move(mask_out);
      cache->x_attn = std::move(x_attn);
      cache->attn = std::move(attn);
      cache->xhat1 = std::move(xhat1);
      cache->inv_std1 = std::move(inv1);
      cache->h1 = std::move(h1);
      cache->ffn_in = std::move(f_in);
      cache->ffn_hidden = std::move(hidden);
      cache->ffn_hidden_masked = std::move(hidden_m);
      cache->xhat2 = std::move(xhat2);
      cache->inv_std2 = std::move(inv2);
    }
    return out;
  }

  ClassifierOutput classify(const Matrix& cls_in) const {
    ClassifierOutput o;
    o.logits = linear(cls_in, ps_.value(cw_), ps_.value(cb_));
    o.probs = softmax_rows(o.logits);
    return o;
  }

  Matrix cls_row(const Matrix& h) const { return gather_rows(h, TokenizedPair::cls_pos(), 1); }

  void forward(const EncodedExample& ex, Rng* rng, ExampleCache& c) const {
    const auto& cfg = model_.config();
    c.h0 = embed(ex.pair, rng, &c.mask_embed);
    c.prior = prior(c.h0, ex, &c.ha, &c.hb, &c.co);
    c.layers.resize(cfg.n_layers);
    Matrix h = c.h0;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) h = block(l, h, c.prior, rng, &c.layers[l]);
    c.h_final = std::move(h);
    c.mask_cls = dropout_mask(1, cfg.d_h, cfg.dropout_rate, rng);
    c.cls_in = apply_mask(cls_row(c.h_final), c.mask_cls);
    c.out = classify(c.cls_in);
  }

  struct ResumePoint {
    Matrix x;
    std::optional<Rng> rng;
  };
  struct ExampleSnapshot {
    std::optional<Rng> start;
    PriorMatrix prior;
    std::vector<ResumePoint> points;  // input of each layer, then of the classifier
  };

  static std::optional<Rng> copy_of(const Rng* rng) {
    return rng ? std::optional<Rng>(*rng) : std::nullopt;
  }

  ExampleSnapshot record(const EncodedExample& ex, Rng* rng) const {
    const auto& cfg = model_.config();
    ExampleSnapshot s;
    s.start = copy_of(rng);
    Matrix h = embed(ex.pair, rng, nullptr);
    s.prior = prior(h, ex, nullptr, nullptr, nullptr);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      s.points.push_back({h, copy_of(rng)});
      h = block(l, h, s.prior, rng, nullptr);
    }
    s.points.push_back({std::move(h), copy_of(rng)});
    dropout_mask(1, cfg.d_h, cfg.dropout_rate, rng);  // keeps the stream aligned for the next example
    return s;
  }

  ClassifierOutput resume(const EncodedExample& ex, const ExampleSnapshot& s,
                          std::size_t stage) const {
    const auto& cfg = model_.config();
    if (stage == 0) {
      std::optional<Rng> rng = s.start;
      ExampleCache c;
      forward(ex, rng ? &*rng : nullptr, c);
      return c.out;
    }
    const ResumePoint& at = s.points.at(stage - 1);
    std::optional<Rng> rng = at.rng;
    Rng* r = rng ? &*rng : nullptr;
    Matrix h = at.x;
    for (std::size_t l = stage - 1; l < cfg.n_layers; ++l) h = block(l, h, s.prior, r, nullptr);
    const auto mask_cls = dropout_mask(1, cfg.d_h, cfg.dropout_rate, r);
    return classify(apply_mask(cls_row(h), mask_cls));
  }

  /// Accumulates weight·dLoss/dθ for the example's cross-entropy.
  void backward(const EncodedExample& ex, const ExampleCache& c, Real weight) {
    const auto& cfg = model_.config();
    const std::size_t len = ex.pair.length();

    Matrix d_logits = c.out.probs;
    d_logits[static_cast<std::size_t>(ex.label)] -= 1.0;
    d_logits *= weight;
    Matrix d_cls(1, cfg.d_h);
    add_matmul_tn(grads_[cw_], d_logits, c.cls_in);
    add_col_sums(grads_[cb_], d_logits);
    add_matmul(d_cls, d_logits, ps_.value(cw_));
    if (c.mask_cls) d_cls = hadamard(d_cls, *c.mask_cls);

    Matrix d_h(len, cfg.d_h);
    for (std::size_t k = 0; k < cfg.d_h; ++k) d_h(TokenizedPair::cls_pos(), k) = d_cls[k];
    Matrix d_prior(len, len);

    for (std::size_t l = cfg.n_layers; l-- > 0;) {
      const LayerWeights& w = layers_[l];
      const LayerCache& lc = c.layers[l];
      LayerGrads& g = layer_grads_[l];

      Matrix d_r2 = layer_norm_backward(lc.xhat2, lc.inv_std2, *w.norm2_scale, d_h,
                                        g.norm2_scale, g.norm2_offset);
      Matrix d_h1 = d_r2;
      Matrix d_hidden(len, cfg.d_ff);
      add_matmul_tn(g.ffn_out, d_r2, lc.ffn_hidden_masked);
      add_col_sums(g.ffn_out_bias, d_r2);
      add_matmul(d_hidden, d_r2, *w.ffn_out);
      if (lc.mask_ffn_out) d_hidden = hadamard(d_hidden, *lc.mask_ffn_out);
      for (std::size_t i = 0; i < d_hidden.size(); ++i)
        d_hidden[i] *= 1.0 - lc.ffn_hidden[i] * lc.ffn_hidden[i];
      add_matmul_tn(g.ffn_in, d_hidden, lc.ffn_in);
      add_col_sums(g.ffn_in_bias, d_hidden);
      Matrix d_fin(len, cfg.d_h);
      add_matmul(d_fin, d_hidden, *w.ffn_in);
      if (lc.mask_ffn_in) d_fin = hadamard(d_fin, *lc.mask_ffn_in);
      d_h1 += d_fin;

      Matrix d_r1 = layer_norm_backward(lc.xhat1, lc.inv_std1, *w.norm1_scale, d_h1,
                                        g.norm1_scale, g.norm1_offset);
      Matrix d_x_attn(len, cfg.d_h);
      knowledge_attention_layer_backward(lc.attn, lc.x_attn, c.prior, w.heads, *w.proj,
                                         lc.mask_concat ? &*lc.mask_concat : nullptr, d_r1,
                                         g.attn, d_x_attn, &d_prior);
      if (lc.mask_attn) d_x_attn = hadamard(d_x_attn, *lc.mask_attn);
      d_h = d_r1 + d_x_attn;
    }

    // Prior path back into the embedded rows of both texts.
    const PairLayout lay = c.prior.layout;
    const CoAttentionGrads pg = prior_backward(c.co, c.ha, c.hb, c.prior, d_prior);
    for (std::size_t i = 0; i < lay.m; ++i)
      for (std::size_t k = 0; k < cfg.d_h; ++k) d_h(lay.a_pos(i), k) += pg.d_ha(i, k);
    for (std::size_t j = 0; j < lay.n; ++j)
      for (std::size_t k = 0; k < cfg.d_h; ++k) d_h(lay.b_pos(j), k) += pg.d_hb(j, k);

    if (c.mask_embed) d_h = hadamard(d_h, *c.mask_embed);
    Matrix& g_tok = grads_[tok_];
    Matrix& g_pos = grads_[pos_];
    for (std::size_t p = 0; p < len; ++p) {
      const auto id = static_cast<std::size_t>(ex.pair.ids[p]);
      for (std::size_t k = 0; k < cfg.d_h; ++k) {
        g_tok(id, k) += d_h(p, k);
        g_pos(p, k) += d_h(p, k);
      }
    }
  }

  /// Writes accumulated gradients into the store's grad tensors.
  void commit(ParamStore& store) {
    for (std::size_t l = 0; l < ids_.size(); ++l) {
      const Model::LayerIds& lid = ids_[l];
      LayerGrads& g = layer_grads_[l];
      for (std::size_t h = 0; h < lid.heads.size(); ++h) {
        std::size_t k = 0;
        g.attn.heads[h].for_each(
            [&](const char*, Matrix& m) { grads_[lid.heads[h][k++]] = std::move(m); });
      }
      grads_[lid.attn_proj] = std::move(g.attn.proj);
      grads_[lid.attn_proj_bias] = std::move(g.attn.proj_bias);
      grads_[lid.norm1_scale] = std::move(g.norm1_scale);
      grads_[lid.norm1_offset] = std::move(g.norm1_offset);
      grads_[lid.ffn_in] = std::move(g.ffn_in);
      grads_[lid.ffn_in_bias] = std::move(g.ffn_in_bias);
      grads_[lid.ffn_out] = std::move(g.ffn_out);
      grads_[lid.ffn_out_bias] = std::move(g.ffn_out_bias);
      grads_[lid.norm2_scale] = std::move(g.norm2_scale);
      grads_[lid.norm2_offset] = std::move(g.norm2_offset);
    }
    store.grads() = std::move(grads_);
  }

  const LayerWeights& layer(std::size_t l) const { return layers_[l]; }

 private:
  const Model& model_;
  const ParamStore& ps_;
  const std::vector<Model::LayerIds>& ids_;
  ParamId tok_, pos_, cw_, cb_;
  std::vector<LayerWeights> layers_;
  GradBuffer grads_;
  std::vector<LayerGrads> layer_grads_;
};

Real example_nll(const ClassifierOutput& out, int label) {
  return -std::log(out.probs[static_cast<std::size_t>(label)]);
}

std::size_t argmax(const Matrix& row) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < row.size(); ++k)
    if (row[k] > row[best]) best = k;
  return best;
}

}  // namespace

Matrix Model::embed(const TokenizedPair& pair, Rng* dropout_rng) const {
  Pass pass(*this, params_, layers_, tok_emb_, pos_emb_, cls_w_, cls_b_);
  return pass.embed(pair, dropout_rng, nullptr);
}

PriorMatrix Model::prior_from_hidden(const Matrix& h0, const EncodedExample& ex) const {
  Pass pass(*this, params_, layers_, tok_emb_, pos_emb_, cls_w_, cls_b_);
  return pass.prior(h0, ex, nullptr, nullptr, nullptr);
}

Matrix Model::encode(const Matrix& h0, const PriorMatrix& prior) const {
  Pass pass(*this, params_, layers_, tok_emb_, pos_emb_, cls_w_, cls_b_);
  Matrix h = h0;
  for (std::size_t l = 0; l < config_.n_layers; ++l) h = pass.block(l, h, prior, nullptr, nullptr);
  return h;
}

ClassifierOutput Model::classify(const Matrix& h) const {
  Pass pass(*this, params_, layers_, tok_emb_, pos_emb_, cls_w_, cls_b_);
  return pass.classify(pass.cls_row(h));
}

ClassifierOutput Model::predict(const EncodedExample& ex) const {
  Pass pass(*this, params_, layers_, tok_emb_, pos_emb_, cls_w_, cls_b_);
  ExampleCache c;
  pass.forward(ex, nullptr, c);
  return c.out;
}

std::vector<ClassifierOutput> Model::predict_batch(std::span<const EncodedExample> batch) const {
  Pass pass(*this, params_, layers_, tok_emb_, pos_emb_, cls_w_, cls_b_);
  std::vector<ClassifierOutput> out;
  out.reserve(batch.size());
  for (const EncodedExample& ex : batch) {
    ExampleCache c;
    pass.forward(ex, nullptr, c);
    out.push_back(std::move(c.out));
  }
  return out;
}

InspectionResult Model::inspect(const EncodedExample& ex) const {
  Pass pass(*this, params_, layers_, tok_emb_, pos_emb_, cls_w_, cls_b_);
  ExampleCache c;
  pass.forward(ex, nullptr, c);
  InspectionResult r;
  for (const LayerCache& lc : c.layers) {
    std::vector<FusionTrace> heads;
    for (const HeadTrace& ht : lc.attn.heads) heads.push_back(ht.gates());
    r.layers.push_back(std::move(heads));
  }
  r.output = c.out;
  r.prior = c.prior;
  return r;
}

LossResult Model::loss_and_grads(std::span<const EncodedExample> batch, Rng* dropout_rng) {
  if (batch.empty()) throw std::invalid_argument("loss_and_grads: empty batch");
  Pass pass(*this, params_, layers_, tok_emb_, pos_emb_, cls_w_, cls_b_);
  pass.init_grads();
  const Real weight = 1.0 / static_cast<Real>(batch.size());
  LossResult r;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const EncodedExample& ex = batch[b];
    if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= config_.n_classes) {
      throw DataError("label " + std::to_string(ex.label) + " out of range");
    }
    ExampleCache c;
    pass.forward(ex, dropout_rng, c);
    const Real nll = example_nll(c.out, ex.label);
    if (!std::isfinite(nll)) {
      throw NumericError("non-finite loss at batch index " + std::to_string(b));
    }
    r.loss += nll * weight;
    if (argmax(c.out.probs) == static_cast<std::size_t>(ex.label)) ++r.correct;
    pass.backward(ex, c, weight);
  }
  pass.commit(params_);
  return r;
}

Real Model::loss(std::span<const EncodedExample> batch, Rng* dropout_rng) const {
  if (batch.empty()) throw std::invalid_argument("loss: empty batch");
  Pass pass(*this, params_, layers_, tok_emb_, pos_emb_, cls_w_, cls_b_);
  Real total = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    ExampleCache c;
    pass.forward(batch[b], dropout_rng, c);
    const Real nll = example_nll(c.out, batch[b].label);
    if (!std::isfinite(nll)) {
      throw NumericError("non-finite loss at batch index " + std::to_string(b));
    }
    total += nll;
  }
  return total / static_cast<Real>(batch.size());
}

GradCheckReport check_model_gradients(Model& model, std::span<const EncodedExample> batch,
                                      Real eps, Real tol,
                                      std::optional<std::uint64_t> dropout_seed, bool extended) {
  std::shared_ptr<const Model::Snapshot> snap;
  std::size_t stage = 0;
  const LossFn fn = [&](ParamStore&, bool with_grads) {
    if (!with_grads && snap) return model.loss_from(batch, *snap, stage);
    std::optional<Rng> rng;
    if (dropout_seed) rng.emplace(*dropout_seed);
    Rng* r = rng ? &*rng : nullptr;
    return with_grads ? model.loss_and_grads(batch, r).loss : model.loss(batch, r);
  };
  // Parameters are unperturbed whenever a new tensor starts.
  const TensorHook begin = [&](ParamId id) {
    if (!snap) {
      std::optional<Rng> rng;
      if (dropout_seed) rng.emplace(*dropout_seed);
      snap = model.snapshot(batch, rng ? &*rng : nullptr);
    }
    stage = model.stage_of(id);
  };
#ifdef KINFUSE_XP_BUILD
  (void)extended;
  return check_gradients(fn, model.params(), eps, tol, {}, begin);
#else
  if (!extended) return check_gradients(fn, model.params(), eps, tol, {}, begin);
  std::unique_ptr<kinfuse_ext::ExtendedLoss> xp;
  const RefineFn refine = [&](ParamId id, std::size_t k) -> std::optional<Real> {
    if (!xp) {
      std::vector<kinfuse_ext::PlainExample> plain;
      for (const EncodedExample& ex : batch) {
        plain.push_back({ex.pair.ids, ex.pair.lemmas_a, ex.pair.lemmas_b,
                         {ex.indicators.values().begin(), ex.indicators.values().end()}, ex.label});
      }
      xp = std::make_unique<kinfuse_ext::ExtendedLoss>(checkpoint_to_string(model), plain,
                                                       dropout_seed);
    }
    return static_cast<Real>(xp->central_difference(id, k, eps));
  };
  return check_gradients(fn, model.params(), eps, tol, refine, begin);
#endif
}

struct Model::Snapshot {
  std::vector<Pass::ExampleSnapshot> examples;
};

std::shared_ptr<const Model::Snapshot> Model::snapshot(std::span<const EncodedExample> batch,
                                                       Rng* dropout_rng) const {
  Pass pass(*this, params_, layers_, tok_emb_, pos_emb_, cls_w_, cls_b_);
  auto snap = std::make_shared<Snapshot>();
  for (const EncodedExample& ex : batch) snap->examples.push_back(pass.record(ex, dropout_rng));
  return snap;
}

Real Model::loss_from(std::span<const EncodedExample> batch, const Snapshot& snap,
                      std::size_t stage) const {
  if (batch.empty()) throw std::invalid_argument("loss_from: empty batch");
  if (snap.examples.size() != batch.size()) {
    throw std::invalid_argument("loss_from: snapshot is for a different batch");
  }
  if (stage > config_.n_layers + 1) throw std::out_of_range("loss_from: stage out of range");
  Pass pass(*this, params_, layers_, tok_emb_, pos_emb_, cls_w_, cls_b_);
  Real total = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Real nll = example_nll(pass.resume(batch[b], snap.examples[b], stage), batch[b].label);
    if (!std::isfinite(nll)) {
      throw NumericError("non-finite loss at batch index " + std::to_string(b));
    }
    total += nll;
  }
  return total / static_cast<Real>(batch.size());
}

std::size_t Model::stage_of(ParamId id) const {
  if (id == tok_emb_ || id == pos_emb_) return 0;
  if (id == cls_w_ || id == cls_b_) return config_.n_layers + 1;
  const std::string& name = params_.name(id);
  const std::string pre = "layers.";
  if (name.rfind(pre, 0) == 0) return 1 + std::stoul(name.substr(pre.size()));
  throw std::out_of_range("stage_of: unknown parameter '" + name + "'");
}

Real InspectionResult::mean_g_filter() const {
  Real sum = 0.0;
  std::size_t n = 0;
  for (const auto& heads : layers)
    for (const FusionTrace& t : heads) {
      for (Real g : t.g_filter) sum += g;
      n += t.g_filter.size();
    }
  return n ? sum / static_cast<Real>(n) : 0.0;
}

}  // namespace kinfuse
