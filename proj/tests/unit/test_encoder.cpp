#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "kinfuse/encoder.hpp"
#include "kinfuse/error.hpp"

using namespace kinfuse;

namespace {

LabeledDataset tiny_corpus() {
  LabeledDataset d;
  d.examples = {{0, "soup is hot", "soup is cold"},
                {1, "a big dog", "large animal"},
                {1, "the cold soup", "the soup is chilly"},
                {0, "big car", "small car"}};
  return d;
}

LexicalKB tiny_kb() {
  LexicalKB kb;
  kb.add("hot", "cold", RelationKind::Antonym);
  kb.add("big", "large", RelationKind::Synonym);
  kb.add("big", "small", RelationKind::Antonym);
  kb.add("dog", "animal", RelationKind::Hypernym);
  return kb;
}

EncoderConfig small_config() {
  EncoderConfig c;
  c.d_h = 8;
  c.n_heads = 2;
  c.d_k = 3;
  c.d_v = 4;
  c.d_ff = 6;
  c.n_layers = 2;
  c.max_a = c.max_b = 6;
  c.seed = 5;
  return c;
}

void zero_all(Model& m) {
  for (ParamId id = 0; id < m.params().size(); ++id) m.params().value(id).fill(0.0);
}

}  // namespace

TEST(EncoderConfig, Validation) {
  EncoderConfig c;
  EXPECT_NO_THROW(c.validate());
  c.d_v = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = EncoderConfig{};
  c.dropout_rate = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = EncoderConfig{};
  c.gamma = -0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = EncoderConfig{};
  c.d_ff = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Model, ParameterShapesFollowConfig) {
  const EncoderConfig c = small_config();
  const Model m(c, build_vocab(tiny_corpus(), 1));
  const ParamStore& ps = m.params();
  const auto shape = [&](const char* name) {
    const Matrix& v = ps.value(ps.at(name));
    return std::pair{v.rows(), v.cols()};
  };
  EXPECT_EQ(shape("embed.tokens"), std::pair(m.vocab().size(), c.d_h));
  EXPECT_EQ(shape("embed.positions"), std::pair(c.max_len(), c.d_h));
  EXPECT_EQ(shape("layers.1.heads.0.wq"), std::pair(c.d_k, c.d_h));
  EXPECT_EQ(shape("layers.1.heads.1.wv"), std::pair(c.d_v, c.d_h));
  EXPECT_EQ(shape("layers.0.heads.0.fuse_gate"), (std::pair<std::size_t, std::size_t>(1, 2 * c.d_v)));
  EXPECT_EQ(shape("layers.0.attn_proj"), std::pair(c.d_h, c.n_heads * c.d_v));
  EXPECT_EQ(shape("layers.0.ffn_in"), std::pair(c.d_ff, c.d_h));
  EXPECT_EQ(shape("classifier"), std::pair(c.n_classes, c.d_h));
  for (ParamId id = 0; id < ps.size(); ++id) EXPECT_TRUE(ps.grad(id).same_shape(ps.value(id)));
}

TEST(Embed, ZeroEmbeddingsGiveZeroRows) {
  Model m(small_config(), build_vocab(tiny_corpus(), 1));
  zero_all(m);
  const Matrix h = m.embed(m.encode_text("hot", "cold"));
  EXPECT_EQ(h.rows(), 5u);
  for (double v : h.data()) EXPECT_EQ(v, 0.0);
}

TEST(Embed, DeterministicAndSeededDropout) {
  EncoderConfig c = small_config();
  c.dropout_rate = 0.5;
  const Model m(c, build_vocab(tiny_corpus(), 1));
  const TokenizedPair p = m.encode_text("soup is hot", "soup is cold");
  EXPECT_EQ(m.embed(p), m.embed(p));
  Rng r1(9), r2(9);
  const Matrix a = m.embed(p, &r1), b = m.embed(p, &r2);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, m.embed(p));
  const Matrix plain = m.embed(p);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i] == 0.0 || std::fabs(a[i] - 2 * plain[i]) < 1e-15);
}

TEST(Embed, OverLengthAndBadIdsRejected) {
  const Model m(small_config(), build_vocab(tiny_corpus(), 1));
  TokenizedPair p = m.encode_text("a", "b");
  p.ids[1] = 10000;
  EXPECT_THROW(m.embed(p), DataError);
}

TEST(Encode, ZeroLayersIsIdentity) {
  EncoderConfig c = small_config();
  c.n_layers = 0;
  const Model m(c, build_vocab(tiny_corpus(), 1));
  const EncodedExample ex = prepare_example(m, tiny_kb(), {1, "a big dog", "large animal"});
  const Matrix h0 = m.embed(ex.pair);
  EXPECT_EQ(m.encode(h0, m.prior_from_hidden(h0, ex)), h0);
}

TEST(Encode, ZeroWeightsAreFiniteAndDeterministic) {
  Model m(small_config(), build_vocab(tiny_corpus(), 1));
  Rng rng(3);
  for (ParamId id = 0; id < m.params().size(); ++id) {
    const std::string& name = m.params().name(id);
    if (name.starts_with("embed")) {
      for (double& v : m.params().value(id).data()) v = rng.uniform(-1, 1);
    } else if (name.find("scale") == std::string::npos) {
      m.params().value(id).fill(0.0);
    }
  }
  const EncodedExample ex = prepare_example(m, tiny_kb(), {0, "soup is hot", "soup is cold"});
  const Matrix h0 = m.embed(ex.pair);
  const Matrix out = m.encode(h0, m.prior_from_hidden(h0, ex));
  EXPECT_TRUE(out.all_finite());
  EXPECT_EQ(out, m.encode(h0, m.prior_from_hidden(h0, ex)));
  // With every sublayer at zero each block reduces to LayerNorm twice.
  const Matrix one(1, h0.cols(), 1.0), zero(1, h0.cols());
  const Matrix want = layer_norm(layer_norm(layer_norm(layer_norm(h0, one, zero), one, zero), one, zero), one, zero);
  EXPECT_LE(max_abs_diff(out, want), 1e-12);
}

TEST(LayerNorm, ScaleInvariant) {
  Rng rng(6);
  Matrix x(3, 8);
  for (double& v : x.data()) v = rng.uniform(-2, 2);
  Matrix scale(1, 8), offset(1, 8);
  for (double& v : scale.data()) v = rng.uniform(0.5, 1.5);
  for (double& v : offset.data()) v = rng.uniform(-1, 1);
  // eps = 1e-5 breaks exact invariance by O(eps / var)
  EXPECT_LE(max_abs_diff(layer_norm(x, scale, offset), layer_norm(x * 2.0, scale, offset)), 1e-4);
}

TEST(LayerNorm, BackwardMatchesFiniteDifference) {
  Rng rng(7);
  Matrix x(2, 5), scale(1, 5), offset(1, 5), w(2, 5);
  for (double& v : x.data()) v = rng.uniform(-2, 2);
  for (double& v : scale.data()) v = rng.uniform(0.5, 1.5);
  for (double& v : w.data()) v = rng.uniform(-1, 1);
  const auto f = [&](const Matrix& in) {
    const Matrix y = layer_norm(in, scale, offset);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
    return s;
  };
  Matrix xhat;
  std::vector<double> inv;
  layer_norm(x, scale, offset, &xhat, &inv);
  Matrix gs(1, 5), go(1, 5);
  const Matrix dx = layer_norm_backward(xhat, inv, scale, w, gs, go);
  for (std::size_t i = 0; i < x.size(); ++i) {
    Matrix up = x, dn = x;
    up[i] += 1e-6;
    dn[i] -= 1e-6;
    EXPECT_NEAR(dx[i], (f(up) - f(dn)) / 2e-6, 1e-8);
  }
}

TEST(Classify, ZeroWeightsUniform) {
  Model m(small_config(), build_vocab(tiny_corpus(), 1));
  zero_all(m);
  const ClassifierOutput out = m.classify(Matrix(4, 8, 0.3));
  EXPECT_DOUBLE_EQ(out.probs[0], 0.5);
  EXPECT_DOUBLE_EQ(out.probs[1], 0.5);
}

TEST(Classify, ProbabilitiesSumToOneAndShiftInvariant) {
  Model m(small_config(), build_vocab(tiny_corpus(), 1));
  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    Matrix h(3, 8);
    for (double& v : h.data()) v = rng.uniform(-3, 3);
    const ClassifierOutput a = m.classify(h);
    EXPECT_NEAR(a.probs[0] + a.probs[1], 1.0, 1e-12);
    Matrix& bias = m.params().value(m.params().at("classifier_bias"));
    const Matrix saved = bias;
    for (double& v : bias.data()) v += 7.5;
    const ClassifierOutput b = m.classify(h);
    bias = saved;
    EXPECT_NEAR(a.probs[0], b.probs[0], 1e-12);
    EXPECT_NEAR(a.probs[1], b.probs[1], 1e-12);
  }
}

TEST(Loss, UniformPredictionsGiveLogTwo) {
  Model m(small_config(), build_vocab(tiny_corpus(), 1));
  m.params().value(m.params().at("classifier")).fill(0.0);
  const auto batch = prepare_dataset(m, tiny_kb(), tiny_corpus());
  EXPECT_NEAR(m.loss(batch), std::log(2.0), 1e-15);
  EXPECT_NEAR(m.loss_and_grads(batch).loss, std::log(2.0), 1e-15);
}

TEST(Loss, ConfidentCorrectPredictionGivesZero) {
  Model m(small_config(), build_vocab(tiny_corpus(), 1));
  m.params().value(m.params().at("classifier")).fill(0.0);
  m.params().value(m.params().at("classifier_bias")) = Matrix::from_rows({{0.0, 200.0}});
  const auto batch = prepare_dataset(m, tiny_kb(), tiny_corpus());
  EXPECT_EQ(m.loss(std::span(batch).subspan(1, 1)), 0.0);
}

TEST(Loss, NonFiniteLossNamesBatchIndex) {
  Model m(small_config(), build_vocab(tiny_corpus(), 1));
  const auto batch = prepare_dataset(m, tiny_kb(), tiny_corpus());
  m.params().value(m.params().at("classifier_bias"))[0] = std::nan("");
  try {
    m.loss_and_grads(batch);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("batch index 0"), std::string::npos);
  }
}

TEST(Loss, PermutationInvariant) {
  Model m(small_config(), build_vocab(tiny_corpus(), 1));
  auto batch = prepare_dataset(m, tiny_kb(), tiny_corpus());
  const double a = m.loss(batch);
  std::reverse(batch.begin(), batch.end());
  EXPECT_NEAR(a, m.loss(batch), 1e-12);
  std::swap(batch[0], batch[2]);
  EXPECT_NEAR(a, m.loss_and_grads(batch).loss, 1e-12);
}

TEST(Loss, DeterministicWithSeededDropout) {
  EncoderConfig c = small_config();
  c.dropout_rate = 0.2;
  Model m1(c, build_vocab(tiny_corpus(), 1)), m2(c, build_vocab(tiny_corpus(), 1));
  const auto batch = prepare_dataset(m1, tiny_kb(), tiny_corpus());
  Rng r1(4), r2(4), r3(4);
  const double a = m1.loss_and_grads(batch, &r1).loss;
  const double b = m2.loss_and_grads(batch, &r2).loss;
  EXPECT_EQ(a, b);
  EXPECT_EQ(m1.params().grads(), m2.params().grads());
  EXPECT_EQ(m1.loss(batch, &r3), a);
}

TEST(Loss, GradientsPassFiniteDifferenceCheck) {
  EncoderConfig c = small_config();
  c.d_h = 4;
  c.d_v = 2;
  c.d_k = 2;
  c.d_ff = 3;
  c.dropout_rate = 0.1;
  c.gamma = 1.5;
  Model m(c, build_vocab(tiny_corpus(), 1));
  const auto batch = prepare_dataset(m, tiny_kb(), tiny_corpus());
  // Smaller steps hit cancellation noise on ~1e-9 gradient entries.
  const GradCheckReport r = check_model_gradients(m, std::span(batch).first(2), 3e-4, 1e-4, 11);
  for (const auto& t : r.tensors) EXPECT_LT(t.max_rel_error, 1e-4) << t.name;
  EXPECT_EQ(r.tensors.size(), m.params().size());
}

TEST(Loss, ResumedLossMatchesFullLoss) {
  EncoderConfig c = small_config();
  c.dropout_rate = 0.2;
  c.n_layers = 2;
  Model m(c, build_vocab(tiny_corpus(), 1));
  const auto batch = prepare_dataset(m, tiny_kb(), tiny_corpus());
  Rng first(5);
  const auto snap = m.snapshot(batch, &first);
  for (ParamId id = 0; id < m.params().size(); ++id) {
    const std::size_t stage = m.stage_of(id);
    Real& v = m.params().value(id)[0];
    const Real saved = v;
    v += 0.01;
    Rng rng(5);
    EXPECT_EQ(m.loss_from(batch, *snap, stage), m.loss(batch, &rng)) << m.params().name(id);
    v = saved;
  }
  EXPECT_EQ(m.stage_of(m.params().at("embed.positions")), 0u);
  EXPECT_EQ(m.stage_of(m.params().at("layers.1.ffn_in")), 2u);
  EXPECT_EQ(m.stage_of(m.params().at("classifier_bias")), 3u);
  const auto inference = m.snapshot(batch);
  EXPECT_EQ(m.loss_from(batch, *inference, 3), m.loss(batch));
}

TEST(Knowledge, EmptyKbMatchesZeroGamma) {
  const Model m(small_config(), build_vocab(tiny_corpus(), 1));
  EncoderConfig c0 = small_config();
  c0.gamma = 0.0;
  const Model m0(c0, build_vocab(tiny_corpus(), 1));
  for (const Example& ex : tiny_corpus().examples) {
    const auto a = m.predict(prepare_example(m, LexicalKB{}, ex));
    const auto b = m0.predict(prepare_example(m0, tiny_kb(), ex));
    EXPECT_LE(max_abs_diff(a.probs, b.probs), 1e-12);
  }
}

TEST(Knowledge, NeutralPriorMakesBothPathsIdentical) {
  // Boost with kappa = 0 fills every entry with 1.
  EncoderConfig c = small_config();
  c.kappa = 0.0;
  const Model m(c, build_vocab(tiny_corpus(), 1));
  for (const Example& e : tiny_corpus().examples) {
    const EncodedExample ex = prepare_example(m, tiny_kb(), e);
    const Matrix h0 = m.embed(ex.pair);
    const PriorMatrix p = m.prior_from_hidden(h0, ex);
    for (double v : p.k.data()) EXPECT_EQ(v, 1.0);
    EXPECT_LE(max_abs_diff(m.encode(h0, p), m.encode(h0, PriorMatrix::neutral(h0.rows()))), 1e-12);
    const InspectionResult r = m.inspect(ex);
    EXPECT_EQ(r.layers.size(), c.n_layers);
  }
}

TEST(Knowledge, RelationChangesPrediction) {
  const Model m(small_config(), build_vocab(tiny_corpus(), 1));
  const Example ex{0, "soup is hot", "soup is cold"};
  const auto with = m.predict(prepare_example(m, tiny_kb(), ex));
  const auto without = m.predict(prepare_example(m, LexicalKB{}, ex));
  EXPECT_GT(max_abs_diff(with.probs, without.probs), 0.0);
}

TEST(PrepareExample, IndicatorsFromLemmas) {
  const Model m(small_config(), build_vocab(tiny_corpus(), 1));
  const EncodedExample ex = prepare_example(m, tiny_kb(), {0, "soup is hot", "soup is cold"});
  EXPECT_EQ(ex.indicators.rows(), 3u);
  EXPECT_EQ(ex.indicators.cols(), 3u);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(ex.indicators(i, j), (i == 2 && j == 2) ? 1.0 : 0.0);
}
