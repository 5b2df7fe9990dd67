#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kinfuse/kattn.hpp"
#include "kinfuse/lexkb.hpp"
#include "kinfuse/numcore.hpp"
#include "kinfuse/prior.hpp"
#include "kinfuse/textio.hpp"

namespace kinfuse {

struct EncoderConfig {
  std::size_t d_h = 32;
  std::size_t d_k = 16;
  std::size_t d_v = 16;
  std::size_t n_heads = 2;
  std::size_t n_layers = 2;
  std::size_t d_ff = 64;
  std::size_t n_classes = 2;
  std::size_t max_a = kDefaultMaxLen;
  std::size_t max_b = kDefaultMaxLen;
  Real gamma = 1.0;
  PriorMode prior_mode = PriorMode::Boost;
  Real kappa = 1.0;
  Real dropout_rate = 0.1;
  std::uint64_t seed = 0;

  std::size_t max_len() const noexcept { return max_a + max_b + 3; }
  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline constexpr Real kLayerNormEps = 1e-5;

/// Row-wise LayerNorm; `xhat` and `inv_std` are filled for the backward pass
/// when non-null.
Matrix layer_norm(const Matrix& x, const Matrix& scale, const Matrix& offset,
                  Matrix* xhat = nullptr, std::vector<Real>* inv_std = nullptr);
/// Returns dL/dx and accumulates scale/offset gradients.
Matrix layer_norm_backward(const Matrix& xhat, const std::vector<Real>& inv_std,
                           const Matrix& scale, const Matrix& dy, Matrix& g_scale,
                           Matrix& g_offset);

/// A pair ready for the model: token ids plus the cross-text relation
/// indicators looked up once.
struct EncodedExample {
  TokenizedPair pair;
  Matrix indicators;  ///< m×n
  int label = 0;
};

class Model;

EncodedExample prepare_example(const Model& model, const LexicalKB& kb, const Example& ex);
std::vector<EncodedExample> prepare_dataset(const Model& model, const LexicalKB& kb,
                                            const LabeledDataset& data);

struct ClassifierOutput {
  Matrix logits;  ///< 1×n_classes
  Matrix probs;   ///< 1×n_classes
};

/// Per-layer, per-head gate traces plus the prediction for one pair.
struct InspectionResult {
  std::vector<std::vector<FusionTrace>> layers;
  ClassifierOutput output;
  PriorMatrix prior;
  /// Mean filtration gate over every layer, head and token.
  Real mean_g_filter() const;
};

struct LossResult {
  Real loss = 0.0;
  std::size_t correct = 0;
};

/// Embeddings, knowledge-attention blocks and a [CLS] classifier with named
/// parameters in a ParamStore.
class Model {
 public:
  Model(EncoderConfig config, Vocab vocab);
  /// Wraps existing parameters (checkpoint load). Names and shapes are
  /// validated against the config.
  Model(EncoderConfig config, Vocab vocab, ParamStore params);

  const EncoderConfig& config() const noexcept { return config_; }
  EncoderConfig& config() noexcept { return config_; }
  const Vocab& vocab() const noexcept { return vocab_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  TokenizedPair encode_text(std::string_view text_a, std::string_view text_b) const;

  /// Token + position embeddings. Dropout is applied when `dropout_rng` is
  /// non-null and the configured rate is positive.
  Matrix embed(const TokenizedPair& pair, Rng* dropout_rng = nullptr) const;
  PriorMatrix prior_from_hidden(const Matrix& h0, const EncodedExample& ex) const;
  /// Inference-mode pass through all blocks.
  Matrix encode(const Matrix& h0, const PriorMatrix& prior) const;
  ClassifierOutput classify(const Matrix& h) const;

  ClassifierOutput predict(const EncodedExample& ex) const;
  std::vector<ClassifierOutput> predict_batch(std::span<const EncodedExample> batch) const;
  InspectionResult inspect(const EncodedExample& ex) const;

  /// Mean cross-entropy over the batch; overwrites params().grad(...) with
  /// dLoss/dθ. Throws NumericError naming the batch index of a non-finite
  /// loss.
  LossResult loss_and_grads(std::span<const EncodedExample> batch, Rng* dropout_rng = nullptr);
  /// Loss only. Inference mode unless `dropout_rng` is given; a freshly
  /// seeded generator reproduces the masks of loss_and_grads exactly.
  Real loss(std::span<const EncodedExample> batch, Rng* dropout_rng = nullptr) const;

  /// Layer inputs, prior and generator states of one forward pass, so that a
  /// later loss can restart at a given stage.
  struct Snapshot;
  /// Stage 0 is the embedding; stage 1+l starts at layer l, and stage
  /// n_layers+1 at the classifier.
  std::shared_ptr<const Snapshot> snapshot(std::span<const EncodedExample> batch,
                                           Rng* dropout_rng = nullptr) const;
  /// Same value as loss() as long as no parameter before `stage` changed
  /// since the snapshot was taken.
  Real loss_from(std::span<const EncodedExample> batch, const Snapshot& snap,
                 std::size_t stage) const;
  /// Earliest stage that reads parameter `id`.
  std::size_t stage_of(ParamId id) const;

  struct LayerIds {
    std::vector<std::vector<ParamId>> heads;  // per head, HeadParams::visit order
    ParamId attn_proj, attn_proj_bias;
    ParamId norm1_scale, norm1_offset;
    ParamId ffn_in, ffn_in_bias, ffn_out, ffn_out_bias;
    ParamId norm2_scale, norm2_offset;
  };

 private:
  void register_params(ParamStore& store, Rng* rng) const;
  void resolve_ids();

  EncoderConfig config_;
  Vocab vocab_;
  ParamStore params_;
  ParamId tok_emb_ = 0, pos_emb_ = 0, cls_w_ = 0, cls_b_ = 0;
  std::vector<LayerIds> layers_;
};

/// Central-difference check of loss_and_grads over every parameter. With a
/// dropout seed, each evaluation replays the same masks; without one dropout
/// is off.
/// With `extended`, entries that fail in 64-bit are re-differenced by a long
/// double build of the same model; the analytic side stays 64-bit.
GradCheckReport check_model_gradients(Model& model, std::span<const EncodedExample> batch,
                                      Real eps, Real tol,
                                      std::optional<std::uint64_t> dropout_seed = std::nullopt,
                                      bool extended = true);

/// JSON {format_version, config, vocab, params{name:{shape,data}}}, params in
/// store order with round-trip precision.
void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_to_string(const Model& model);
Model checkpoint_from_string(const std::string& text);

}  // namespace kinfuse
