#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kinfuse/encoder.hpp"
#include "kinfuse/numcore.hpp"

namespace kinfuse {

struct TrainConfig {
  Real rho = 0.95;
  Real epsilon = 1e-8;
  Real adadelta_lr = 0.5;
  Real sgd_lr = 3e-4;
  std::size_t batch_size = 16;
  std::size_t plateau_steps = 300;
  Real l2_full_ratio = 0.9e-5;
  std::size_t l2_full_step = 1000;
  std::size_t max_steps = 2000;
  std::size_t eval_every = 100;
  std::uint64_t seed = 0;
  /// End the run once validation accuracy reaches 1.0; later steps cannot
  /// change the best checkpoint.
  bool stop_at_perfect_val = false;

  /// Schedule constants at their full published scale.
  static TrainConfig full_scale_preset();
  /// Throws std::invalid_argument unless every field is positive and rho < 1.
  /// max_steps may be zero.
  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

enum class Phase { Adadelta, Sgd };
std::string_view to_string(Phase p) noexcept;

struct OptState {
  GradBuffer sq_grad;    ///< E[g²]
  GradBuffer sq_update;  ///< E[Δ²]
  Phase phase = Phase::Adadelta;
  Real best_val_acc = -1.0;
  std::size_t last_improvement = 0;
  std::size_t step = 0;
  std::optional<std::size_t> switched_at;

  static OptState for_params(const ParamStore& params);
};

/// σ((t − full_step/2)·8 / (full_step/2)) · full_ratio
Real l2_ratio(Real t, Real full_step, Real full_ratio);

/// Adadelta update from params.grad(...), then decay by 1 − l2_ratio(t).
/// Throws NumericError if any updated value is non-finite.
void adadelta_step(ParamStore& params, OptState& opt, const TrainConfig& cfg, std::size_t t);
/// Plain SGD at cfg.sgd_lr followed by the same decay.
void sgd_step(ParamStore& params, const TrainConfig& cfg, std::size_t t);

struct Metrics {
  Real accuracy = 0.0;
  Real mean_loss = 0.0;
  std::vector<std::size_t> support;  ///< gold count per class
  std::vector<std::size_t> correct;  ///< correct predictions per class
  std::size_t total = 0;
  friend bool operator==(const Metrics&, const Metrics&) = default;
};

/// Inference mode, deterministic. Throws DataError on an empty dataset.
Metrics evaluate(const Model& model, std::span<const EncodedExample> data);

struct LogRecord {
  std::size_t step = 0;
  Real train_loss = 0.0;  ///< mean over steps since the previous record
  Real val_acc = 0.0;
  Real val_loss = 0.0;
  Phase phase = Phase::Adadelta;
  Real l2_ratio = 0.0;
};

std::string to_jsonl(const LogRecord& r);
std::string to_json_string(const Metrics& m);

struct TrainHooks {
  /// Called after gradients are computed and before the update.
  std::function<void(ParamStore&, std::size_t step)> on_grads;
  /// Called for every log record as it is produced.
  std::function<void(const LogRecord&)> on_record;
};

struct TrainResult {
  Model best;  ///< parameters at the best validation accuracy
  std::size_t best_step = 0;
  Real best_val_acc = 0.0;
  std::vector<LogRecord> log;
  OptState state;
};

/// Mini-batch training with per-epoch seeded shuffling. `model` is left at
/// its final parameters. The initial parameters are evaluated at step 0 and
/// count as the first best.
TrainResult train(Model& model, std::span<const EncodedExample> train_set,
                  std::span<const EncodedExample> val_set, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

}  // namespace kinfuse
