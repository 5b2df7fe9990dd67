#include "kinfuse/trainer.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "kinfuse/error.hpp"
#include "kinfuse/serialize.hpp"

namespace kinfuse {

TrainConfig TrainConfig::full_scale_preset() {
  TrainConfig c;
  c.plateau_steps = 30000;
  c.l2_full_step = 100000;
  c.max_steps = 200000;
  c.eval_every = 1000;
  return c;
}

void TrainConfig::validate() const {
  const auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("TrainConfig: ") + what);
  };
  need(rho > 0.0 && rho < 1.0, "rho must be in (0,1)");
  need(epsilon > 0.0, "epsilon must be positive");
  need(adadelta_lr > 0.0 && sgd_lr > 0.0, "learning rates must be positive");
  need(batch_size > 0 && plateau_steps > 0 && eval_every > 0, "counts must be positive");
  need(l2_full_ratio > 0.0 && l2_full_step > 0, "l2 schedule must be positive");
}

std::string_view to_string(Phase p) noexcept { return p == Phase::Adadelta ? "adadelta" : "sgd"; }

OptState OptState::for_params(const ParamStore& params) {
  OptState s;
  s.sq_grad = params.zeros_like();
  s.sq_update = params.zeros_like();
  return s;
}

Real l2_ratio(Real t, Real full_step, Real full_ratio) {
  if (!(full_step > 0.0)) throw std::invalid_argument("l2_ratio: full_step must be positive");
  const Real half = full_step / 2.0;
  return sigmoid((t - half) * 8.0 / half) * full_ratio;
}

namespace {

void decay(ParamStore& params, Real ratio) {
  const Real keep = 1.0 - ratio;
  for (ParamId id = 0; id < params.size(); ++id) params.value(id) *= keep;
}

void check_finite(const ParamStore& params, const char* where) {
  for (ParamId id = 0; id < params.size(); ++id) {
    if (!params.value(id).all_finite()) {
      throw NumericError(std::string(where) + ": non-finite value in '" + params.name(id) + "'");
    }
  }
}

}  // namespace

void adadelta_step(ParamStore& params, OptState& opt, const TrainConfig& cfg, std::size_t t) {
  if (opt.sq_grad.size() != params.size()) opt = OptState::for_params(params);
  const Real rho = cfg.rho, eps = cfg.epsilon, lr = cfg.adadelta_lr;
  for (ParamId id = 0; id < params.size(); ++id) {
    Matrix& v = params.value(id);
    const Matrix& g = params.grad(id);
    Matrix& eg = opt.sq_grad[id];
    Matrix& ed = opt.sq_update[id];
    for (std::size_t k = 0; k < v.size(); ++k) {
      eg[k] = rho * eg[k] + (1.0 - rho) * g[k] * g[k];
      const Real delta = -lr * std::sqrt(ed[k] + eps) / std::sqrt(eg[k] + eps) * g[k];
      ed[k] = rho * ed[k] + (1.0 - rho) * delta * delta;
      v[k] += delta;
    }
  }
  decay(params, l2_ratio(static_cast<Real>(t), static_cast<Real>(cfg.l2_full_step),
                         cfg.l2_full_ratio));
  check_finite(params, "adadelta_step");
}

void sgd_step(ParamStore& params, const TrainConfig& cfg, std::size_t t) {
  for (ParamId id = 0; id < params.size(); ++id) {
    Matrix& v = params.value(id);
    const Matrix& g = params.grad(id);
    for (std::size_t k = 0; k < v.size(); ++k) v[k] -= cfg.sgd_lr * g[k];
  }
  decay(params, l2_ratio(static_cast<Real>(t), static_cast<Real>(cfg.l2_full_step),
                         cfg.l2_full_ratio));
  check_finite(params, "sgd_step");
}

Metrics evaluate(const Model& model, std::span<const EncodedExample> data) {
  if (data.empty()) throw DataError("evaluate: empty dataset");
  const std::size_t nc = model.config().n_classes;
  Metrics m;
  m.support.assign(nc, 0);
  m.correct.assign(nc, 0);
  const std::vector<ClassifierOutput> outs = model.predict_batch(data);
  Real loss = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto gold = static_cast<std::size_t>(data[i].label);
    const Matrix& p = outs[i].probs;
    std::size_t pred = 0;
    for (std::size_t k = 1; k < p.size(); ++k)
      if (p[k] > p[pred]) pred = k;
    ++m.support.at(gold);
    if (pred == gold) {
      ++m.correct[gold];
      ++hits;
    }
    loss -= std::log(p[gold]);
  }
  m.total = data.size();
  m.accuracy = static_cast<Real>(hits) / static_cast<Real>(data.size());
  m.mean_loss = loss / static_cast<Real>(data.size());
  return m;
}

std::string to_jsonl(const LogRecord& r) {
  return Json{{"step", r.step},
              {"loss", r.train_loss},
              {"val_acc", r.val_acc},
              {"val_loss", r.val_loss},
              {"phase", std::string(to_string(r.phase))},
              {"l2_ratio", r.l2_ratio}}
      .dump();
}

std::string to_json_string(const Metrics& m) {
  return Json{{"accuracy", m.accuracy},
              {"mean_loss", m.mean_loss},
              {"total", m.total},
              {"support", m.support},
              {"correct", m.correct}}
      .dump();
}

TrainResult train(Model& model, std::span<const EncodedExample> train_set,
                  std::span<const EncodedExample> val_set, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  cfg.validate();
  if (train_set.empty()) throw DataError("train: empty training split");
  if (val_set.empty()) throw DataError("train: empty validation split");

  TrainResult res{model, 0, 0.0, {}, OptState::for_params(model.params())};
  if (cfg.max_steps == 0) return res;

  OptState& opt = res.state;
  opt.best_val_acc = evaluate(model, val_set).accuracy;
  res.best_val_acc = opt.best_val_acc;

  Rng order_rng(cfg.seed);
  Rng dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  order_rng.shuffle(order);
  std::size_t cursor = 0;

  std::vector<EncodedExample> batch;
  Real loss_sum = 0.0;
  std::size_t loss_count = 0;
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    batch.clear();
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(train_set[order[cursor++]]);
    }
    const LossResult lr = model.loss_and_grads(batch, &dropout_rng);
    loss_sum += lr.loss;
    ++loss_count;
    if (hooks.on_grads) hooks.on_grads(model.params(), step);

    if (opt.phase == Phase::Adadelta) {
      adadelta_step(model.params(), opt, cfg, step);
    } else {
      sgd_step(model.params(), cfg, step);
    }
    opt.step = step;

    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      const Metrics val = evaluate(model, val_set);
      if (val.accuracy > opt.best_val_acc) {
        opt.best_val_acc = val.accuracy;
        opt.last_improvement = step;
        res.best = model;
        res.best_step = step;
        res.best_val_acc = val.accuracy;
      }
      LogRecord rec{step,
                    loss_sum / static_cast<Real>(loss_count),
                    val.accuracy,
                    val.mean_loss,
                    opt.phase,
                    l2_ratio(static_cast<Real>(step), static_cast<Real>(cfg.l2_full_step),
                             cfg.l2_full_ratio)};
      loss_sum = 0.0;
      loss_count = 0;
      if (hooks.on_record) hooks.on_record(rec);
      res.log.push_back(rec);
      if (cfg.stop_at_perfect_val && opt.best_val_acc >= 1.0) break;
    }

    if (opt.phase == Phase::Adadelta && step - opt.last_improvement >= cfg.plateau_steps) {
      opt.phase = Phase::Sgd;
      opt.switched_at = step;
    }
  }
  return res;
}

}  // namespace kinfuse
