#pragma once

// Shared training machinery: MPJPE / cross-entropy losses, cosine
// annealing, AdamW, the deterministic mini-batch loop, and the central
// finite-difference gradient checker.
//
// A trainable model exposes:
//   ParamStore<S>& params();
//   ad::Var<S> loss(ad::Tape<S>&, const Sample&);
//   double validation_objective(const std::vector<Sample>&);  // lower = better

#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "egopose/metrics.hpp"
#include "egopose/tape.hpp"

namespace egopose::training {

/// Paper-mode defaults are batch 64 / 70 epochs / lr 1e-4; the desk-scale
/// defaults here keep runs in CPU minutes. lr and optimizer settings
/// follow the hand-pose recipe (AdamW, cosine annealing from 1e-4).
struct TrainConfig {
  int batch_size = 16;
  double base_lr = 1e-4;
  int epochs = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double adam_eps = 1e-8;
  uint64_t seed = 0;
  int precision_bits = 64;  // 32 or 64

  void validate() const {
    if (batch_size < 1 || epochs < 1 || !(base_lr > 0.0))
      throw InvalidInput("batch_size, epochs and base_lr must be positive");
    if (precision_bits != 32 && precision_bits != 64)
      throw InvalidInput("precision must be 32 or 64 bits");
  }
};

struct TrainHistory {
  std::vector<double> step_lr;
  std::vector<double> step_loss;
  std::vector<double> epoch_val;
  int best_epoch = -1;
  double best_val = std::numeric_limits<double>::infinity();
  double wall_clock_s = 0.0;
};

/// Cosine annealing without warmup: base_lr at step 0, zero at total_steps.
inline double cosine_lr(long step, long total_steps, double base_lr) {
  if (total_steps < 1) throw RangeError("total_steps must be >= 1");
  if (step < 0 || step > total_steps)
    throw RangeError("step " + std::to_string(step) + " outside [0, " +
                     std::to_string(total_steps) + "]");
  return base_lr * 0.5 *
         (1.0 + std::cos(M_PI * static_cast<double>(step) /
                         static_cast<double>(total_steps)));
}

/// Batch MPJPE loss on plain poses; definitionally the mean of the metric.
template <class S>
S mpjpe_loss(const std::vector<Pose3<S>>& preds,
             const std::vector<Pose3<S>>& gts) {
  if (preds.size() != gts.size() || preds.empty())
    throw ShapeError("mpjpe_loss: batch size mismatch or empty");
  S total = S(0);
  for (size_t i = 0; i < preds.size(); ++i) total += mpjpe(preds[i], gts[i]);
  return total / S(preds.size());
}

/// Batch cross entropy on plain logit rows (no tape); mean NLL.
template <class S>
S cross_entropy_loss(const Mat<S>& logits, const std::vector<int>& labels) {
  ad::Tape<S> t;
  return ad::softmax_cross_entropy(t, t.constant(logits), labels)->value(0, 0);
}

/// Decoupled-weight-decay Adam. With a zero gradient the update is exactly
/// -lr * weight_decay * theta.
template <class S>
class AdamW {
 public:
  AdamW(ad::ParamStore<S>& store, const TrainConfig& cfg)
      : store_(store), cfg_(cfg) {
    for (auto* p : store.all()) {
      m_.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step(double lr) {
    ++t_;
    const S b1 = static_cast<S>(cfg_.beta1);
    const S b2 = static_cast<S>(cfg_.beta2);
    const S bc1 = S(1) - static_cast<S>(std::pow(cfg_.beta1, t_));
    const S bc2 = S(1) - static_cast<S>(std::pow(cfg_.beta2, t_));
    const S eps = static_cast<S>(cfg_.adam_eps);
    const S wd = static_cast<S>(cfg_.weight_decay);
    const S lrs = static_cast<S>(lr);
    const auto& params = store_.all();
    for (size_t i = 0; i < params.size(); ++i) {
      auto* p = params[i];
      const Mat<S>& g = p->grad;
      m_[i] = b1 * m_[i] + (S(1) - b1) * g;
      v_[i] = (b2 * v_[i].array() + (S(1) - b2) * g.array().square()).matrix();
      Mat<S> update =
          ((m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps))
              .matrix();
      p->value -= lrs * (update + wd * p->value);
    }
  }

 private:
  ad::ParamStore<S>& store_;
  TrainConfig cfg_;
  std::vector<Mat<S>> m_, v_;
  long t_ = 0;
};

template <class S>
using WeightSnapshot = std::map<std::string, Mat<S>>;

template <class S>
WeightSnapshot<S> snapshot(const ad::ParamStore<S>& store) {
  WeightSnapshot<S> snap;
  for (const auto* p : store.all()) snap.emplace(p->name, p->value);
  return snap;
}

template <class S>
void restore(ad::ParamStore<S>& store, const WeightSnapshot<S>& snap) {
  for (auto* p : store.all()) {
    auto it = snap.find(p->name);
    if (it == snap.end())
      throw InvalidInput("snapshot missing parameter " + p->name);
    if (it->second.rows() != p->value.rows() ||
        it->second.cols() != p->value.cols())
      throw ShapeError("snapshot shape mismatch for " + p->name);
    p->value = it->second;
  }
}

template <class S>
struct TrainResult {
  WeightSnapshot<S> best_weights;
  WeightSnapshot<S> final_weights;
  TrainHistory history;
};

/// Deterministic mini-batch loop: seeded shuffles, AdamW with cosine
/// annealing, per-epoch validation, best-checkpoint tracking. Throws
/// DivergenceError (with the step index) on a non-finite loss.
template <class S, class Model, class Sample>
TrainResult<S> train(Model& model, const std::vector<Sample>& train_set,
                     const std::vector<Sample>& val_set,
                     const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty()) throw InvalidInput("empty training set");
  const auto t_start = std::chrono::steady_clock::now();

  const long batches_per_epoch =
      (static_cast<long>(train_set.size()) + cfg.batch_size - 1) /
      cfg.batch_size;
  const long total_steps = batches_per_epoch * cfg.epochs;

  TrainResult<S> result;
  AdamW<S> opt(model.params(), cfg);
  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(Rng::mix(cfg.seed, static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    for (long b = 0; b < batches_per_epoch; ++b) {
      const size_t lo = static_cast<size_t>(b) * cfg.batch_size;
      const size_t hi = std::min(lo + cfg.batch_size, train_set.size());

      ad::Tape<S> tape;
      std::vector<ad::Var<S>> losses;
      for (size_t i = lo; i < hi; ++i)
        losses.push_back(model.loss(tape, train_set[order[i]]));
      ad::Var<S> total = losses[0];
      for (size_t i = 1; i < losses.size(); ++i)
        total = ad::add(tape, total, losses[i]);
      ad::Var<S> mean = ad::scale(tape, total, S(1) / S(losses.size()));

      const double loss_value = static_cast<double>(mean->value(0, 0));
      if (!std::isfinite(loss_value))
        throw DivergenceError("non-finite loss at step " +
                              std::to_string(step));

      model.params().zero_grads();
      tape.backward(mean);
      const double lr = cosine_lr(step, total_steps, cfg.base_lr);
      opt.step(lr);

      result.history.step_lr.push_back(lr);
      result.history.step_loss.push_back(loss_value);
      ++step;
    }

    double val = 0.0;
    if (!val_set.empty()) {
      val = model.validation_objective(val_set);
      result.history.epoch_val.push_back(val);
    }
    if (val_set.empty() || val < result.history.best_val) {
      result.history.best_val = val_set.empty()
                                    ? result.history.step_loss.back()
                                    : val;
      result.history.best_epoch = epoch;
      result.best_weights = snapshot(model.params());
    }
  }

  result.final_weights = snapshot(model.params());
  if (result.best_weights.empty()) result.best_weights = result.final_weights;
  result.history.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return result;
}

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_index = -1;
  size_t checked = 0;
};

/// Central finite differences on every parameter scalar (or a seeded
/// subsample of at least `min_subsample` for larger models) against the
/// analytic gradient of model.loss on one sample.
template <class S, class Model, class Sample>
GradCheckReport grad_check(Model& model, const Sample& sample,
                           double epsilon = 1e-5, size_t max_params = 0,
                           uint64_t subsample_seed = 0,
                           size_t min_subsample = 200) {
  auto forward_value = [&]() -> double {
    ad::Tape<S> tape;
    return static_cast<double>(model.loss(tape, sample)->value(0, 0));
  };

  model.params().zero_grads();
  {
    ad::Tape<S> tape;
    ad::Var<S> loss = model.loss(tape, sample);
    tape.backward(loss);
  }

  struct Entry {
    ad::Param<S>* p;
    int index;
  };
  std::vector<Entry> entries;
  for (auto* p : model.params().all())
    for (int i = 0; i < p->value.size(); ++i) entries.push_back({p, i});

  if (max_params > 0 && entries.size() > max_params) {
    const size_t keep = std::max(max_params, min_subsample);
    Rng rng(Rng::mix(subsample_seed, 0x6c));
    rng.shuffle(entries);
    entries.resize(keep);
  }

  GradCheckReport report;
  report.checked = entries.size();
  for (const auto& e : entries) {
    S* cell = e.p->value.data() + e.index;
    const S keep = *cell;
    const double h = epsilon * std::max(1.0, std::abs(double(keep)));
    *cell = keep + static_cast<S>(h);
    const double hi = forward_value();
    *cell = keep - static_cast<S>(h);
    const double lo = forward_value();
    *cell = keep;
    const double numeric = (hi - lo) / (2.0 * h);
    const double analytic = static_cast<double>(e.p->grad.data()[e.index]);
    const double rel = std::abs(analytic - numeric) /
                       std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_param = e.p->name;
      report.worst_index = e.index;
    }
  }
  return report;
}

}  // namespace egopose::training
