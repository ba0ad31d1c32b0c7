#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "nsfpn/irdata.hpp"
#include "nsfpn/model.hpp"

namespace nsfpn::train {

struct LossConfig {
  double bce_weight = 1.0;
  double iou_weight = 1.0;
  double iou_smooth = 1.0;
};

/// bce_weight * mean BCE(logits) + iou_weight * (1 - soft IoU(sigmoid(logits))).
Var seg_loss(Var logits, const Tensor4& target, const LossConfig& cfg = {});

/// Per-parameter learning rates lr / (sqrt(initial_accumulator + sum of squared gradients) + eps).
class Adagrad {
 public:
  explicit Adagrad(double lr = 0.01, double initial_accumulator = 0.0, double eps = 1e-10)
      : lr_(lr), initial_accumulator_(initial_accumulator), eps_(eps) {}
  void step(ParamStore& params);
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::size_t steps() const { return steps_; }

 private:
  double lr_;
  double initial_accumulator_;
  double eps_;
  std::size_t steps_ = 0;
  std::vector<Tensor4> accum_;
};

struct Batch {
  Tensor4 images;
  Tensor4 masks;
};
Batch stack_batch(const irdata::Dataset& data, const std::vector<std::size_t>& indices);

/// Forward, backward and one optimizer update. Returns the loss before the update.
/// Throws NonFiniteError naming the first non-finite value or parameter gradient.
double train_step(model::NsFpnModel& model, Adagrad& opt, const Batch& batch, const LossConfig& loss = {});

/// Loss of the current parameters on a batch, without touching gradients.
double batch_loss(const model::NsFpnModel& model, const Batch& batch, const LossConfig& loss = {});

/// Sigmoid probabilities B x 1 x H x W.
Tensor4 predict(const model::NsFpnModel& model, const Tensor4& images);

struct EvalConfig {
  double threshold = 0.5;
  irdata::MatchConfig match;
  irdata::FaMode fa_mode = irdata::FaMode::Pixels;
  int batch_size = 8;
};

struct EvalResult {
  irdata::SegMetrics summary;
  std::vector<irdata::SegMetrics> per_image;
};
EvalResult evaluate(const model::NsFpnModel& model, const irdata::Dataset& data, const EvalConfig& cfg = {});

struct TrainConfig {
  int epochs = 20;
  int batch_size = 8;
  double lr = 0.01;
  double initial_accumulator = 0.0;
  std::uint64_t seed = 0;
  /// Evaluate on the test set every this many epochs (and always after the last one).
  int eval_every = 1;
  LossConfig loss;
  EvalConfig eval;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  bool evaluated = false;
  irdata::SegMetrics test;
};

/// Shuffles with a generator seeded from cfg.seed; the model must already be initialized.
std::vector<EpochLog> fit(model::NsFpnModel& model, const irdata::Dataset& train_set,
                          const irdata::Dataset& test_set, const TrainConfig& cfg,
                          const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace nsfpn::train
