#include "nsfpn/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace nsfpn::train {

Var seg_loss(Var logits, const Tensor4& target, const LossConfig& cfg) {
  Var bce = ops::scale(ops::bce_with_logits(logits, target), cfg.bce_weight);
  Var soft = ops::scale(ops::soft_iou_loss(logits, target, cfg.iou_smooth), cfg.iou_weight);
  return ops::add(bce, soft);
}

void Adagrad::step(ParamStore& params) {
  if (accum_.empty()) {
    for (const Param& p : params) accum_.emplace_back(p.value.shape(), initial_accumulator_);
  }
  if (accum_.size() != params.size()) throw std::logic_error("Adagrad: parameter set changed between steps");
  std::size_t k = 0;
  for (Param& p : params) {
    Tensor4& acc = accum_[k++];
    double* v = p.value.data();
    const double* g = p.grad.data();
    double* a = acc.data();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      a[i] += g[i] * g[i];
      v[i] -= lr_ * g[i] / (std::sqrt(a[i]) + eps_);
    }
  }
  ++steps_;
}

Batch stack_batch(const irdata::Dataset& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("stack_batch: empty batch");
  const Shape s0 = data.at(indices[0]).image.shape();
  const int n = static_cast<int>(indices.size());
  Batch b{Tensor4(Shape{n, s0.c, s0.h, s0.w}), Tensor4(Shape{n, 1, s0.h, s0.w})};
  for (int i = 0; i < n; ++i) {
    const irdata::Sample& s = data.at(indices[i]);
    if (!(s.image.shape() == s0) || s.mask.height() != s0.h || s.mask.width() != s0.w) {
      throw ShapeError("stack_batch: sample " + s.name + " has shape " + s.image.shape().str() + ", expected " +
                       s0.str());
    }
    std::copy(s.image.plane(0, 0), s.image.plane(0, 0) + s0.c * s0.plane(), b.images.plane(i, 0));
    std::copy(s.mask.plane(0, 0), s.mask.plane(0, 0) + s0.plane(), b.masks.plane(i, 0));
  }
  return b;
}

double train_step(model::NsFpnModel& model, Adagrad& opt, const Batch& batch, const LossConfig& loss) {
  model.params().zero_grad();
  Tape tape;
  Var out = seg_loss(model.forward(tape.constant(batch.images)), batch.masks, loss);
  const double value = out.value().item();
  tape.backward(out);
  opt.step(model.params());
  return value;
}

double batch_loss(const model::NsFpnModel& model, const Batch& batch, const LossConfig& loss) {
  Tape tape;
  return seg_loss(model.forward(tape.constant(batch.images)), batch.masks, loss).value().item();
}

Tensor4 predict(const model::NsFpnModel& model, const Tensor4& images) {
  Tape tape;
  Tensor4 p = model.forward(tape.constant(images)).value();
  for (double& v : p.vec()) v = 1.0 / (1.0 + std::exp(-v));
  return p;
}

EvalResult evaluate(const model::NsFpnModel& model, const irdata::Dataset& data, const EvalConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("evaluate: dataset is empty");
  irdata::MetricAccumulator acc(cfg.match);
  EvalResult r;
  const std::size_t bs = static_cast<std::size_t>(std::max(1, cfg.batch_size));
  for (std::size_t start = 0; start < data.size(); start += bs) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + bs); ++i) idx.push_back(i);
    const Batch b = stack_batch(data, idx);
    const Tensor4 prob = predict(model, b.images);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const int bi = static_cast<int>(i);
      r.per_image.push_back(acc.add(irdata::binarize(prob, bi, cfg.threshold), irdata::binarize(b.masks, bi)));
    }
  }
  r.summary = acc.summary(cfg.fa_mode);
  return r;
}

std::vector<EpochLog> fit(model::NsFpnModel& model, const irdata::Dataset& train_set,
                          const irdata::Dataset& test_set, const TrainConfig& cfg,
                          const std::function<void(const EpochLog&)>& on_epoch) {
  if (train_set.empty()) throw std::invalid_argument("fit: training set is empty");
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw std::invalid_argument("fit: epochs and batch_size must be positive");
  Adagrad opt(cfg.lr, cfg.initial_accumulator);
  Rng rng(cfg.seed ^ 0x5eedf00dULL);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochLog> logs;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Fisher-Yates with an explicit draw so the permutation does not depend on the library.
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    double total = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + start,
                                         order.begin() + std::min(order.size(), start + cfg.batch_size));
      total += train_step(model, opt, stack_batch(train_set, idx), cfg.loss) * idx.size();
      seen += idx.size();
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = total / seen;
    const bool last = epoch == cfg.epochs;
    if (!test_set.empty() && (last || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0))) {
      log.evaluated = true;
      log.test = evaluate(model, test_set, cfg.eval).summary;
    }
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return logs;
}

}  // namespace nsfpn::train
