#include "sdprune/train.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

#include "sdprune/error.hpp"

namespace sdprune {

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(min_learning_rate > 0.0 && min_learning_rate <= learning_rate)) {
    throw ConfigError("min learning rate must lie in (0, learning rate]");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("momentum must lie in [0, 1)");
  }
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
}

double cosine_learning_rate(const OptimizerConfig& cfg, std::size_t epoch,
                            std::size_t total) {
  if (total <= 1) return cfg.learning_rate;
  const double progress =
      static_cast<double>(epoch) / static_cast<double>(total - 1);
  return cfg.min_learning_rate +
         0.5 * (cfg.learning_rate - cfg.min_learning_rate) *
             (1.0 + std::cos(std::numbers::pi * progress));
}

SgdMomentum::SgdMomentum(const Model& model, double momentum,
                         std::optional<PruneMask> mask)
    : momentum_(momentum), mask_(std::move(mask)) {
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("momentum must lie in [0, 1)");
  }
  if (mask_) check_mask_matches(model, *mask_);
  for (const auto& p : model.params()) {
    velocity_.push_back(
        {p.name, Tensor::zeros(p.value.shape(), p.value.precision())});
    per_param_mask_.push_back(mask_ && p.prunable ? mask_->find(p.name) : nullptr);
  }
}

void SgdMomentum::step(Model& model, double learning_rate) {
  auto& params = model.params();
  if (params.size() != velocity_.size()) {
    throw ContractError("optimizer was built for a different model");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& vel = velocity_[i].tensor;
    if (vel.shape() != p.value.shape()) {
      throw ContractError("velocity shape " + shape_to_string(vel.shape()) +
                          " does not match parameter \"" + p.name + "\" " +
                          shape_to_string(p.value.shape()));
    }
    const bool has_grad = p.value.has_grad();
    const auto g = p.value.grad();
    auto w = p.value.mutable_data();
    auto v = vel.mutable_data();
    const MaskTensor* m = per_param_mask_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (m != nullptr && !m->keep[j]) {
        v[j] = 0.0;
        continue;
      }
      const double gj = has_grad ? g[j] : 0.0;
      v[j] = momentum_ * v[j] + gj;
      w[j] -= learning_rate * v[j];
    }
    vel.quantize();
    p.value.quantize();
  }
}

bool EarlyStopping::update(std::size_t epoch, double val_acc, double val_loss,
                           const Model& model) {
  const bool better = !best_ || val_acc > best_acc_ ||
                      (val_acc == best_acc_ && val_loss < best_loss_);
  if (better) {
    best_acc_ = val_acc;
    best_loss_ = val_loss;
    best_epoch_ = epoch;
    best_ = model;
    since_ = 0;
  } else {
    ++since_;
  }
  return since_ >= patience_;
}

Tensor predict_logits(const Model& model, const Dataset& data,
                      std::size_t batch_size) {
  if (data.size() == 0) throw ContractError("empty dataset");
  const Dataset converted = data.inputs.precision() == model.precision()
                                ? data
                                : data.to(model.precision());
  std::vector<double> out;
  out.reserve(data.size() * static_cast<std::size_t>(model.class_count()));
  for (const auto& b : batches(converted, batch_size, 0, 0, false, false)) {
    const Tensor z = model.forward(b.inputs);
    out.insert(out.end(), z.data().begin(), z.data().end());
  }
  return Tensor({data.size(), static_cast<std::size_t>(model.class_count())},
                std::move(out), model.precision());
}

double evaluate(const Model& model, const Dataset& data,
                std::size_t batch_size) {
  if (data.size() == 0) throw ContractError("cannot evaluate on an empty dataset");
  const Tensor z = predict_logits(model, data, batch_size);
  const std::size_t c = z.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto row = z.data().subspan(i * c, c);
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (row[j] > row[best]) best = j;
    }
    correct += static_cast<int>(best) == data.labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double mean_cross_entropy(const Model& model, const Dataset& data,
                          std::size_t batch_size) {
  if (data.size() == 0) throw ContractError("empty dataset");
  const Tensor z = predict_logits(model, data, batch_size);
  return cross_entropy(z, data.labels).item();
}

TrainResult train(Model model, const Dataset& train_set, const Dataset& val_set,
                  const TrainSpec& spec, const MetricsCallback& on_epoch) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  const auto& opt = spec.optimizer;
  opt.validate();
  TrainResult result;
  if (opt.max_epochs == 0) {
    result.model = std::move(model);
    return result;
  }
  train_set.validate();
  val_set.validate();
  if (spec.loss == LossKind::Distill) {
    if (spec.teacher == nullptr) {
      throw ContractError("distillation training needs a teacher");
    }
    spec.distill.validate();
  }
  if (spec.mask) apply_mask(model, *spec.mask);

  const Dataset train_data = train_set.to(model.precision());
  Tensor teacher_logits;
  if (spec.loss == LossKind::Distill) {
    teacher_logits = predict_logits(*spec.teacher, train_data);
  }

  model.set_trainable(true);
  SgdMomentum optimizer(model, opt.momentum, spec.mask);
  EarlyStopping stopper(opt.patience);

  for (std::size_t epoch = 0; epoch < opt.max_epochs; ++epoch) {
    const double lr = cosine_learning_rate(opt, epoch, opt.max_epochs);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    std::size_t batch_index = 0;
    for (const auto& b : batches(train_data, opt.batch_size, spec.seed, epoch)) {
      Tape tape;
      model.zero_grads();
      Tensor loss;
      try {
        const Tensor logits = model.forward(b.inputs, &tape);
        if (spec.loss == LossKind::Distill) {
          loss = total_loss(logits, gather_rows(teacher_logits, b.indices),
                            b.labels, spec.distill, &tape);
        } else {
          loss = cross_entropy(logits, b.labels, &tape);
        }
        tape.backward(loss);
        optimizer.step(model, lr);
      } catch (const NumericalError& e) {
        throw NumericalError(spec.phase + ": training diverged at epoch " +
                             std::to_string(epoch + 1) + ", batch " +
                             std::to_string(batch_index) + " (" + e.what() + ")");
      }
      loss_sum += loss.item() * static_cast<double>(b.labels.size());
      seen += b.labels.size();
      ++batch_index;
    }
    model.clear_grads();

    EpochMetrics m;
    m.phase = spec.phase;
    m.epoch = epoch + 1;
    m.train_loss = loss_sum / static_cast<double>(seen);
    m.val_loss = mean_cross_entropy(model, val_set);
    m.val_acc = evaluate(model, val_set);
    m.sparsity = measure_sparsity(model);
    m.wall_clock_s = std::chrono::duration<double>(clock::now() - start).count();
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
    result.epochs_run = epoch + 1;

    if (opt.early_stopping) {
      if (stopper.update(epoch + 1, m.val_acc, m.val_loss, model)) break;
    }
  }

  if (opt.early_stopping && stopper.has_best()) {
    result.model = stopper.best_model();
    result.best_epoch = stopper.best_epoch();
  } else {
    result.model = std::move(model);
    result.best_epoch = result.epochs_run;
  }
  result.model.clear_grads();
  result.seconds = std::chrono::duration<double>(clock::now() - start).count();
  return result;
}

TrainResult train_supervised(Model model, const Dataset& train_set,
                             const Dataset& val_set, const OptimizerConfig& opt,
                             std::uint64_t seed, const MetricsCallback& on_epoch) {
  TrainSpec spec;
  spec.phase = "supervised";
  spec.optimizer = opt;
  spec.seed = seed;
  return train(std::move(model), train_set, val_set, spec, on_epoch);
}

TrainResult kd_finetune(Model student, const Model& teacher,
                        const Dataset& train_set, const Dataset& val_set,
                        const DistillConfig& cfg, const OptimizerConfig& opt,
                        std::uint64_t seed, const MetricsCallback& on_epoch) {
  TrainSpec spec;
  spec.phase = "distill";
  spec.loss = LossKind::Distill;
  spec.distill = cfg;
  spec.teacher = &teacher;
  spec.optimizer = opt;
  spec.seed = seed;
  return train(std::move(student), train_set, val_set, spec, on_epoch);
}

TrainResult retrain_plain(Model pruned, const PruneMask& mask,
                          const Dataset& train_set, const Dataset& val_set,
                          const OptimizerConfig& opt, std::uint64_t seed,
                          const MetricsCallback& on_epoch) {
  TrainSpec spec;
  spec.phase = "retrain-plain";
  spec.optimizer = opt;
  spec.mask = mask;
  spec.seed = seed;
  return train(std::move(pruned), train_set, val_set, spec, on_epoch);
}

TrainResult retrain_kd(Model pruned, const Model& teacher,
                       const PruneMask& mask, const Dataset& train_set,
                       const Dataset& val_set, const DistillConfig& cfg,
                       const OptimizerConfig& opt, std::uint64_t seed,
                       const MetricsCallback& on_epoch) {
  TrainSpec spec;
  spec.phase = "retrain-kd";
  spec.loss = LossKind::Distill;
  spec.distill = cfg;
  spec.teacher = &teacher;
  spec.optimizer = opt;
  spec.mask = mask;
  spec.seed = seed;
  return train(std::move(pruned), train_set, val_set, spec, on_epoch);
}

}  // namespace sdprune
