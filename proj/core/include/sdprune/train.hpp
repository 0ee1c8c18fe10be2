#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sdprune/data.hpp"
#include "sdprune/distill.hpp"
#include "sdprune/model.hpp"
#include "sdprune/pruning.hpp"

namespace sdprune {

struct OptimizerConfig {
  double learning_rate = 0.01;
  // Cosine decay floor reached at the last epoch.
  double min_learning_rate = 0.001;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 30;
  std::size_t patience = 5;
  bool early_stopping = true;

  void validate() const;
  bool operator==(const OptimizerConfig&) const = default;
};

// Learning rate for `epoch` (0-based) of `total` under cosine decay.
double cosine_learning_rate(const OptimizerConfig& cfg, std::size_t epoch,
                            std::size_t total);

/// Momentum SGD whose velocity and weight updates respect a fixed mask.
///
/// For a masked weight W with gradient g:
///   v <- momentum * (v * M) + g * M
///   W <- W - lr * v
/// Entries with M = 0 keep v = +0.0 exactly and their weight unchanged.
/// Parameters without a mask entry use plain momentum SGD.
class SgdMomentum {
 public:
  SgdMomentum(const Model& model, double momentum,
              std::optional<PruneMask> mask = std::nullopt);

  // Applies one update from the gradients currently stored on `model`.
  // Parameters without a gradient buffer are treated as having g = 0.
  void step(Model& model, double learning_rate);

  const NamedTensors& velocity() const { return velocity_; }
  NamedTensors& mutable_velocity() { return velocity_; }
  const std::optional<PruneMask>& mask() const { return mask_; }
  double momentum() const { return momentum_; }

 private:
  double momentum_;
  std::optional<PruneMask> mask_;
  NamedTensors velocity_;
  std::vector<const MaskTensor*> per_param_mask_;
};

/// Patience-based stopping on validation accuracy, ties broken by lower
/// validation loss. Holds a copy of the best model seen.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  // Returns true when training should halt after this epoch.
  bool update(std::size_t epoch, double val_acc, double val_loss,
              const Model& model);

  bool has_best() const { return best_.has_value(); }
  const Model& best_model() const { return *best_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_accuracy() const { return best_acc_; }
  std::size_t epochs_since_improvement() const { return since_; }

 private:
  std::size_t patience_;
  double best_acc_ = -1.0;
  double best_loss_ = 0.0;
  std::size_t best_epoch_ = 0;
  std::size_t since_ = 0;
  std::optional<Model> best_;
};

struct EpochMetrics {
  std::string phase;
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double sparsity = 0.0;
  double wall_clock_s = 0.0;  // cumulative within the phase
};

using MetricsCallback = std::function<void(const EpochMetrics&)>;

struct TrainResult {
  Model model;
  std::vector<EpochMetrics> history;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double seconds = 0.0;
};

enum class LossKind { CrossEntropy, Distill };

struct TrainSpec {
  std::string phase = "train";
  LossKind loss = LossKind::CrossEntropy;
  DistillConfig distill;
  // Required for LossKind::Distill. Used for inference only.
  const Model* teacher = nullptr;
  OptimizerConfig optimizer;
  // Fixed sparsity mask; when absent every parameter is trainable.
  std::optional<PruneMask> mask;
  // Drives the per-epoch batch order.
  std::uint64_t seed = 0;
};

// Shared training loop behind every phase below. With early stopping the
// returned model is the best-validation snapshot, otherwise the last one.
// max_epochs == 0 returns `model` unchanged.
TrainResult train(Model model, const Dataset& train_set, const Dataset& val_set,
                  const TrainSpec& spec, const MetricsCallback& on_epoch = {});

// Cross-entropy training from scratch (teacher, LTH warm-up and retraining).
TrainResult train_supervised(Model model, const Dataset& train_set,
                             const Dataset& val_set, const OptimizerConfig& opt,
                             std::uint64_t seed,
                             const MetricsCallback& on_epoch = {});

// Dense student trained on total_loss against a frozen teacher.
TrainResult kd_finetune(Model student, const Model& teacher,
                        const Dataset& train_set, const Dataset& val_set,
                        const DistillConfig& cfg, const OptimizerConfig& opt,
                        std::uint64_t seed, const MetricsCallback& on_epoch = {});

// Mask-preserving cross-entropy retraining of a pruned model.
TrainResult retrain_plain(Model pruned, const PruneMask& mask,
                          const Dataset& train_set, const Dataset& val_set,
                          const OptimizerConfig& opt, std::uint64_t seed,
                          const MetricsCallback& on_epoch = {});

// Mask-preserving retraining on total_loss against a frozen teacher.
TrainResult retrain_kd(Model pruned, const Model& teacher,
                       const PruneMask& mask, const Dataset& train_set,
                       const Dataset& val_set, const DistillConfig& cfg,
                       const OptimizerConfig& opt, std::uint64_t seed,
                       const MetricsCallback& on_epoch = {});

// Top-1 accuracy; argmax ties resolve to the lowest class index.
double evaluate(const Model& model, const Dataset& data,
                std::size_t batch_size = 256);

// Mean cross-entropy over a dataset.
double mean_cross_entropy(const Model& model, const Dataset& data,
                          std::size_t batch_size = 256);

// Logits for every sample, in dataset order, without gradient tracking.
Tensor predict_logits(const Model& model, const Dataset& data,
                      std::size_t batch_size = 256);

}  // namespace sdprune
