#pragma once

#include <span>
#include <string>
#include <vector>

#include "sdprune/autodiff.hpp"
#include "sdprune/tensor.hpp"

namespace sdprune {

/// Hyperparameters of the context-aware distillation objective.
struct DistillConfig {
  double temperature = 5.0;
  // Weight of the distillation term against cross-entropy.
  double alpha = 0.7;
  // Weight of reverse KL(P_S || P_T); forward KL gets 1 - beta.
  double beta = 0.5;
  // Added to the per-row standard deviation when normalizing logits.
  double epsilon = 1e-6;

  // Throws ConfigError on T <= 0, alpha or beta outside [0, 1], or
  // epsilon <= 0.
  void validate() const;
  // Non-fatal remarks about the configuration (for example T <= 1).
  std::vector<std::string> warnings() const;

  bool operator==(const DistillConfig&) const = default;
};

// Per row: (z - mean) / (population std + eps).
Tensor normalize_logits(const Tensor& z, double epsilon, Tape* tape = nullptr);

// Elementwise z / T. Throws ConfigError when T <= 0.
Tensor temperature_scale(const Tensor& z, double temperature,
                         Tape* tape = nullptr);

// Batch mean of beta * KL(P_S || P_T) + (1 - beta) * KL(P_T || P_S) where
// P = softmax of the given (already normalized and scaled) logits. The
// teacher side is treated as a constant. Shape [1].
Tensor blended_kl(const Tensor& student_scaled, const Tensor& teacher_scaled,
                  double beta, Tape* tape = nullptr);

// Full distillation term: normalize, divide by T, blended KL, times T^2.
// Teacher logits never receive a gradient.
Tensor ca_kld(const Tensor& student_logits, const Tensor& teacher_logits,
              const DistillConfig& cfg, Tape* tape = nullptr);

// alpha * ca_kld + (1 - alpha) * cross_entropy(raw student logits, labels).
Tensor total_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                  std::span<const int> labels, const DistillConfig& cfg,
                  Tape* tape = nullptr);

}  // namespace sdprune
