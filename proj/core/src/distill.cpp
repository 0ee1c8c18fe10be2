#include "sdprune/distill.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sdprune/error.hpp"

namespace sdprune {

void DistillConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("distillation temperature must be > 0, got " +
                      std::to_string(temperature));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("alpha must lie in [0, 1], got " +
                      std::to_string(alpha));
  }
  if (!(beta >= 0.0 && beta <= 1.0)) {
    throw ConfigError("beta must lie in [0, 1], got " + std::to_string(beta));
  }
  if (!(epsilon > 0.0)) {
    throw ConfigError("epsilon must be > 0, got " + std::to_string(epsilon));
  }
}

std::vector<std::string> DistillConfig::warnings() const {
  std::vector<std::string> out;
  if (temperature > 0.0 && temperature <= 1.0) {
    std::ostringstream os;
    os << "temperature " << temperature
       << " does not soften the teacher distribution (T > 1 recommended)";
    out.push_back(os.str());
  }
  return out;
}

namespace {

void require_logits(const Tensor& z, const char* op) {
  if (z.rank() != 2 || z.dim(1) < 2) {
    throw DimensionError(std::string(op) + ": expected [B x C] logits with " +
                         "C >= 2, got " + shape_to_string(z.shape()));
  }
}

}  // namespace

Tensor normalize_logits(const Tensor& z, double epsilon, Tape* tape) {
  require_logits(z, "normalize_logits");
  const std::size_t b = z.dim(0), c = z.dim(1);
  const auto in = z.data();
  std::vector<double> out(b * c), sigma(b);
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = in.data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    sigma[i] = std::sqrt(var / static_cast<double>(c));
    const double denom = sigma[i] + epsilon;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (row[j] - mean) / denom;
  }
  const bool grad = tape != nullptr && z.requires_grad();
  Tensor result(z.shape(), std::move(out), z.precision());
  result.check_finite("normalize_logits");
  if (grad) {
    result.set_requires_grad(true);
    tape->record(result, [z = z, result, sigma = std::move(sigma), epsilon, b = b, c]() mutable {
      // dy_j/dz_i = (delta_ij - 1/C)/s - (z_j - mu)(z_i - mu) / (C sigma s^2)
      // with s = sigma + eps. The second term vanishes when sigma == 0.
      const auto g = result.grad();
      const auto in = z.data();
      auto gz = z.mutable_grad();
      for (std::size_t i = 0; i < b; ++i) {
        const double* row = in.data() + i * c;
        const double* grow = g.data() + i * c;
        double mean = 0.0, gmean = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          mean += row[j];
          gmean += grow[j];
        }
        mean /= static_cast<double>(c);
        gmean /= static_cast<double>(c);
        const double s = sigma[i] + epsilon;
        double cross = 0.0;
        for (std::size_t j = 0; j < c; ++j) cross += grow[j] * (row[j] - mean);
        const double k = sigma[i] > 0.0
                             ? cross / (static_cast<double>(c) * sigma[i] * s * s)
                             : 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          gz[i * c + j] += (grow[j] - gmean) / s - k * (row[j] - mean);
        }
      }
    });
  }
  return result;
}

Tensor temperature_scale(const Tensor& z, double temperature, Tape* tape) {
  if (!(temperature > 0.0)) {
    throw ConfigError("temperature must be > 0, got " +
                      std::to_string(temperature));
  }
  return scale(z, 1.0 / temperature, tape);
}

Tensor blended_kl(const Tensor& student_scaled, const Tensor& teacher_scaled,
                  double beta, Tape* tape) {
  require_logits(student_scaled, "blended_kl");
  if (student_scaled.shape() != teacher_scaled.shape()) {
    throw DimensionError("blended_kl: student " +
                         shape_to_string(student_scaled.shape()) +
                         " vs teacher " +
                         shape_to_string(teacher_scaled.shape()));
  }
  const std::size_t b = student_scaled.dim(0), c = student_scaled.dim(1);
  const Tensor log_ps = log_softmax(student_scaled);
  const Tensor log_pt = log_softmax(teacher_scaled);
  const auto ls = log_ps.data();
  const auto lt = log_pt.data();
  std::vector<double> reverse(b);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double fwd = 0.0, rev = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t k = i * c + j;
      const double diff = ls[k] - lt[k];
      fwd -= std::exp(lt[k]) * diff;
      rev += std::exp(ls[k]) * diff;
    }
    reverse[i] = rev;
    total += beta * rev + (1.0 - beta) * fwd;
  }
  total /= static_cast<double>(b);
  // Clamp rounding noise below zero.
  total = std::max(total, 0.0);

  const bool grad = tape != nullptr && student_scaled.requires_grad();
  Tensor result({1}, {total}, student_scaled.precision());
  result.check_finite("blended_kl");
  if (grad) {
    result.set_requires_grad(true);
    tape->record(result, [u = student_scaled, result, log_ps, log_pt, reverse = std::move(reverse), beta, b = b, c]() mutable {
      // d fwd / du_i = p_s(i) - p_t(i)
      // d rev / du_i = p_s(i) * (log p_s(i) - log p_t(i) - rev)
      const double g = result.grad()[0] / static_cast<double>(b);
      const auto ls = log_ps.data();
      const auto lt = log_pt.data();
      auto gu = u.mutable_grad();
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const std::size_t k = i * c + j;
          const double ps = std::exp(ls[k]);
          const double pt = std::exp(lt[k]);
          const double d_fwd = ps - pt;
          const double d_rev = ps * (ls[k] - lt[k] - reverse[i]);
          gu[k] += g * (beta * d_rev + (1.0 - beta) * d_fwd);
        }
      }
    });
  }
  return result;
}

Tensor ca_kld(const Tensor& student_logits, const Tensor& teacher_logits,
              const DistillConfig& cfg, Tape* tape) {
  cfg.validate();
  require_logits(student_logits, "ca_kld");
  if (student_logits.shape() != teacher_logits.shape()) {
    throw DimensionError("ca_kld: student logits " +
                         shape_to_string(student_logits.shape()) +
                         " vs teacher logits " +
                         shape_to_string(teacher_logits.shape()));
  }
  const double t = cfg.temperature;
  const Tensor teacher = temperature_scale(
      normalize_logits(teacher_logits, cfg.epsilon), t);
  const Tensor student = temperature_scale(
      normalize_logits(student_logits, cfg.epsilon, tape), t, tape);
  return scale(blended_kl(student, teacher, cfg.beta, tape), t * t, tape);
}

Tensor total_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                  std::span<const int> labels, const DistillConfig& cfg,
                  Tape* tape) {
  const Tensor kd = ca_kld(student_logits, teacher_logits, cfg, tape);
  const Tensor ce = cross_entropy(student_logits, labels, tape);
  return add(scale(kd, cfg.alpha, tape), scale(ce, 1.0 - cfg.alpha, tape),
             tape);
}

}  // namespace sdprune
