#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sdprune/data.hpp"
#include "sdprune/distill.hpp"
#include "sdprune/model.hpp"

namespace sdprune {

/// Running EMA of |W * dL/dW| for every prunable weight of a student.
///
/// accumulate() folds in one batch: I_t = gamma * I_{t-1} + (1 - gamma) * raw
/// with I_0 = 0. finalize() divides by (1 - gamma^t) once; after that the
/// state is frozen. At t = 1 the result is the raw score itself, bit for bit.
class ImportanceState {
 public:
  ImportanceState(const Model& student, double gamma = 0.9);

  // Reads the gradients currently stored on `student`. Weights with no
  // gradient buffer are skipped and counted in missing_gradients().
  void accumulate(const Model& student);
  // Folds in externally computed raw scores (same names and shapes).
  void accumulate_raw(const NamedTensors& raw);
  // Bias-corrected scores. Throws ContractError if no batch was accumulated
  // or if called twice.
  NamedTensors finalize();

  const NamedTensors& scores() const { return scores_; }
  double gamma() const { return gamma_; }
  std::size_t batch_count() const { return batch_count_; }
  bool finalized() const { return finalized_; }
  std::size_t missing_gradients() const { return missing_gradients_; }

 private:
  void check_open() const;
  void fold(std::size_t k, std::span<const double> raw);

  NamedTensors scores_;
  // Raw scores of the first batch, kept until the second one arrives.
  NamedTensors first_raw_;
  double gamma_;
  std::size_t batch_count_ = 0;
  bool finalized_ = false;
  std::size_t missing_gradients_ = 0;
};

struct ImportanceConfig {
  DistillConfig distill{5.0, 0.7, 0.5, 1e-6};
  double gamma = 0.9;
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct ImportanceResult {
  NamedTensors scores;
  std::size_t batches = 0;
  std::size_t missing_gradients = 0;
};

// Teacher-guided scoring. Every batch: forward teacher (no gradient) and
// student, total_loss, backward, accumulate, zero the student gradients.
// No optimizer step is taken; student weights are left bit-identical.
ImportanceResult compute_importance(const Model& teacher, Model& student,
                                    const Dataset& data,
                                    const ImportanceConfig& cfg);

/// Contents of an "SDIS" score file.
struct ScoreFile {
  NamedTensors scores;
  double gamma = 0.9;
  std::uint64_t batch_count = 0;
  std::uint32_t epochs = 0;
  DistillConfig distill;
};

std::vector<std::uint8_t> serialize_scores(const ScoreFile& file);
ScoreFile parse_scores(std::vector<std::uint8_t> bytes,
                       const std::string& source = "<memory>");
void save_scores(const ScoreFile& file, const std::filesystem::path& path);
ScoreFile load_scores(const std::filesystem::path& path);

}  // namespace sdprune
