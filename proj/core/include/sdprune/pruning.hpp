#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sdprune/model.hpp"
#include "sdprune/tensor.hpp"

namespace sdprune {

struct MaskTensor {
  std::string name;
  Shape shape;
  std::vector<std::uint8_t> keep;  // 1 = retained, 0 = pruned

  std::size_t ones() const;
};

/// Binary retain/prune decision for every prunable weight. Parameters without
/// an entry (biases) are implicitly fully retained.
struct PruneMask {
  std::vector<MaskTensor> tensors;
  double target_sparsity = 0.0;
  std::size_t retained = 0;  // k
  double threshold = 0.0;    // tau

  std::size_t total() const;  // D
  std::size_t ones() const;
  double sparsity() const;
  const MaskTensor* find(const std::string& name) const;
};

// Mask retaining every prunable weight of `model`.
PruneMask full_mask(const Model& model);

// k = floor((1 - p) * D). Products that land within 1e-9 (relative) below an
// integer are treated as that integer, so that e.g. p = 0.9, D = 10 gives 1
// rather than 0 through binary rounding of 1 - 0.9.
std::size_t retained_count(double sparsity, std::size_t total);

struct GlobalThreshold {
  double tau = 0.0;
  std::size_t k = 0;
  std::size_t total = 0;
};

// tau is the k-th largest of all score entries taken together.
// Throws ConfigError for p outside [0, 1) or k == 0, ContractError for empty
// or negative scores.
GlobalThreshold global_threshold(const NamedTensors& scores, double sparsity);

// Retains score > tau, then score == tau in ascending global flat index until
// exactly k entries are retained. Global flat order is the concatenation of
// the score tensors in list order.
PruneMask build_mask(const NamedTensors& scores, double tau, std::size_t k);

// global_threshold + build_mask, with target_sparsity recorded.
PruneMask make_global_mask(const NamedTensors& scores, double sparsity);

// W <- W * M on every prunable weight. Pruned entries are set to +0.0.
void apply_mask(Model& model, const PruneMask& mask);

// Number of prunable weight entries that are exactly zero.
std::size_t count_zero_weights(const Model& model);
// count_zero_weights / D
double measure_sparsity(const Model& model);

// Throws ContractError unless every mask tensor matches a prunable weight of
// `model` by name and shape, and every prunable weight has a mask tensor.
void check_mask_matches(const Model& model, const PruneMask& mask);

// Mask file ("SDMK", version 1), bitmaps packed MSB-first.
std::vector<std::uint8_t> serialize_mask(const PruneMask& mask);
PruneMask parse_mask(std::vector<std::uint8_t> bytes,
                     const std::string& source = "<memory>");
void save_mask(const PruneMask& mask, const std::filesystem::path& path);
PruneMask load_mask(const std::filesystem::path& path);

}  // namespace sdprune
