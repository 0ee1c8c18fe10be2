#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdprune/tensor.hpp"

namespace sdprune {

enum class Split { Train, Val, Test };
const char* split_name(Split split);

/// Labeled samples. `inputs` is [N x F] or [N x C x H x W].
struct Dataset {
  Tensor inputs;
  std::vector<int> labels;
  int class_count = 0;
  Split split = Split::Train;

  std::size_t size() const { return labels.size(); }
  // Extents of one sample (inputs shape without the leading N).
  Shape sample_shape() const;
  // Throws ValidationError if N differs from the label count or a label is
  // outside [0, class_count).
  void validate() const;
  Dataset subset(std::span<const std::size_t> indices) const;
  Dataset to(Precision precision) const;
};

struct SyntheticSpec {
  int classes = 10;
  std::size_t per_class = 200;
  // Sample extents: {F} for flat features or {C, H, W} for images.
  Shape sample_shape{1, 28, 28};
  // Scale of the class means relative to unit-variance noise.
  double separation = 2.0;
  std::uint64_t seed = 0;
};

struct DatasetSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

// Gaussian clusters around seeded class templates, split 80/10/10 per class.
// Image-shaped templates are spatially smoothed; odd/even class pairs share
// part of their template so some classes are more alike than others.
DatasetSplits make_synthetic(const SyntheticSpec& spec);

// MNIST-style IDX files. Pixels are scaled to [0, 1] and returned as
// [N x 1 x rows x cols]. When `classes` is given, labels must lie below it;
// otherwise the class count is max(label) + 1.
Dataset load_idx(const std::filesystem::path& images,
                 const std::filesystem::path& labels,
                 std::optional<int> classes = std::nullopt);

// Rows of "label,v0,...,vK" with K + 1 == numel(sample_shape).
Dataset load_csv(const std::filesystem::path& path, const Shape& sample_shape,
                 bool has_header = false,
                 std::optional<int> classes = std::nullopt);
void write_csv(const Dataset& data, const std::filesystem::path& path,
               bool header = false);

// Seeded 90/10 (by default) division of a dataset into train and held-out
// validation parts.
std::pair<Dataset, Dataset> holdout_split(const Dataset& data,
                                          double val_fraction,
                                          std::uint64_t seed);

struct Batch {
  Tensor inputs;
  std::vector<int> labels;
  // Positions of the batch rows in the source dataset.
  std::vector<std::size_t> indices;
};

// Permutation of [0, n) that depends only on (seed, epoch).
std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed,
                                           std::uint64_t epoch);

// Contiguous slices of size `batch_size` over the epoch permutation. The last
// partial batch is kept unless `drop_last`. With shuffle == false the natural
// order is used.
std::vector<Batch> batches(const Dataset& data, std::size_t batch_size,
                           std::uint64_t seed, std::uint64_t epoch,
                           bool drop_last = false, bool shuffle = true);

// Rows of `source` selected by `indices`, for gathering cached per-sample
// values (e.g. teacher logits) that line up with a batch.
Tensor gather_rows(const Tensor& source, std::span<const std::size_t> indices);

}  // namespace sdprune
