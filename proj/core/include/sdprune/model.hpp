#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sdprune/autodiff.hpp"
#include "sdprune/tensor.hpp"

namespace sdprune {

struct PruneMask;

enum class LayerKind : std::uint32_t {
  Linear = 1,
  Conv2d = 2,
  Relu = 3,
  MaxPool2d = 4,
  Flatten = 5,
};

const char* layer_kind_name(LayerKind kind);

/// One entry of a sequential architecture.
///
/// dims by kind:
///   Linear     {in, out}
///   Conv2d     {in_channels, out_channels, kh, kw, stride, padding}
///   MaxPool2d  {window}
///   Relu, Flatten  {}
struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::vector<std::size_t> dims;

  // Only linear and conv2d layers own a (prunable) weight.
  bool has_weight() const {
    return kind == LayerKind::Linear || kind == LayerKind::Conv2d;
  }

  static LayerSpec linear(std::size_t in, std::size_t out);
  static LayerSpec conv2d(std::size_t in_channels, std::size_t out_channels,
                          std::size_t kernel, std::size_t stride = 1,
                          std::size_t padding = 0);
  static LayerSpec relu();
  static LayerSpec maxpool2d(std::size_t window);
  static LayerSpec flatten();

  // Per-sample output extents for per-sample input extents `in`. Throws
  // DimensionError when the layer cannot consume `in`.
  Shape output_shape(const Shape& in) const;

  bool operator==(const LayerSpec&) const = default;
};

struct Parameter {
  // "<layer index>.weight" or "<layer index>.bias"
  std::string name;
  Tensor value;
  bool prunable = false;
};

/// Sequential network with named parameters.
///
/// Copies are deep: copying a Model duplicates every parameter buffer.
class Model {
 public:
  Model() = default;
  // Parameters are created zero-filled; see build_model() for initialization.
  Model(std::vector<LayerSpec> layers, Shape input_shape, int classes,
        Precision precision = Precision::F32);

  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const Shape& input_shape() const { return input_shape_; }
  int class_count() const { return classes_; }
  Precision precision() const { return precision_; }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  // nullptr when absent.
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  // Logits [B x classes] for a batch whose trailing extents equal
  // input_shape(). Records onto `tape` when given.
  Tensor forward(const Tensor& batch, Tape* tape = nullptr) const;

  // Number of prunable weight entries (D).
  std::size_t prunable_count() const;
  std::size_t parameter_count() const;

  void set_trainable(bool trainable);
  void zero_grads();
  void clear_grads();

  Model to(Precision precision) const;

  NamedTensors named_tensors() const;
  NamedTensors prunable_tensors() const;

 private:
  std::vector<LayerSpec> layers_;
  Shape input_shape_;
  int classes_ = 0;
  Precision precision_ = Precision::F32;
  std::vector<Parameter> params_;
};

// Parameter values captured at initialization, in model parameter order.
struct InitSnapshot {
  NamedTensors params;
};

InitSnapshot snapshot_of(const Model& model);

struct ModelConfig {
  // mlp-small, mlp-teacher, cnn-small or cnn-teacher
  std::string architecture = "cnn-small";
  Shape input_shape{1, 28, 28};
  int classes = 10;
  Precision precision = Precision::F32;
};

const std::vector<std::string>& registered_architectures();

// Layer list for a registered architecture. Throws ConfigError for unknown
// names and DimensionError when the input shape does not fit.
std::vector<LayerSpec> architecture_layers(const std::string& name,
                                           const Shape& input_shape,
                                           int classes);

struct BuiltModel {
  Model model;
  InitSnapshot snapshot;
};

// Seeded fan-in scaled uniform initialization: weights and biases both
// U(+-1/sqrt(fan_in)).
BuiltModel build_model(const ModelConfig& config, std::uint64_t seed);

// Checkpoint file ("SDCK", version 1). See README for the byte layout.
std::vector<std::uint8_t> serialize_checkpoint(const Model& model);
Model parse_checkpoint(std::vector<std::uint8_t> bytes,
                       const std::string& source = "<memory>");
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

// |W| for every prunable weight, in parameter order.
NamedTensors magnitude_scores(const Model& model);

// Retained weights <- snapshot, pruned weights <- 0, biases <- snapshot.
void lth_reset(Model& model, const InitSnapshot& snapshot,
               const PruneMask& mask);

}  // namespace sdprune
