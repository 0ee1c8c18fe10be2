#include "sdprune/model.hpp"

#include <cmath>
#include <random>

#include "sdprune/binary_io.hpp"
#include "sdprune/error.hpp"
#include "sdprune/pruning.hpp"

namespace sdprune {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Linear: return "linear";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool2d: return "maxpool2d";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

LayerSpec LayerSpec::linear(std::size_t in, std::size_t out) {
  return {LayerKind::Linear, {in, out}};
}
LayerSpec LayerSpec::conv2d(std::size_t in_channels, std::size_t out_channels,
                            std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
  return {LayerKind::Conv2d,
          {in_channels, out_channels, kernel, kernel, stride, padding}};
}
LayerSpec LayerSpec::relu() { return {LayerKind::Relu, {}}; }
LayerSpec LayerSpec::maxpool2d(std::size_t window) {
  return {LayerKind::MaxPool2d, {window}};
}
LayerSpec LayerSpec::flatten() { return {LayerKind::Flatten, {}}; }

namespace {

std::size_t expected_dims(LayerKind kind) {
  switch (kind) {
    case LayerKind::Linear: return 2;
    case LayerKind::Conv2d: return 6;
    case LayerKind::MaxPool2d: return 1;
    case LayerKind::Relu:
    case LayerKind::Flatten: return 0;
  }
  return 0;
}

[[noreturn]] void incompatible(const LayerSpec& l, const Shape& in) {
  throw DimensionError(std::string(layer_kind_name(l.kind)) +
                       " layer cannot consume per-sample shape " +
                       shape_to_string(in));
}

}  // namespace

Shape LayerSpec::output_shape(const Shape& in) const {
  if (dims.size() != expected_dims(kind)) {
    throw DimensionError(std::string(layer_kind_name(kind)) + " layer needs " +
                         std::to_string(expected_dims(kind)) + " dims, got " +
                         std::to_string(dims.size()));
  }
  switch (kind) {
    case LayerKind::Linear:
      if (in.size() != 1 || in[0] != dims[0]) incompatible(*this, in);
      return {dims[1]};
    case LayerKind::Conv2d: {
      if (in.size() != 3 || in[0] != dims[0]) incompatible(*this, in);
      const auto kh = dims[2], kw = dims[3], stride = dims[4], pad = dims[5];
      if (stride == 0 || kh > in[1] + 2 * pad || kw > in[2] + 2 * pad) {
        incompatible(*this, in);
      }
      return {dims[1], (in[1] + 2 * pad - kh) / stride + 1,
              (in[2] + 2 * pad - kw) / stride + 1};
    }
    case LayerKind::MaxPool2d:
      if (in.size() != 3 || dims[0] == 0 || dims[0] > in[1] || dims[0] > in[2]) {
        incompatible(*this, in);
      }
      return {in[0], in[1] / dims[0], in[2] / dims[0]};
    case LayerKind::Relu:
      return in;
    case LayerKind::Flatten:
      return {shape_numel(in)};
  }
  incompatible(*this, in);
}

Model::Model(std::vector<LayerSpec> layers, Shape input_shape, int classes,
             Precision precision)
    : layers_(std::move(layers)),
      input_shape_(std::move(input_shape)),
      classes_(classes),
      precision_(precision) {
  Shape shape = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    shape = l.output_shape(shape);
    const std::string prefix = std::to_string(i);
    if (l.kind == LayerKind::Linear) {
      params_.push_back({prefix + ".weight",
                         Tensor::zeros({l.dims[0], l.dims[1]}, precision), true});
      params_.push_back({prefix + ".bias", Tensor::zeros({l.dims[1]}, precision),
                         false});
    } else if (l.kind == LayerKind::Conv2d) {
      params_.push_back(
          {prefix + ".weight",
           Tensor::zeros({l.dims[1], l.dims[0], l.dims[2], l.dims[3]}, precision),
           true});
      params_.push_back({prefix + ".bias", Tensor::zeros({l.dims[1]}, precision),
                         false});
    }
  }
  if (shape.size() != 1 || classes_ < 2 ||
      shape[0] != static_cast<std::size_t>(classes_)) {
    throw DimensionError("architecture ends in per-sample shape " +
                         shape_to_string(shape) + ", expected [" +
                         std::to_string(classes_) + "] logits");
  }
  set_trainable(true);
}

Model::Model(const Model& other)
    : layers_(other.layers_),
      input_shape_(other.input_shape_),
      classes_(other.classes_),
      precision_(other.precision_) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) {
    Tensor copy = p.value.clone();
    copy.set_requires_grad(p.value.requires_grad());
    params_.push_back({p.name, std::move(copy), p.prunable});
  }
}

Model& Model::operator=(const Model& other) {
  if (this != &other) *this = Model(other);
  return *this;
}

Parameter* Model::find(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

const Parameter* Model::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

Tensor Model::forward(const Tensor& batch, Tape* tape) const {
  const Shape& s = batch.shape();
  if (s.size() != input_shape_.size() + 1 ||
      !std::equal(input_shape_.begin(), input_shape_.end(), s.begin() + 1)) {
    throw DimensionError("model expects batches of " +
                         shape_to_string(input_shape_) + " samples, got " +
                         shape_to_string(s));
  }
  Tensor x = batch;
  std::size_t p = 0;
  for (const auto& l : layers_) {
    switch (l.kind) {
      case LayerKind::Linear:
        x = add_bias(matmul(x, params_[p].value, tape), params_[p + 1].value,
                     tape);
        p += 2;
        break;
      case LayerKind::Conv2d:
        x = add_bias(conv2d(x, params_[p].value, {l.dims[4], l.dims[5]}, tape),
                     params_[p + 1].value, tape);
        p += 2;
        break;
      case LayerKind::Relu:
        x = relu(x, tape);
        break;
      case LayerKind::MaxPool2d:
        x = maxpool2d(x, l.dims[0], tape);
        break;
      case LayerKind::Flatten:
        x = flatten(x, tape);
        break;
    }
  }
  return x;
}

std::size_t Model::prunable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.prunable) n += p.value.numel();
  }
  return n;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void Model::set_trainable(bool trainable) {
  for (auto& p : params_) p.value.set_requires_grad(trainable);
}

void Model::zero_grads() {
  for (auto& p : params_) {
    if (p.value.has_grad()) p.value.zero_grad();
  }
}

void Model::clear_grads() {
  for (auto& p : params_) p.value.clear_grad();
}

Model Model::to(Precision precision) const {
  Model out(*this);
  out.precision_ = precision;
  for (auto& p : out.params_) {
    const bool rg = p.value.requires_grad();
    p.value = p.value.to(precision);
    p.value.set_requires_grad(rg);
  }
  return out;
}

NamedTensors Model::named_tensors() const {
  NamedTensors out;
  for (const auto& p : params_) out.push_back({p.name, p.value});
  return out;
}

NamedTensors Model::prunable_tensors() const {
  NamedTensors out;
  for (const auto& p : params_) {
    if (p.prunable) out.push_back({p.name, p.value});
  }
  return out;
}

InitSnapshot snapshot_of(const Model& model) {
  InitSnapshot s;
  for (const auto& p : model.params()) s.params.push_back({p.name, p.value.clone()});
  return s;
}

const std::vector<std::string>& registered_architectures() {
  static const std::vector<std::string> names{"mlp-small", "mlp-teacher",
                                              "cnn-small", "cnn-teacher"};
  return names;
}

std::vector<LayerSpec> architecture_layers(const std::string& name,
                                           const Shape& input_shape,
                                           int classes) {
  if (classes < 2) throw ConfigError("class count must be >= 2");
  const auto c = static_cast<std::size_t>(classes);
  const std::size_t features = shape_numel(input_shape);
  std::vector<LayerSpec> layers;
  if (name == "mlp-small" || name == "mlp-teacher") {
    if (input_shape.size() != 1) layers.push_back(LayerSpec::flatten());
    if (name == "mlp-small") {
      layers.push_back(LayerSpec::linear(features, 32));
      layers.push_back(LayerSpec::relu());
      layers.push_back(LayerSpec::linear(32, c));
    } else {
      layers.push_back(LayerSpec::linear(features, 256));
      layers.push_back(LayerSpec::relu());
      layers.push_back(LayerSpec::linear(256, 128));
      layers.push_back(LayerSpec::relu());
      layers.push_back(LayerSpec::linear(128, c));
    }
    return layers;
  }
  if (name == "cnn-small" || name == "cnn-teacher") {
    if (input_shape.size() != 3) {
      throw DimensionError(name + " needs a [C x H x W] input shape, got " +
                           shape_to_string(input_shape));
    }
    const bool teacher = name == "cnn-teacher";
    const std::size_t c1 = teacher ? 16 : 8;
    const std::size_t c2 = teacher ? 32 : 16;
    layers.push_back(LayerSpec::conv2d(input_shape[0], c1, 3, 1, 1));
    layers.push_back(LayerSpec::relu());
    layers.push_back(LayerSpec::maxpool2d(2));
    layers.push_back(LayerSpec::conv2d(c1, c2, 3, 1, 1));
    layers.push_back(LayerSpec::relu());
    layers.push_back(LayerSpec::maxpool2d(2));
    layers.push_back(LayerSpec::flatten());
    const std::size_t flat = c2 * (input_shape[1] / 4) * (input_shape[2] / 4);
    if (teacher) {
      layers.push_back(LayerSpec::linear(flat, 64));
      layers.push_back(LayerSpec::relu());
      layers.push_back(LayerSpec::linear(64, c));
    } else {
      layers.push_back(LayerSpec::linear(flat, c));
    }
    return layers;
  }
  throw ConfigError("unknown architecture \"" + name +
                    "\" (expected mlp-small, mlp-teacher, cnn-small or "
                    "cnn-teacher)");
}

BuiltModel build_model(const ModelConfig& config, std::uint64_t seed) {
  Model model(architecture_layers(config.architecture, config.input_shape,
                                  config.classes),
              config.input_shape, config.classes, config.precision);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < model.params().size(); i += 2) {
    auto& weight = model.params()[i].value;
    auto& bias = model.params()[i + 1].value;
    const std::size_t fan_in = weight.numel() / bias.numel();
    const double wb = 1.0 / std::sqrt(static_cast<double>(fan_in));
    const double bb = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> wdist(-wb, wb), bdist(-bb, bb);
    for (auto& v : weight.mutable_data()) v = wdist(rng);
    for (auto& v : bias.mutable_data()) v = bdist(rng);
    weight.quantize();
    bias.quantize();
  }
  InitSnapshot snap = snapshot_of(model);
  return {std::move(model), std::move(snap)};
}

constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const Model& model) {
  io::BinaryWriter w;
  w.magic("SDCK");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(model.layers().size()));
  for (const auto& l : model.layers()) {
    w.u32(static_cast<std::uint32_t>(l.kind));
    w.u32(static_cast<std::uint32_t>(l.dims.size()));
    for (auto d : l.dims) w.u32(static_cast<std::uint32_t>(d));
  }
  w.u32(static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) io::write_tensor_record(w, p.name, p.value);
  // Trailer: per-sample input extents and class count.
  io::write_shape(w, model.input_shape());
  w.u32(static_cast<std::uint32_t>(model.class_count()));
  return w.buffer();
}

Model parse_checkpoint(std::vector<std::uint8_t> bytes,
                       const std::string& source) {
  io::BinaryReader r(std::move(bytes), source);
  r.expect_magic("SDCK");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    r.fail("unsupported checkpoint version " + std::to_string(version));
  }
  const auto n_layers = r.u32();
  if (n_layers > 4096) r.fail("implausible layer count " + std::to_string(n_layers));
  std::vector<LayerSpec> layers;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const auto tag = r.u32();
    if (tag < 1 || tag > 5) r.fail("unknown layer kind tag " + std::to_string(tag));
    LayerSpec l;
    l.kind = static_cast<LayerKind>(tag);
    const auto nd = r.u32();
    if (nd != expected_dims(l.kind)) {
      r.fail(std::string(layer_kind_name(l.kind)) + " record has " +
             std::to_string(nd) + " dims");
    }
    for (std::uint32_t d = 0; d < nd; ++d) l.dims.push_back(r.u32());
    layers.push_back(std::move(l));
  }
  const auto n_params = r.u32();
  std::vector<io::NamedRecord> records;
  for (std::uint32_t i = 0; i < n_params; ++i) {
    records.push_back(io::read_tensor_record(r));
  }
  const Shape input_shape = io::read_shape(r);
  const auto classes = static_cast<int>(r.u32());
  if (!r.at_end()) r.fail("trailing bytes after checkpoint");

  Model model;
  try {
    model = Model(std::move(layers), input_shape, classes, Precision::F32);
  } catch (const DimensionError& e) {
    throw FormatError(source + ": inconsistent layer specs: " + e.what());
  }
  if (records.size() != model.params().size()) {
    throw FormatError(source + ": " + std::to_string(records.size()) +
                      " parameter records for a model with " +
                      std::to_string(model.params().size()) + " parameters");
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& p = model.params()[i];
    if (records[i].name != p.name ||
        records[i].tensor.shape() != p.value.shape()) {
      throw FormatError(source + ": parameter record " + std::to_string(i) +
                        " (\"" + records[i].name + "\" " +
                        shape_to_string(records[i].tensor.shape()) +
                        ") does not match \"" + p.name + "\" " +
                        shape_to_string(p.value.shape()));
    }
    auto dst = p.value.mutable_data();
    const auto src = records[i].tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  io::BinaryWriter w;
  w.bytes(serialize_checkpoint(model));
  w.save(path);
}

Model load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(io::read_file(path), path.string());
}

NamedTensors magnitude_scores(const Model& model) {
  NamedTensors out;
  for (const auto& p : model.params()) {
    if (!p.prunable) continue;
    Tensor s = p.value.clone();
    for (auto& v : s.mutable_data()) v = std::fabs(v);
    out.push_back({p.name, std::move(s)});
  }
  return out;
}

void lth_reset(Model& model, const InitSnapshot& snapshot,
               const PruneMask& mask) {
  check_mask_matches(model, mask);
  if (snapshot.params.size() != model.params().size()) {
    throw ContractError("snapshot holds " +
                        std::to_string(snapshot.params.size()) +
                        " tensors, model has " +
                        std::to_string(model.params().size()));
  }
  for (std::size_t i = 0; i < snapshot.params.size(); ++i) {
    auto& p = model.params()[i];
    const auto& s = snapshot.params[i];
    if (s.name != p.name || s.tensor.shape() != p.value.shape()) {
      throw ContractError("snapshot tensor \"" + s.name + "\" " +
                          shape_to_string(s.tensor.shape()) +
                          " does not match model parameter \"" + p.name +
                          "\" " + shape_to_string(p.value.shape()));
    }
    auto dst = p.value.mutable_data();
    const auto src = s.tensor.data();
    const MaskTensor* m = p.prunable ? mask.find(p.name) : nullptr;
    for (std::size_t j = 0; j < dst.size(); ++j) {
      dst[j] = (m == nullptr || m->keep[j]) ? src[j] : 0.0;
    }
    p.value.quantize();
  }
}

}  // namespace sdprune
