#include "sdprune/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "sdprune/binary_io.hpp"
#include "sdprune/error.hpp"

namespace sdprune {

std::size_t MaskTensor::ones() const {
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 1));
}

std::size_t PruneMask::total() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.keep.size();
  return n;
}

std::size_t PruneMask::ones() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.ones();
  return n;
}

double PruneMask::sparsity() const {
  const auto d = total();
  return d == 0 ? 0.0 : 1.0 - static_cast<double>(ones()) / static_cast<double>(d);
}

const MaskTensor* PruneMask::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

PruneMask full_mask(const Model& model) {
  PruneMask m;
  for (const auto& p : model.params()) {
    if (!p.prunable) continue;
    m.tensors.push_back({p.name, p.value.shape(),
                         std::vector<std::uint8_t>(p.value.numel(), 1)});
  }
  m.retained = m.total();
  m.threshold = 0.0;
  m.target_sparsity = 0.0;
  return m;
}

std::size_t retained_count(double sparsity, std::size_t total) {
  const double x = (1.0 - sparsity) * static_cast<double>(total);
  double k = std::floor(x);
  if (x - k > 1.0 - 1e-9 * std::max(1.0, x)) k += 1.0;
  return static_cast<std::size_t>(std::min(k, static_cast<double>(total)));
}

namespace {

std::vector<double> concatenate(const NamedTensors& scores) {
  if (scores.empty()) throw ContractError("no score tensors given");
  std::vector<double> v;
  for (const auto& s : scores) {
    for (double x : s.tensor.data()) {
      if (!(x >= 0.0)) {
        throw ContractError("score tensor \"" + s.name +
                            "\" holds a negative or NaN entry");
      }
      v.push_back(x);
    }
  }
  return v;
}

}  // namespace

GlobalThreshold global_threshold(const NamedTensors& scores, double sparsity) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) {
    throw ConfigError("sparsity must lie in [0, 1), got " +
                      std::to_string(sparsity));
  }
  std::vector<double> v = concatenate(scores);
  GlobalThreshold t;
  t.total = v.size();
  t.k = retained_count(sparsity, t.total);
  if (t.k == 0) {
    throw ConfigError("sparsity " + std::to_string(sparsity) +
                      " retains no weights out of " + std::to_string(t.total));
  }
  std::sort(v.begin(), v.end(), std::greater<>());
  t.tau = v[t.k - 1];
  return t;
}

PruneMask build_mask(const NamedTensors& scores, double tau, std::size_t k) {
  const std::vector<double> v = concatenate(scores);
  const auto above = static_cast<std::size_t>(
      std::count_if(v.begin(), v.end(), [tau](double x) { return x > tau; }));
  const auto at = static_cast<std::size_t>(
      std::count(v.begin(), v.end(), tau));
  if (k == 0 || above > k || above + at < k) {
    throw ContractError("threshold " + std::to_string(tau) + " and k = " +
                        std::to_string(k) + " are inconsistent with the scores (" +
                        std::to_string(above) + " above, " + std::to_string(at) +
                        " equal)");
  }
  std::size_t ties_left = k - above;
  PruneMask mask;
  mask.threshold = tau;
  mask.retained = k;
  for (const auto& s : scores) {
    MaskTensor m{s.name, s.tensor.shape(), std::vector<std::uint8_t>(s.tensor.numel(), 0)};
    const auto d = s.tensor.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d[i] > tau) {
        m.keep[i] = 1;
      } else if (d[i] == tau && ties_left > 0) {
        m.keep[i] = 1;
        --ties_left;
      }
    }
    mask.tensors.push_back(std::move(m));
  }
  mask.target_sparsity =
      1.0 - static_cast<double>(k) / static_cast<double>(v.size());
  return mask;
}

PruneMask make_global_mask(const NamedTensors& scores, double sparsity) {
  const auto t = global_threshold(scores, sparsity);
  PruneMask m = build_mask(scores, t.tau, t.k);
  m.target_sparsity = sparsity;
  return m;
}

void check_mask_matches(const Model& model, const PruneMask& mask) {
  std::size_t matched = 0;
  for (const auto& p : model.params()) {
    if (!p.prunable) continue;
    const MaskTensor* m = mask.find(p.name);
    if (m == nullptr) {
      throw ContractError("mask has no entry for prunable weight \"" + p.name +
                          "\"");
    }
    if (m->shape != p.value.shape() || m->keep.size() != p.value.numel()) {
      throw ContractError("mask entry \"" + p.name + "\" has shape " +
                          shape_to_string(m->shape) + ", weight has " +
                          shape_to_string(p.value.shape()));
    }
    ++matched;
  }
  if (matched != mask.tensors.size()) {
    throw ContractError("mask holds entries for parameters that are not "
                        "prunable weights of the model");
  }
}

void apply_mask(Model& model, const PruneMask& mask) {
  check_mask_matches(model, mask);
  for (auto& p : model.params()) {
    if (!p.prunable) continue;
    const MaskTensor* m = mask.find(p.name);
    auto w = p.value.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!m->keep[i]) w[i] = 0.0;
    }
  }
}

std::size_t count_zero_weights(const Model& model) {
  std::size_t zeros = 0;
  for (const auto& p : model.params()) {
    if (!p.prunable) continue;
    for (double v : p.value.data()) zeros += v == 0.0 ? 1 : 0;
  }
  return zeros;
}

double measure_sparsity(const Model& model) {
  const std::size_t d = model.prunable_count();
  if (d == 0) return 0.0;
  return static_cast<double>(count_zero_weights(model)) / static_cast<double>(d);
}

constexpr std::uint32_t kMaskVersion = 1;

std::vector<std::uint8_t> serialize_mask(const PruneMask& mask) {
  io::BinaryWriter w;
  w.magic("SDMK");
  w.u32(kMaskVersion);
  w.f64(mask.target_sparsity);
  w.u64(mask.retained);
  w.f64(mask.threshold);
  w.u32(static_cast<std::uint32_t>(mask.tensors.size()));
  for (const auto& t : mask.tensors) {
    w.str(t.name);
    io::write_shape(w, t.shape);
    std::vector<std::uint8_t> packed((t.keep.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < t.keep.size(); ++i) {
      if (t.keep[i]) packed[i / 8] |= static_cast<std::uint8_t>(0x80u >> (i % 8));
    }
    w.bytes(packed);
  }
  return w.buffer();
}

PruneMask parse_mask(std::vector<std::uint8_t> bytes, const std::string& source) {
  io::BinaryReader r(std::move(bytes), source);
  r.expect_magic("SDMK");
  const auto version = r.u32();
  if (version != kMaskVersion) {
    r.fail("unsupported mask version " + std::to_string(version));
  }
  PruneMask m;
  m.target_sparsity = r.f64();
  m.retained = r.u64();
  m.threshold = r.f64();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    MaskTensor t;
    t.name = r.str();
    t.shape = io::read_shape(r);
    const std::size_t n = shape_numel(t.shape);
    if ((n + 7) / 8 > r.remaining()) {
      r.fail("truncated bitmap for \"" + t.name + "\"");
    }
    auto packed = r.bytes((n + 7) / 8);
    t.keep.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      t.keep[j] = (packed[j / 8] >> (7 - j % 8)) & 1u;
    }
    m.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) r.fail("trailing bytes after mask");
  if (m.ones() != m.retained) {
    throw FormatError(source + ": mask retains " + std::to_string(m.ones()) +
                      " entries but records k = " + std::to_string(m.retained));
  }
  return m;
}

void save_mask(const PruneMask& mask, const std::filesystem::path& path) {
  io::BinaryWriter w;
  w.bytes(serialize_mask(mask));
  w.save(path);
}

PruneMask load_mask(const std::filesystem::path& path) {
  return parse_mask(io::read_file(path), path.string());
}

}  // namespace sdprune
