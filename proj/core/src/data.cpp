#include "sdprune/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "sdprune/binary_io.hpp"
#include "sdprune/error.hpp"

namespace sdprune {

const char* split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Shape Dataset::sample_shape() const {
  const auto& s = inputs.shape();
  return Shape(s.begin() + 1, s.end());
}

void Dataset::validate() const {
  if (!inputs.defined() || inputs.rank() < 2) {
    throw ValidationError("dataset inputs must have a leading sample axis");
  }
  if (inputs.dim(0) != labels.size()) {
    throw ValidationError("dataset has " + std::to_string(inputs.dim(0)) +
                          " samples but " + std::to_string(labels.size()) +
                          " labels");
  }
  if (class_count < 2) throw ValidationError("dataset needs >= 2 classes");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= class_count) {
      throw ValidationError("label " + std::to_string(labels[i]) +
                            " at sample " + std::to_string(i) +
                            " outside [0, " + std::to_string(class_count) +
                            ")");
    }
  }
}

Tensor gather_rows(const Tensor& source, std::span<const std::size_t> indices) {
  const std::size_t row = source.numel() / source.dim(0);
  std::vector<double> out(indices.size() * row);
  const auto in = source.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= source.dim(0)) {
      throw ContractError("row index " + std::to_string(indices[i]) +
                          " out of range for " +
                          shape_to_string(source.shape()));
    }
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(indices[i] * row),
                row, out.begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  Shape shape = source.shape();
  shape[0] = indices.size();
  return Tensor(std::move(shape), std::move(out), source.precision());
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.inputs = gather_rows(inputs, indices);
  out.labels.reserve(indices.size());
  for (auto i : indices) out.labels.push_back(labels[i]);
  out.class_count = class_count;
  out.split = split;
  return out;
}

Dataset Dataset::to(Precision precision) const {
  Dataset out = *this;
  out.inputs = inputs.to(precision);
  return out;
}

namespace {

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

// Two passes of a radius-2 box blur over each channel plane.
void smooth_planes(std::vector<double>& v, const Shape& shape) {
  const std::size_t c = shape[0], h = shape[1], w = shape[2];
  const long r = 2;
  std::vector<double> tmp(v.size());
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = ch * h * w;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          double acc = 0.0;
          int cnt = 0;
          for (long d = -r; d <= r; ++d) {
            const long xx = static_cast<long>(x) + d;
            if (xx < 0 || xx >= static_cast<long>(w)) continue;
            acc += v[base + y * w + static_cast<std::size_t>(xx)];
            ++cnt;
          }
          tmp[base + y * w + x] = acc / cnt;
        }
      }
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          double acc = 0.0;
          int cnt = 0;
          for (long d = -r; d <= r; ++d) {
            const long yy = static_cast<long>(y) + d;
            if (yy < 0 || yy >= static_cast<long>(h)) continue;
            acc += tmp[base + static_cast<std::size_t>(yy) * w + x];
            ++cnt;
          }
          v[base + y * w + x] = acc / cnt;
        }
      }
    }
  }
}

void normalize_l2(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
}

}  // namespace

// Template norm per unit of separation; at separation 2 the nearest pair of
// class means sits about 4.5 noise standard deviations apart.
constexpr double kTemplateScale = 2.7;
// Weight of the component shared by class pairs (2j, 2j+1).
constexpr double kSharedWeight = 0.6;

DatasetSplits make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synthetic data needs >= 2 classes");
  if (spec.per_class < 1) throw ConfigError("synthetic data needs >= 1 sample per class");
  if (!(spec.separation > 0.0)) throw ConfigError("class separation must be > 0");
  if (spec.sample_shape.size() != 1 && spec.sample_shape.size() != 3) {
    throw ConfigError("synthetic sample shape must be {F} or {C,H,W}, got " +
                      shape_to_string(spec.sample_shape));
  }
  for (auto e : spec.sample_shape) {
    if (e == 0) throw ConfigError("synthetic sample shape has a zero extent");
  }
  const bool image = spec.sample_shape.size() == 3;
  const std::size_t dim = shape_numel(spec.sample_shape);
  const auto classes = static_cast<std::size_t>(spec.classes);

  auto rng = make_rng(spec.seed, 0x7e3a1c);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random_direction = [&] {
    std::vector<double> v(dim);
    for (auto& x : v) x = normal(rng);
    if (image) smooth_planes(v, spec.sample_shape);
    normalize_l2(v);
    return v;
  };
  std::vector<std::vector<double>> shared((classes + 1) / 2);
  for (auto& s : shared) s = random_direction();
  const double own_weight = std::sqrt(1.0 - kSharedWeight * kSharedWeight);
  std::vector<std::vector<double>> means(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    auto own = random_direction();
    means[c].resize(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      means[c][j] = kSharedWeight * shared[c / 2][j] + own_weight * own[j];
    }
    normalize_l2(means[c]);
    for (auto& x : means[c]) x *= spec.separation * kTemplateScale;
  }

  const std::size_t n_train = spec.per_class * 8 / 10;
  const std::size_t n_val = spec.per_class / 10;
  std::vector<std::vector<double>> rows[3];
  std::vector<int> labels[3];
  std::vector<double> sample(dim);
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<std::size_t> order(spec.per_class);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<double>> drawn(spec.per_class);
    for (auto& d : drawn) {
      d.resize(dim);
      for (std::size_t j = 0; j < dim; ++j) d[j] = means[c][j] + normal(rng);
    }
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      const int part = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
      rows[part].push_back(std::move(drawn[order[i]]));
      labels[part].push_back(static_cast<int>(c));
    }
  }

  auto assemble = [&](int part, Split split) {
    Dataset d;
    d.class_count = spec.classes;
    d.split = split;
    d.labels = labels[part];
    if (rows[part].empty()) {
      d.inputs = Tensor();
      return d;
    }
    std::vector<double> flat;
    flat.reserve(rows[part].size() * dim);
    for (auto& r : rows[part]) flat.insert(flat.end(), r.begin(), r.end());
    Shape shape{rows[part].size()};
    shape.insert(shape.end(), spec.sample_shape.begin(), spec.sample_shape.end());
    d.inputs = Tensor(std::move(shape), std::move(flat), Precision::F32);
    return d;
  };
  return {assemble(0, Split::Train), assemble(1, Split::Val),
          assemble(2, Split::Test)};
}

Dataset load_idx(const std::filesystem::path& images,
                 const std::filesystem::path& labels,
                 std::optional<int> classes) {
  auto read_be32 = [](io::BinaryReader& r) {
    auto b = r.bytes(4);
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) |
           (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
  };

  auto img = io::BinaryReader::open(images);
  if (read_be32(img) != 0x00000803u) {
    throw FormatError(images.string() +
                      ": bad IDX image magic (expected 0x00000803) at byte offset 0");
  }
  const std::size_t n = read_be32(img);
  const std::size_t rows = read_be32(img);
  const std::size_t cols = read_be32(img);
  if (n == 0 || rows == 0 || cols == 0) {
    throw FormatError(images.string() + ": empty IDX image header");
  }
  const std::size_t pixels = n * rows * cols;
  if (img.remaining() < pixels) {
    throw FormatError(images.string() + ": truncated IDX image data, expected " +
                      std::to_string(pixels) + " bytes but found " +
                      std::to_string(img.remaining()) + " at byte offset " +
                      std::to_string(img.offset()));
  }
  auto px = img.bytes(pixels);
  std::vector<double> values(pixels);
  for (std::size_t i = 0; i < pixels; ++i) values[i] = px[i] / 255.0;

  auto lab = io::BinaryReader::open(labels);
  if (read_be32(lab) != 0x00000801u) {
    throw FormatError(labels.string() +
                      ": bad IDX label magic (expected 0x00000801) at byte offset 0");
  }
  const std::size_t nl = read_be32(lab);
  if (nl != n) {
    throw FormatError(labels.string() + ": label count " + std::to_string(nl) +
                      " does not match image count " + std::to_string(n));
  }
  if (lab.remaining() < nl) {
    throw FormatError(labels.string() + ": truncated IDX label data, expected " +
                      std::to_string(nl) + " bytes but found " +
                      std::to_string(lab.remaining()) + " at byte offset " +
                      std::to_string(lab.offset()));
  }
  auto lb = lab.bytes(nl);
  Dataset d;
  d.labels.assign(lb.begin(), lb.end());
  const int max_label = *std::max_element(d.labels.begin(), d.labels.end());
  d.class_count = classes.value_or(std::max(max_label + 1, 2));
  for (std::size_t i = 0; i < n; ++i) {
    if (d.labels[i] >= d.class_count) {
      throw FormatError(labels.string() + ": label " +
                        std::to_string(d.labels[i]) + " out of range [0, " +
                        std::to_string(d.class_count) + ") at byte offset " +
                        std::to_string(8 + i));
    }
  }
  d.inputs = Tensor({n, 1, rows, cols}, std::move(values), Precision::F32);
  return d;
}

Dataset load_csv(const std::filesystem::path& path, const Shape& sample_shape,
                 bool has_header, std::optional<int> classes) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  const std::size_t width = shape_numel(sample_shape);
  std::vector<double> values;
  std::vector<int> labels;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (has_header && row == 1) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::size_t col = 0;
    auto bad = [&](const std::string& what) {
      throw FormatError(path.string() + ": row " + std::to_string(row) + ": " +
                        what);
    };
    while (std::getline(ls, cell, ',')) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        bad("unparseable value \"" + cell + "\" in column " + std::to_string(col));
      }
      if (used != cell.size()) bad("trailing characters in column " + std::to_string(col));
      if (col == 0) {
        if (v != std::floor(v) || v < 0) bad("label must be a non-negative integer");
        if (classes && v >= *classes) {
          bad("label " + cell + " out of range [0, " + std::to_string(*classes) + ")");
        }
        labels.push_back(static_cast<int>(v));
      } else {
        values.push_back(v);
      }
      ++col;
    }
    if (col != width + 1) {
      bad("expected " + std::to_string(width + 1) + " columns, got " +
          std::to_string(col));
    }
  }
  if (labels.empty()) throw FormatError(path.string() + ": no data rows");
  Dataset d;
  const int max_label = *std::max_element(labels.begin(), labels.end());
  d.class_count = classes.value_or(std::max(max_label + 1, 2));
  Shape shape{labels.size()};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  d.inputs = Tensor(std::move(shape), std::move(values), Precision::F32);
  d.labels = std::move(labels);
  return d;
}

void write_csv(const Dataset& data, const std::filesystem::path& path,
               bool header) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const std::size_t width = data.inputs.numel() / data.size();
  if (header) {
    out << "label";
    for (std::size_t j = 0; j < width; ++j) out << ",v" << j;
    out << '\n';
  }
  out.precision(9);  // round-trips every float exactly
  const auto v = data.inputs.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << data.labels[i];
    for (std::size_t j = 0; j < width; ++j) {
      out << ',' << static_cast<float>(v[i * width + j]);
    }
    out << '\n';
  }
}

std::pair<Dataset, Dataset> holdout_split(const Dataset& data,
                                          double val_fraction,
                                          std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("validation fraction must lie in (0, 1)");
  }
  auto perm = epoch_permutation(data.size(), seed, 0xa11da7e);
  auto n_val = static_cast<std::size_t>(std::floor(val_fraction * data.size()));
  n_val = std::clamp<std::size_t>(n_val, 1, data.size() - 1);
  std::vector<std::size_t> val(perm.begin(), perm.begin() + n_val);
  std::vector<std::size_t> train(perm.begin() + n_val, perm.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  Dataset t = data.subset(train);
  Dataset v = data.subset(val);
  t.split = Split::Train;
  v.split = Split::Val;
  return {std::move(t), std::move(v)};
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed,
                                           std::uint64_t epoch) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  auto rng = make_rng(seed, epoch);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

std::vector<Batch> batches(const Dataset& data, std::size_t batch_size,
                           std::uint64_t seed, std::uint64_t epoch,
                           bool drop_last, bool shuffle) {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  std::vector<std::size_t> order;
  if (shuffle) {
    order = epoch_permutation(data.size(), seed, epoch);
  } else {
    order.resize(data.size());
    std::iota(order.begin(), order.end(), 0);
  }
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    if (drop_last && end - start < batch_size) break;
    Batch b;
    b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
    b.inputs = gather_rows(data.inputs, b.indices);
    b.labels.reserve(b.indices.size());
    for (auto i : b.indices) b.labels.push_back(data.labels[i]);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace sdprune
