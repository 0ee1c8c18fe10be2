#include "sdprune/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "sdprune/error.hpp"

namespace sdprune {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, Precision precision,
               bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto e : shape) {
    if (e == 0) {
      throw DimensionError("tensor extents must be positive, got " +
                           shape_to_string(shape));
    }
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->precision = precision;
  impl_->requires_grad = requires_grad;
  quantize_and_check("tensor construction");
}

Tensor Tensor::zeros(Shape shape, Precision precision) {
  return full(std::move(shape), 0.0, precision);
}

Tensor Tensor::full(Shape shape, double value, Precision precision) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), precision);
}

Tensor Tensor::scalar(double value, Precision precision) {
  return Tensor({1}, {value}, precision);
}

const detail::TensorImpl& Tensor::impl() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

detail::TensorImpl& Tensor::impl() {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for shape " + shape_to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }
Precision Tensor::precision() const { return impl().precision; }

std::span<const double> Tensor::data() const { return impl().data; }
std::span<double> Tensor::mutable_data() { return impl().data; }

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on non-scalar tensor of shape " +
                        shape_to_string(shape()));
  }
  return impl().data[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool value) { impl().requires_grad = value; }

bool Tensor::has_grad() const { return !impl().grad.empty(); }
std::span<const double> Tensor::grad() const { return impl().grad; }

std::span<double> Tensor::mutable_grad() {
  auto& d = impl();
  if (d.grad.empty()) d.grad.assign(d.data.size(), 0.0);
  return d.grad;
}

void Tensor::zero_grad() {
  auto& g = impl().grad;
  std::fill(g.begin(), g.end(), 0.0);
}

void Tensor::clear_grad() {
  impl().grad.clear();
  impl().grad.shrink_to_fit();
}

void Tensor::quantize() {
  auto& d = impl();
  if (d.precision != Precision::F32) return;
  for (auto& v : d.data) v = static_cast<double>(static_cast<float>(v));
}

void Tensor::quantize_and_check(const char* what) {
  auto& d = impl().data;
  if (impl().precision == Precision::F64) {
    check_finite(what);
    return;
  }
  // Same lane trick as check_finite, fused with the rounding pass.
  double a0 = 0.0, a1 = 0.0;
  std::size_t i = 0;
  for (; i + 2 <= d.size(); i += 2) {
    d[i] = static_cast<double>(static_cast<float>(d[i]));
    d[i + 1] = static_cast<double>(static_cast<float>(d[i + 1]));
    a0 += d[i] * 0.0;
    a1 += d[i + 1] * 0.0;
  }
  for (; i < d.size(); ++i) {
    d[i] = static_cast<double>(static_cast<float>(d[i]));
    a0 += d[i] * 0.0;
  }
  if (!(a0 + a1 == 0.0)) {
    throw NumericalError(std::string("non-finite value produced by ") + what);
  }
}

void Tensor::check_finite(const char* what) const {
  // v * 0 is NaN exactly when v is inf or NaN; four lanes keep this vectorized.
  const auto& d = impl().data;
  double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= d.size(); i += 4) {
    a0 += d[i] * 0.0;
    a1 += d[i + 1] * 0.0;
    a2 += d[i + 2] * 0.0;
    a3 += d[i + 3] * 0.0;
  }
  for (; i < d.size(); ++i) a0 += d[i] * 0.0;
  if (!(a0 + a1 + a2 + a3 == 0.0)) {
    throw NumericalError(std::string("non-finite value produced by ") + what);
  }
}

Tensor Tensor::clone() const {
  auto copy = std::make_shared<detail::TensorImpl>();
  copy->shape = impl().shape;
  copy->data = impl().data;
  copy->precision = impl().precision;
  copy->requires_grad = false;
  return Tensor(std::move(copy));
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_to_string(this->shape()) +
                         " to " + shape_to_string(shape));
  }
  Tensor out = clone();
  out.impl().shape = std::move(shape);
  return out;
}

Tensor Tensor::to(Precision precision) const {
  Tensor out = clone();
  out.impl().precision = precision;
  out.quantize();
  return out;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto x = a.data();
  const auto y = b.data();
  return std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
}

std::uint64_t fingerprint(const NamedTensors& tensors) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& nt : tensors) {
    mix(nt.name.data(), nt.name.size());
    const auto d = nt.tensor.data();
    mix(d.data(), d.size() * sizeof(double));
  }
  return h;
}

}  // namespace sdprune
