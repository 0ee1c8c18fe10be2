#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sdprune {

using Shape = std::vector<std::size_t>;

// Storage precision of a tensor. Values are held in 64-bit slots; in F32 mode
// every stored value is rounded to the nearest float after each write, so the
// observable data is exactly what a float buffer would hold.
enum class Precision { F32, F64 };

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  Precision precision = Precision::F32;
  bool requires_grad = false;
};
}  // namespace detail

/// Shared handle to a dense row-major array with an optional gradient buffer.
///
/// Copying a Tensor copies the handle, not the buffer: parameters held by a
/// model and the tensors recorded on a Tape refer to the same storage. Use
/// clone() for an independent deep copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values,
         Precision precision = Precision::F32, bool requires_grad = false);

  static Tensor zeros(Shape shape, Precision precision = Precision::F32);
  static Tensor full(Shape shape, double value,
                     Precision precision = Precision::F32);
  static Tensor scalar(double value, Precision precision = Precision::F32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  Precision precision() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  // Allocates a zero gradient buffer if none exists.
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad();

  // Rounds the stored values to float when in F32 mode; no-op in F64 mode.
  void quantize();
  // Throws NumericalError naming `what` if any value is NaN or Inf.
  void check_finite(const char* what) const;

  // Deep copy of shape and data. The copy has no gradient.
  Tensor clone() const;
  // Deep copy with a new shape of equal element count.
  Tensor reshaped(Shape shape) const;
  // Returns a copy converted to `precision`.
  Tensor to(Precision precision) const;

  bool is_same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  const detail::TensorImpl& impl() const;
  detail::TensorImpl& impl();
  // quantize() and check_finite() in one pass.
  void quantize_and_check(const char* what);

  std::shared_ptr<detail::TensorImpl> impl_;
};

// Bitwise equality of shape and data.
bool bit_equal(const Tensor& a, const Tensor& b);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
// Ordered name -> tensor list. Order is significant (it fixes the global
// flat index used when pruning).
using NamedTensors = std::vector<NamedTensor>;

// FNV-1a over the raw bytes of every value, names included.
std::uint64_t fingerprint(const NamedTensors& tensors);

}  // namespace sdprune
