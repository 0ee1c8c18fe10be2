#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "sdprune/tensor.hpp"

namespace sdprune {

/// Define-by-run record of differentiable operations.
///
/// Every op below takes an optional `Tape*`. When a tape is given and at least
/// one operand requires a gradient, the op appends an entry holding its output
/// and a closure that accumulates the output gradient into the operands.
/// backward() replays the entries in exact reverse order of recording.
///
/// A tape is used from one thread at a time. Distinct tapes share no state.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(Tensor output, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and propagates to every reachable leaf. Leaf
  // gradients accumulate across calls until cleared; intermediate gradients
  // are reset at the start of every call.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  // Entry visit order of the most recent backward() call, as indices into
  // the recording order.
  const std::vector<std::size_t>& last_visit_order() const {
    return visit_order_;
  }

 private:
  struct Entry {
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
  std::vector<std::size_t> visit_order_;
};

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

// Cross-correlation of [N x Cin x H x W] with [Cout x Cin x kh x kw].
Tensor conv2d(const Tensor& input, const Tensor& kernel, Conv2dParams params,
              Tape* tape = nullptr);

// Subgradient at exactly 0 is 0.
Tensor relu(const Tensor& x, Tape* tape = nullptr);

// Non-overlapping window x window pooling over [N x C x H x W]; trailing rows
// and columns that do not fill a window are dropped. Ties route the gradient
// to the first maximal element in row-major window order.
Tensor maxpool2d(const Tensor& x, std::size_t window, Tape* tape = nullptr);

// [N x ...] -> [N x prod(...)]
Tensor flatten(const Tensor& x, Tape* tape = nullptr);

// Adds bias[c] along axis 1 of a [N x C] or [N x C x H x W] tensor.
Tensor add_bias(const Tensor& x, const Tensor& bias, Tape* tape = nullptr);

// Elementwise sum of equally shaped tensors.
Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor scale(const Tensor& x, double factor, Tape* tape = nullptr);
// Sum of all entries, shape [1].
Tensor sum(const Tensor& x, Tape* tape = nullptr);

// Row-wise over the class axis of [B x C], max-subtracted.
Tensor log_softmax(const Tensor& z, Tape* tape = nullptr);
// Row-wise softmax without gradient tracking.
Tensor softmax(const Tensor& z);

// Mean over the batch of -log_softmax(z)[i, y_i]. Shape [1].
Tensor cross_entropy(const Tensor& z, std::span<const int> labels,
                     Tape* tape = nullptr);

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every entry of
// x. Requires a 64-bit tensor; x is restored before returning.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f,
                              Tensor x, double step = 1e-5);

}  // namespace sdprune
