#include "sdprune/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <utility>

#include <Eigen/Core>

#include "sdprune/error.hpp"

namespace sdprune {
namespace {

Precision widest(const Tensor& a) { return a.precision(); }
Precision widest(const Tensor& a, const Tensor& b) {
  return (a.precision() == Precision::F64 || b.precision() == Precision::F64)
             ? Precision::F64
             : Precision::F32;
}

bool tracks(const Tape* tape, const Tensor& a) {
  return tape != nullptr && a.requires_grad();
}
bool tracks(const Tape* tape, const Tensor& a, const Tensor& b) {
  return tape != nullptr && (a.requires_grad() || b.requires_grad());
}

Tensor make_output(Shape shape, std::vector<double> values,
                   Precision precision, bool requires_grad, const char* op) {
  try {
    return Tensor(std::move(shape), std::move(values), precision,
                  requires_grad);
  } catch (const NumericalError&) {
    throw NumericalError(std::string("non-finite value produced by ") + op);
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + " tensor, got " +
                         shape_to_string(t.shape()));
  }
}

using RowMajor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMajor>;
using View = Eigen::Map<RowMajor>;

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

// C[m x n] = beta * C + A[m x k] . B[k x n], beta in {0, 1}
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, double beta = 1.0) {
  View cv(c, idx(m), idx(n));
  const auto prod = ConstView(a, idx(m), idx(k)) * ConstView(b, idx(k), idx(n));
  if (beta == 0.0) cv.noalias() = prod;
  else cv.noalias() += prod;
}

// C[m x n] += A[m x k] . B[n x k]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c) {
  View(c, idx(m), idx(n)).noalias() +=
      ConstView(a, idx(m), idx(k)) * ConstView(b, idx(n), idx(k)).transpose();
}

// C[m x n] = beta * C + A[k x m]^T . B[k x n], beta in {0, 1}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, double beta = 1.0) {
  View cv(c, idx(m), idx(n));
  const auto prod =
      ConstView(a, idx(k), idx(m)).transpose() * ConstView(b, idx(k), idx(n));
  if (beta == 0.0) cv.noalias() = prod;
  else cv.noalias() += prod;
}

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t spatial() const { return ho * wo; }
};

// Output columns [lo, hi) whose input x = ox*stride + j - pad is in range.
std::pair<std::size_t, std::size_t> valid_range(std::size_t j, std::size_t pad,
                                                std::size_t stride,
                                                std::size_t extent,
                                                std::size_t out) {
  const std::size_t lo = j >= pad ? 0 : (pad - j + stride - 1) / stride;
  // Largest ox with ox*stride + j - pad <= extent - 1.
  const std::size_t top = extent - 1 + pad;
  const std::size_t hi = top < j ? 0 : std::min(out, (top - j) / stride + 1);
  return {std::min(lo, hi), hi};
}

// cols[(c*kh + i)*kw + j][oy*wo + ox] for one sample; rows are `ld` apart so
// that a batch can share one patch matrix.
void im2col(const ConvGeometry& g, const double* img, double* cols,
            std::size_t ld) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      const auto [ylo, yhi] = valid_range(i, g.pad, g.stride, g.h, g.ho);
      for (std::size_t j = 0; j < g.kw; ++j) {
        const auto [xlo, xhi] = valid_range(j, g.pad, g.stride, g.w, g.wo);
        double* row = cols + ((c * g.kh + i) * g.kw + j) * ld;
        std::fill(row, row + ylo * g.wo, 0.0);
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          double* dst = row + oy * g.wo;
          const double* src =
              img + (c * g.h + oy * g.stride + i - g.pad) * g.w;
          std::fill(dst, dst + xlo, 0.0);
          for (std::size_t ox = xlo; ox < xhi; ++ox) {
            dst[ox] = src[ox * g.stride + j - g.pad];
          }
          std::fill(dst + xhi, dst + g.wo, 0.0);
        }
        std::fill(row + yhi * g.wo, row + g.spatial(), 0.0);
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, std::size_t ld,
                double* img) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      const auto [ylo, yhi] = valid_range(i, g.pad, g.stride, g.h, g.ho);
      for (std::size_t j = 0; j < g.kw; ++j) {
        const auto [xlo, xhi] = valid_range(j, g.pad, g.stride, g.w, g.wo);
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * ld;
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          const double* src = row + oy * g.wo;
          double* dst = img + (c * g.h + oy * g.stride + i - g.pad) * g.w;
          for (std::size_t ox = xlo; ox < xhi; ++ox) {
            dst[ox * g.stride + j - g.pad] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

void Tape::record(Tensor output, BackwardFn backward) {
  entries_.push_back({std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_to_string(loss.shape())
                                        : std::string("<undefined>")));
  }
  if (entries_.empty()) throw ContractError("backward() on an empty tape");
  for (auto& e : entries_) {
    if (e.output.has_grad()) e.output.zero_grad();
  }
  Tensor seed = loss;
  seed.mutable_grad()[0] = 1.0;
  visit_order_.clear();
  visit_order_.reserve(entries_.size());
  for (std::size_t i = entries_.size(); i-- > 0;) {
    visit_order_.push_back(i);
    if (entries_[i].output.has_grad()) entries_[i].backward();
  }
}

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " +
                         shape_to_string(a.shape()) + " . " +
                         shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  const bool grad = tracks(tape, a, b);
  Tensor result = make_output({m, n}, std::move(out), widest(a, b), grad,
                              "matmul");
  if (grad) {
    tape->record(result, [a = a, b = b, result, m, n, k]() mutable {
      const double* g = result.grad().data();
      if (a.requires_grad()) {
        gemm_nt(m, k, n, g, b.data().data(), a.mutable_grad().data());
      }
      if (b.requires_grad()) {
        gemm_tn(k, n, m, a.data().data(), g, b.mutable_grad().data());
      }
    });
  }
  return result;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, Conv2dParams params,
              Tape* tape) {
  require_rank(input, 4, "conv2d");
  require_rank(kernel, 4, "conv2d");
  if (params.stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = params.stride;
  g.pad = params.padding;
  if (kernel.dim(1) != g.cin) {
    throw DimensionError("conv2d: input channels differ, input " +
                         shape_to_string(input.shape()) + " kernel " +
                         shape_to_string(kernel.shape()));
  }
  if (g.kh > g.h + 2 * g.pad || g.kw > g.w + 2 * g.pad) {
    throw DimensionError("conv2d: kernel " + shape_to_string(kernel.shape()) +
                         " larger than padded input " +
                         shape_to_string(input.shape()) + " with padding " +
                         std::to_string(g.pad));
  }
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

  // One patch matrix [patch x (n * spatial)] for the whole batch, so each
  // direction is a single GEMM.
  const std::size_t in_stride = g.cin * g.h * g.w;
  const std::size_t sp = g.spatial();
  const std::size_t ld = g.n * sp;
  auto cols = std::make_shared<std::vector<double>>(g.patch() * ld);
  const double* in = input.data().data();
  for (std::size_t s = 0; s < g.n; ++s) {
    im2col(g, in + s * in_stride, cols->data() + s * sp, ld);
  }
  std::vector<double> wide(g.cout * ld);
  gemm_nn(g.cout, ld, g.patch(), kernel.data().data(), cols->data(),
          wide.data(), 0.0);
  std::vector<double> out(g.n * g.cout * sp);
  for (std::size_t s = 0; s < g.n; ++s) {
    for (std::size_t c = 0; c < g.cout; ++c) {
      std::copy_n(wide.data() + c * ld + s * sp, sp,
                  out.data() + (s * g.cout + c) * sp);
    }
  }
  const bool grad = tracks(tape, input, kernel);
  Tensor result = make_output({g.n, g.cout, g.ho, g.wo}, std::move(out),
                              widest(input, kernel), grad, "conv2d");
  if (grad) {
    if (!kernel.requires_grad()) cols.reset();
    tape->record(result, [input = input, kernel = kernel, result, g, cols]() mutable {
      const std::size_t in_stride = g.cin * g.h * g.w;
      const std::size_t sp = g.spatial();
      const std::size_t ld = g.n * sp;
      const double* gout = result.grad().data();
      std::vector<double> gwide(g.cout * ld);
      for (std::size_t s = 0; s < g.n; ++s) {
        for (std::size_t c = 0; c < g.cout; ++c) {
          std::copy_n(gout + (s * g.cout + c) * sp, sp,
                      gwide.data() + c * ld + s * sp);
        }
      }
      if (cols) {
        gemm_nt(g.cout, g.patch(), ld, gwide.data(), cols->data(),
                kernel.mutable_grad().data());
        cols.reset();
      }
      if (input.requires_grad()) {
        std::vector<double> gcols(g.patch() * ld);
        gemm_tn(g.patch(), ld, g.cout, kernel.data().data(), gwide.data(),
                gcols.data(), 0.0);
        double* gi = input.mutable_grad().data();
        for (std::size_t s = 0; s < g.n; ++s) {
          col2im_add(g, gcols.data() + s * sp, ld, gi + s * in_stride);
        }
      }
    });
  }
  return result;
}

Tensor relu(const Tensor& x, Tape* tape) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  std::transform(in.begin(), in.end(), out.begin(),
                 [](double v) { return v > 0.0 ? v : 0.0; });
  const bool grad = tracks(tape, x);
  Tensor result = make_output(x.shape(), std::move(out), widest(x), grad,
                              "relu");
  if (grad) {
    tape->record(result, [x = x, result]() mutable {
      const auto g = result.grad();
      const auto in = x.data();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (in[i] > 0.0) gx[i] += g[i];
      }
    });
  }
  return result;
}

Tensor maxpool2d(const Tensor& x, std::size_t window, Tape* tape) {
  require_rank(x, 4, "maxpool2d");
  if (window == 0) throw DimensionError("maxpool2d: window must be >= 1");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window > h || window > w) {
    throw DimensionError("maxpool2d: window " + std::to_string(window) +
                         " exceeds input " + shape_to_string(x.shape()));
  }
  const std::size_t ho = h / window, wo = w / window;
  std::vector<double> out(n * c * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  const auto in = x.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = base + (oy * window) * w + ox * window;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = base + (oy * window + i) * w +
                                    ox * window + j;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (plane * ho + oy) * wo + ox;
        out[o] = in[best];
        argmax[o] = best;
      }
    }
  }
  const bool grad = tracks(tape, x);
  Tensor result = make_output({n, c, ho, wo}, std::move(out), widest(x), grad,
                              "maxpool2d");
  if (grad) {
    tape->record(result, [x = x, result, argmax = std::move(argmax)]() mutable {
      const auto g = result.grad();
      auto gx = x.mutable_grad();
      for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
    });
  }
  return result;
}

Tensor flatten(const Tensor& x, Tape* tape) {
  if (x.rank() < 2) {
    throw DimensionError("flatten: expected rank >= 2, got " +
                         shape_to_string(x.shape()));
  }
  const std::size_t n = x.dim(0);
  const bool grad = tracks(tape, x);
  Tensor result =
      make_output({n, x.numel() / n},
                  std::vector<double>(x.data().begin(), x.data().end()),
                  widest(x), grad, "flatten");
  if (grad) {
    tape->record(result, [x = x, result]() mutable {
      const auto g = result.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return result;
}

Tensor add_bias(const Tensor& x, const Tensor& bias, Tape* tape) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw DimensionError("add_bias: expected [N x C] or [N x C x H x W], got " +
                         shape_to_string(x.shape()));
  }
  require_rank(bias, 1, "add_bias");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (bias.dim(0) != c) {
    throw DimensionError("add_bias: bias " + shape_to_string(bias.shape()) +
                         " does not match channel axis of " +
                         shape_to_string(x.shape()));
  }
  const std::size_t inner = x.numel() / (n * c);
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto b = bias.data();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = out.data() + (s * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += b[ch];
    }
  }
  const bool grad = tracks(tape, x, bias);
  Tensor result = make_output(x.shape(), std::move(out), widest(x, bias),
                              grad, "add_bias");
  if (grad) {
    tape->record(result, [x = x, bias = bias, result, n, c, inner]() mutable {
      const auto g = result.grad();
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double* p = g.data() + (s * c + ch) * inner;
            double acc = 0.0;
            for (std::size_t i = 0; i < inner; ++i) acc += p[i];
            gb[ch] += acc;
          }
        }
      }
    });
  }
  return result;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes differ, " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  const bool grad = tracks(tape, a, b);
  Tensor result = make_output(a.shape(), std::move(out), widest(a, b), grad,
                              "add");
  if (grad) {
    tape->record(result, [a = a, b = b, result]() mutable {
      const auto g = result.grad();
      for (Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto gt = t->mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return result;
}

Tensor scale(const Tensor& x, double factor, Tape* tape) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  const bool grad = tracks(tape, x);
  Tensor result = make_output(x.shape(), std::move(out), widest(x), grad,
                              "scale");
  if (grad) {
    tape->record(result, [x = x, result, factor]() mutable {
      const auto g = result.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
    });
  }
  return result;
}

Tensor sum(const Tensor& x, Tape* tape) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const bool grad = tracks(tape, x);
  Tensor result = make_output({1}, {acc}, widest(x), grad, "sum");
  if (grad) {
    tape->record(result, [x = x, result]() mutable {
      const double g = result.grad()[0];
      for (auto& v : x.mutable_grad()) v += g;
    });
  }
  return result;
}

namespace {

void check_logits(const Tensor& z, const char* op) {
  require_rank(z, 2, op);
  if (z.dim(1) < 2) {
    throw DimensionError(std::string(op) + ": need at least 2 classes, got " +
                         shape_to_string(z.shape()));
  }
}

// Row-wise log-softmax in 64-bit.
std::vector<double> log_softmax_rows(const Tensor& z) {
  const std::size_t b = z.dim(0), c = z.dim(1);
  std::vector<double> out(b * c);
  const auto in = z.data();
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = in.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  return out;
}

}  // namespace

Tensor log_softmax(const Tensor& z, Tape* tape) {
  check_logits(z, "log_softmax");
  const bool grad = tracks(tape, z);
  Tensor result = make_output(z.shape(), log_softmax_rows(z), widest(z), grad,
                              "log_softmax");
  if (grad) {
    tape->record(result, [z = z, result]() mutable {
      const std::size_t b = z.dim(0), c = z.dim(1);
      const auto g = result.grad();
      const auto ls = result.data();
      auto gz = z.mutable_grad();
      for (std::size_t i = 0; i < b; ++i) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < c; ++j) gsum += g[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          gz[i * c + j] += g[i * c + j] - std::exp(ls[i * c + j]) * gsum;
        }
      }
    });
  }
  return result;
}

Tensor softmax(const Tensor& z) {
  check_logits(z, "softmax");
  auto out = log_softmax_rows(z);
  for (auto& v : out) v = std::exp(v);
  return make_output(z.shape(), std::move(out), widest(z), false, "softmax");
}

Tensor cross_entropy(const Tensor& z, std::span<const int> labels,
                     Tape* tape) {
  check_logits(z, "cross_entropy");
  const std::size_t b = z.dim(0), c = z.dim(1);
  if (labels.size() != b) {
    throw ValidationError("cross_entropy: " + std::to_string(labels.size()) +
                          " labels for a batch of " + std::to_string(b));
  }
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw ValidationError("cross_entropy: label " +
                            std::to_string(labels[i]) + " at index " +
                            std::to_string(i) + " outside [0, " +
                            std::to_string(c) + ")");
    }
  }
  auto ls = log_softmax_rows(z);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    loss -= ls[i * c + static_cast<std::size_t>(labels[i])];
  }
  loss /= static_cast<double>(b);
  const bool grad = tracks(tape, z);
  Tensor result = make_output({1}, {loss}, widest(z), grad, "cross_entropy");
  if (grad) {
    std::vector<int> y(labels.begin(), labels.end());
    tape->record(result, [z = z, result, ls = std::move(ls), y = std::move(y), b = b, c]() mutable {
      const double g = result.grad()[0] / static_cast<double>(b);
      auto gz = z.mutable_grad();
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const double onehot =
              static_cast<std::size_t>(y[i]) == j ? 1.0 : 0.0;
          gz[i * c + j] += g * (std::exp(ls[i * c + j]) - onehot);
        }
      }
    });
  }
  return result;
}

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f,
                              Tensor x, double step) {
  if (x.precision() != Precision::F64) {
    throw ContractError("finite_difference_grad requires a 64-bit tensor");
  }
  if (!(step > 0.0)) throw ContractError("finite difference step must be > 0");
  std::vector<double> out(x.numel());
  auto values = x.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + step;
    const double up = f(x);
    values[i] = saved - step;
    const double down = f(x);
    values[i] = saved;
    out[i] = (up - down) / (2.0 * step);
  }
  return Tensor(x.shape(), std::move(out), Precision::F64);
}

}  // namespace sdprune
