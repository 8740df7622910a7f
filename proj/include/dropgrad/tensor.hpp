#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dropgrad/errors.hpp"
#include "dropgrad/rng.hpp"

namespace dropgrad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense n-dimensional array, row-major contiguous. The one value carrier for
// activations, gradients and parameters; no views, no broadcasting.
template <typename Scalar>
class DenseTensor {
  static_assert(std::is_floating_point_v<Scalar>);

 public:
  DenseTensor() = default;

  explicit DenseTensor(Shape shape)
      : shape_(std::move(shape)), data_(numel(shape_), Scalar(0)) {}

  DenseTensor(Shape shape, std::vector<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static DenseTensor zeros(Shape shape) { return DenseTensor(std::move(shape)); }

  static DenseTensor full(Shape shape, Scalar value) {
    DenseTensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t dim) const { return shape_.at(dim); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::vector<Scalar>& storage() { return data_; }
  const std::vector<Scalar>& storage() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  // Same storage under a new shape; element count must match.
  DenseTensor reshaped(Shape new_shape) const {
    if (numel(new_shape) != data_.size()) {
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                       " changes element count");
    }
    return DenseTensor(std::move(new_shape), data_);
  }

  bool all_finite() const {
    for (Scalar v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  bool operator==(const DenseTensor& other) const = default;

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

// Non-finite scalars are a contract violation; callers check at module
// boundaries (dataset load, loss, gradients) rather than per kernel.
template <typename Scalar>
void assert_finite(const DenseTensor<Scalar>& t, const char* what) {
  if (!t.all_finite()) {
    throw NumericError(std::string(what) + " contains NaN/Inf");
  }
}

namespace detail {

template <typename Scalar>
using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatMap = Eigen::Map<MatrixRM<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const MatrixRM<Scalar>>;

template <typename Scalar>
ConstMatMap<Scalar> as_matrix(const DenseTensor<Scalar>& t, std::size_t rows, std::size_t cols) {
  if (t.size() != rows * cols) {
    throw ShapeError("cannot view tensor " + shape_str(t.shape()) + " as " +
                     std::to_string(rows) + "x" + std::to_string(cols) + " matrix");
  }
  return ConstMatMap<Scalar>(t.data(), static_cast<Eigen::Index>(rows),
                             static_cast<Eigen::Index>(cols));
}

template <typename Scalar>
MatMap<Scalar> as_matrix(DenseTensor<Scalar>& t, std::size_t rows, std::size_t cols) {
  if (t.size() != rows * cols) {
    throw ShapeError("cannot view tensor " + shape_str(t.shape()) + " as " +
                     std::to_string(rows) + "x" + std::to_string(cols) + " matrix");
  }
  return MatMap<Scalar>(t.data(), static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
}

template <typename Scalar>
void require_rank2(const DenseTensor<Scalar>& t, const char* name) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(name) + " must be rank-2, got " + shape_str(t.shape()));
  }
}

}  // namespace detail

// c[m x n] = a[m x k] * b[k x n]. Eigen's single-threaded gemm; bit-identical
// across repeated runs on the same build.
template <typename Scalar>
DenseTensor<Scalar> matmul(const DenseTensor<Scalar>& a, const DenseTensor<Scalar>& b) {
  detail::require_rank2(a, "matmul lhs");
  detail::require_rank2(b, "matmul rhs");
  if (a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul inner extents disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  DenseTensor<Scalar> c({a.extent(0), b.extent(1)});
  detail::as_matrix(c, a.extent(0), b.extent(1)).noalias() =
      detail::as_matrix(a, a.extent(0), a.extent(1)) *
      detail::as_matrix(b, b.extent(0), b.extent(1));
  return c;
}

// c = a^T * b without materializing the transpose.
template <typename Scalar>
DenseTensor<Scalar> matmul_tn(const DenseTensor<Scalar>& a, const DenseTensor<Scalar>& b) {
  detail::require_rank2(a, "matmul_tn lhs");
  detail::require_rank2(b, "matmul_tn rhs");
  if (a.extent(0) != b.extent(0)) {
    throw ShapeError("matmul_tn inner extents disagree: " + shape_str(a.shape()) + "^T x " +
                     shape_str(b.shape()));
  }
  DenseTensor<Scalar> c({a.extent(1), b.extent(1)});
  detail::as_matrix(c, a.extent(1), b.extent(1)).noalias() =
      detail::as_matrix(a, a.extent(0), a.extent(1)).transpose() *
      detail::as_matrix(b, b.extent(0), b.extent(1));
  return c;
}

// c = a * b^T without materializing the transpose.
template <typename Scalar>
DenseTensor<Scalar> matmul_nt(const DenseTensor<Scalar>& a, const DenseTensor<Scalar>& b) {
  detail::require_rank2(a, "matmul_nt lhs");
  detail::require_rank2(b, "matmul_nt rhs");
  if (a.extent(1) != b.extent(1)) {
    throw ShapeError("matmul_nt inner extents disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  DenseTensor<Scalar> c({a.extent(0), b.extent(0)});
  detail::as_matrix(c, a.extent(0), b.extent(0)).noalias() =
      detail::as_matrix(a, a.extent(0), a.extent(1)) *
      detail::as_matrix(b, b.extent(0), b.extent(1)).transpose();
  return c;
}

struct Conv2dGeometry {
  std::size_t batch, in_channels, in_h, in_w;
  std::size_t out_channels, kernel, stride, padding;
  std::size_t out_h, out_w;
};

inline Conv2dGeometry conv2d_geometry(const Shape& input, const Shape& kernel,
                                      std::size_t stride, std::size_t padding) {
  if (input.size() != 4) throw ShapeError("conv2d input must be BxCxHxW, got " + shape_str(input));
  if (kernel.size() != 4) {
    throw ShapeError("conv2d kernel must be CzxCaxKxK, got " + shape_str(kernel));
  }
  if (kernel[2] != kernel[3]) throw ShapeError("conv2d kernel must be square");
  if (kernel[1] != input[1]) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(input) + ", kernel " +
                     shape_str(kernel));
  }
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  Conv2dGeometry g{input[0], input[1], input[2], input[3],
                   kernel[0], kernel[2], stride,  padding,
                   0,        0};
  const std::size_t k = g.kernel;
  const std::size_t ph = g.in_h + 2 * padding;
  const std::size_t pw = g.in_w + 2 * padding;
  if (k > ph || k > pw) throw ShapeError("conv2d kernel larger than padded input");
  if ((ph - k) % stride != 0 || (pw - k) % stride != 0) {
    throw ShapeError("conv2d output extent is not integral for stride " + std::to_string(stride));
  }
  g.out_h = (ph - k) / stride + 1;
  g.out_w = (pw - k) / stride + 1;
  return g;
}

namespace detail {

// Patch matrix [B*H'*W' x Ca*K*K]; rows ordered (n, oy, ox), columns
// (c, ky, kx). Out-of-image taps are the padding zeros.
template <typename Scalar>
DenseTensor<Scalar> im2col(const DenseTensor<Scalar>& input, const Conv2dGeometry& g) {
  const std::size_t patch = g.in_channels * g.kernel * g.kernel;
  DenseTensor<Scalar> col({g.batch * g.out_h * g.out_w, patch});
  Scalar* out = col.data();
  const Scalar* in = input.data();
  const std::size_t in_plane = g.in_h * g.in_w;
  const std::size_t in_sample = g.in_channels * in_plane;
  std::size_t row = 0;
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox, ++row) {
        Scalar* dst = out + row * patch;
        for (std::size_t c = 0; c < g.in_channels; ++c) {
          const Scalar* plane = in + n * in_sample + c * in_plane;
          for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                static_cast<std::ptrdiff_t>(g.padding);
            for (std::size_t kx = 0; kx < g.kernel; ++kx, ++dst) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                  static_cast<std::ptrdiff_t>(g.padding);
              const bool inside = iy >= 0 && iy < static_cast<std::ptrdiff_t>(g.in_h) &&
                                  ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.in_w);
              *dst = inside ? plane[static_cast<std::size_t>(iy) * g.in_w +
                                    static_cast<std::size_t>(ix)]
                            : Scalar(0);
            }
          }
        }
      }
    }
  }
  return col;
}

// Scatter-add of a patch-gradient matrix back to input coordinates.
// Ascending row-major loop order fixes the accumulation order.
template <typename Scalar>
DenseTensor<Scalar> col2im(const DenseTensor<Scalar>& col, const Conv2dGeometry& g) {
  DenseTensor<Scalar> input({g.batch, g.in_channels, g.in_h, g.in_w});
  const std::size_t patch = g.in_channels * g.kernel * g.kernel;
  const Scalar* src = col.data();
  Scalar* out = input.data();
  const std::size_t in_plane = g.in_h * g.in_w;
  const std::size_t in_sample = g.in_channels * in_plane;
  std::size_t row = 0;
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox, ++row) {
        const Scalar* grad = src + row * patch;
        for (std::size_t c = 0; c < g.in_channels; ++c) {
          Scalar* plane = out + n * in_sample + c * in_plane;
          for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                static_cast<std::ptrdiff_t>(g.padding);
            for (std::size_t kx = 0; kx < g.kernel; ++kx, ++grad) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                  static_cast<std::ptrdiff_t>(g.padding);
              const bool inside = iy >= 0 && iy < static_cast<std::ptrdiff_t>(g.in_h) &&
                                  ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.in_w);
              if (inside) {
                plane[static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)] +=
                    *grad;
              }
            }
          }
        }
      }
    }
  }
  return input;
}

}  // namespace detail

// Cross-correlation of input [B x Ca x H x W] with kernel [Cz x Ca x K x K].
template <typename Scalar>
DenseTensor<Scalar> conv2d(const DenseTensor<Scalar>& input, const DenseTensor<Scalar>& kernel,
                           std::size_t stride, std::size_t padding) {
  const Conv2dGeometry g = conv2d_geometry(input.shape(), kernel.shape(), stride, padding);
  const DenseTensor<Scalar> col = detail::im2col(input, g);
  const std::size_t patch = g.in_channels * g.kernel * g.kernel;
  // rows [B*H'*W' x Cz] = col * kmat^T
  const DenseTensor<Scalar> kmat = kernel.reshaped({g.out_channels, patch});
  const DenseTensor<Scalar> rows = matmul_nt(col, kmat);
  DenseTensor<Scalar> out({g.batch, g.out_channels, g.out_h, g.out_w});
  const std::size_t spatial = g.out_h * g.out_w;
  const Scalar* src = rows.data();
  Scalar* dst = out.data();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t pos = 0; pos < spatial; ++pos) {
      const Scalar* r = src + (n * spatial + pos) * g.out_channels;
      for (std::size_t j = 0; j < g.out_channels; ++j) {
        dst[(n * g.out_channels + j) * spatial + pos] = r[j];
      }
    }
  }
  return out;
}

// Pointwise ops. gelu uses the tanh approximation
//   0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
// with constants kGeluC0 = sqrt(2/pi) and kGeluC1 = 0.044715.
inline constexpr double kGeluC0 = 0.7978845608028654;
inline constexpr double kGeluC1 = 0.044715;

template <typename Scalar>
Scalar gelu_scalar(Scalar x) {
  const Scalar u = Scalar(kGeluC0) * (x + Scalar(kGeluC1) * x * x * x);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(u));
}

template <typename Scalar>
Scalar gelu_grad_scalar(Scalar x) {
  const Scalar u = Scalar(kGeluC0) * (x + Scalar(kGeluC1) * x * x * x);
  const Scalar t = std::tanh(u);
  const Scalar du = Scalar(kGeluC0) * (Scalar(1) + Scalar(3) * Scalar(kGeluC1) * x * x);
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * du;
}

template <typename Scalar>
DenseTensor<Scalar> relu(const DenseTensor<Scalar>& x) {
  DenseTensor<Scalar> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > Scalar(0) ? x[i] : Scalar(0);
  return y;
}

template <typename Scalar>
DenseTensor<Scalar> gelu(const DenseTensor<Scalar>& x) {
  DenseTensor<Scalar> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_scalar(x[i]);
  return y;
}

template <typename Scalar>
DenseTensor<Scalar> add(const DenseTensor<Scalar>& a, const DenseTensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  DenseTensor<Scalar> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
  return y;
}

template <typename Scalar>
DenseTensor<Scalar> scale(const DenseTensor<Scalar>& a, Scalar factor) {
  DenseTensor<Scalar> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * factor;
  return y;
}

template <typename Scalar>
DenseTensor<Scalar> rand_uniform(Rng& rng, Shape shape, double lo, double hi) {
  if (!(lo < hi)) throw ConfigError("rand_uniform requires lo < hi");
  DenseTensor<Scalar> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<Scalar>(rng.uniform(lo, hi));
  }
  return t;
}

template <typename Scalar>
DenseTensor<Scalar> rand_normal(Rng& rng, Shape shape, double mean, double std) {
  if (std < 0) throw ConfigError("rand_normal requires std >= 0");
  DenseTensor<Scalar> t(std::move(shape));
  for (std::size_t i = 0; i + 1 < t.size(); i += 2) {
    const auto [z0, z1] = rng.next_normal_pair();
    t[i] = static_cast<Scalar>(mean + std * z0);
    t[i + 1] = static_cast<Scalar>(mean + std * z1);
  }
  if (t.size() % 2 == 1) {
    const auto [z0, z1] = rng.next_normal_pair();
    (void)z1;
    t[t.size() - 1] = static_cast<Scalar>(mean + std * z0);
  }
  return t;
}

}  // namespace dropgrad
