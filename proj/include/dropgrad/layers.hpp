#pragma once

#include <cmath>
#include <cstdint>
#include <type_traits>
#include <utility>
#include <vector>

#include "dropgrad/errors.hpp"
#include "dropgrad/sparsity.hpp"
#include "dropgrad/tensor.hpp"

namespace dropgrad {

// Packed 1-bit mask; the whole relu cache.
class BitMask {
 public:
  BitMask() = default;
  explicit BitMask(std::size_t n) : n_(n), words_((n + 63) / 64, 0) {}

  std::size_t size() const { return n_; }
  bool get(std::size_t i) const { return (words_[i >> 6] >> (i & 63)) & 1u; }
  void set(std::size_t i) { words_[i >> 6] |= std::uint64_t{1} << (i & 63); }
  std::uint64_t byte_count() const { return (n_ + 7) / 8; }

 private:
  std::size_t n_ = 0;
  std::vector<std::uint64_t> words_;
};

enum class CacheKind { none, dense, sparse, bitmask };

// What a layer keeps from its forward pass for the backward pass.
template <typename Scalar>
struct LayerCache {
  CacheKind kind = CacheKind::none;
  DenseTensor<Scalar> dense;
  SparseActivation<Scalar> sparse;
  BitMask mask;
  Shape input_shape;  // always recorded, also for cacheless layers

  static LayerCache make_none(Shape input_shape) {
    LayerCache c;
    c.kind = CacheKind::none;
    c.input_shape = std::move(input_shape);
    return c;
  }
  static LayerCache make_dense(DenseTensor<Scalar> a) {
    LayerCache c;
    c.kind = CacheKind::dense;
    c.input_shape = a.shape();
    c.dense = std::move(a);
    return c;
  }
  static LayerCache make_sparse(SparseActivation<Scalar> s) {
    LayerCache c;
    c.kind = CacheKind::sparse;
    c.input_shape = s.original_shape;
    c.sparse = std::move(s);
    return c;
  }
  static LayerCache make_mask(BitMask m, Shape input_shape) {
    LayerCache c;
    c.kind = CacheKind::bitmask;
    c.input_shape = std::move(input_shape);
    c.mask = std::move(m);
    return c;
  }

  std::uint64_t value_bytes() const {
    switch (kind) {
      case CacheKind::dense: return static_cast<std::uint64_t>(dense.size()) * sizeof(Scalar);
      case CacheKind::sparse:
        return static_cast<std::uint64_t>(sparse.retained) * sizeof(Scalar);
      case CacheKind::bitmask: return mask.byte_count();
      case CacheKind::none: return 0;
    }
    return 0;
  }
  std::uint64_t index_bytes() const {
    return kind == CacheKind::sparse
               ? static_cast<std::uint64_t>(sparse.retained) * sizeof(std::uint32_t)
               : 0;
  }
  // Dense scratch allocated transiently when the backward pass recovers a
  // sparsified cache.
  std::uint64_t recover_scratch_bytes() const {
    return kind == CacheKind::sparse
               ? static_cast<std::uint64_t>(sparse.original_size()) * sizeof(Scalar)
               : 0;
  }
};

template <typename Scalar>
struct LayerGrads {
  DenseTensor<Scalar> d_theta;
  DenseTensor<Scalar> d_bias;  // empty when the layer has no bias
  DenseTensor<Scalar> d_input;
};

template <typename Scalar>
struct ForwardResult {
  DenseTensor<Scalar> output;
  LayerCache<Scalar> cache;
};

namespace detail {

// Cache the layer input per DropSpec. The forward output is always computed
// from the full input; dropping touches only what is kept for backward.
template <typename Scalar>
LayerCache<Scalar> cache_input(const DenseTensor<Scalar>& a, const DropSpec& spec, Rng* rng) {
  if (spec.strategy == DropStrategy::none) {
    return LayerCache<Scalar>::make_dense(a);
  }
  return LayerCache<Scalar>::make_sparse(drop_apply(a, spec, rng));
}

template <typename Scalar>
DenseTensor<Scalar> cached_input(const LayerCache<Scalar>& cache) {
  switch (cache.kind) {
    case CacheKind::dense: return cache.dense;
    case CacheKind::sparse: return recover(cache.sparse);
    default: throw NumericError("layer backward requires a dense or sparse input cache");
  }
}

template <typename Scalar>
DenseTensor<Scalar> column_sums(const DenseTensor<Scalar>& m) {
  DenseTensor<Scalar> s({m.extent(1)});
  for (std::size_t r = 0; r < m.extent(0); ++r) {
    for (std::size_t c = 0; c < m.extent(1); ++c) s[c] += m[r * m.extent(1) + c];
  }
  return s;
}

}  // namespace detail

// z = a * theta^T (+ bias). theta layout is [Cz x Ca]. Inputs with per-sample
// extent Ca under any shape are accepted and viewed as [B x Ca].
template <typename Scalar>
ForwardResult<Scalar> fc_forward(const DenseTensor<Scalar>& a, const DenseTensor<Scalar>& theta,
                                 const DenseTensor<std::type_identity_t<Scalar>>* bias,
                                 const DropSpec& spec, Rng* rng = nullptr) {
  detail::require_rank2(theta, "fc theta");
  const std::size_t c_out = theta.extent(0);
  const std::size_t c_in = theta.extent(1);
  if (a.size() % c_in != 0 || a.size() == 0) {
    throw ShapeError("fc input " + shape_str(a.shape()) + " is not a batch of " +
                     std::to_string(c_in) + "-vectors");
  }
  const std::size_t batch = a.size() / c_in;
  if (!a.shape().empty() && a.extent(0) != batch) {
    throw ShapeError("fc input " + shape_str(a.shape()) + " leading extent must be the batch");
  }
  if (bias != nullptr && bias->size() != c_out) {
    throw ShapeError("fc bias size " + std::to_string(bias->size()) + " != " +
                     std::to_string(c_out));
  }

  DenseTensor<Scalar> z({batch, c_out});
  detail::as_matrix(z, batch, c_out).noalias() =
      detail::as_matrix(a, batch, c_in) * detail::as_matrix(theta, c_out, c_in).transpose();
  if (bias != nullptr) {
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t j = 0; j < c_out; ++j) z[n * c_out + j] += (*bias)[j];
    }
  }
  return {std::move(z), detail::cache_input(a, spec, rng)};
}

// d_theta = d_z^T * R(cache); d_input = d_z * theta (exact under dropping,
// it uses only theta); d_bias = column sums of d_z (exact).
template <typename Scalar>
LayerGrads<Scalar> fc_backward(const LayerCache<Scalar>& cache, const DenseTensor<Scalar>& theta,
                               const DenseTensor<Scalar>& d_z, bool has_bias) {
  detail::require_rank2(d_z, "fc d_z");
  const std::size_t c_out = theta.extent(0);
  const std::size_t c_in = theta.extent(1);
  const std::size_t batch = d_z.extent(0);
  if (d_z.extent(1) != c_out) {
    throw ShapeError("fc d_z " + shape_str(d_z.shape()) + " does not match theta " +
                     shape_str(theta.shape()));
  }
  const DenseTensor<Scalar> a = detail::cached_input(cache);
  if (a.size() != batch * c_in) {
    throw ShapeError("fc cache " + shape_str(a.shape()) + " does not match d_z batch");
  }

  LayerGrads<Scalar> g;
  g.d_theta = matmul_tn(d_z, a.reshaped({batch, c_in}));
  if (has_bias) g.d_bias = detail::column_sums(d_z);
  g.d_input = matmul(d_z, theta).reshaped(cache.input_shape);
  return g;
}

template <typename Scalar>
ForwardResult<Scalar> conv_forward(const DenseTensor<Scalar>& a,
                                   const DenseTensor<Scalar>& kernel,
                                   const DenseTensor<std::type_identity_t<Scalar>>* bias,
                                   std::size_t stride, std::size_t padding,
                                   const DropSpec& spec, Rng* rng = nullptr) {
  const Conv2dGeometry geo = conv2d_geometry(a.shape(), kernel.shape(), stride, padding);
  if (bias != nullptr && bias->size() != geo.out_channels) {
    throw ShapeError("conv bias size " + std::to_string(bias->size()) + " != " +
                     std::to_string(geo.out_channels));
  }
  DenseTensor<Scalar> z = conv2d(a, kernel, stride, padding);
  if (bias != nullptr) {
    const std::size_t spatial = geo.out_h * geo.out_w;
    for (std::size_t n = 0; n < geo.batch; ++n) {
      for (std::size_t j = 0; j < geo.out_channels; ++j) {
        Scalar* plane = z.data() + (n * geo.out_channels + j) * spatial;
        for (std::size_t p = 0; p < spatial; ++p) plane[p] += (*bias)[j];
      }
    }
  }
  // The unpadded input is what gets cached/sparsified; padding zeros are
  // re-applied after recovery.
  return {std::move(z), detail::cache_input(a, spec, rng)};
}

template <typename Scalar>
LayerGrads<Scalar> conv_backward(const LayerCache<Scalar>& cache,
                                 const DenseTensor<Scalar>& kernel,
                                 const DenseTensor<Scalar>& d_z, std::size_t stride,
                                 std::size_t padding, bool has_bias) {
  const Conv2dGeometry geo = conv2d_geometry(cache.input_shape, kernel.shape(), stride, padding);
  if (d_z.shape() != Shape{geo.batch, geo.out_channels, geo.out_h, geo.out_w}) {
    throw ShapeError("conv d_z " + shape_str(d_z.shape()) + " does not match geometry");
  }
  const DenseTensor<Scalar> a = detail::cached_input(cache);
  const std::size_t patch = geo.in_channels * geo.kernel * geo.kernel;
  const std::size_t spatial = geo.out_h * geo.out_w;

  // d_z rearranged to rows [B*H'*W' x Cz] matching im2col's row order.
  DenseTensor<Scalar> d_rows({geo.batch * spatial, geo.out_channels});
  {
    const Scalar* src = d_z.data();
    Scalar* dst = d_rows.data();
    for (std::size_t n = 0; n < geo.batch; ++n) {
      for (std::size_t j = 0; j < geo.out_channels; ++j) {
        const Scalar* plane = src + (n * geo.out_channels + j) * spatial;
        for (std::size_t p = 0; p < spatial; ++p) {
          dst[(n * spatial + p) * geo.out_channels + j] = plane[p];
        }
      }
    }
  }

  LayerGrads<Scalar> g;
  {
    const DenseTensor<Scalar> col = detail::im2col(a, geo);
    g.d_theta = matmul_tn(d_rows, col).reshaped(
        {geo.out_channels, geo.in_channels, geo.kernel, geo.kernel});
  }
  if (has_bias) g.d_bias = detail::column_sums(d_rows);
  {
    const DenseTensor<Scalar> kmat = kernel.reshaped({geo.out_channels, patch});
    const DenseTensor<Scalar> d_col = matmul(d_rows, kmat);
    g.d_input = detail::col2im(d_col, geo);
  }
  return g;
}

// relu keeps a 1-bit activity mask instead of its input: backward stays
// exact and the cache shrinks to N bits. Elements at exactly 0 get grad 0.
template <typename Scalar>
ForwardResult<Scalar> relu_forward(const DenseTensor<Scalar>& a) {
  DenseTensor<Scalar> z(a.shape());
  BitMask mask(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > Scalar(0)) {
      z[i] = a[i];
      mask.set(i);
    }
  }
  return {std::move(z), LayerCache<Scalar>::make_mask(std::move(mask), a.shape())};
}

template <typename Scalar>
DenseTensor<Scalar> relu_backward(const LayerCache<Scalar>& cache,
                                  const DenseTensor<Scalar>& d_z) {
  if (cache.kind != CacheKind::bitmask) throw NumericError("relu backward requires mask cache");
  if (d_z.size() != cache.mask.size()) {
    throw ShapeError("relu d_z size does not match cached mask");
  }
  DenseTensor<Scalar> d_a(cache.input_shape);
  for (std::size_t i = 0; i < d_z.size(); ++i) {
    if (cache.mask.get(i)) d_a[i] = d_z[i];
  }
  return d_a;
}

// gelu depends on its input nonlinearly, so it always caches densely.
template <typename Scalar>
ForwardResult<Scalar> gelu_forward(const DenseTensor<Scalar>& a) {
  return {gelu(a), LayerCache<Scalar>::make_dense(a)};
}

template <typename Scalar>
DenseTensor<Scalar> gelu_backward(const LayerCache<Scalar>& cache,
                                  const DenseTensor<Scalar>& d_z) {
  if (cache.kind != CacheKind::dense) throw NumericError("gelu backward requires dense cache");
  const DenseTensor<Scalar>& a = cache.dense;
  if (d_z.size() != a.size()) throw ShapeError("gelu d_z size does not match cache");
  DenseTensor<Scalar> d_a(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) d_a[i] = d_z[i] * gelu_grad_scalar(a[i]);
  return d_a;
}

template <typename Scalar>
struct LossResult {
  double loss = 0.0;
  DenseTensor<Scalar> d_logits;
};

// Mean cross-entropy with log-sum-exp stabilization;
// d_logits = (softmax - onehot) / B.
template <typename Scalar>
LossResult<Scalar> softmax_cross_entropy(const DenseTensor<Scalar>& logits,
                                         const std::vector<std::int32_t>& labels) {
  detail::require_rank2(logits, "logits");
  const std::size_t batch = logits.extent(0);
  const std::size_t classes = logits.extent(1);
  if (labels.size() != batch) throw ShapeError("label count does not match logits batch");
  assert_finite(logits, "logits");

  LossResult<Scalar> r;
  r.d_logits = DenseTensor<Scalar>({batch, classes});
  double loss_sum = 0.0;
  for (std::size_t n = 0; n < batch; ++n) {
    const std::int32_t y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ConfigError("label " + std::to_string(y) + " outside [0," +
                        std::to_string(classes) + ")");
    }
    const Scalar* row = logits.data() + n * classes;
    Scalar max = row[0];
    for (std::size_t c = 1; c < classes; ++c) max = std::max(max, row[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(static_cast<double>(row[c] - max));
    const double lse = static_cast<double>(max) + std::log(sum);
    loss_sum += lse - static_cast<double>(row[y]);
    Scalar* grad = r.d_logits.data() + n * classes;
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = std::exp(static_cast<double>(row[c]) - lse);
      grad[c] = static_cast<Scalar>((p - (static_cast<std::size_t>(y) == c ? 1.0 : 0.0)) /
                                    static_cast<double>(batch));
    }
  }
  r.loss = loss_sum / static_cast<double>(batch);
  if (!std::isfinite(r.loss)) throw NumericError("cross-entropy loss is not finite");
  return r;
}

}  // namespace dropgrad
