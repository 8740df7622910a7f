#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "dropgrad/errors.hpp"
#include "dropgrad/rng.hpp"
#include "dropgrad/tensor.hpp"

namespace dropgrad {

enum class DropStrategy { none, random, min_k };

inline const char* to_string(DropStrategy s) {
  switch (s) {
    case DropStrategy::none: return "none";
    case DropStrategy::random: return "random";
    case DropStrategy::min_k: return "min_k";
  }
  return "?";
}

inline DropStrategy drop_strategy_from_string(const std::string& s) {
  if (s == "none") return DropStrategy::none;
  if (s == "random") return DropStrategy::random;
  if (s == "min_k") return DropStrategy::min_k;
  throw ConfigError("unknown drop strategy '" + s + "' (expected none|random|min_k)");
}

// Per-layer dropping policy. index_on_host models moving the index payload
// off-device: it changes the with-index accounting only, no bytes move.
struct DropSpec {
  DropStrategy strategy = DropStrategy::none;
  double gamma = 0.0;
  bool index_on_host = false;

  void validate() const {
    if (!(gamma >= 0.0 && gamma < 1.0)) {
      throw ConfigError("drop gamma must be in [0,1), got " + std::to_string(gamma));
    }
  }

  bool operator==(const DropSpec&) const = default;
};

// Retained element count: round-half-up of (1-gamma)*N, clamped to [1, N].
inline std::size_t retained_count(double gamma, std::size_t n) {
  const double exact = (1.0 - gamma) * static_cast<double>(n);
  const auto k = static_cast<std::size_t>(std::floor(exact + 0.5));
  return std::min(std::max<std::size_t>(k, 1), n);
}

// Sparsified activation cache: retained values plus strictly increasing
// 32-bit linear indices into the flattened original tensor.
template <typename Scalar>
struct SparseActivation {
  std::vector<Scalar> values;
  std::vector<std::uint32_t> indices;
  Shape original_shape;
  std::size_t retained = 0;  // == values.size() == indices.size()
  DropSpec drop_spec;

  std::size_t original_size() const { return numel(original_shape); }
};

namespace detail {

template <typename Scalar>
void check_droppable(const DenseTensor<Scalar>& a) {
  if (a.size() == 0) throw ShapeError("cannot drop from an empty tensor");
  if (a.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw ConfigError("tensor too large for 32-bit cache indices: " +
                      std::to_string(a.size()) + " elements");
  }
}

template <typename Scalar>
SparseActivation<Scalar> gather(const DenseTensor<Scalar>& a, std::vector<std::uint32_t> idx,
                                DropSpec spec) {
  std::sort(idx.begin(), idx.end());
  SparseActivation<Scalar> s;
  s.values.reserve(idx.size());
  for (std::uint32_t i : idx) s.values.push_back(a[i]);
  s.indices = std::move(idx);
  s.original_shape = a.shape();
  s.retained = s.indices.size();
  s.drop_spec = spec;
  return s;
}

}  // namespace detail

// Keep the k = round((1-gamma)*N) elements of largest absolute value,
// selected globally over the whole tensor (batch dimension included).
// Equal magnitudes at the cutoff keep the lower linear index.
template <typename Scalar>
SparseActivation<Scalar> drop_min_k(const DenseTensor<Scalar>& a, double gamma) {
  DropSpec spec{DropStrategy::min_k, gamma, false};
  spec.validate();
  detail::check_droppable(a);
  const std::size_t n = a.size();
  const std::size_t k = retained_count(gamma, n);

  std::vector<std::uint32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0u);
  if (k < n) {
    // Total order on (|value| desc, index asc) makes the top-k set unique.
    const Scalar* data = a.data();
    auto better = [data](std::uint32_t lhs, std::uint32_t rhs) {
      const Scalar la = std::abs(data[lhs]);
      const Scalar ra = std::abs(data[rhs]);
      if (la != ra) return la > ra;
      return lhs < rhs;
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k) - 1, idx.end(),
                     better);
    idx.resize(k);
  }
  return detail::gather(a, std::move(idx), spec);
}

// Keep a uniformly random k-subset via partial Fisher-Yates on 0..N-1.
template <typename Scalar>
SparseActivation<Scalar> drop_random(const DenseTensor<Scalar>& a, double gamma, Rng& rng) {
  DropSpec spec{DropStrategy::random, gamma, false};
  spec.validate();
  detail::check_droppable(a);
  const std::size_t n = a.size();
  const std::size_t k = retained_count(gamma, n);

  std::vector<std::uint32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0u);
  if (k < n) {
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.next_index(n - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
  }
  return detail::gather(a, std::move(idx), spec);
}

template <typename Scalar>
SparseActivation<Scalar> drop_apply(const DenseTensor<Scalar>& a, const DropSpec& spec,
                                    Rng* rng) {
  switch (spec.strategy) {
    case DropStrategy::min_k: {
      auto s = drop_min_k(a, spec.gamma);
      s.drop_spec = spec;
      return s;
    }
    case DropStrategy::random: {
      if (rng == nullptr) throw ConfigError("random dropping requires an rng");
      auto s = drop_random(a, spec.gamma, *rng);
      s.drop_spec = spec;
      return s;
    }
    case DropStrategy::none:
      break;
  }
  throw ConfigError("drop_apply called with strategy none");
}

// Inflate back to a dense tensor, dropped positions filled with exact zeros.
template <typename Scalar>
DenseTensor<Scalar> recover(const SparseActivation<Scalar>& s) {
  if (s.values.size() != s.indices.size() || s.retained != s.values.size()) {
    throw NumericError("corrupt sparse cache: value/index count mismatch");
  }
  DenseTensor<Scalar> out(s.original_shape);
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < s.indices.size(); ++i) {
    const std::uint32_t pos = s.indices[i];
    if (pos >= n) {
      throw NumericError("corrupt sparse cache: index " + std::to_string(pos) +
                         " out of range for " + shape_str(s.original_shape));
    }
    out[pos] = s.values[i];
  }
  return out;
}

// Byte-exact accounting of one cached tensor against its dense baseline.
struct MemReport {
  std::uint64_t dense_bytes = 0;
  std::uint64_t payload_value_bytes = 0;
  std::uint64_t payload_index_bytes = 0;
  double reduction_fraction = 0.0;             // on values only
  double reduction_fraction_with_index = 0.0;  // honors index_on_host

  // Column order is part of the CSV format (docs/formats.md).
  static const char* csv_header() {
    return "dense_bytes,payload_value_bytes,payload_index_bytes,reduction_fraction,"
           "reduction_fraction_with_index";
  }

  std::string to_csv_row() const {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%llu,%llu,%llu,%.17g,%.17g",
                  static_cast<unsigned long long>(dense_bytes),
                  static_cast<unsigned long long>(payload_value_bytes),
                  static_cast<unsigned long long>(payload_index_bytes), reduction_fraction,
                  reduction_fraction_with_index);
    return buf;
  }
};

template <typename Scalar>
MemReport mem_report(const SparseActivation<Scalar>& s, std::size_t bytes_per_scalar,
                     std::size_t bytes_per_index) {
  const std::size_t n = s.original_size();
  const std::size_t k = s.retained;
  MemReport r;
  r.dense_bytes = static_cast<std::uint64_t>(n) * bytes_per_scalar;
  r.payload_value_bytes = static_cast<std::uint64_t>(k) * bytes_per_scalar;
  r.payload_index_bytes = static_cast<std::uint64_t>(k) * bytes_per_index;
  r.reduction_fraction = 1.0 - static_cast<double>(k) / static_cast<double>(n);
  const std::size_t device_per_element =
      bytes_per_scalar + (s.drop_spec.index_on_host ? 0 : bytes_per_index);
  r.reduction_fraction_with_index =
      1.0 - (static_cast<double>(k) * static_cast<double>(device_per_element)) /
                (static_cast<double>(n) * static_cast<double>(bytes_per_scalar));
  return r;
}

enum class LayerKindForBytes { conv, fc };

struct BytesEstimate {
  std::uint64_t activation_bytes = 0;
  std::uint64_t param_bytes = 0;
};

// Space accounting for one layer: activations B*Ca*La (conv) / B*La*Ca (fc)
// scalars, parameters Ca*Cz*K^2 (conv) / Ca*Cz (fc) scalars.
inline BytesEstimate activation_bytes_estimate(LayerKindForBytes kind, std::size_t batch,
                                               std::size_t c_in, std::size_t c_out,
                                               std::size_t seq_len, std::size_t kernel,
                                               std::size_t bytes_per_scalar) {
  if (batch == 0 || c_in == 0 || c_out == 0 || seq_len == 0 || bytes_per_scalar == 0) {
    throw ConfigError("activation_bytes_estimate requires positive extents");
  }
  BytesEstimate e;
  e.activation_bytes =
      static_cast<std::uint64_t>(batch) * c_in * seq_len * bytes_per_scalar;
  switch (kind) {
    case LayerKindForBytes::conv:
      if (kernel == 0) throw ConfigError("conv estimate requires positive kernel");
      e.param_bytes = static_cast<std::uint64_t>(c_in) * c_out * kernel * kernel *
                      bytes_per_scalar;
      break;
    case LayerKindForBytes::fc:
      e.param_bytes = static_cast<std::uint64_t>(c_in) * c_out * bytes_per_scalar;
      break;
  }
  return e;
}

}  // namespace dropgrad
