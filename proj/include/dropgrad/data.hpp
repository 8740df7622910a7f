#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dropgrad/errors.hpp"
#include "dropgrad/rng.hpp"
#include "dropgrad/tensor.hpp"

namespace dropgrad {

// One split of a dataset: inputs [N x per-sample dims], integer labels.
template <typename Scalar>
struct Dataset {
  DenseTensor<Scalar> inputs;
  std::vector<std::int32_t> labels;
  std::size_t num_classes = 0;
  std::string source;

  std::size_t size() const { return labels.size(); }

  Shape sample_shape() const {
    Shape s(inputs.shape().begin() + 1, inputs.shape().end());
    return s;
  }

  void validate() const {
    if (labels.empty()) throw ConfigError("dataset is empty");
    if (inputs.rank() < 2 || inputs.extent(0) != labels.size()) {
      throw ConfigError("dataset inputs " + shape_str(inputs.shape()) + " do not match " +
                        std::to_string(labels.size()) + " labels");
    }
    if (num_classes < 2) throw ConfigError("dataset needs at least 2 classes");
    for (std::int32_t y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
        throw ConfigError("dataset label " + std::to_string(y) + " outside [0," +
                          std::to_string(num_classes) + ")");
      }
    }
    assert_finite(inputs, "dataset inputs");
  }
};

// Gaussian clusters at deterministic centers: center[c][d] = base +
// separation*(d mod classes == c), unit variance. With `nonnegative`,
// base is 2 and samples are clamped at 0, guaranteeing x >= 0 while keeping
// the clusters separable.
template <typename Scalar>
Dataset<Scalar> synth_blobs(Rng& rng, std::size_t n, std::size_t dim, std::size_t classes,
                            double separation, bool nonnegative = false) {
  if (classes < 2) throw ConfigError("synth_blobs requires classes >= 2");
  if (!(separation > 0)) throw ConfigError("synth_blobs requires separation > 0");
  if (n == 0 || dim == 0) throw ConfigError("synth_blobs requires positive n and dim");

  const double base = nonnegative ? 2.0 : 0.0;
  Dataset<Scalar> ds;
  ds.inputs = DenseTensor<Scalar>({n, dim});
  ds.labels.resize(n);
  ds.num_classes = classes;
  ds.source = "synth_blobs";
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::int32_t>(rng.next_index(classes));
    ds.labels[i] = label;
    DenseTensor<Scalar> noise = rand_normal<Scalar>(rng, {dim}, 0.0, 1.0);
    Scalar* row = ds.inputs.data() + i * dim;
    for (std::size_t d = 0; d < dim; ++d) {
      double v = base + (d % classes == static_cast<std::size_t>(label) ? separation : 0.0) +
                 static_cast<double>(noise[d]);
      if (nonnegative && v < 0.0) v = 0.0;
      row[d] = static_cast<Scalar>(v);
    }
  }
  return ds;
}

// Synthetic 28x28 grayscale "digits": one smooth random template per class
// (coarse Gaussian grid, bilinear upsample, relu, peak-normalized), each
// sample a shifted, amplitude-jittered, noised copy. Deterministic per seed.
// Desk-scale stand-in for handwritten-digit data when none is on disk.
// `template_seed` fixes the class shapes so train/test splits drawn from
// different rngs describe the same classes.
template <typename Scalar>
Dataset<Scalar> synth_digits(Rng& rng, std::size_t n, std::size_t classes = 10,
                             std::size_t side = 28, std::uint64_t template_seed = 0) {
  if (classes < 2 || n == 0 || side < 8) throw ConfigError("synth_digits: bad arguments");

  const std::size_t coarse = 7;
  std::vector<std::vector<double>> templates(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    Rng trng(derive_seed(template_seed, 9000 + c));
    DenseTensor<double> grid = rand_normal<double>(trng, {coarse, coarse}, 0.0, 1.0);
    std::vector<double>& tpl = templates[c];
    tpl.assign(side * side, 0.0);
    double peak = 0.0;
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const double gy = static_cast<double>(y) / static_cast<double>(side - 1) *
                          static_cast<double>(coarse - 1);
        const double gx = static_cast<double>(x) / static_cast<double>(side - 1) *
                          static_cast<double>(coarse - 1);
        const auto y0 = static_cast<std::size_t>(gy);
        const auto x0 = static_cast<std::size_t>(gx);
        const std::size_t y1 = std::min(y0 + 1, coarse - 1);
        const std::size_t x1 = std::min(x0 + 1, coarse - 1);
        const double fy = gy - static_cast<double>(y0);
        const double fx = gx - static_cast<double>(x0);
        const double v = grid[y0 * coarse + x0] * (1 - fy) * (1 - fx) +
                         grid[y0 * coarse + x1] * (1 - fy) * fx +
                         grid[y1 * coarse + x0] * fy * (1 - fx) +
                         grid[y1 * coarse + x1] * fy * fx;
        const double r = v > 0.0 ? v : 0.0;
        tpl[y * side + x] = r;
        peak = std::max(peak, r);
      }
    }
    if (peak > 0.0) {
      for (double& v : tpl) v /= peak;
    }
  }

  Dataset<Scalar> ds;
  ds.inputs = DenseTensor<Scalar>({n, 1, side, side});
  ds.labels.resize(n);
  ds.num_classes = classes;
  ds.source = "synth_digits";
  const std::ptrdiff_t max_shift = 5;
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::int32_t>(rng.next_index(classes));
    ds.labels[i] = label;
    const std::vector<double>& tpl = templates[static_cast<std::size_t>(label)];
    const std::ptrdiff_t dy =
        static_cast<std::ptrdiff_t>(rng.next_index(2 * max_shift + 1)) - max_shift;
    const std::ptrdiff_t dx =
        static_cast<std::ptrdiff_t>(rng.next_index(2 * max_shift + 1)) - max_shift;
    const double amp = 0.5 + 1.0 * rng.next_double();
    DenseTensor<double> noise = rand_normal<double>(rng, {side * side}, 0.0, 0.35);
    Scalar* img = ds.inputs.data() + i * side * side;
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) - dy;
        const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) - dx;
        double v = 0.0;
        if (sy >= 0 && sy < static_cast<std::ptrdiff_t>(side) && sx >= 0 &&
            sx < static_cast<std::ptrdiff_t>(side)) {
          v = amp * tpl[static_cast<std::size_t>(sy) * side + static_cast<std::size_t>(sx)];
        }
        v += noise[y * side + x];
        img[y * side + x] = static_cast<Scalar>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return ds;
}

// One epoch's batch index lists. Shuffle is a full Fisher-Yates permutation
// from `rng`; the final partial batch is kept.
inline std::vector<std::vector<std::uint32_t>> epoch_batches(std::size_t n,
                                                             std::size_t batch_size, Rng& rng,
                                                             bool shuffle) {
  if (batch_size == 0 || batch_size > n) {
    throw ConfigError("batch_size must be in [1, dataset size]");
  }
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  if (shuffle) {
    for (std::size_t i = 0; i + 1 < n; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.next_index(n - i));
      std::swap(order[i], order[j]);
    }
  }
  std::vector<std::vector<std::uint32_t>> batches;
  batches.reserve((n + batch_size - 1) / batch_size);
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(start + batch_size, n);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch_size) {
  return (n + batch_size - 1) / batch_size;
}

template <typename Scalar>
struct Batch {
  DenseTensor<Scalar> inputs;
  std::vector<std::int32_t> labels;
};

template <typename Scalar>
Batch<Scalar> gather_batch(const Dataset<Scalar>& ds, const std::vector<std::uint32_t>& idx) {
  const std::size_t sample = numel(ds.sample_shape());
  Shape shape = ds.inputs.shape();
  shape[0] = idx.size();
  Batch<Scalar> b;
  b.inputs = DenseTensor<Scalar>(std::move(shape));
  b.labels.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Scalar* src = ds.inputs.data() + static_cast<std::size_t>(idx[i]) * sample;
    std::copy(src, src + sample, b.inputs.data() + i * sample);
    b.labels[i] = ds.labels[idx[i]];
  }
  return b;
}

template <typename Scalar>
Batch<Scalar> full_batch(const Dataset<Scalar>& ds) {
  return Batch<Scalar>{ds.inputs, ds.labels};
}

}  // namespace dropgrad
