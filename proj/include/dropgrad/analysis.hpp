#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dropgrad/data.hpp"
#include "dropgrad/errors.hpp"
#include "dropgrad/network.hpp"
#include "dropgrad/sparsity.hpp"

namespace dropgrad {

// Per-step estimates of the dropped-gradient model g_drop = alpha*g + beta*n.
struct GradStats {
  std::uint64_t t = 0;
  double alpha_hat = 0.0;
  double beta_hat = 0.0;
  double alpha_analytic = 1.0;  // (mu - c)/mu on the dropped activation
  double noise_var_hat = 0.0;   // per-dimension ||g_batch - g_full||^2/dim
  double bias_norm = 0.0;       // residual of the two-factor fit
  double ratio = 0.0;           // beta_hat / alpha_hat
  // Secant inputs for the smoothness estimate; zero when unknown.
  double grad_delta_norm = 0.0;
  double param_delta_norm = 0.0;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return dot(a, a); }

}  // namespace detail

// Decomposes g_drop against the exact-gradient direction g_fullbatch and the
// minibatch noise n = g_exact - g_fullbatch:
//
//   g_drop = alpha_hat * g_fullbatch + beta_hat * n + residual
//
// (alpha_hat, beta_hat) solve the two-factor least-squares fit, so whenever
// g_drop really is a linear combination of g_fullbatch and n the exact
// coefficients are recovered (g_drop == g_exact gives (1,1), g_drop ==
// g_fullbatch gives (1,0)). When n is orthogonal to g_fullbatch this reduces
// to the two projections <g_drop,g>/||g||^2 and <g_drop - a g, n>/||n||^2;
// near-collinear (g, n) falls back to exactly those.
// bias_norm is the residual norm.
inline GradStats estimate_alpha_beta(std::span<const double> g_exact,
                                     std::span<const double> g_drop,
                                     std::span<const double> g_fullbatch) {
  if (g_exact.size() != g_drop.size() || g_exact.size() != g_fullbatch.size()) {
    throw ShapeError("gradient vectors must have equal length");
  }
  const std::size_t dim = g_exact.size();
  if (dim == 0) throw ShapeError("gradient vectors are empty");

  std::vector<double> noise(dim);
  for (std::size_t i = 0; i < dim; ++i) noise[i] = g_exact[i] - g_fullbatch[i];

  const double ff = detail::norm2(g_fullbatch);
  const double nn = detail::norm2(noise);
  if (ff == 0.0) throw NumericError("degenerate batch: zero-norm full-batch gradient");
  if (nn == 0.0) throw NumericError("degenerate batch: zero-norm gradient noise");
  const double fn = detail::dot(g_fullbatch, noise);
  const double gf = detail::dot(g_drop, g_fullbatch);
  const double gn = detail::dot(g_drop, noise);

  GradStats s;
  const double det = ff * nn - fn * fn;
  if (det > 1e-12 * ff * nn) {
    s.alpha_hat = (gf * nn - gn * fn) / det;
    s.beta_hat = (gn * ff - gf * fn) / det;
  } else {
    s.alpha_hat = gf / ff;
    s.beta_hat = (gn - s.alpha_hat * fn) / nn;
  }

  double res2 = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double r = g_drop[i] - s.alpha_hat * g_fullbatch[i] - s.beta_hat * noise[i];
    res2 += r * r;
  }
  s.bias_norm = std::sqrt(res2);
  s.ratio = s.alpha_hat != 0.0 ? s.beta_hat / s.alpha_hat : 0.0;
  s.noise_var_hat = nn / static_cast<double>(dim);
  return s;
}

// Expected bias of min-k dropping under the mean-value argument:
// (mu - c)/mu with mu the activation mean and c the dropped mass per element.
// Requires |mu| above a small relative floor; returns exactly 1 when nothing
// was dropped.
template <typename Scalar>
double estimate_alpha_analytic(const DenseTensor<Scalar>& a, const SparseActivation<Scalar>& s) {
  if (a.size() != s.original_size()) {
    throw ShapeError("sparse cache does not correspond to the given tensor");
  }
  const auto n = static_cast<double>(a.size());
  double total = 0.0, abs_total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    total += static_cast<double>(a[i]);
    abs_total += std::abs(static_cast<double>(a[i]));
  }
  const double mu = total / n;
  if (std::abs(mu) <= 1e-12 * (1.0 + abs_total / n)) {
    throw NumericError("alpha_analytic undefined: activation mean is ~0");
  }
  double retained = 0.0;
  for (Scalar v : s.values) retained += static_cast<double>(v);
  const double c = (total - retained) / n;
  return (mu - c) / mu;
}

// xi^2: per-dimension average of ||g_b - g_fullbatch||^2 over batches.
inline double noise_variance(const std::vector<std::vector<double>>& per_batch_grads,
                             std::span<const double> g_fullbatch) {
  if (per_batch_grads.size() < 2) {
    throw NumericError("noise_variance needs at least 2 batch gradients");
  }
  const std::size_t dim = g_fullbatch.size();
  double acc = 0.0;
  for (const auto& g : per_batch_grads) {
    if (g.size() != dim) throw ShapeError("batch gradient length mismatch");
    double d2 = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      const double d = g[i] - g_fullbatch[i];
      d2 += d * d;
    }
    acc += d2 / static_cast<double>(dim);
  }
  return acc / static_cast<double>(per_batch_grads.size());
}

// Computable second-moment bound terms for an plain-SGD vs dropped-cache trajectory:
//   term1        = 2 (F(x_1) - F_best) / (T eta)
//   term2_sgd    = eta * L_hat * xi^2
//   term2_dropped = term2_sgd * (1/T) sum_t beta_t^2 / alpha_t^2
// L_hat is the max secant slope ||dg||/||dx|| recorded along the trajectory
// (descriptive telemetry, not a certified constant).
struct BoundReport {
  double term1 = 0.0;
  double term2_sgd = 0.0;
  double term2_dropped = 0.0;
  double l_hat = 0.0;
  double xi2_hat = 0.0;
};

inline BoundReport bound_report(double loss_initial, double loss_best, double eta,
                                std::uint64_t T, const std::vector<GradStats>& stats_history) {
  if (stats_history.empty()) throw ConfigError("bound_report needs a non-empty history");
  if (!(eta > 0.0) || T == 0) throw ConfigError("bound_report needs eta > 0 and T >= 1");

  BoundReport r;
  r.term1 = 2.0 * (loss_initial - loss_best) / (static_cast<double>(T) * eta);

  double xi2 = 0.0, ratio2 = 0.0;
  for (const GradStats& s : stats_history) {
    xi2 += s.noise_var_hat;
    const double ratio = s.alpha_hat != 0.0 ? s.beta_hat / s.alpha_hat : 0.0;
    ratio2 += ratio * ratio;
    if (s.param_delta_norm > 0.0) {
      r.l_hat = std::max(r.l_hat, s.grad_delta_norm / s.param_delta_norm);
    }
  }
  const auto count = static_cast<double>(stats_history.size());
  r.xi2_hat = xi2 / count;
  r.term2_sgd = eta * r.l_hat * r.xi2_hat;
  r.term2_dropped = r.term2_sgd * (ratio2 / count);
  return r;
}

// Aggregated per-gamma telemetry row of a noise experiment.
struct NoiseRow {
  DropStrategy strategy = DropStrategy::min_k;
  double gamma = 0.0;
  double mean_alpha = 0.0;
  double mean_beta = 0.0;
  double mean_ratio = 0.0;
  double mean_alpha_analytic = 0.0;
  double noise_var = 0.0;

  static const char* csv_header() {
    return "gamma,mean_alpha,mean_beta,mean_ratio,mean_alpha_analytic,noise_var";
  }
};

struct NoiseExperimentResult {
  std::vector<NoiseRow> rows;             // gamma = 0 baseline first
  std::vector<std::vector<GradStats>> per_batch;  // aligned with rows
};

// For fixed parameters: per minibatch, the exact minibatch gradient, the
// dropped-cache gradient on the same batch, and their decomposition against
// the one exact full-dataset gradient. Every gamma row sees the same
// minibatch sequence.
template <typename Scalar>
NoiseExperimentResult noise_experiment(const NetworkSpec& spec, const Dataset<Scalar>& dataset,
                                       DropStrategy strategy, const std::vector<double>& gammas,
                                       std::size_t batches, std::size_t batch_size, Rng& rng) {
  if (strategy == DropStrategy::none) {
    throw ConfigError("noise_experiment needs a dropping strategy");
  }
  dataset.validate();
  if (batch_size >= dataset.size()) {
    throw ConfigError("noise_experiment: batch_size must be below the dataset size "
                      "(otherwise the gradient noise is degenerate)");
  }
  if (batches < 2) throw ConfigError("noise_experiment needs at least 2 batches");

  NetworkSpec base = spec;
  base.default_drop = DropSpec{};
  for (LayerSpec& l : base.layers) l.drop_override.reset();

  Rng init_rng(derive_seed(rng.seed(), 1));
  Network<Scalar> net = Network<Scalar>::init(base, init_rng);

  // One exact full-dataset gradient (single pass, no batching error).
  std::vector<double> g_full;
  {
    CacheLedger<Scalar> ledger;
    auto fwd = train_forward_nodrop(net, dataset.inputs, dataset.labels, ledger);
    g_full = net.flatten_grads(net.backward(fwd.d_logits, ledger));
  }

  // Fixed minibatch sequence, reused for every gamma.
  Rng batch_rng(derive_seed(rng.seed(), 2));
  std::vector<std::vector<std::uint32_t>> batch_indices;
  while (batch_indices.size() < batches) {
    for (auto& b : epoch_batches(dataset.size(), batch_size, batch_rng, true)) {
      if (b.size() == batch_size && batch_indices.size() < batches) {
        batch_indices.push_back(std::move(b));
      }
    }
  }

  std::vector<double> all_gammas;
  all_gammas.push_back(0.0);
  for (double g : gammas) {
    if (g != 0.0) all_gammas.push_back(g);
  }

  NoiseExperimentResult result;
  for (double gamma : all_gammas) {
    NetworkSpec dropped = base;
    dropped.default_drop = DropSpec{gamma == 0.0 ? DropStrategy::none : strategy, gamma, false};
    dropped.skip_first_last = spec.skip_first_last;
    Network<Scalar> drop_net = Network<Scalar>::with_params(dropped, net.params());

    std::vector<GradStats> stats;
    std::vector<std::vector<double>> exact_grads;
    Rng drop_rng(derive_seed(rng.seed(), 3));
    for (std::size_t b = 0; b < batch_indices.size(); ++b) {
      const Batch<Scalar> batch = gather_batch(dataset, batch_indices[b]);

      CacheLedger<Scalar> exact_ledger;
      auto exact_fwd = train_forward_nodrop(net, batch.inputs, batch.labels, exact_ledger);

      CacheLedger<Scalar> drop_ledger;
      auto drop_fwd =
          train_forward(drop_net, batch.inputs, batch.labels, drop_ledger, &drop_rng);

      // The exact pass caches every fc/conv input densely; those are the
      // original activations the sparse caches were derived from.
      double alpha_analytic_sum = 0.0;
      std::size_t dropped_layers = 0;
      for (std::size_t li = 0; li < drop_net.spec().layers.size(); ++li) {
        const LayerCache<Scalar>& c = drop_ledger.peek(li);
        if (c.kind == CacheKind::sparse) {
          alpha_analytic_sum +=
              estimate_alpha_analytic(exact_ledger.peek(li).dense, c.sparse);
          ++dropped_layers;
        }
      }

      std::vector<double> g_exact =
          net.flatten_grads(net.backward(exact_fwd.d_logits, exact_ledger));
      std::vector<double> g_drop =
          drop_net.flatten_grads(drop_net.backward(drop_fwd.d_logits, drop_ledger));

      GradStats s = estimate_alpha_beta(g_exact, g_drop, g_full);
      s.t = b + 1;
      s.alpha_analytic = dropped_layers > 0 ? alpha_analytic_sum /
                                                  static_cast<double>(dropped_layers)
                                            : 1.0;
      stats.push_back(s);
      exact_grads.push_back(std::move(g_exact));
    }

    NoiseRow row;
    row.strategy = gamma == 0.0 ? DropStrategy::none : strategy;
    row.gamma = gamma;
    for (const GradStats& s : stats) {
      row.mean_alpha += s.alpha_hat;
      row.mean_beta += s.beta_hat;
      row.mean_ratio += s.ratio;
      row.mean_alpha_analytic += s.alpha_analytic;
    }
    const auto count = static_cast<double>(stats.size());
    row.mean_alpha /= count;
    row.mean_beta /= count;
    row.mean_ratio /= count;
    row.mean_alpha_analytic /= count;
    row.noise_var = noise_variance(exact_grads, g_full);
    result.rows.push_back(row);
    result.per_batch.push_back(std::move(stats));
  }
  return result;
}

}  // namespace dropgrad
