#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "dropgrad/layers.hpp"
#include "dropgrad/network.hpp"
#include "dropgrad/rng.hpp"
#include "dropgrad/sparsity.hpp"
#include "dropgrad/tensor.hpp"

namespace dropgrad {

// Verification harness for the backward passes (f64 only): central finite
// differences against the analytic gradients, plus the sparse/dense shared-
// kernel identities. Used by the gradcheck CLI command and the test suites.

struct GradCheckEntry {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  bool all_pass() const {
    for (const auto& e : entries) {
      if (!e.pass) return false;
    }
    return true;
  }
  double max_error(const std::string& name) const {
    for (const auto& e : entries) {
      if (e.name == name) return e.max_error;
    }
    throw ConfigError("no gradcheck entry named '" + name + "'");
  }
};

namespace gradcheck_detail {

// Relative error with an absolute floor: FD noise on near-zero gradients
// must not register as a relative blow-up.
inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

// Smooth scalarization L(z) = sum w*tanh(z): bounded derivatives, nonzero
// curvature, exercises every output coordinate.
struct Scalarizer {
  DenseTensor<double> w;

  explicit Scalarizer(Rng& rng, const Shape& shape)
      : w(rand_uniform<double>(rng, shape, 0.5, 1.5)) {}

  double loss(const DenseTensor<double>& z) const {
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) s += w[i] * std::tanh(z[i]);
    return s;
  }
  DenseTensor<double> d_z(const DenseTensor<double>& z) const {
    DenseTensor<double> d(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double t = std::tanh(z[i]);
      d[i] = w[i] * (1.0 - t * t);
    }
    return d;
  }
};

// Central finite difference of `loss_at` with respect to x[i].
template <typename LossFn>
double central_fd(DenseTensor<double>& x, std::size_t i, LossFn&& loss_at) {
  const double orig = x[i];
  const double eps = 1e-5 * std::max(1.0, std::abs(orig));
  x[i] = orig + eps;
  const double hi = loss_at();
  x[i] = orig - eps;
  const double lo = loss_at();
  x[i] = orig;
  return (hi - lo) / (2.0 * eps);
}

inline bool bitwise_equal(const DenseTensor<double>& a, const DenseTensor<double>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

struct ConvGeometry {
  std::size_t kernel, stride, pad, out_h, out_w, in_h, in_w;
};

inline ConvGeometry sample_conv_geometry(Rng& rng) {
  for (;;) {
    ConvGeometry g;
    g.kernel = 1 + rng.next_index(3);
    g.stride = 1 + rng.next_index(2);
    g.pad = rng.next_index(2);
    g.out_h = 1 + rng.next_index(3);
    g.out_w = 1 + rng.next_index(3);
    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(g.kernel + g.stride * (g.out_h - 1)) -
                              2 * static_cast<std::ptrdiff_t>(g.pad);
    const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(g.kernel + g.stride * (g.out_w - 1)) -
                              2 * static_cast<std::ptrdiff_t>(g.pad);
    if (ih < 1 || iw < 1) continue;
    g.in_h = static_cast<std::size_t>(ih);
    g.in_w = static_cast<std::size_t>(iw);
    return g;
  }
}

}  // namespace gradcheck_detail

// Analytic fc gradients vs central differences on `instances` random layers.
inline double gradcheck_fc_fd(Rng& rng, std::size_t instances) {
  using namespace gradcheck_detail;
  double worst = 0.0;
  for (std::size_t it = 0; it < instances; ++it) {
    const std::size_t batch = 1 + rng.next_index(4);
    const std::size_t c_in = 1 + rng.next_index(6);
    const std::size_t c_out = 1 + rng.next_index(5);
    DenseTensor<double> a = rand_normal<double>(rng, {batch, c_in}, 0.0, 1.0);
    DenseTensor<double> theta = rand_normal<double>(rng, {c_out, c_in}, 0.0, 1.0);
    DenseTensor<double> bias = rand_normal<double>(rng, {c_out}, 0.0, 0.5);
    Scalarizer scal(rng, {batch, c_out});

    const DropSpec no_drop;
    auto fwd = fc_forward(a, theta, &bias, no_drop);
    const LayerGrads<double> g = fc_backward(fwd.cache, theta, scal.d_z(fwd.output), true);

    auto loss_now = [&] { return scal.loss(fc_forward(a, theta, &bias, no_drop).output); };
    for (std::size_t i = 0; i < theta.size(); ++i) {
      worst = std::max(worst, rel_err(g.d_theta[i], central_fd(theta, i, loss_now)));
    }
    for (std::size_t i = 0; i < bias.size(); ++i) {
      worst = std::max(worst, rel_err(g.d_bias[i], central_fd(bias, i, loss_now)));
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
      worst = std::max(worst, rel_err(g.d_input[i], central_fd(a, i, loss_now)));
    }
  }
  return worst;
}

inline double gradcheck_conv_fd(Rng& rng, std::size_t instances) {
  using namespace gradcheck_detail;
  double worst = 0.0;
  for (std::size_t it = 0; it < instances; ++it) {
    const ConvGeometry geo = sample_conv_geometry(rng);
    const std::size_t kernel = geo.kernel, stride = geo.stride, pad = geo.pad;
    const std::size_t batch = 1 + rng.next_index(2);
    const std::size_t c_in = 1 + rng.next_index(3);
    const std::size_t c_out = 1 + rng.next_index(3);

    DenseTensor<double> a =
        rand_normal<double>(rng, {batch, c_in, geo.in_h, geo.in_w}, 0.0, 1.0);
    DenseTensor<double> kern =
        rand_normal<double>(rng, {c_out, c_in, kernel, kernel}, 0.0, 1.0);
    DenseTensor<double> bias = rand_normal<double>(rng, {c_out}, 0.0, 0.5);
    Scalarizer scal(rng, {batch, c_out, geo.out_h, geo.out_w});

    const DropSpec no_drop;
    auto fwd = conv_forward(a, kern, &bias, stride, pad, no_drop);
    const LayerGrads<double> g =
        conv_backward(fwd.cache, kern, scal.d_z(fwd.output), stride, pad, true);

    auto loss_now = [&] {
      return scal.loss(conv_forward(a, kern, &bias, stride, pad, no_drop).output);
    };
    for (std::size_t i = 0; i < kern.size(); ++i) {
      worst = std::max(worst, rel_err(g.d_theta[i], central_fd(kern, i, loss_now)));
    }
    for (std::size_t i = 0; i < bias.size(); ++i) {
      worst = std::max(worst, rel_err(g.d_bias[i], central_fd(bias, i, loss_now)));
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
      worst = std::max(worst, rel_err(g.d_input[i], central_fd(a, i, loss_now)));
    }
  }
  return worst;
}

inline double gradcheck_activations_fd(Rng& rng, std::size_t instances) {
  using namespace gradcheck_detail;
  double worst = 0.0;
  for (std::size_t it = 0; it < instances; ++it) {
    const std::size_t n = 2 + rng.next_index(14);
    DenseTensor<double> a = rand_normal<double>(rng, {1, n}, 0.0, 1.5);
    // keep relu inputs away from its kink
    for (std::size_t i = 0; i < n; ++i) {
      if (std::abs(a[i]) < 1e-2) a[i] = a[i] < 0 ? a[i] - 1e-2 : a[i] + 1e-2;
    }
    Scalarizer scal(rng, {1, n});

    {
      auto fwd = gelu_forward(a);
      DenseTensor<double> d = gelu_backward(fwd.cache, scal.d_z(fwd.output));
      auto loss_now = [&] { return scal.loss(gelu_forward(a).output); };
      for (std::size_t i = 0; i < n; ++i) {
        worst = std::max(worst, rel_err(d[i], central_fd(a, i, loss_now)));
      }
    }
    {
      auto fwd = relu_forward(a);
      DenseTensor<double> d = relu_backward(fwd.cache, scal.d_z(fwd.output));
      auto loss_now = [&] { return scal.loss(relu_forward(a).output); };
      for (std::size_t i = 0; i < n; ++i) {
        worst = std::max(worst, rel_err(d[i], central_fd(a, i, loss_now)));
      }
    }
  }
  return worst;
}

inline double gradcheck_softmax_fd(Rng& rng, std::size_t instances) {
  using namespace gradcheck_detail;
  double worst = 0.0;
  for (std::size_t it = 0; it < instances; ++it) {
    const std::size_t batch = 1 + rng.next_index(4);
    const std::size_t classes = 2 + rng.next_index(5);
    DenseTensor<double> logits = rand_normal<double>(rng, {batch, classes}, 0.0, 2.0);
    std::vector<std::int32_t> labels(batch);
    for (auto& y : labels) y = static_cast<std::int32_t>(rng.next_index(classes));

    const auto res = softmax_cross_entropy(logits, labels);
    auto loss_now = [&] { return softmax_cross_entropy(logits, labels).loss; };
    for (std::size_t i = 0; i < logits.size(); ++i) {
      worst = std::max(worst, rel_err(res.d_logits[i], central_fd(logits, i, loss_now)));
    }
  }
  return worst;
}

// Sparse-cache backward vs the dense backward run on the recovered tensor.
// Both sides call the same kernel on the same bits, so the comparison is
// bitwise; any mismatch reports as error 1.
inline double gradcheck_fc_masked(Rng& rng, std::size_t instances) {
  using namespace gradcheck_detail;
  const double gammas[] = {0.3, 0.5, 0.7, 0.9};
  double worst = 0.0;
  for (std::size_t it = 0; it < instances; ++it) {
    const std::size_t batch = 1 + rng.next_index(6);
    const std::size_t c_in = 2 + rng.next_index(8);
    const std::size_t c_out = 1 + rng.next_index(5);
    const double gamma = gammas[rng.next_index(4)];
    DenseTensor<double> a = rand_normal<double>(rng, {batch, c_in}, 0.0, 1.0);
    DenseTensor<double> theta = rand_normal<double>(rng, {c_out, c_in}, 0.0, 1.0);
    DenseTensor<double> d_z = rand_normal<double>(rng, {batch, c_out}, 0.0, 1.0);

    const SparseActivation<double> sparse = drop_min_k(a, gamma);
    const auto sparse_cache = LayerCache<double>::make_sparse(sparse);
    const auto dense_cache = LayerCache<double>::make_dense(recover(sparse));
    const LayerGrads<double> gs = fc_backward(sparse_cache, theta, d_z, false);
    const LayerGrads<double> gd = fc_backward(dense_cache, theta, d_z, false);
    if (!bitwise_equal(gs.d_theta, gd.d_theta)) worst = std::max(worst, 1.0);

    // d_input never touches the cache: bitwise equal to the undropped run
    const LayerGrads<double> gu =
        fc_backward(LayerCache<double>::make_dense(a), theta, d_z, false);
    if (!bitwise_equal(gs.d_input, gu.d_input)) worst = std::max(worst, 1.0);
  }
  return worst;
}

inline double gradcheck_conv_masked(Rng& rng, std::size_t instances) {
  using namespace gradcheck_detail;
  const double gammas[] = {0.3, 0.5, 0.7, 0.9};
  double worst = 0.0;
  for (std::size_t it = 0; it < instances; ++it) {
    const ConvGeometry geo = sample_conv_geometry(rng);
    const std::size_t batch = 1 + rng.next_index(2);
    const std::size_t c_in = 1 + rng.next_index(3);
    const std::size_t c_out = 1 + rng.next_index(3);
    const double gamma = gammas[rng.next_index(4)];

    DenseTensor<double> a =
        rand_normal<double>(rng, {batch, c_in, geo.in_h, geo.in_w}, 0.0, 1.0);
    DenseTensor<double> kern =
        rand_normal<double>(rng, {c_out, c_in, geo.kernel, geo.kernel}, 0.0, 1.0);
    DenseTensor<double> d_z =
        rand_normal<double>(rng, {batch, c_out, geo.out_h, geo.out_w}, 0.0, 1.0);

    const SparseActivation<double> sparse = drop_min_k(a, gamma);
    const auto sparse_cache = LayerCache<double>::make_sparse(sparse);
    const auto dense_cache = LayerCache<double>::make_dense(recover(sparse));
    const LayerGrads<double> gs =
        conv_backward(sparse_cache, kern, d_z, geo.stride, geo.pad, false);
    const LayerGrads<double> gd =
        conv_backward(dense_cache, kern, d_z, geo.stride, geo.pad, false);
    if (!bitwise_equal(gs.d_theta, gd.d_theta)) worst = std::max(worst, 1.0);

    const LayerGrads<double> gu =
        conv_backward(LayerCache<double>::make_dense(a), kern, d_z, geo.stride, geo.pad, false);
    if (!bitwise_equal(gs.d_input, gu.d_input)) worst = std::max(worst, 1.0);
  }
  return worst;
}

// Whole-network FD on a sample of parameter coordinates per layer.
inline double gradcheck_network_fd(NetworkSpec spec, Rng& rng, std::size_t coords_per_layer) {
  using namespace gradcheck_detail;
  spec.default_drop = DropSpec{};
  for (LayerSpec& l : spec.layers) l.drop_override.reset();
  Network<double> net = Network<double>::init(spec, rng);

  const Shape& in = net.spec().input;
  Shape batch_shape = in;
  batch_shape.insert(batch_shape.begin(), 4);
  DenseTensor<double> inputs = rand_uniform<double>(rng, batch_shape, 0.0, 1.0);
  std::vector<std::int32_t> labels(4);
  for (auto& y : labels) {
    y = static_cast<std::int32_t>(rng.next_index(net.spec().num_classes()));
  }

  CacheLedger<double> ledger;
  auto fwd = train_forward(net, inputs, labels, ledger);
  const auto grads = net.backward(fwd.d_logits, ledger);

  auto loss_now = [&] {
    CacheLedger<double> l;
    return train_forward(net, inputs, labels, l).loss;
  };
  double worst = 0.0;
  for (std::size_t li = 0; li < net.params().size(); ++li) {
    LayerParams<double>& p = net.params()[li];
    if (p.theta.size() == 0) continue;
    for (std::size_t c = 0; c < coords_per_layer; ++c) {
      const std::size_t i = rng.next_index(p.theta.size());
      worst = std::max(worst, rel_err(grads[li].d_theta[i], central_fd(p.theta, i, loss_now)));
    }
    for (std::size_t c = 0; c < std::min<std::size_t>(coords_per_layer, p.bias.size()); ++c) {
      const std::size_t i = rng.next_index(p.bias.size());
      worst = std::max(worst, rel_err(grads[li].d_bias[i], central_fd(p.bias, i, loss_now)));
    }
  }
  return worst;
}

struct GradCheckOptions {
  std::uint64_t seed = 0;
  std::size_t fc_instances = 100;
  std::size_t conv_instances = 100;
  std::size_t masked_instances = 100;
  std::size_t activation_instances = 50;
  std::size_t network_coords = 20;
  NetworkSpec network = build_preset("mlp_small");
  std::string network_name = "mlp_small";
  double fd_tolerance = 1e-6;
};

inline GradCheckReport run_gradcheck(const GradCheckOptions& opt) {
  GradCheckReport report;
  auto add = [&](const std::string& name, double err, double tol) {
    report.entries.push_back({name, err, tol, err <= tol});
  };
  {
    Rng rng(derive_seed(opt.seed, 11));
    add("fc_fd", gradcheck_fc_fd(rng, opt.fc_instances), opt.fd_tolerance);
  }
  {
    Rng rng(derive_seed(opt.seed, 12));
    add("conv_fd", gradcheck_conv_fd(rng, opt.conv_instances), opt.fd_tolerance);
  }
  {
    Rng rng(derive_seed(opt.seed, 13));
    add("activations_fd", gradcheck_activations_fd(rng, opt.activation_instances),
        opt.fd_tolerance);
  }
  {
    Rng rng(derive_seed(opt.seed, 14));
    add("softmax_fd", gradcheck_softmax_fd(rng, opt.activation_instances), opt.fd_tolerance);
  }
  {
    Rng rng(derive_seed(opt.seed, 15));
    add("fc_masked_0ulp", gradcheck_fc_masked(rng, opt.masked_instances), 0.0);
  }
  {
    Rng rng(derive_seed(opt.seed, 16));
    add("conv_masked_0ulp", gradcheck_conv_masked(rng, opt.masked_instances), 0.0);
  }
  {
    Rng rng(derive_seed(opt.seed, 17));
    add("network_fd_" + opt.network_name,
        gradcheck_network_fd(opt.network, rng, opt.network_coords), opt.fd_tolerance);
  }
  return report;
}

}  // namespace dropgrad
