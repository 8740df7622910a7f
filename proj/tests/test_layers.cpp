#include <doctest.h>

#include <cmath>
#include <cstring>

#include "dropgrad/layers.hpp"
#include "oracle.hpp"

using namespace dropgrad;

namespace {

template <typename Scalar>
bool bitwise_equal(const DenseTensor<Scalar>& a, const DenseTensor<Scalar>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(Scalar)) == 0;
}

const DropSpec kNoDrop;

DropSpec min_k(double gamma) { return DropSpec{DropStrategy::min_k, gamma, false}; }

}  // namespace

TEST_CASE("fc_forward: output and cache policy") {
  DenseTensor<double> a({1, 2}, {1, 0});
  DenseTensor<double> theta({2, 2}, {1, 0, 0, 1});
  auto r = fc_forward(a, theta, nullptr, kNoDrop);
  CHECK(r.output == DenseTensor<double>({1, 2}, {1, 0}));
  CHECK(r.cache.kind == CacheKind::dense);
  CHECK(r.cache.dense == a);

  auto r0 = fc_forward(a, theta, nullptr, min_k(0.0));
  CHECK(bitwise_equal(r0.output, r.output));
  CHECK(r0.cache.kind == CacheKind::sparse);
  CHECK(r0.cache.sparse.retained == 2);

  DenseTensor<double> a2({1, 3}, {2, 0.1, -3});
  DenseTensor<double> theta2({2, 3}, {1, 0, 0, 0, 1, 0});
  auto dense = fc_forward(a2, theta2, nullptr, kNoDrop);
  auto dropped = fc_forward(a2, theta2, nullptr, min_k(0.5));
  CHECK(bitwise_equal(dense.output, dropped.output));
  CHECK(dropped.cache.sparse.values == std::vector<double>{2, -3});
  CHECK(dropped.cache.sparse.indices == std::vector<std::uint32_t>{0, 2});

  CHECK_THROWS_AS(fc_forward(DenseTensor<double>({1, 3}), theta, nullptr, kNoDrop),
                  ShapeError);
}

TEST_CASE("fc_forward: bias addition") {
  DenseTensor<double> a({2, 2}, {1, 2, 3, 4});
  DenseTensor<double> theta({2, 2}, {1, 0, 0, 1});
  DenseTensor<double> bias({2}, {10, 20});
  auto r = fc_forward(a, theta, &bias, kNoDrop);
  CHECK(r.output == DenseTensor<double>({2, 2}, {11, 22, 13, 24}));
}

TEST_CASE("fc_backward: hand-checked gradients and masked variant") {
  DenseTensor<double> a({1, 3}, {2, 0.1, -3});
  DenseTensor<double> theta({2, 3}, {0.5, -1, 2, 1, 1, 1});
  DenseTensor<double> d_z({1, 2}, {1, -1});

  auto dense = fc_forward(a, theta, nullptr, kNoDrop);
  auto g = fc_backward(dense.cache, theta, d_z, false);
  CHECK(g.d_theta == DenseTensor<double>({2, 3}, {2, 0.1, -3, -2, -0.1, 3}));
  // d_input = d_z * theta = [0.5-1, -1-1, 2-1]
  CHECK(g.d_input == DenseTensor<double>({1, 3}, {-0.5, -2, 1}));

  auto dropped = fc_forward(a, theta, nullptr, min_k(1.0 / 3.0));
  CHECK(dropped.cache.sparse.indices == std::vector<std::uint32_t>{0, 2});
  auto gd = fc_backward(dropped.cache, theta, d_z, false);
  CHECK(gd.d_theta == DenseTensor<double>({2, 3}, {2, 0, -3, -2, 0, 3}));
  CHECK(bitwise_equal(gd.d_input, g.d_input));

  auto gz = fc_backward(dense.cache, theta, DenseTensor<double>({1, 2}), false);
  for (std::size_t i = 0; i < gz.d_theta.size(); ++i) CHECK(gz.d_theta[i] == 0.0);
  for (std::size_t i = 0; i < gz.d_input.size(); ++i) CHECK(gz.d_input[i] == 0.0);
}

TEST_CASE("fc_backward: d_bias is the column sum of d_z") {
  Rng rng(21);
  auto a = rand_normal<double>(rng, {4, 3}, 0.0, 1.0);
  auto theta = rand_normal<double>(rng, {5, 3}, 0.0, 1.0);
  DenseTensor<double> bias({5});
  auto d_z = rand_normal<double>(rng, {4, 5}, 0.0, 1.0);
  auto fwd = fc_forward(a, theta, &bias, kNoDrop);
  auto g = fc_backward(fwd.cache, theta, d_z, true);
  for (std::size_t j = 0; j < 5; ++j) {
    double s = 0.0;
    for (std::size_t n = 0; n < 4; ++n) s += d_z[n * 5 + j];
    CHECK(g.d_bias[j] == doctest::Approx(s).epsilon(1e-15));
  }
}

TEST_CASE("fc backward equivalence: sparse == dense-on-recovered == restricted sum") {
  Rng rng(22);
  for (int it = 0; it < 30; ++it) {
    const std::size_t batch = 1 + rng.next_index(6);
    const std::size_t c_in = 2 + rng.next_index(10);
    const std::size_t c_out = 1 + rng.next_index(6);
    const double gamma = 0.2 + 0.7 * rng.next_double();
    auto a = rand_normal<double>(rng, {batch, c_in}, 0.0, 1.0);
    auto theta = rand_normal<double>(rng, {c_out, c_in}, 0.0, 1.0);
    auto d_z = rand_normal<double>(rng, {batch, c_out}, 0.0, 1.0);

    const auto sparse = drop_min_k(a, gamma);
    auto gs = fc_backward(LayerCache<double>::make_sparse(sparse), theta, d_z, false);
    auto gd = fc_backward(LayerCache<double>::make_dense(recover(sparse)), theta, d_z, false);
    CHECK(bitwise_equal(gs.d_theta, gd.d_theta));  // shared kernel, 0 ULP

    const auto oracle_dtheta = oracle::fc_dtheta_restricted(sparse, d_z);
    CHECK(oracle::max_rel_err(gs.d_theta, oracle_dtheta) < 1e-12);
  }
}

TEST_CASE("conv_forward: cache policy and forward invariance") {
  Rng rng(23);
  auto a = rand_normal<double>(rng, {2, 3, 6, 6}, 0.0, 1.0);
  auto kern = rand_normal<double>(rng, {4, 3, 3, 3}, 0.0, 1.0);
  DenseTensor<double> bias = rand_normal<double>(rng, {4}, 0.0, 1.0);

  auto dense = conv_forward(a, kern, &bias, 1, 1, kNoDrop);
  CHECK(dense.cache.kind == CacheKind::dense);
  {
    auto plain = conv2d(a, kern, 1, 1);
    for (std::size_t n = 0; n < 2; ++n) {
      for (std::size_t j = 0; j < 4; ++j) {
        for (std::size_t p = 0; p < 36; ++p) {
          const std::size_t i = (n * 4 + j) * 36 + p;
          CHECK(dense.output[i] == plain[i] + bias[j]);
        }
      }
    }
  }

  auto zero_gamma = conv_forward(a, kern, &bias, 1, 1, min_k(0.0));
  CHECK(recover(zero_gamma.cache.sparse) == a);

  for (double gamma : {0.3, 0.7}) {
    auto dropped = conv_forward(a, kern, &bias, 1, 1, min_k(gamma));
    CHECK(bitwise_equal(dropped.output, dense.output));
    CHECK(dropped.cache.sparse.original_shape == a.shape());  // unpadded input cached
  }
}

TEST_CASE("conv_backward: hand-checked kernel gradient") {
  DenseTensor<double> a({1, 1, 2, 2}, {1, 2, 3, 4});
  DenseTensor<double> kern({1, 1, 1, 1}, {0.5});
  DenseTensor<double> d_z({1, 1, 2, 2}, {1, 1, 1, 1});

  auto dense = conv_forward(a, kern, nullptr, 1, 0, kNoDrop);
  auto g = conv_backward(dense.cache, kern, d_z, 1, 0, false);
  CHECK(g.d_theta.shape() == Shape{1, 1, 1, 1});
  CHECK(g.d_theta[0] == 10.0);

  auto dropped = conv_forward(a, kern, nullptr, 1, 0, min_k(0.5));
  auto gd = conv_backward(dropped.cache, kern, d_z, 1, 0, false);
  CHECK(gd.d_theta[0] == 7.0);  // keeps 3 and 4
  CHECK(bitwise_equal(gd.d_input, g.d_input));

  auto gz = conv_backward(dense.cache, kern, DenseTensor<double>({1, 1, 2, 2}), 1, 0, false);
  CHECK(gz.d_theta[0] == 0.0);
  for (std::size_t i = 0; i < gz.d_input.size(); ++i) CHECK(gz.d_input[i] == 0.0);
}

TEST_CASE("conv backward equivalence: sparse == dense-on-recovered == restricted sum") {
  Rng rng(24);
  struct Geo {
    std::size_t K, s, p;
  };
  const Geo geos[] = {{3, 1, 1}, {2, 2, 0}, {1, 1, 0}, {3, 1, 0}};
  for (const Geo& geo : geos) {
    for (double gamma : {0.3, 0.6, 0.9}) {
      const std::size_t out_h = 2, out_w = 3;
      const std::size_t in_h = geo.K + geo.s * (out_h - 1) - 2 * geo.p;
      const std::size_t in_w = geo.K + geo.s * (out_w - 1) - 2 * geo.p;
      auto a = rand_normal<double>(rng, {2, 2, in_h, in_w}, 0.0, 1.0);
      auto kern = rand_normal<double>(rng, {3, 2, geo.K, geo.K}, 0.0, 1.0);
      auto d_z = rand_normal<double>(rng, {2, 3, out_h, out_w}, 0.0, 1.0);

      const auto sparse = drop_min_k(a, gamma);
      auto gs =
          conv_backward(LayerCache<double>::make_sparse(sparse), kern, d_z, geo.s, geo.p, false);
      auto gd = conv_backward(LayerCache<double>::make_dense(recover(sparse)), kern, d_z, geo.s,
                              geo.p, false);
      CHECK(bitwise_equal(gs.d_theta, gd.d_theta));

      const auto oracle_dtheta =
          oracle::conv_dtheta_restricted(sparse, d_z, geo.K, geo.s, geo.p);
      CHECK(oracle::max_rel_err(gs.d_theta, oracle_dtheta) < 1e-12);
    }
  }
}

TEST_CASE("relu: mask cache and exact backward") {
  DenseTensor<double> a({2}, {-1, 2});
  auto fwd = relu_forward(a);
  CHECK(fwd.output == DenseTensor<double>({2}, {0, 2}));
  CHECK(fwd.cache.kind == CacheKind::bitmask);
  auto d = relu_backward(fwd.cache, DenseTensor<double>({2}, {5, 5}));
  CHECK(d == DenseTensor<double>({2}, {0, 5}));

  // the mask cache costs N bits
  DenseTensor<double> big({1000});
  auto bm = relu_forward(big);
  CHECK(bm.cache.value_bytes() == 125);
  CHECK(bm.cache.index_bytes() == 0);
}

TEST_CASE("gelu: dense cache, derivative at origin is 1/2") {
  DenseTensor<double> a({1}, {0.0});
  auto fwd = gelu_forward(a);
  CHECK(fwd.cache.kind == CacheKind::dense);
  auto d = gelu_backward(fwd.cache, DenseTensor<double>({1}, {1.0}));
  CHECK(d[0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("softmax_cross_entropy: closed forms and gradient") {
  DenseTensor<double> uniform({1, 2}, {0.3, 0.3});
  std::vector<std::int32_t> label0{0};
  auto r = softmax_cross_entropy(uniform, label0);
  CHECK(r.loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  // loss decreases monotonically as the correct-class margin grows
  double prev = r.loss;
  for (double margin : {1.0, 2.0, 4.0, 8.0}) {
    DenseTensor<double> l({1, 2}, {margin, 0.0});
    const double loss = softmax_cross_entropy(l, label0).loss;
    CHECK(loss < prev);
    prev = loss;
  }

  CHECK_THROWS_AS(softmax_cross_entropy(uniform, std::vector<std::int32_t>{2}), ConfigError);
  DenseTensor<double> inf_logits({1, 2}, {std::numeric_limits<double>::infinity(), 0.0});
  CHECK_THROWS_AS(softmax_cross_entropy(inf_logits, label0), NumericError);

  // central finite differences on a random 3x4 instance
  Rng rng(25);
  auto logits = rand_normal<double>(rng, {3, 4}, 0.0, 2.0);
  std::vector<std::int32_t> labels{1, 3, 0};
  auto res = softmax_cross_entropy(logits, labels);
  double worst = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double orig = logits[i];
    const double eps = 1e-6;
    logits[i] = orig + eps;
    const double hi = softmax_cross_entropy(logits, labels).loss;
    logits[i] = orig - eps;
    const double lo = softmax_cross_entropy(logits, labels).loss;
    logits[i] = orig;
    const double fd = (hi - lo) / (2 * eps);
    worst = std::max(worst, std::abs(fd - res.d_logits[i]));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("backward without a cache is an error") {
  DenseTensor<double> theta({2, 2}, {1, 0, 0, 1});
  DenseTensor<double> d_z({1, 2}, {1, 1});
  auto cache = LayerCache<double>::make_none({1, 2});
  CHECK_THROWS_AS(fc_backward(cache, theta, d_z, false), NumericError);
}
