#pragma once

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dropgrad/errors.hpp"
#include "dropgrad/layers.hpp"
#include "dropgrad/rng.hpp"
#include "dropgrad/sparsity.hpp"
#include "dropgrad/tensor.hpp"

namespace dropgrad {

enum class LayerKind { fc, conv, relu, gelu, flatten };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::fc: return "fc";
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::gelu: return "gelu";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "fc") return LayerKind::fc;
  if (s == "conv") return LayerKind::conv;
  if (s == "relu") return LayerKind::relu;
  if (s == "gelu") return LayerKind::gelu;
  if (s == "flatten") return LayerKind::flatten;
  throw ConfigError("unknown layer kind '" + s + "'");
}

// Dropping applies where the parameter gradient contracts against the cached
// input: fc and conv. Activations/reshapes never drop.
inline bool drop_applicable(LayerKind k) {
  return k == LayerKind::fc || k == LayerKind::conv;
}

struct LayerSpec {
  LayerKind kind = LayerKind::fc;
  std::size_t in = 0, out = 0;              // fc: features, conv: channels
  std::size_t kernel = 0, stride = 1, pad = 0;
  bool bias = true;
  DropSpec drop;                            // effective policy after resolve()
  std::optional<DropSpec> drop_override;    // per-layer request, pre-resolve
};

// Sequential model description. `layers[i].drop` is only meaningful after
// resolve(), which applies the applicability rules:
//   * non-applicable kinds are forced to strategy none
//   * with skip_first_last, the first and last applicable layers are forced
//     to none (dropping there cannot reduce peak allocation)
//   * gamma == 0 normalizes to strategy none (identical bytes and gradients)
struct NetworkSpec {
  static constexpr int kSpecVersion = 1;

  Shape input;  // per-sample shape, e.g. {784} or {1,28,28}
  bool skip_first_last = true;
  DropSpec default_drop;
  std::vector<LayerSpec> layers;

  std::size_t num_classes() const {
    if (layers.empty()) throw ConfigError("network has no layers");
    const LayerSpec& last = layers.back();
    if (last.kind != LayerKind::fc) throw ConfigError("network must end in an fc layer");
    return last.out;
  }

  // Applies the rules above; returns the number of layers left droppable.
  std::size_t resolve(std::ostream* warnings = nullptr) {
    std::ptrdiff_t first = -1, last = -1;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (drop_applicable(layers[i].kind)) {
        if (first < 0) first = static_cast<std::ptrdiff_t>(i);
        last = static_cast<std::ptrdiff_t>(i);
      }
    }
    bool any_drop_requested = false;
    std::size_t droppable = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      LayerSpec& l = layers[i];
      DropSpec d = l.drop_override ? *l.drop_override : default_drop;
      d.validate();
      if (d.strategy != DropStrategy::none && d.gamma > 0.0) any_drop_requested = true;
      if (!drop_applicable(l.kind)) {
        d = DropSpec{};
      } else if (skip_first_last &&
                 (static_cast<std::ptrdiff_t>(i) == first ||
                  static_cast<std::ptrdiff_t>(i) == last)) {
        d = DropSpec{DropStrategy::none, 0.0, d.index_on_host};
      } else if (d.gamma == 0.0) {
        d.strategy = DropStrategy::none;
      }
      if (d.strategy != DropStrategy::none) ++droppable;
      l.drop = d;
    }
    if (any_drop_requested && droppable == 0 && warnings != nullptr) {
      *warnings << "warning: dropping requested but no layer is drop-applicable "
                   "(skip_first_last leaves none eligible)\n";
    }
    return droppable;
  }

  // Per-layer input shapes for batch size 1 (prepend batch for real runs).
  std::vector<Shape> sample_shapes() const {
    std::vector<Shape> shapes;
    Shape cur = input;
    for (const LayerSpec& l : layers) {
      shapes.push_back(cur);
      switch (l.kind) {
        case LayerKind::fc: {
          if (numel(cur) != l.in) {
            throw ConfigError("fc layer expects " + std::to_string(l.in) +
                              " features, got " + shape_str(cur));
          }
          cur = {l.out};
          break;
        }
        case LayerKind::conv: {
          Shape with_batch = cur;
          with_batch.insert(with_batch.begin(), 1);
          const Conv2dGeometry g = conv2d_geometry(
              with_batch, {l.out, l.in, l.kernel, l.kernel}, l.stride, l.pad);
          cur = {l.out, g.out_h, g.out_w};
          break;
        }
        case LayerKind::flatten: cur = {numel(cur)}; break;
        case LayerKind::relu:
        case LayerKind::gelu: break;
      }
    }
    shapes.push_back(cur);
    return shapes;
  }
};

inline nlohmann::json to_json(const DropSpec& d) {
  return {{"strategy", to_string(d.strategy)},
          {"gamma", d.gamma},
          {"index_on_host", d.index_on_host}};
}

inline DropSpec drop_spec_from_json(const nlohmann::json& j) {
  DropSpec d;
  d.strategy = drop_strategy_from_string(j.value("strategy", "none"));
  d.gamma = j.value("gamma", 0.0);
  d.index_on_host = j.value("index_on_host", false);
  d.validate();
  return d;
}

inline nlohmann::json to_json(const NetworkSpec& spec) {
  nlohmann::json j;
  j["spec_version"] = NetworkSpec::kSpecVersion;
  j["input"] = spec.input;
  j["skip_first_last"] = spec.skip_first_last;
  j["default_drop"] = to_json(spec.default_drop);
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerSpec& l : spec.layers) {
    nlohmann::json lj;
    lj["kind"] = to_string(l.kind);
    switch (l.kind) {
      case LayerKind::fc:
        lj["in"] = l.in;
        lj["out"] = l.out;
        lj["bias"] = l.bias;
        break;
      case LayerKind::conv:
        lj["in_ch"] = l.in;
        lj["out_ch"] = l.out;
        lj["kernel"] = l.kernel;
        lj["stride"] = l.stride;
        lj["pad"] = l.pad;
        lj["bias"] = l.bias;
        break;
      default: break;
    }
    if (l.drop_override) lj["drop"] = to_json(*l.drop_override);
    lj["effective_drop"] = to_json(l.drop);
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  return j;
}

inline NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("network spec must be a JSON object");
  const int version = j.value("spec_version", -1);
  if (version != NetworkSpec::kSpecVersion) {
    throw ConfigError("unsupported spec_version " + std::to_string(version));
  }
  NetworkSpec spec;
  if (!j.contains("input") || !j.at("input").is_array()) {
    throw ConfigError("network spec requires an 'input' shape array");
  }
  spec.input = j.at("input").get<Shape>();
  if (spec.input.empty() || numel(spec.input) == 0) {
    throw ConfigError("network input shape must have positive extents");
  }
  spec.skip_first_last = j.value("skip_first_last", true);
  if (j.contains("default_drop")) spec.default_drop = drop_spec_from_json(j.at("default_drop"));
  if (!j.contains("layers") || !j.at("layers").is_array() || j.at("layers").empty()) {
    throw ConfigError("network spec requires a non-empty 'layers' array");
  }
  for (const auto& lj : j.at("layers")) {
    LayerSpec l;
    l.kind = layer_kind_from_string(lj.value("kind", ""));
    switch (l.kind) {
      case LayerKind::fc:
        l.in = lj.value("in", std::size_t{0});
        l.out = lj.value("out", std::size_t{0});
        l.bias = lj.value("bias", true);
        if (l.in == 0 || l.out == 0) throw ConfigError("fc layer requires positive in/out");
        break;
      case LayerKind::conv:
        l.in = lj.value("in_ch", std::size_t{0});
        l.out = lj.value("out_ch", std::size_t{0});
        l.kernel = lj.value("kernel", std::size_t{0});
        l.stride = lj.value("stride", std::size_t{1});
        l.pad = lj.value("pad", std::size_t{0});
        l.bias = lj.value("bias", true);
        if (l.in == 0 || l.out == 0 || l.kernel == 0) {
          throw ConfigError("conv layer requires positive in_ch/out_ch/kernel");
        }
        break;
      default: break;
    }
    if (lj.contains("drop")) l.drop_override = drop_spec_from_json(lj.at("drop"));
    spec.layers.push_back(std::move(l));
  }
  spec.sample_shapes();  // validates the layer chain
  return spec;
}

// Desk-scale presets.
//   mlp_small: 784 -> 256 -> 128 -> 10 with gelu
//   cnn_small: conv3x3(1->8,p1) relu, conv3x3(8->16) relu, flatten, fc -> 10
//   logreg:    single fc 64 -> 4 (noise telemetry workhorse)
inline NetworkSpec build_preset(const std::string& name) {
  NetworkSpec spec;
  auto fc = [](std::size_t in, std::size_t out) {
    LayerSpec l;
    l.kind = LayerKind::fc;
    l.in = in;
    l.out = out;
    return l;
  };
  auto plain = [](LayerKind kind) {
    LayerSpec l;
    l.kind = kind;
    return l;
  };
  if (name == "mlp_small") {
    spec.input = {784};
    spec.layers.push_back(fc(784, 256));
    spec.layers.push_back(plain(LayerKind::gelu));
    spec.layers.push_back(fc(256, 128));
    spec.layers.push_back(plain(LayerKind::gelu));
    spec.layers.push_back(fc(128, 10));
  } else if (name == "cnn_small") {
    spec.input = {1, 28, 28};
    LayerSpec c1;
    c1.kind = LayerKind::conv;
    c1.in = 1;
    c1.out = 8;
    c1.kernel = 3;
    c1.stride = 1;
    c1.pad = 1;
    LayerSpec c2 = c1;
    c2.in = 8;
    c2.out = 16;
    c2.pad = 0;
    spec.layers.push_back(c1);
    spec.layers.push_back(plain(LayerKind::relu));
    spec.layers.push_back(c2);
    spec.layers.push_back(plain(LayerKind::relu));
    spec.layers.push_back(plain(LayerKind::flatten));
    spec.layers.push_back(fc(16 * 26 * 26, 10));
  } else if (name == "logreg") {
    spec.input = {64};
    spec.layers.push_back(fc(64, 4));
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected mlp_small|cnn_small|logreg)");
  }
  return spec;
}

// Live cache accounting. Tracks both with-index and value-only byte totals;
// peaks include the transient dense scratch used while a sparse cache is
// being consumed in the backward pass.
template <typename Scalar>
class CacheLedger {
 public:
  void add(LayerCache<Scalar> cache) {
    Entry e;
    e.value_bytes = cache.value_bytes();
    e.index_bytes = cache.index_bytes();
    e.cache = std::move(cache);
    current_value_ += e.value_bytes;
    current_index_ += e.index_bytes;
    entries_.push_back(std::move(e));
    bump_peaks(0);
  }

  std::size_t size() const { return entries_.size(); }

  const LayerCache<Scalar>& peek(std::size_t i) const {
    check_live(i);
    return entries_.at(i).cache;
  }

  // Single-use: consuming twice means a double backward, which is a bug.
  LayerCache<Scalar> consume(std::size_t i) {
    check_live(i);
    Entry& e = entries_.at(i);
    bump_peaks(e.cache.recover_scratch_bytes());
    e.consumed = true;
    current_value_ -= e.value_bytes;
    current_index_ -= e.index_bytes;
    return std::move(e.cache);
  }

  std::uint64_t current_bytes() const { return current_value_ + current_index_; }
  std::uint64_t current_bytes_noindex() const { return current_value_; }
  std::uint64_t peak_bytes() const { return peak_with_index_; }
  std::uint64_t peak_bytes_noindex() const { return peak_noindex_; }

 private:
  struct Entry {
    LayerCache<Scalar> cache;
    std::uint64_t value_bytes = 0;
    std::uint64_t index_bytes = 0;
    bool consumed = false;
  };

  void check_live(std::size_t i) const {
    if (i >= entries_.size()) throw NumericError("cache ledger: no cache for layer");
    if (entries_[i].consumed) {
      throw NumericError("cache ledger: cache already consumed (double backward?)");
    }
  }

  void bump_peaks(std::uint64_t transient_value_bytes) {
    peak_with_index_ =
        std::max(peak_with_index_, current_value_ + current_index_ + transient_value_bytes);
    peak_noindex_ = std::max(peak_noindex_, current_value_ + transient_value_bytes);
  }

  std::vector<Entry> entries_;
  std::uint64_t current_value_ = 0, current_index_ = 0;
  std::uint64_t peak_with_index_ = 0, peak_noindex_ = 0;
};

template <typename Scalar>
struct LayerParams {
  DenseTensor<Scalar> theta;
  DenseTensor<Scalar> bias;  // empty when absent

  bool empty() const { return theta.size() == 0; }
};

// A sequential network bound to concrete parameters. Forward populates a
// CacheLedger per the resolved DropSpecs; backward consumes it in reverse.
template <typename Scalar>
class Network {
 public:
  Network() = default;

  // Glorot-normal init, layer by layer in order, biases zero.
  static Network init(NetworkSpec spec, Rng& rng) {
    Network net;
    net.spec_ = std::move(spec);
    net.spec_.resolve(&std::cerr);
    for (const LayerSpec& l : net.spec_.layers) {
      LayerParams<Scalar> p;
      if (l.kind == LayerKind::fc) {
        const double std = std::sqrt(2.0 / static_cast<double>(l.in + l.out));
        p.theta = rand_normal<Scalar>(rng, {l.out, l.in}, 0.0, std);
        if (l.bias) p.bias = DenseTensor<Scalar>({l.out});
      } else if (l.kind == LayerKind::conv) {
        const std::size_t fan_in = l.in * l.kernel * l.kernel;
        const std::size_t fan_out = l.out * l.kernel * l.kernel;
        const double std = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
        p.theta = rand_normal<Scalar>(rng, {l.out, l.in, l.kernel, l.kernel}, 0.0, std);
        if (l.bias) p.bias = DenseTensor<Scalar>({l.out});
      }
      net.params_.push_back(std::move(p));
    }
    return net;
  }

  // Binds existing parameters to a (possibly re-dropped) spec.
  static Network with_params(NetworkSpec spec, std::vector<LayerParams<Scalar>> params,
                             std::ostream* warnings = nullptr) {
    Network net;
    net.spec_ = std::move(spec);
    net.spec_.resolve(warnings);
    if (params.size() != net.spec_.layers.size()) {
      throw ShapeError("parameter count does not match network spec");
    }
    net.params_ = std::move(params);
    return net;
  }

  const NetworkSpec& spec() const { return spec_; }
  std::vector<LayerParams<Scalar>>& params() { return params_; }
  const std::vector<LayerParams<Scalar>>& params() const { return params_; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.theta.size() + p.bias.size();
    return n;
  }

  // Forward with caching. `drop_rng` feeds random-strategy dropping only.
  DenseTensor<Scalar> forward(const DenseTensor<Scalar>& batch, CacheLedger<Scalar>& ledger,
                              Rng* drop_rng = nullptr) const {
    return forward_impl(batch, ledger, drop_rng, true);
  }

  // Forward that caches everything densely regardless of the drop policy;
  // the reference pass telemetry compares against.
  DenseTensor<Scalar> forward_nodrop(const DenseTensor<Scalar>& batch,
                                     CacheLedger<Scalar>& ledger) const {
    return forward_impl(batch, ledger, nullptr, false);
  }

  // Inference path: no caches, no dropping (the network is unchanged at
  // inference time).
  DenseTensor<Scalar> infer(const DenseTensor<Scalar>& batch) const {
    DenseTensor<Scalar> x = batch;
    const DropSpec no_drop;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      const LayerSpec& l = spec_.layers[i];
      const LayerParams<Scalar>& p = params_[i];
      switch (l.kind) {
        case LayerKind::fc: x = fc_forward(x, p.theta, optional_bias(p), no_drop).output; break;
        case LayerKind::conv:
          x = conv_forward(x, p.theta, optional_bias(p), l.stride, l.pad, no_drop).output;
          break;
        case LayerKind::relu: x = relu(x); break;
        case LayerKind::gelu: x = gelu(x); break;
        case LayerKind::flatten: x = x.reshaped({x.extent(0), x.size() / x.extent(0)}); break;
      }
    }
    return x;
  }

  // Backward from d_logits, consuming each cache right after its layer.
  // Returns per-layer grads, index-aligned with spec().layers.
  std::vector<LayerGrads<Scalar>> backward(const DenseTensor<Scalar>& d_logits,
                                           CacheLedger<Scalar>& ledger) const {
    if (ledger.size() != spec_.layers.size()) {
      throw NumericError("cache ledger does not match network (missing forward?)");
    }
    std::vector<LayerGrads<Scalar>> grads(spec_.layers.size());
    DenseTensor<Scalar> d = d_logits;
    for (std::size_t ri = spec_.layers.size(); ri-- > 0;) {
      const LayerSpec& l = spec_.layers[ri];
      const LayerParams<Scalar>& p = params_[ri];
      const LayerCache<Scalar> cache = ledger.consume(ri);
      switch (l.kind) {
        case LayerKind::fc: {
          grads[ri] = fc_backward(cache, p.theta, d, p.bias.size() > 0);
          d = grads[ri].d_input;
          break;
        }
        case LayerKind::conv: {
          grads[ri] = conv_backward(cache, p.theta, d, l.stride, l.pad, p.bias.size() > 0);
          d = grads[ri].d_input;
          break;
        }
        case LayerKind::relu: d = relu_backward(cache, d); break;
        case LayerKind::gelu: d = gelu_backward(cache, d); break;
        case LayerKind::flatten: d = d.reshaped(cache.input_shape); break;
      }
    }
    return grads;
  }

  // Concatenation of all parameter gradients (theta then bias, layer order)
  // as doubles; the flat-vector form the gradient estimators work on.
  std::vector<double> flatten_grads(const std::vector<LayerGrads<Scalar>>& grads) const {
    std::vector<double> flat;
    flat.reserve(param_count());
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (params_[i].empty()) continue;
      for (std::size_t j = 0; j < grads[i].d_theta.size(); ++j) {
        flat.push_back(static_cast<double>(grads[i].d_theta[j]));
      }
      for (std::size_t j = 0; j < grads[i].d_bias.size(); ++j) {
        flat.push_back(static_cast<double>(grads[i].d_bias[j]));
      }
    }
    return flat;
  }

  std::vector<double> flatten_params() const {
    std::vector<double> flat;
    flat.reserve(param_count());
    for (const auto& p : params_) {
      for (std::size_t j = 0; j < p.theta.size(); ++j) {
        flat.push_back(static_cast<double>(p.theta[j]));
      }
      for (std::size_t j = 0; j < p.bias.size(); ++j) {
        flat.push_back(static_cast<double>(p.bias[j]));
      }
    }
    return flat;
  }

  // Flat-vector offsets of each parameterized layer, aligned with
  // flatten_grads/flatten_params (theta then bias per layer).
  std::vector<std::pair<std::size_t, std::size_t>> param_slices() const {
    std::vector<std::pair<std::size_t, std::size_t>> slices;
    std::size_t offset = 0;
    for (const auto& p : params_) {
      const std::size_t count = p.theta.size() + p.bias.size();
      slices.emplace_back(offset, count);
      offset += count;
    }
    return slices;
  }

 private:
  DenseTensor<Scalar> forward_impl(const DenseTensor<Scalar>& batch, CacheLedger<Scalar>& ledger,
                                   Rng* drop_rng, bool apply_drop) const {
    const DropSpec no_drop;
    DenseTensor<Scalar> x = batch;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      const LayerSpec& l = spec_.layers[i];
      const LayerParams<Scalar>& p = params_[i];
      const DropSpec& drop = apply_drop ? l.drop : no_drop;
      switch (l.kind) {
        case LayerKind::fc: {
          auto r = fc_forward(x, p.theta, optional_bias(p), drop, drop_rng);
          ledger.add(std::move(r.cache));
          x = std::move(r.output);
          break;
        }
        case LayerKind::conv: {
          auto r = conv_forward(x, p.theta, optional_bias(p), l.stride, l.pad, drop, drop_rng);
          ledger.add(std::move(r.cache));
          x = std::move(r.output);
          break;
        }
        case LayerKind::relu: {
          auto r = relu_forward(x);
          ledger.add(std::move(r.cache));
          x = std::move(r.output);
          break;
        }
        case LayerKind::gelu: {
          auto r = gelu_forward(x);
          ledger.add(std::move(r.cache));
          x = std::move(r.output);
          break;
        }
        case LayerKind::flatten: {
          ledger.add(LayerCache<Scalar>::make_none(x.shape()));
          x = x.reshaped({x.extent(0), x.size() / x.extent(0)});
          break;
        }
      }
    }
    return x;
  }

  static const DenseTensor<Scalar>* optional_bias(const LayerParams<Scalar>& p) {
    return p.bias.size() > 0 ? &p.bias : nullptr;
  }

  NetworkSpec spec_;
  std::vector<LayerParams<Scalar>> params_;
};

template <typename Scalar>
struct TrainForwardResult {
  double loss = 0.0;
  DenseTensor<Scalar> logits;
  DenseTensor<Scalar> d_logits;
};

template <typename Scalar>
TrainForwardResult<Scalar> train_forward(const Network<Scalar>& net,
                                         const DenseTensor<Scalar>& batch,
                                         const std::vector<std::int32_t>& labels,
                                         CacheLedger<Scalar>& ledger, Rng* drop_rng = nullptr) {
  TrainForwardResult<Scalar> r;
  r.logits = net.forward(batch, ledger, drop_rng);
  auto loss = softmax_cross_entropy(r.logits, labels);
  r.loss = loss.loss;
  r.d_logits = std::move(loss.d_logits);
  return r;
}

// Reference pass with fully dense caches, whatever the network's drop policy.
template <typename Scalar>
TrainForwardResult<Scalar> train_forward_nodrop(const Network<Scalar>& net,
                                                const DenseTensor<Scalar>& batch,
                                                const std::vector<std::int32_t>& labels,
                                                CacheLedger<Scalar>& ledger) {
  TrainForwardResult<Scalar> r;
  r.logits = net.forward_nodrop(batch, ledger);
  auto loss = softmax_cross_entropy(r.logits, labels);
  r.loss = loss.loss;
  r.d_logits = std::move(loss.d_logits);
  return r;
}

template <typename Scalar>
std::vector<LayerGrads<Scalar>> train_backward(const Network<Scalar>& net,
                                               const TrainForwardResult<Scalar>& fwd,
                                               CacheLedger<Scalar>& ledger,
                                               Scalar d_loss = Scalar(1)) {
  if (d_loss == Scalar(1)) return net.backward(fwd.d_logits, ledger);
  return net.backward(scale(fwd.d_logits, d_loss), ledger);
}

}  // namespace dropgrad
