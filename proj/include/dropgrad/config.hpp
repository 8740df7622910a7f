#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dropgrad/errors.hpp"
#include "dropgrad/network.hpp"
#include "dropgrad/optim.hpp"

namespace dropgrad {

enum class Precision { f32, f64 };

inline const char* to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision precision_from_string(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("precision must be f32 or f64, got '" + s + "'");
}

struct DataConfig {
  std::string source;  // synth_blobs | synth_digits | idx
  bool standardize = false;  // shift/scale to train-set mean 0, std 1
  // synthetic sources
  std::size_t n = 0;
  std::size_t n_test = 0;
  std::size_t dim = 0;
  std::size_t classes = 0;
  double separation = 3.0;
  bool nonnegative = false;
  // idx source
  std::string train_images, train_labels;
  std::string test_images, test_labels;
};

struct TelemetryConfig {
  bool grad_stats = false;
  bool per_layer = false;
};

// A fully validated run description; the single source of truth every CLI
// command starts from (config_version 1, see docs/formats.md).
struct RunConfig {
  static constexpr int kConfigVersion = 1;

  std::string preset;     // one of the build_preset names, or
  std::string spec_file;  // a network spec JSON on disk
  DropSpec drop;
  bool skip_first_last = true;
  std::map<std::size_t, DropSpec> per_layer_drop;
  OptimConfig optim;
  DataConfig data;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  bool shuffle = true;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  bool precision_explicit = false;
  std::string out_dir = "runs/out";
  TelemetryConfig telemetry;
  std::uint64_t checkpoint_at = 0;  // 0 = never
  std::string resume;               // checkpoint path, empty = fresh run

  NetworkSpec make_network_spec() const {
    NetworkSpec spec;
    if (!preset.empty()) {
      spec = build_preset(preset);
    } else {
      std::ifstream in(spec_file);
      if (!in) throw IoError("cannot open network spec '" + spec_file + "'");
      nlohmann::json j;
      try {
        in >> j;
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("network spec '" + spec_file + "' is not valid JSON: " + e.what());
      }
      spec = network_spec_from_json(j);
    }
    spec.skip_first_last = skip_first_last;
    spec.default_drop = drop;
    for (const auto& [index, d] : per_layer_drop) {
      if (index >= spec.layers.size()) {
        throw ConfigError("per_layer drop index " + std::to_string(index) +
                          " out of range (network has " +
                          std::to_string(spec.layers.size()) + " layers)");
      }
      if (!drop_applicable(spec.layers[index].kind)) {
        throw ConfigError("per_layer drop index " + std::to_string(index) +
                          " targets a non-droppable layer (" +
                          to_string(spec.layers[index].kind) + ")");
      }
      spec.layers[index].drop_override = d;
    }
    return spec;
  }
};

namespace detail {

inline void require_keys(const nlohmann::json& j, const char* what,
                         std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* k : allowed) {
      if (key == k) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw ConfigError(std::string("unknown key '") + key + "' in " + what);
    }
  }
}

template <typename T>
T get_positive(const nlohmann::json& j, const char* key, const char* what) {
  if (!j.contains(key)) throw ConfigError(std::string(what) + " requires '" + key + "'");
  const auto v = j.at(key).get<std::int64_t>();
  if (v <= 0) throw ConfigError(std::string(what) + "." + key + " must be positive");
  return static_cast<T>(v);
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  detail::require_keys(j, "run config",
                       {"config_version", "network", "drop", "optim", "data", "epochs",
                        "batch_size", "shuffle", "seed", "precision", "out_dir", "telemetry",
                        "checkpoint_at", "resume"});
  const int version = j.value("config_version", -1);
  if (version != RunConfig::kConfigVersion) {
    throw ConfigError("unsupported config_version " + std::to_string(version) +
                      " (expected " + std::to_string(RunConfig::kConfigVersion) + ")");
  }

  RunConfig cfg;

  if (!j.contains("network") || !j.at("network").is_object()) {
    throw ConfigError("config requires a 'network' object");
  }
  const auto& net = j.at("network");
  detail::require_keys(net, "network", {"preset", "spec_file"});
  cfg.preset = net.value("preset", "");
  cfg.spec_file = net.value("spec_file", "");
  if (cfg.preset.empty() == cfg.spec_file.empty()) {
    throw ConfigError("network needs exactly one of 'preset' or 'spec_file'");
  }

  if (j.contains("drop")) {
    const auto& d = j.at("drop");
    detail::require_keys(d, "drop",
                         {"strategy", "gamma", "index_on_host", "skip_first_last", "per_layer"});
    cfg.drop = drop_spec_from_json(d);
    cfg.skip_first_last = d.value("skip_first_last", true);
    if (d.contains("per_layer")) {
      if (!d.at("per_layer").is_object()) throw ConfigError("drop.per_layer must be an object");
      for (const auto& [key, value] : d.at("per_layer").items()) {
        std::size_t index = 0;
        try {
          index = std::stoul(key);
        } catch (...) {
          throw ConfigError("drop.per_layer key '" + key + "' is not a layer index");
        }
        cfg.per_layer_drop[index] = drop_spec_from_json(value);
      }
    }
  }

  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    detail::require_keys(o, "optim",
                         {"kind", "lr", "momentum", "weight_decay", "lr_schedule",
                          "alpha_scaling", "alpha_fixed"});
    const std::string kind = o.value("kind", "sgd");
    if (kind != "sgd") throw ConfigError("optim.kind must be 'sgd'");
    cfg.optim.lr = o.value("lr", 0.1);
    cfg.optim.momentum = o.value("momentum", 0.0);
    cfg.optim.weight_decay = o.value("weight_decay", 0.0);
    const std::string sched = o.value("lr_schedule", "constant");
    if (sched == "constant") {
      cfg.optim.schedule = LrSchedule::constant;
    } else if (sched == "cosine") {
      cfg.optim.schedule = LrSchedule::cosine;
    } else {
      throw ConfigError("optim.lr_schedule must be constant|cosine");
    }
    const std::string alpha = o.value("alpha_scaling", "off");
    if (alpha == "off") {
      cfg.optim.alpha_scaling = AlphaScaling::off;
    } else if (alpha == "fixed") {
      cfg.optim.alpha_scaling = AlphaScaling::fixed;
    } else if (alpha == "online") {
      cfg.optim.alpha_scaling = AlphaScaling::online;
    } else {
      throw ConfigError("optim.alpha_scaling must be off|fixed|online");
    }
    cfg.optim.alpha_fixed = o.value("alpha_fixed", 1.0);
    cfg.optim.validate();
  }

  if (!j.contains("data") || !j.at("data").is_object()) {
    throw ConfigError("config requires a 'data' object");
  }
  const auto& d = j.at("data");
  detail::require_keys(d, "data",
                       {"source", "standardize", "n", "n_test", "dim", "classes", "separation",
                        "nonnegative", "train_images", "train_labels", "test_images",
                        "test_labels"});
  cfg.data.source = d.value("source", "");
  cfg.data.standardize = d.value("standardize", false);
  if (cfg.data.source == "synth_blobs") {
    cfg.data.n = detail::get_positive<std::size_t>(d, "n", "data");
    cfg.data.dim = detail::get_positive<std::size_t>(d, "dim", "data");
    cfg.data.classes = detail::get_positive<std::size_t>(d, "classes", "data");
    cfg.data.n_test = d.value("n_test", std::size_t{0});
    cfg.data.separation = d.value("separation", 3.0);
    cfg.data.nonnegative = d.value("nonnegative", false);
    if (!(cfg.data.separation > 0)) throw ConfigError("data.separation must be positive");
  } else if (cfg.data.source == "synth_digits") {
    cfg.data.n = detail::get_positive<std::size_t>(d, "n", "data");
    cfg.data.n_test = d.value("n_test", std::size_t{0});
    cfg.data.classes = d.value("classes", std::size_t{10});
  } else if (cfg.data.source == "idx") {
    cfg.data.train_images = d.value("train_images", "");
    cfg.data.train_labels = d.value("train_labels", "");
    if (cfg.data.train_images.empty() || cfg.data.train_labels.empty()) {
      throw ConfigError("idx data requires train_images and train_labels");
    }
    cfg.data.test_images = d.value("test_images", "");
    cfg.data.test_labels = d.value("test_labels", "");
  } else {
    throw ConfigError("data.source must be synth_blobs|synth_digits|idx");
  }

  cfg.epochs = detail::get_positive<std::size_t>(j, "epochs", "config");
  cfg.batch_size = detail::get_positive<std::size_t>(j, "batch_size", "config");
  cfg.shuffle = j.value("shuffle", true);
  cfg.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("precision")) {
    cfg.precision = precision_from_string(j.at("precision").get<std::string>());
    cfg.precision_explicit = true;
  } else if (const char* env = std::getenv("DROPGRAD_PRECISION")) {
    cfg.precision = precision_from_string(env);
  }
  cfg.out_dir = j.value("out_dir", std::string("runs/out"));
  if (j.contains("telemetry")) {
    const auto& t = j.at("telemetry");
    detail::require_keys(t, "telemetry", {"grad_stats", "per_layer"});
    cfg.telemetry.grad_stats = t.value("grad_stats", false);
    cfg.telemetry.per_layer = t.value("per_layer", false);
  }
  cfg.checkpoint_at = j.value("checkpoint_at", std::uint64_t{0});
  cfg.resume = j.value("resume", std::string());
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

inline nlohmann::json to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["config_version"] = RunConfig::kConfigVersion;
  if (!cfg.preset.empty()) {
    j["network"] = {{"preset", cfg.preset}};
  } else {
    j["network"] = {{"spec_file", cfg.spec_file}};
  }
  nlohmann::json drop = to_json(cfg.drop);
  drop["skip_first_last"] = cfg.skip_first_last;
  if (!cfg.per_layer_drop.empty()) {
    nlohmann::json per;
    for (const auto& [index, d] : cfg.per_layer_drop) per[std::to_string(index)] = to_json(d);
    drop["per_layer"] = std::move(per);
  }
  j["drop"] = std::move(drop);
  j["optim"] = {{"kind", "sgd"},
                {"lr", cfg.optim.lr},
                {"momentum", cfg.optim.momentum},
                {"weight_decay", cfg.optim.weight_decay},
                {"lr_schedule", to_string(cfg.optim.schedule)},
                {"alpha_scaling", to_string(cfg.optim.alpha_scaling)},
                {"alpha_fixed", cfg.optim.alpha_fixed}};
  nlohmann::json data;
  data["source"] = cfg.data.source;
  data["standardize"] = cfg.data.standardize;
  if (cfg.data.source == "idx") {
    data["train_images"] = cfg.data.train_images;
    data["train_labels"] = cfg.data.train_labels;
    if (!cfg.data.test_images.empty()) {
      data["test_images"] = cfg.data.test_images;
      data["test_labels"] = cfg.data.test_labels;
    }
  } else {
    data["n"] = cfg.data.n;
    data["n_test"] = cfg.data.n_test;
    if (cfg.data.source == "synth_blobs") {
      data["dim"] = cfg.data.dim;
      data["separation"] = cfg.data.separation;
      data["nonnegative"] = cfg.data.nonnegative;
    }
    data["classes"] = cfg.data.classes;
  }
  j["data"] = std::move(data);
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["shuffle"] = cfg.shuffle;
  j["seed"] = cfg.seed;
  j["precision"] = to_string(cfg.precision);
  j["out_dir"] = cfg.out_dir;
  j["telemetry"] = {{"grad_stats", cfg.telemetry.grad_stats},
                    {"per_layer", cfg.telemetry.per_layer}};
  j["checkpoint_at"] = cfg.checkpoint_at;
  j["resume"] = cfg.resume;
  return j;
}

// FNV-1a 64 over the canonical (key-sorted) JSON dump.
inline std::string config_hash(const RunConfig& cfg) {
  const std::string dump = to_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dropgrad
