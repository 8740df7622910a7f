#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <optional>
#include <string>
#include <vector>

#include "dropgrad/analysis.hpp"
#include "dropgrad/checkpoint.hpp"
#include "dropgrad/config.hpp"
#include "dropgrad/data.hpp"
#include "dropgrad/idx.hpp"
#include "dropgrad/network.hpp"
#include "dropgrad/optim.hpp"
#include "dropgrad/version.hpp"

namespace dropgrad {

// Substream tags off the run seed (see derive_seed).
inline constexpr std::uint64_t kSeedTagTrainData = 101;
inline constexpr std::uint64_t kSeedTagTestData = 102;
inline constexpr std::uint64_t kSeedTagEpochBase = 1000;

template <typename Scalar>
struct LoadedData {
  Dataset<Scalar> train;
  std::optional<Dataset<Scalar>> test;
  bool standardized = false;
  double mean = 0.0;  // train-set statistics applied to both splits
  double stddev = 1.0;
};

template <typename Scalar>
LoadedData<Scalar> load_data(const RunConfig& cfg) {
  LoadedData<Scalar> data;
  const DataConfig& d = cfg.data;
  if (d.source == "synth_blobs") {
    Rng train_rng(derive_seed(cfg.seed, kSeedTagTrainData));
    data.train = synth_blobs<Scalar>(train_rng, d.n, d.dim, d.classes, d.separation,
                                     d.nonnegative);
    if (d.n_test > 0) {
      Rng test_rng(derive_seed(cfg.seed, kSeedTagTestData));
      data.test = synth_blobs<Scalar>(test_rng, d.n_test, d.dim, d.classes, d.separation,
                                      d.nonnegative);
    }
  } else if (d.source == "synth_digits") {
    Rng train_rng(derive_seed(cfg.seed, kSeedTagTrainData));
    data.train = synth_digits<Scalar>(train_rng, d.n, d.classes, 28, cfg.seed);
    if (d.n_test > 0) {
      Rng test_rng(derive_seed(cfg.seed, kSeedTagTestData));
      data.test = synth_digits<Scalar>(test_rng, d.n_test, d.classes, 28, cfg.seed);
    }
  } else if (d.source == "idx") {
    data.train = load_idx<Scalar>(d.train_images, d.train_labels);
    if (!d.test_images.empty()) {
      data.test = load_idx<Scalar>(d.test_images, d.test_labels);
      data.test->num_classes = data.train.num_classes =
          std::max(data.train.num_classes, data.test->num_classes);
    }
  } else {
    throw ConfigError("unknown data source '" + d.source + "'");
  }
  if (d.standardize) {
    double sum = 0.0, sum2 = 0.0;
    const auto count = static_cast<double>(data.train.inputs.size());
    for (std::size_t i = 0; i < data.train.inputs.size(); ++i) {
      const double v = static_cast<double>(data.train.inputs[i]);
      sum += v;
      sum2 += v * v;
    }
    data.mean = sum / count;
    const double var = std::max(sum2 / count - data.mean * data.mean, 0.0);
    data.stddev = std::sqrt(var);
    if (data.stddev <= 0.0) throw ConfigError("cannot standardize a constant dataset");
    auto apply = [&](Dataset<Scalar>& ds) {
      for (std::size_t i = 0; i < ds.inputs.size(); ++i) {
        ds.inputs[i] = static_cast<Scalar>((static_cast<double>(ds.inputs[i]) - data.mean) /
                                           data.stddev);
      }
    };
    apply(data.train);
    if (data.test) apply(*data.test);
    data.standardized = true;
  }
  data.train.validate();
  if (data.test) data.test->validate();
  return data;
}

template <typename Scalar>
void check_data_matches_network(const Dataset<Scalar>& ds, const NetworkSpec& spec) {
  const Shape sample = ds.sample_shape();
  if (spec.input.size() == 1) {
    if (numel(sample) != spec.input[0]) {
      throw ConfigError("dataset sample " + shape_str(sample) + " has " +
                        std::to_string(numel(sample)) + " features; network expects " +
                        std::to_string(spec.input[0]));
    }
  } else if (sample != spec.input) {
    throw ConfigError("dataset sample " + shape_str(sample) + " does not match network input " +
                      shape_str(spec.input));
  }
  if (ds.num_classes > spec.num_classes()) {
    throw ConfigError("dataset has " + std::to_string(ds.num_classes) +
                      " classes; network outputs " + std::to_string(spec.num_classes()));
  }
}

struct StepMetrics {
  std::uint64_t t = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::uint64_t peak_cached_bytes = 0;
  std::uint64_t peak_cached_bytes_noindex = 0;
};

struct EvalRow {
  std::size_t epoch = 0;
  std::string split;
  double accuracy = 0.0;
};

struct TrainOutput {
  std::vector<StepMetrics> metrics;
  std::vector<EvalRow> evals;
  std::vector<GradStats> stats;  // telemetry only
  BoundReport bound;             // telemetry only
  bool has_bound = false;
  double final_epoch_mean_loss = 0.0;
  double final_accuracy = 0.0;
  std::string checkpoint_path;
};

template <typename Scalar>
double evaluate_accuracy(const Network<Scalar>& net, const Dataset<Scalar>& ds,
                         std::size_t batch_size) {
  std::size_t correct = 0;
  const std::size_t n = ds.size();
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::uint32_t> idx;
    for (std::size_t i = start; i < std::min(start + batch_size, n); ++i) {
      idx.push_back(static_cast<std::uint32_t>(i));
    }
    const Batch<Scalar> b = gather_batch(ds, idx);
    const DenseTensor<Scalar> logits = net.infer(b.inputs);
    const std::size_t classes = logits.extent(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const Scalar* row = logits.data() + r * classes;
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c) {
        if (row[c] > row[best]) best = c;  // ties keep the lower class
      }
      if (static_cast<std::int32_t>(best) == b.labels[r]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

namespace detail {

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const char* header) {
    out_.open(path);
    if (!out_) throw IoError("cannot write '" + path.string() + "'");
    out_ << header << '\n';
  }
  template <typename... Args>
  void row(const char* fmt, Args... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), fmt, args...);
    out_ << buf << '\n';
  }
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

inline void write_manifest(const std::filesystem::path& dir, const std::string& command,
                           const RunConfig& cfg,
                           const std::optional<std::pair<double, double>>& standardization =
                               std::nullopt) {
  nlohmann::json m;
  m["command"] = command;
  m["code_version"] = kVersion;
  m["precision"] = to_string(cfg.precision);
  m["seed"] = cfg.seed;
  m["config_hash"] = config_hash(cfg);
  m["config"] = to_json(cfg);
  if (standardization) {
    m["standardization"] = {{"mean", standardization->first},
                            {"std", standardization->second}};
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write manifest in '" + dir.string() + "'");
  out << m.dump(2) << '\n';
}

inline double clamp_alpha(double alpha) { return std::clamp(alpha, 0.05, 1.0); }

}  // namespace detail

// One full training run: per-step metrics, per-epoch eval, checkpoints,
// optional gradient telemetry. Deterministic given (config, seed).
template <typename Scalar>
TrainOutput train_run(const RunConfig& cfg, const std::string& command = "train") {
  NetworkSpec spec = cfg.make_network_spec();
  LoadedData<Scalar> data = load_data<Scalar>(cfg);

  Rng rng(cfg.seed);
  Network<Scalar> net;
  std::vector<LayerParams<Scalar>> velocity;
  std::uint64_t t0 = 0;

  if (cfg.resume.empty()) {
    net = Network<Scalar>::init(spec, rng);
    velocity.resize(net.spec().layers.size());
  } else {
    CheckpointState<Scalar> ck = load_checkpoint<Scalar>(cfg.resume);
    NetworkSpec from_cfg = spec;
    from_cfg.resolve();
    NetworkSpec from_ck = ck.spec;
    from_ck.resolve();
    if (to_json(from_cfg) != to_json(from_ck)) {
      throw ConfigError("checkpoint '" + cfg.resume + "' was produced by a different network "
                        "spec / drop policy than this config");
    }
    net = Network<Scalar>::with_params(ck.spec, std::move(ck.params), &std::cerr);
    velocity = std::move(ck.velocity);
    rng = Rng(ck.rng_seed);
    rng.set_state(ck.rng_state);
    t0 = ck.t;
  }
  check_data_matches_network(data.train, net.spec());
  if (data.test) check_data_matches_network(*data.test, net.spec());

  const std::size_t n_train = data.train.size();
  const std::size_t spe = steps_per_epoch(n_train, cfg.batch_size);
  const std::uint64_t total_steps = static_cast<std::uint64_t>(cfg.epochs) * spe;
  if (t0 >= total_steps) {
    throw ConfigError("checkpoint step " + std::to_string(t0) + " is not before total " +
                      std::to_string(total_steps));
  }
  const bool telemetry = cfg.telemetry.grad_stats;
  if (cfg.optim.alpha_scaling == AlphaScaling::online && !telemetry) {
    throw ConfigError("optim.alpha_scaling=online requires telemetry.grad_stats=true");
  }

  const std::filesystem::path out_dir(cfg.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + cfg.out_dir + "'");
  detail::write_manifest(out_dir, command, cfg,
                         data.standardized
                             ? std::optional(std::pair{data.mean, data.stddev})
                             : std::nullopt);

  detail::CsvWriter metrics_csv(out_dir / "metrics.csv",
                                "t,lr,loss,peak_cached_bytes,peak_cached_bytes_noindex");
  detail::CsvWriter eval_csv(out_dir / "eval.csv", "epoch,split,accuracy");
  std::optional<detail::CsvWriter> stats_csv;
  std::optional<detail::CsvWriter> stats_layer_csv;
  if (telemetry) {
    stats_csv.emplace(out_dir / "stats_steps.csv", "t,alpha,beta,ratio,bias_norm,loss");
    if (cfg.telemetry.per_layer) {
      stats_layer_csv.emplace(out_dir / "stats_per_layer.csv",
                              "t,layer,alpha,beta,ratio,bias_norm");
    }
  }

  TrainOutput out;
  auto save_state = [&](const std::string& name, std::uint64_t t) {
    CheckpointState<Scalar> ck;
    ck.spec = net.spec();
    ck.params = net.params();
    ck.velocity = velocity;
    ck.t = t;
    ck.rng_seed = rng.seed();
    ck.rng_state = rng.state();
    const std::filesystem::path path = out_dir / name;
    save_checkpoint(path.string(), ck);
    return path.string();
  };

  std::vector<std::vector<std::uint32_t>> batches;
  std::size_t batches_epoch = static_cast<std::size_t>(-1);
  double full_loss_initial = 0.0, full_loss_best = 0.0;
  std::vector<double> prev_full_grad, prev_params;
  double epoch_loss_sum = 0.0;
  std::size_t epoch_loss_count = 0;

  for (std::uint64_t t = t0; t < total_steps; ++t) {
    const std::size_t epoch = static_cast<std::size_t>(t / spe);
    if (epoch != batches_epoch) {
      Rng epoch_rng(derive_seed(cfg.seed, kSeedTagEpochBase + epoch));
      batches = epoch_batches(n_train, cfg.batch_size, epoch_rng, cfg.shuffle);
      batches_epoch = epoch;
      epoch_loss_sum = 0.0;
      epoch_loss_count = 0;
    }
    const Batch<Scalar> batch = gather_batch(data.train, batches[t % spe]);

    CacheLedger<Scalar> ledger;
    TrainForwardResult<Scalar> fwd;
    std::vector<LayerGrads<Scalar>> grads;
    try {
      fwd = train_forward(net, batch.inputs, batch.labels, ledger, &rng);

      if (telemetry) {
        CacheLedger<Scalar> exact_ledger;
        auto exact_fwd = train_forward_nodrop(net, batch.inputs, batch.labels, exact_ledger);
        // harvest alpha_analytic before the caches are consumed
        double alpha_an_sum = 0.0;
        std::size_t dropped_layers = 0;
        for (std::size_t li = 0; li < net.spec().layers.size(); ++li) {
          if (ledger.peek(li).kind == CacheKind::sparse) {
            alpha_an_sum += estimate_alpha_analytic(exact_ledger.peek(li).dense,
                                                    ledger.peek(li).sparse);
            ++dropped_layers;
          }
        }
        grads = net.backward(fwd.d_logits, ledger);
        std::vector<double> g_drop = net.flatten_grads(grads);
        std::vector<double> g_exact =
            net.flatten_grads(net.backward(exact_fwd.d_logits, exact_ledger));

        CacheLedger<Scalar> full_ledger;
        auto full_fwd =
            train_forward_nodrop(net, data.train.inputs, data.train.labels, full_ledger);
        std::vector<double> g_full =
            net.flatten_grads(net.backward(full_fwd.d_logits, full_ledger));

        GradStats s = estimate_alpha_beta(g_exact, g_drop, g_full);
        s.t = t + 1;
        s.alpha_analytic =
            dropped_layers > 0 ? alpha_an_sum / static_cast<double>(dropped_layers) : 1.0;
        if (stats_layer_csv) {
          const auto slices = net.param_slices();
          for (std::size_t li = 0; li < slices.size(); ++li) {
            const auto [off, count] = slices[li];
            if (count == 0) continue;
            try {
              GradStats ls = estimate_alpha_beta(
                  std::span(g_exact).subspan(off, count), std::span(g_drop).subspan(off, count),
                  std::span(g_full).subspan(off, count));
              stats_layer_csv->row("%llu,%zu,%.17g,%.17g,%.17g,%.17g",
                                   static_cast<unsigned long long>(t + 1), li, ls.alpha_hat,
                                   ls.beta_hat, ls.ratio, ls.bias_norm);
            } catch (const NumericError&) {
              // degenerate slice (e.g. zero-norm layer gradient); skip the row
            }
          }
        }

        std::vector<double> params_flat = net.flatten_params();
        if (!prev_full_grad.empty()) {
          double gd = 0.0, pd = 0.0;
          for (std::size_t i = 0; i < g_full.size(); ++i) {
            const double dg = g_full[i] - prev_full_grad[i];
            const double dp = params_flat[i] - prev_params[i];
            gd += dg * dg;
            pd += dp * dp;
          }
          s.grad_delta_norm = std::sqrt(gd);
          s.param_delta_norm = std::sqrt(pd);
        }
        prev_full_grad = std::move(g_full);
        prev_params = std::move(params_flat);

        if (out.stats.empty() && t == t0) {
          full_loss_initial = full_fwd.loss;
          full_loss_best = full_fwd.loss;
        }
        full_loss_best = std::min(full_loss_best, full_fwd.loss);
        out.stats.push_back(s);
        stats_csv->row("%llu,%.17g,%.17g,%.17g,%.17g,%.17g",
                       static_cast<unsigned long long>(t + 1), s.alpha_hat, s.beta_hat, s.ratio,
                       s.bias_norm, fwd.loss);
      } else {
        grads = net.backward(fwd.d_logits, ledger);
      }
    } catch (const NumericError&) {
      save_state("abort.ckpt", t);
      throw;
    }

    std::optional<double> alpha_t;
    if (cfg.optim.alpha_scaling == AlphaScaling::online) {
      alpha_t = out.stats.size() >= 2
                    ? detail::clamp_alpha(out.stats[out.stats.size() - 2].alpha_hat)
                    : 1.0;
    }
    const double lr_eff = effective_lr(cfg.optim, t + 1, total_steps, alpha_t);
    try {
      sgd_step(net.params(), velocity, grads, cfg.optim, t + 1, total_steps, alpha_t);
    } catch (const NumericError&) {
      save_state("abort.ckpt", t);
      throw;
    }

    StepMetrics m{t + 1, lr_eff, fwd.loss, ledger.peak_bytes(), ledger.peak_bytes_noindex()};
    out.metrics.push_back(m);
    metrics_csv.row("%llu,%.17g,%.17g,%llu,%llu", static_cast<unsigned long long>(m.t), m.lr,
                    m.loss, static_cast<unsigned long long>(m.peak_cached_bytes),
                    static_cast<unsigned long long>(m.peak_cached_bytes_noindex));
    epoch_loss_sum += fwd.loss;
    ++epoch_loss_count;

    if (cfg.checkpoint_at == t + 1) save_state("step_" + std::to_string(t + 1) + ".ckpt", t + 1);

    if ((t + 1) % spe == 0) {
      const std::size_t finished_epoch = static_cast<std::size_t>((t + 1) / spe);
      const Dataset<Scalar>& eval_set = data.test ? *data.test : data.train;
      EvalRow row{finished_epoch, data.test ? "test" : "train",
                  evaluate_accuracy(net, eval_set, cfg.batch_size)};
      out.evals.push_back(row);
      eval_csv.row("%zu,%s,%.17g", row.epoch, row.split.c_str(), row.accuracy);
      out.final_accuracy = row.accuracy;
      out.final_epoch_mean_loss =
          epoch_loss_count > 0 ? epoch_loss_sum / static_cast<double>(epoch_loss_count) : 0.0;
    }
  }

  out.checkpoint_path = save_state("final.ckpt", total_steps);

  if (telemetry && !out.stats.empty()) {
    out.bound = bound_report(full_loss_initial, full_loss_best, cfg.optim.lr,
                             total_steps - t0, out.stats);
    out.has_bound = true;
    nlohmann::json b{{"term1", out.bound.term1},
                     {"term2_sgd", out.bound.term2_sgd},
                     {"term2_dropped", out.bound.term2_dropped},
                     {"l_hat", out.bound.l_hat},
                     {"xi2_hat", out.bound.xi2_hat},
                     {"eta", cfg.optim.lr},
                     {"steps", total_steps - t0}};
    std::ofstream bound_out(out_dir / "bound.json");
    if (!bound_out) throw IoError("cannot write bound.json");
    bound_out << b.dump(2) << '\n';
  }
  return out;
}

struct SweepRow {
  DropStrategy strategy = DropStrategy::none;
  double gamma = 0.0;
  double probe_loss = 0.0;
  double final_loss = 0.0;
  double final_accuracy = 0.0;
  std::uint64_t peak_cached_bytes = 0;
  std::uint64_t peak_cached_bytes_noindex = 0;
  bool flagged = false;
};

// Probe rule: a row is flagged when its probe loss (mean training loss over
// the first probe_steps steps) exceeds the gamma=0 baseline row's.
inline void evaluate_probe_flags(std::vector<SweepRow>& rows) {
  const SweepRow* baseline = nullptr;
  for (const SweepRow& r : rows) {
    if (r.gamma == 0.0) {
      baseline = &r;
      break;
    }
  }
  if (baseline == nullptr) throw ConfigError("sweep rows are missing the gamma=0 baseline");
  for (SweepRow& r : rows) r.flagged = r.probe_loss > baseline->probe_loss;
}

// Runs one training row per gamma (plus the baseline), fanned out over a
// small worker pool; row i uses derived seed base_seed + i, per-run
// determinism preserved.
template <typename Scalar>
std::vector<SweepRow> sweep_run(const RunConfig& cfg, const std::vector<double>& gammas,
                                std::uint64_t probe_steps) {
  if (gammas.empty()) throw ConfigError("sweep needs at least one gamma");
  if (cfg.drop.strategy == DropStrategy::none) {
    throw ConfigError("sweep requires a dropping strategy in the config");
  }
  for (double g : gammas) {
    if (!(g >= 0.0 && g < 1.0)) throw ConfigError("sweep gamma outside [0,1)");
  }

  struct RowPlan {
    DropStrategy strategy;
    double gamma;
    RunConfig cfg;
  };
  std::vector<RowPlan> plans;
  auto make_row_config = [&](std::size_t index, DropStrategy strategy, double gamma) {
    RunConfig row_cfg = cfg;
    row_cfg.drop.strategy = strategy;
    row_cfg.drop.gamma = gamma;
    row_cfg.per_layer_drop.clear();
    row_cfg.seed = cfg.seed + index;
    row_cfg.checkpoint_at = 0;
    row_cfg.resume.clear();
    char name[64];
    std::snprintf(name, sizeof(name), "row%02zu_%s_%.2f", index, to_string(strategy), gamma);
    row_cfg.out_dir = (std::filesystem::path(cfg.out_dir) / "rows" / name).string();
    return row_cfg;
  };
  plans.push_back({DropStrategy::none, 0.0, make_row_config(0, DropStrategy::none, 0.0)});
  for (std::size_t i = 0; i < gammas.size(); ++i) {
    plans.push_back(
        {cfg.drop.strategy, gammas[i], make_row_config(i + 1, cfg.drop.strategy, gammas[i])});
  }

  auto run_row = [probe_steps](const RowPlan& plan) {
    const TrainOutput run = train_run<Scalar>(plan.cfg, "sweep");
    SweepRow row;
    row.strategy = plan.strategy;
    row.gamma = plan.gamma;
    const std::size_t probe =
        std::min<std::size_t>(static_cast<std::size_t>(probe_steps), run.metrics.size());
    double probe_sum = 0.0;
    for (std::size_t i = 0; i < probe; ++i) probe_sum += run.metrics[i].loss;
    row.probe_loss = probe > 0 ? probe_sum / static_cast<double>(probe) : 0.0;
    row.final_loss = run.final_epoch_mean_loss;
    row.final_accuracy = run.final_accuracy;
    for (const StepMetrics& m : run.metrics) {
      row.peak_cached_bytes = std::max(row.peak_cached_bytes, m.peak_cached_bytes);
      row.peak_cached_bytes_noindex =
          std::max(row.peak_cached_bytes_noindex, m.peak_cached_bytes_noindex);
    }
    return row;
  };

  std::vector<SweepRow> rows(plans.size());
  const std::size_t workers = std::min<std::size_t>(2, plans.size());
  std::size_t next = 0;
  while (next < plans.size()) {
    std::vector<std::pair<std::size_t, std::future<SweepRow>>> inflight;
    for (std::size_t w = 0; w < workers && next < plans.size(); ++w, ++next) {
      inflight.emplace_back(next, std::async(std::launch::async, run_row, std::cref(plans[next])));
    }
    for (auto& [index, fut] : inflight) rows[index] = fut.get();
  }
  evaluate_probe_flags(rows);
  return rows;
}

}  // namespace dropgrad
