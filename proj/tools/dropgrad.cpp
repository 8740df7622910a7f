// dropgrad CLI: train | sweep | gradcheck | noise-stats | mem-report.
// Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dropgrad/analysis.hpp"
#include "dropgrad/config.hpp"
#include "dropgrad/gradcheck.hpp"
#include "dropgrad/trainer.hpp"
#include "dropgrad/version.hpp"

namespace {

using namespace dropgrad;

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<double> gamma;
  std::optional<std::string> strategy;
  std::optional<std::string> out_dir;
};

void add_common_flags(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "run config JSON path")->required();
  cmd->add_option("--seed", flags.seed, "override config seed");
  cmd->add_option("--gamma", flags.gamma, "override drop gamma");
  cmd->add_option("--strategy", flags.strategy, "override drop strategy (none|random|min_k)");
  cmd->add_option("--out", flags.out_dir, "override output directory");
}

RunConfig load_config(const CommonFlags& flags) {
  RunConfig cfg = load_run_config(flags.config_path);
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.gamma) {
    cfg.drop.gamma = *flags.gamma;
    cfg.drop.validate();
  }
  if (flags.strategy) cfg.drop.strategy = drop_strategy_from_string(*flags.strategy);
  if (flags.out_dir) cfg.out_dir = *flags.out_dir;
  return cfg;
}

std::vector<double> parse_gammas(const std::string& csv) {
  std::vector<double> gammas;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      gammas.push_back(std::stod(item));
    } catch (...) {
      throw ConfigError("bad gamma list entry '" + item + "'");
    }
  }
  if (gammas.empty()) throw ConfigError("empty gamma list");
  return gammas;
}

template <typename Fn>
void with_precision(Precision p, Fn&& fn) {
  if (p == Precision::f32) {
    fn(float{});
  } else {
    fn(double{});
  }
}

int cmd_train(const CommonFlags& flags) {
  const RunConfig cfg = load_config(flags);
  with_precision(cfg.precision, [&](auto scalar) {
    using Scalar = decltype(scalar);
    const TrainOutput out = train_run<Scalar>(cfg);
    std::printf("train: %zu steps, final epoch mean loss %.6g, accuracy %.4f\n",
                out.metrics.size(), out.final_epoch_mean_loss, out.final_accuracy);
    std::printf("outputs: %s/{metrics.csv,eval.csv,final.ckpt,manifest.json}\n",
                cfg.out_dir.c_str());
  });
  return 0;
}

int cmd_sweep(const CommonFlags& flags, const std::string& gammas_csv,
              std::uint64_t probe_steps) {
  const RunConfig cfg = load_config(flags);
  const std::vector<double> gammas = parse_gammas(gammas_csv);

  std::vector<SweepRow> rows;
  with_precision(cfg.precision, [&](auto scalar) {
    using Scalar = decltype(scalar);
    rows = sweep_run<Scalar>(cfg, gammas, probe_steps);
  });

  const std::filesystem::path out_dir(cfg.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + cfg.out_dir + "'");
  detail::write_manifest(out_dir, "sweep", cfg);
  detail::CsvWriter csv(out_dir / "sweep.csv",
                        "strategy,gamma,probe_loss,final_loss,final_accuracy,"
                        "peak_cached_bytes,peak_cached_bytes_noindex,flagged");
  for (const SweepRow& r : rows) {
    csv.row("%s,%.17g,%.17g,%.17g,%.17g,%llu,%llu,%d", to_string(r.strategy), r.gamma,
            r.probe_loss, r.final_loss, r.final_accuracy,
            static_cast<unsigned long long>(r.peak_cached_bytes),
            static_cast<unsigned long long>(r.peak_cached_bytes_noindex), r.flagged ? 1 : 0);
    std::printf("sweep %-6s gamma=%.2f probe=%.5g final=%.5g acc=%.4f%s\n",
                to_string(r.strategy), r.gamma, r.probe_loss, r.final_loss, r.final_accuracy,
                r.flagged ? " [flagged]" : "");
  }
  std::printf("wrote %s\n", (out_dir / "sweep.csv").string().c_str());
  return 0;
}

int cmd_gradcheck(const CommonFlags& flags, std::size_t instances,
                  const std::string& inject_fault) {
  RunConfig cfg = load_config(flags);
  if (cfg.precision != Precision::f64) {
    std::cerr << "gradcheck: forcing f64 precision\n";
    cfg.precision = Precision::f64;
  }
  if (inject_fault == "corrupt-cache") {
    // deliberately corrupt cache indices; recover must refuse
    SparseActivation<double> bad;
    bad.values = {1.0};
    bad.indices = {99};
    bad.original_shape = {4};
    bad.retained = 1;
    recover(bad);
    return 0;  // unreachable
  }
  if (!inject_fault.empty()) throw ConfigError("unknown fault '" + inject_fault + "'");

  GradCheckOptions opt;
  opt.seed = cfg.seed;
  opt.fc_instances = instances;
  opt.conv_instances = instances;
  opt.masked_instances = instances;
  opt.network = cfg.make_network_spec();
  opt.network_name = cfg.preset.empty() ? "spec_file" : cfg.preset;
  const GradCheckReport report = run_gradcheck(opt);

  const std::filesystem::path out_dir(cfg.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + cfg.out_dir + "'");
  detail::write_manifest(out_dir, "gradcheck", cfg);
  nlohmann::json j = nlohmann::json::array();
  for (const GradCheckEntry& e : report.entries) {
    std::printf("gradcheck %-24s max_err=%.3g tol=%.3g %s\n", e.name.c_str(), e.max_error,
                e.tolerance, e.pass ? "[pass]" : "[FAIL]");
    j.push_back({{"name", e.name},
                 {"max_error", e.max_error},
                 {"tolerance", e.tolerance},
                 {"pass", e.pass}});
  }
  std::ofstream out(out_dir / "gradcheck.json");
  if (!out) throw IoError("cannot write gradcheck.json");
  out << j.dump(2) << '\n';
  if (!report.all_pass()) throw NumericError("gradcheck tolerance breach");
  return 0;
}

int cmd_noise_stats(const CommonFlags& flags, const std::string& gammas_csv,
                    std::size_t batches) {
  const RunConfig cfg = load_config(flags);
  if (cfg.drop.strategy == DropStrategy::none) {
    throw ConfigError("noise-stats requires drop.strategy min_k or random");
  }
  const std::vector<double> gammas = parse_gammas(gammas_csv);

  NoiseExperimentResult result;
  with_precision(cfg.precision, [&](auto scalar) {
    using Scalar = decltype(scalar);
    NetworkSpec spec = cfg.make_network_spec();
    spec.default_drop = DropSpec{};  // gammas are injected per row
    LoadedData<Scalar> data = load_data<Scalar>(cfg);
    check_data_matches_network(data.train, spec);
    Rng rng(cfg.seed);
    result = noise_experiment(spec, data.train, cfg.drop.strategy, gammas, batches,
                              cfg.batch_size, rng);
  });

  const std::filesystem::path out_dir(cfg.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + cfg.out_dir + "'");
  detail::write_manifest(out_dir, "noise-stats", cfg);
  detail::CsvWriter csv(out_dir / "stats.csv", NoiseRow::csv_header());
  for (const NoiseRow& r : result.rows) {
    csv.row("%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.gamma, r.mean_alpha, r.mean_beta,
            r.mean_ratio, r.mean_alpha_analytic, r.noise_var);
    std::printf("noise gamma=%.2f alpha=%.4f beta=%.4f ratio=%.4f alpha_analytic=%.4f\n",
                r.gamma, r.mean_alpha, r.mean_beta, r.mean_ratio, r.mean_alpha_analytic);
  }
  detail::CsvWriter per_batch(out_dir / "batches.csv", "gamma,b,alpha,beta,ratio,bias_norm");
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    for (const GradStats& s : result.per_batch[i]) {
      per_batch.row("%.17g,%llu,%.17g,%.17g,%.17g,%.17g", result.rows[i].gamma,
                    static_cast<unsigned long long>(s.t), s.alpha_hat, s.beta_hat, s.ratio,
                    s.bias_norm);
    }
  }
  std::printf("wrote %s\n", (out_dir / "stats.csv").string().c_str());
  return 0;
}

int cmd_mem_report(const CommonFlags& flags) {
  const RunConfig cfg = load_config(flags);
  NetworkSpec spec = cfg.make_network_spec();
  spec.resolve(&std::cerr);
  const std::vector<Shape> shapes = spec.sample_shapes();
  const std::size_t bps = cfg.precision == Precision::f32 ? 4 : 8;
  const std::size_t bpi = sizeof(std::uint32_t);
  const std::size_t batch = cfg.batch_size;

  const std::filesystem::path out_dir(cfg.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + cfg.out_dir + "'");
  detail::write_manifest(out_dir, "mem-report", cfg);
  detail::CsvWriter csv(out_dir / "mem.csv",
                        "layer,kind,param_bytes,dense_activation_bytes,payload_value_bytes,"
                        "payload_index_bytes,reduction_fraction,reduction_fraction_with_index");

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind == LayerKind::flatten) continue;
    std::uint64_t param_bytes = 0, dense = 0, value = 0, index = 0;
    switch (l.kind) {
      case LayerKind::fc: {
        const BytesEstimate est =
            activation_bytes_estimate(LayerKindForBytes::fc, batch, l.in, l.out, 1, 0, bps);
        param_bytes = est.param_bytes + (l.bias ? l.out * bps : 0);
        dense = est.activation_bytes;
        break;
      }
      case LayerKind::conv: {
        const Shape& in_shape = shapes[i];  // {C,H,W}
        const BytesEstimate est = activation_bytes_estimate(
            LayerKindForBytes::conv, batch, l.in, l.out, in_shape[1] * in_shape[2], l.kernel,
            bps);
        param_bytes = est.param_bytes + (l.bias ? l.out * bps : 0);
        dense = est.activation_bytes;
        break;
      }
      case LayerKind::relu:
      case LayerKind::gelu: {
        const std::uint64_t n = static_cast<std::uint64_t>(batch) * numel(shapes[i]);
        dense = n * bps;
        value = l.kind == LayerKind::relu ? (n + 7) / 8 : dense;
        break;
      }
      default: break;
    }
    if (drop_applicable(l.kind)) {
      const std::uint64_t n = dense / bps;
      if (l.drop.strategy == DropStrategy::none) {
        value = dense;
      } else {
        const std::size_t k = retained_count(l.drop.gamma, n);
        value = static_cast<std::uint64_t>(k) * bps;
        index = static_cast<std::uint64_t>(k) * bpi;
      }
    }
    const double reduction = 1.0 - static_cast<double>(value) / static_cast<double>(dense);
    const std::uint64_t device_index = l.drop.index_on_host ? 0 : index;
    const double reduction_wi =
        1.0 - static_cast<double>(value + device_index) / static_cast<double>(dense);
    csv.row("%zu,%s,%llu,%llu,%llu,%llu,%.17g,%.17g", i, to_string(l.kind),
            static_cast<unsigned long long>(param_bytes), static_cast<unsigned long long>(dense),
            static_cast<unsigned long long>(value), static_cast<unsigned long long>(index),
            reduction, reduction_wi);
    std::printf("mem layer=%zu %-7s dense=%llu payload=%llu (+%llu idx) reduction=%.3f/%.3f\n",
                i, to_string(l.kind), static_cast<unsigned long long>(dense),
                static_cast<unsigned long long>(value), static_cast<unsigned long long>(index),
                reduction, reduction_wi);
  }
  std::printf("wrote %s\n", (out_dir / "mem.csv").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dropgrad: training with sparsified activation caches\n"
               "exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O error"};
  app.set_version_flag("--version", dropgrad::kVersion);
  app.require_subcommand(1);

  CommonFlags train_flags;
  CLI::App* train = app.add_subcommand("train", "run one training job");
  add_common_flags(train, train_flags);

  CommonFlags sweep_flags;
  std::string sweep_gammas = "0.1,0.3,0.5,0.7,0.9";
  std::uint64_t probe_steps = 100;
  CLI::App* sweep = app.add_subcommand("sweep", "train across a gamma grid");
  add_common_flags(sweep, sweep_flags);
  sweep->add_option("--gammas", sweep_gammas, "comma-separated gamma list");
  sweep->add_option("--probe-steps", probe_steps, "steps for the early-loss probe");

  CommonFlags grad_flags;
  std::size_t grad_instances = 100;
  std::string inject_fault;
  CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference and oracle audits");
  add_common_flags(grad, grad_flags);
  grad->add_option("--instances", grad_instances, "random instances per suite");
  grad->add_option("--inject-fault", inject_fault, "test hook: corrupt-cache")
      ->group("");  // hidden

  CommonFlags noise_flags;
  std::string noise_gammas = "0.3,0.5,0.7,0.9";
  std::size_t noise_batches = 100;
  CLI::App* noise = app.add_subcommand("noise-stats", "alpha/beta gradient noise telemetry");
  add_common_flags(noise, noise_flags);
  noise->add_option("--gammas", noise_gammas, "comma-separated gamma list");
  noise->add_option("--batches", noise_batches, "minibatches per gamma");

  CommonFlags mem_flags;
  CLI::App* mem = app.add_subcommand("mem-report", "per-layer cache byte accounting");
  add_common_flags(mem, mem_flags);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(train_flags);
    if (sweep->parsed()) return cmd_sweep(sweep_flags, sweep_gammas, probe_steps);
    if (grad->parsed()) return cmd_gradcheck(grad_flags, grad_instances, inject_fault);
    if (noise->parsed()) return cmd_noise_stats(noise_flags, noise_gammas, noise_batches);
    if (mem->parsed()) return cmd_mem_report(mem_flags);
  } catch (const dropgrad::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
