#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dropgrad/checkpoint.hpp"
#include "dropgrad/config.hpp"
#include "dropgrad/gradcheck.hpp"
#include "dropgrad/trainer.hpp"

using namespace dropgrad;

namespace {

std::filesystem::path temp_root() {
  auto dir = std::filesystem::temp_directory_path() / "dropgrad_test_runs";
  std::filesystem::create_directories(dir);
  return dir;
}

nlohmann::json base_config_json(const std::string& out) {
  return nlohmann::json{
      {"config_version", 1},
      {"network", {{"preset", "logreg"}}},
      {"drop", {{"strategy", "none"}, {"gamma", 0.0}, {"skip_first_last", false}}},
      {"optim", {{"kind", "sgd"}, {"lr", 0.05}, {"momentum", 0.9}}},
      {"data",
       {{"source", "synth_blobs"}, {"n", 256}, {"dim", 64}, {"classes", 4},
        {"separation", 2.0}}},
      {"epochs", 2},
      {"batch_size", 32},
      {"seed", 5},
      {"precision", "f64"},
      {"out_dir", out}};
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("run config: parse, defaults, validation errors") {
  auto j = base_config_json((temp_root() / "cfg").string());
  RunConfig cfg = run_config_from_json(j);
  CHECK(cfg.preset == "logreg");
  CHECK(cfg.optim.momentum == 0.9);
  CHECK(cfg.precision == Precision::f64);
  CHECK(cfg.batch_size == 32);
  CHECK_FALSE(cfg.skip_first_last);

  auto bad = j;
  bad["config_version"] = 7;
  CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);

  bad = j;
  bad["network"] = {{"preset", "logreg"}, {"spec_file", "x.json"}};
  CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);

  bad = j;
  bad["drop"] = {{"strategy", "min_k"}, {"gamma", 1.5}};
  CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);

  bad = j;
  bad["optim"]["lr"] = -1.0;
  CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);

  bad = j;
  bad["data"]["source"] = "imagenet";
  CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);

  bad = j;
  bad["unknown_key"] = 1;
  CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);

  bad = j;
  bad["drop"] = {{"strategy", "min_k"}, {"gamma", 0.5},
                 {"per_layer", {{"0", {{"strategy", "min_k"}, {"gamma", 0.5}}}}}};
  RunConfig per_layer_cfg = run_config_from_json(bad);
  CHECK(per_layer_cfg.per_layer_drop.size() == 1);
  per_layer_cfg.make_network_spec();  // fc layer 0 is a valid target

  bad["drop"]["per_layer"] = {{"9", {{"strategy", "min_k"}, {"gamma", 0.5}}}};
  CHECK_THROWS_AS(run_config_from_json(bad).make_network_spec(), ConfigError);
}

TEST_CASE("run config: hash is stable and sensitive") {
  auto j = base_config_json("x");
  RunConfig a = run_config_from_json(j);
  RunConfig b = run_config_from_json(j);
  CHECK(config_hash(a) == config_hash(b));
  b.seed = 6;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("checkpoint: binary round-trip") {
  NetworkSpec spec = build_preset("logreg");
  spec.default_drop = DropSpec{DropStrategy::min_k, 0.4, false};
  Rng rng(17);
  auto net = Network<double>::init(spec, rng);
  std::vector<LayerParams<double>> velocity(net.params().size());
  velocity[0].theta = DenseTensor<double>({4, 64});
  velocity[0].theta[5] = 0.125;

  CheckpointState<double> state;
  state.spec = net.spec();
  state.params = net.params();
  state.velocity = velocity;
  state.t = 42;
  state.rng_seed = rng.seed();
  state.rng_state = rng.state();

  const auto path = (temp_root() / "roundtrip.ckpt").string();
  save_checkpoint(path, state);
  auto back = load_checkpoint<double>(path);
  CHECK(back.t == 42);
  CHECK(back.rng_seed == state.rng_seed);
  CHECK(back.rng_state == state.rng_state);
  CHECK(back.params[0].theta == state.params[0].theta);
  CHECK(back.params[0].bias == state.params[0].bias);
  CHECK(back.velocity[0].theta == velocity[0].theta);
  CHECK(to_json(back.spec) == to_json(state.spec));

  CHECK_THROWS_AS(load_checkpoint<float>(path), ConfigError);  // wrong precision

  // corrupt magic
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_AS(load_checkpoint<double>(path), IoError);
  CHECK_THROWS_AS(load_checkpoint<double>((temp_root() / "absent.ckpt").string()), IoError);
}

TEST_CASE("train_run: deterministic per seed, sensitive to seed changes") {
  auto out1 = (temp_root() / "det1").string();
  auto out2 = (temp_root() / "det2").string();
  auto out3 = (temp_root() / "det3").string();
  RunConfig cfg = run_config_from_json(base_config_json(out1));
  const TrainOutput a = train_run<double>(cfg);
  cfg.out_dir = out2;
  const TrainOutput b = train_run<double>(cfg);
  cfg.out_dir = out3;
  cfg.seed = 99;
  const TrainOutput c = train_run<double>(cfg);

  CHECK(read_file(std::filesystem::path(out1) / "metrics.csv") ==
        read_file(std::filesystem::path(out2) / "metrics.csv"));
  CHECK(read_file(std::filesystem::path(out1) / "metrics.csv") !=
        read_file(std::filesystem::path(out3) / "metrics.csv"));
  CHECK(a.metrics.size() == 16);  // 256/32 * 2 epochs
  CHECK(a.metrics.back().loss == b.metrics.back().loss);
  CHECK(std::filesystem::exists(std::filesystem::path(out1) / "manifest.json"));
  CHECK(std::filesystem::exists(std::filesystem::path(out1) / "final.ckpt"));

  // training actually learns the separable blobs
  CHECK(a.final_accuracy > 0.9);
  CHECK(a.metrics.back().loss < a.metrics.front().loss);
}

TEST_CASE("train_run: resume reproduces the tail bit-exactly") {
  // random dropping so the rng state mid-stream matters
  auto make = [&](const std::string& out) {
    auto j = base_config_json(out);
    j["drop"] = {{"strategy", "random"}, {"gamma", 0.5}, {"skip_first_last", false}};
    j["optim"] = {{"kind", "sgd"}, {"lr", 0.05}, {"momentum", 0.9}};
    return run_config_from_json(j);
  };
  auto full_dir = (temp_root() / "resume_full").string();
  RunConfig full_cfg = make(full_dir);
  train_run<double>(full_cfg);

  auto half_dir = (temp_root() / "resume_half").string();
  RunConfig half_cfg = make(half_dir);
  half_cfg.checkpoint_at = 7;  // mid-epoch
  train_run<double>(half_cfg);

  auto tail_dir = (temp_root() / "resume_tail").string();
  RunConfig tail_cfg = make(tail_dir);
  tail_cfg.resume = (std::filesystem::path(half_dir) / "step_7.ckpt").string();
  const TrainOutput tail = train_run<double>(tail_cfg);
  CHECK(tail.metrics.size() == 9);
  CHECK(tail.metrics.front().t == 8);

  // rows 8..16 of the full run == all rows of the resumed run
  std::istringstream full_csv(read_file(std::filesystem::path(full_dir) / "metrics.csv"));
  std::istringstream tail_csv(read_file(std::filesystem::path(tail_dir) / "metrics.csv"));
  std::string line;
  std::vector<std::string> full_rows, tail_rows;
  while (std::getline(full_csv, line)) full_rows.push_back(line);
  while (std::getline(tail_csv, line)) tail_rows.push_back(line);
  REQUIRE(full_rows.size() == 17);  // header + 16
  REQUIRE(tail_rows.size() == 10);  // header + 9
  for (std::size_t i = 0; i < 9; ++i) CHECK(tail_rows[1 + i] == full_rows[8 + i]);

  // resuming under a different drop policy is refused
  RunConfig wrong = make((temp_root() / "resume_wrong").string());
  wrong.drop.gamma = 0.7;
  wrong.resume = tail_cfg.resume;
  CHECK_THROWS_AS(train_run<double>(wrong), ConfigError);
}

TEST_CASE("train_run: gamma=0 telemetry records the SGD identity") {
  auto j = base_config_json((temp_root() / "telemetry").string());
  j["drop"] = {{"strategy", "min_k"}, {"gamma", 0.0}, {"skip_first_last", false}};
  j["epochs"] = 1;
  j["telemetry"] = {{"grad_stats", true}};
  RunConfig cfg = run_config_from_json(j);
  const TrainOutput out = train_run<double>(cfg);
  REQUIRE(out.metrics.size() == 8);
  REQUIRE(out.stats.size() == 8);
  for (const GradStats& s : out.stats) {
    CHECK(s.alpha_hat == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(s.beta_hat == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(s.ratio == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(s.alpha_analytic == 1.0);
  }
  CHECK(out.has_bound);
  CHECK(out.bound.term2_dropped ==
        doctest::Approx(out.bound.term2_sgd).epsilon(1e-9));
  CHECK(std::filesystem::exists(std::filesystem::path(cfg.out_dir) / "stats_steps.csv"));
  CHECK(std::filesystem::exists(std::filesystem::path(cfg.out_dir) / "bound.json"));
}

TEST_CASE("train_run: telemetry under real dropping measures a shrunken gradient") {
  auto j = base_config_json((temp_root() / "telemetry_drop").string());
  j["drop"] = {{"strategy", "min_k"}, {"gamma", 0.7}, {"skip_first_last", false}};
  j["epochs"] = 1;
  j["telemetry"] = {{"grad_stats", true}};
  RunConfig cfg = run_config_from_json(j);
  const TrainOutput out = train_run<double>(cfg);
  REQUIRE(out.stats.size() == 8);
  for (const GradStats& s : out.stats) {
    // the reference pass must be undropped: alpha below 1, analytic bound kept
    CHECK(s.alpha_hat < 1.0);
    CHECK(s.alpha_hat > 0.0);
    CHECK(s.alpha_analytic < 1.0);
    CHECK(s.bias_norm > 0.0);
  }

  // random strategy telemetry exercises the rng-free reference pass
  auto j2 = base_config_json((temp_root() / "telemetry_random").string());
  j2["drop"] = {{"strategy", "random"}, {"gamma", 0.5}, {"skip_first_last", false}};
  j2["epochs"] = 1;
  j2["telemetry"] = {{"grad_stats", true}};
  const TrainOutput out2 = train_run<double>(run_config_from_json(j2));
  REQUIRE(out2.stats.size() == 8);
  for (const GradStats& s : out2.stats) CHECK(s.alpha_hat < 1.0);
}

TEST_CASE("sweep: rows, derived seeds, probe flags") {
  auto j = base_config_json((temp_root() / "sweep").string());
  j["drop"] = {{"strategy", "min_k"}, {"gamma", 0.5}, {"skip_first_last", false}};
  j["epochs"] = 1;
  RunConfig cfg = run_config_from_json(j);
  const auto rows = sweep_run<double>(cfg, {0.5, 0.9}, 4);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].gamma == 0.0);
  CHECK(rows[0].strategy == DropStrategy::none);
  CHECK_FALSE(rows[0].flagged);  // baseline never exceeds itself
  CHECK(rows[1].gamma == 0.5);
  CHECK(rows[2].gamma == 0.9);
  // single-fc logreg: the backward recovery transient dominates, so dropped
  // rows exceed the dense baseline, but peaks still shrink as gamma grows
  CHECK(rows[2].peak_cached_bytes_noindex <= rows[1].peak_cached_bytes_noindex);
  CHECK(rows[2].peak_cached_bytes <= rows[1].peak_cached_bytes);

  // flag logic on injected probe losses
  std::vector<SweepRow> injected(3);
  injected[0].gamma = 0.0;
  injected[0].probe_loss = 1.0;
  injected[1].gamma = 0.5;
  injected[1].probe_loss = 0.9;
  injected[2].gamma = 0.9;
  injected[2].probe_loss = 1.2;
  evaluate_probe_flags(injected);
  CHECK_FALSE(injected[0].flagged);
  CHECK_FALSE(injected[1].flagged);
  CHECK(injected[2].flagged);

  std::vector<SweepRow> no_baseline(1);
  no_baseline[0].gamma = 0.5;
  CHECK_THROWS_AS(evaluate_probe_flags(no_baseline), ConfigError);
}

TEST_CASE("gradcheck: small run passes all suites") {
  GradCheckOptions opt;
  opt.seed = 3;
  opt.fc_instances = 10;
  opt.conv_instances = 6;
  opt.masked_instances = 10;
  opt.activation_instances = 6;
  opt.network_coords = 4;
  opt.network = build_preset("logreg");
  opt.network_name = "logreg";
  const GradCheckReport report = run_gradcheck(opt);
  for (const auto& e : report.entries) {
    INFO(e.name, " max_err=", e.max_error);
    CHECK(e.pass);
  }
  CHECK(report.max_error("fc_masked_0ulp") == 0.0);
  CHECK(report.max_error("conv_masked_0ulp") == 0.0);
}

TEST_CASE("train_run: online alpha scaling rescales the learning rate") {
  auto j = base_config_json((temp_root() / "online_alpha").string());
  j["drop"] = {{"strategy", "min_k"}, {"gamma", 0.7}, {"skip_first_last", false}};
  j["optim"] = {{"kind", "sgd"}, {"lr", 0.05}, {"alpha_scaling", "online"}};
  j["epochs"] = 1;
  j["telemetry"] = {{"grad_stats", true}};
  const TrainOutput out = train_run<double>(run_config_from_json(j));
  REQUIRE(out.metrics.size() == 8);
  CHECK(out.metrics[0].lr == 0.05);  // first step has no previous alpha
  for (std::size_t t = 1; t < out.metrics.size(); ++t) {
    const double alpha_prev = std::clamp(out.stats[t - 1].alpha_hat, 0.05, 1.0);
    CHECK(out.metrics[t].lr == doctest::Approx(0.05 / alpha_prev).epsilon(1e-12));
    CHECK(out.metrics[t].lr >= 0.05);
  }

  // online scaling without telemetry is rejected up front
  auto j2 = base_config_json((temp_root() / "online_alpha_bad").string());
  j2["optim"] = {{"kind", "sgd"}, {"lr", 0.05}, {"alpha_scaling", "online"}};
  CHECK_THROWS_AS(train_run<double>(run_config_from_json(j2)), ConfigError);
}

TEST_CASE("train_run: non-finite loss aborts with a checkpoint") {
  // f32 overflows to inf within a few divergent steps
  auto j = base_config_json((temp_root() / "abort").string());
  j["optim"] = {{"kind", "sgd"}, {"lr", 1e30}, {"weight_decay", 1.0}};
  j["precision"] = "f32";
  RunConfig cfg = run_config_from_json(j);
  CHECK_THROWS_AS(train_run<float>(cfg), NumericError);
  CHECK(std::filesystem::exists(std::filesystem::path(cfg.out_dir) / "abort.ckpt"));
}

TEST_CASE("train_run: standardization is applied and recorded") {
  auto j = base_config_json((temp_root() / "standardize").string());
  j["data"]["standardize"] = true;
  RunConfig cfg = run_config_from_json(j);
  const LoadedData<double> data = load_data<double>(cfg);
  REQUIRE(data.standardized);
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t i = 0; i < data.train.inputs.size(); ++i) {
    sum += data.train.inputs[i];
    sum2 += data.train.inputs[i] * data.train.inputs[i];
  }
  const auto count = static_cast<double>(data.train.inputs.size());
  CHECK(sum / count == doctest::Approx(0.0).scale(1).epsilon(1e-10));
  CHECK(sum2 / count == doctest::Approx(1.0).epsilon(1e-10));

  train_run<double>(cfg);
  std::ifstream manifest(std::filesystem::path(cfg.out_dir) / "manifest.json");
  REQUIRE(manifest);
  nlohmann::json m;
  manifest >> m;
  REQUIRE(m.contains("standardization"));
  CHECK(m.at("standardization").at("mean").get<double>() ==
        doctest::Approx(data.mean).epsilon(1e-12));
  CHECK(m.at("standardization").at("std").get<double>() ==
        doctest::Approx(data.stddev).epsilon(1e-12));
}

TEST_CASE("train_run: dataset/network mismatch is a config error") {
  auto j = base_config_json((temp_root() / "mismatch").string());
  j["data"]["dim"] = 32;  // logreg expects 64
  RunConfig cfg = run_config_from_json(j);
  CHECK_THROWS_AS(train_run<double>(cfg), ConfigError);
}
