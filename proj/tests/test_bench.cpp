#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <unistd.h>
#include <vector>

#include "csmud/bench.hpp"
#include "csmud/neural.hpp"

using namespace csmud;
using namespace csmud::bench;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("csmud_bench_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

int count_lines(const std::string& text) {
  return static_cast<int>(std::count(text.begin(), text.end(), '\n'));
}

ExperimentConfig small_experiment() {
  ExperimentConfig cfg;
  cfg.system.K = 8;
  cfg.system.Ns = 16;
  cfg.system.L = 2;
  cfg.system.n = 2;
  cfg.system.snr_db = 30.0;
  cfg.system.seed = 21;
  cfg.train_samples = 100;
  cfg.val_samples = 50;
  cfg.test_samples = 50;
  cfg.methods = {Method::omp,    Method::bomp, Method::iht, Method::biht,
                 Method::oracle, Method::brnn, Method::dnn};
  cfg.sweep_values = {1, 2};
  cfg.sweep_trials = 60;
  cfg.timing_ns = {8};
  cfg.timing_n = {1};
  cfg.timing_samples = 15;
  cfg.timing_warmup = 2;
  return cfg;
}

const SweepPoint& find_point(const std::vector<SweepPoint>& points,
                             Method method, int value) {
  for (const SweepPoint& p : points)
    if (p.method == method && p.value == value) return p;
  REQUIRE(false);
  return points.front();
}

}  // namespace

TEST_CASE("experiment configs serialize and validate") {
  ExperimentConfig cfg = small_experiment();
  nlohmann::json j = cfg;
  const ExperimentConfig round = j.get<ExperimentConfig>();
  const nlohmann::json j2 = round;
  CHECK(j == j2);
  CHECK(round.system == cfg.system);
  CHECK(round.sweep_values == cfg.sweep_values);
  CHECK(round.methods == cfg.methods);
  CHECK(j.at("sweep_axis") == "n");

  ExperimentConfig bad = cfg;
  bad.sweep_values = {};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.sweep_values = {cfg.system.K + 1};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.sweep_trials = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.timing_ns = {};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.methods = {};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.methods = {Method::iht, Method::iht};
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  // The oracle is only accepted where its enumeration budget holds.
  bad = cfg;
  bad.system.K = 64;
  bad.sweep_values = {16};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.methods = {Method::bomp};
  bad.validate();

  CHECK(method_name(Method::bomp) == "bomp");
  CHECK(method_name(Method::oracle) == "oracle");
  CHECK(method_from_name("BIHT") == Method::biht);
  CHECK(method_from_name("brnn") == Method::brnn);
  CHECK_THROWS_AS(method_from_name("amp"), ConfigError);
  CHECK(axis_name(SweepAxis::pilot_length) == "Ns");
  CHECK(axis_from_name("n") == SweepAxis::active_users);
  CHECK_THROWS_AS(axis_from_name("k"), ConfigError);
}

TEST_CASE("solver sweep separates easy points from hard ones") {
  const ExperimentConfig cfg = small_experiment();
  const std::vector<SweepPoint> points = run_sweep(cfg, nullptr);

  // 2 sweep points x (4 solvers + oracle), no network rows without nets.
  REQUIRE(points.size() == 10);
  for (const SweepPoint& p : points) {
    CHECK(p.trials == cfg.sweep_trials);
    CHECK(p.exact_set_rate >= 0.0);
    CHECK(p.exact_set_rate <= 1.0);
    CHECK(p.user_hit_ratio >= p.exact_set_rate);
    CHECK(p.user_hit_ratio <= 1.0);
    CHECK(p.mean_mse >= 0.0);
    CHECK(p.mean_seconds > 0.0);
    CHECK(p.empty_supports >= 0);
    const double expect_ci =
        1.96 * std::sqrt(p.exact_set_rate * (1.0 - p.exact_set_rate) /
                         p.trials);
    CHECK(p.ci_halfwidth == doctest::Approx(expect_ci));
  }

  // Overdetermined at 30 dB: block methods should be nearly perfect and
  // the refit error should be at the noise floor.
  for (int n : {1, 2}) {
    const SweepPoint& bomp = find_point(points, Method::bomp, n);
    CHECK(bomp.exact_set_rate >= 0.9);
    CHECK(bomp.mean_mse < 0.1);
    const SweepPoint& oracle = find_point(points, Method::oracle, n);
    CHECK(oracle.exact_set_rate >= bomp.exact_set_rate - 1e-12);
  }
}

TEST_CASE("network rows join the sweep when models are supplied") {
  ExperimentConfig cfg = small_experiment();
  cfg.sweep_values = {1};
  cfg.sweep_trials = 30;
  cfg.methods = {Method::omp,  Method::bomp, Method::iht,
                 Method::biht, Method::brnn, Method::dnn};

  const std::uint64_t seed = neural::default_init_seed(cfg.system);
  NetworkSet nets{
      neural::Network<float>(neural::shape_for(cfg.system, neural::Arch::brnn),
                             seed),
      neural::Network<float>(neural::shape_for(cfg.system, neural::Arch::dnn),
                             seed)};
  const std::vector<SweepPoint> points = run_sweep(cfg, &nets);
  REQUIRE(points.size() == 6);

  for (Method m : {Method::brnn, Method::dnn}) {
    const SweepPoint& p = find_point(points, m, 1);
    CHECK(p.trials == 30);
    CHECK(std::isfinite(p.mean_mse));
    // The refit pins MSE at or below 1 even for an untrained detector:
    // empty supports are impossible when n >= 1 and the ridge shrinks the
    // rest.
    CHECK(p.empty_supports == 0);
  }
}

TEST_CASE("timing covers the full method grid with positive means") {
  const ExperimentConfig cfg = small_experiment();
  const std::vector<TimingRow> rows = run_timing(cfg, nullptr);
  REQUIRE(rows.size() == 6);  // 4 solvers + both networks, one grid point
  for (const TimingRow& r : rows) {
    CHECK(r.Ns == 8);
    CHECK(r.n == 1);
    CHECK(r.samples == cfg.timing_samples);
    CHECK(r.mean_seconds > 0.0);
  }
}

TEST_CASE("csv emitters write stable, parseable reports") {
  TempDir dir;
  std::vector<SweepPoint> points(2);
  points[0].method = Method::bomp;
  points[0].n = 1;
  points[0].trials = 100;
  points[0].exact_set_rate = 0.97;
  points[0].user_hit_ratio = 0.985;
  points[0].ci_halfwidth = 0.0334;
  points[0].mean_mse = 0.015625;
  points[0].mean_seconds = 1.5e-5;
  points[1].method = Method::brnn;
  points[1].n = 2;
  points[1].trials = 100;
  points[1].exact_set_rate = 1.0 / 3.0;
  points[1].mean_mse = 0.25;
  points[1].empty_supports = 3;

  const std::string det = dir.file("detection.csv");
  emit_detection_csv(points, det);
  const std::string det_text = slurp(det);
  CHECK(count_lines(det_text) == 3);
  CHECK(det_text.rfind("method,n,trials,exact_set_rate,ci_halfwidth,"
                       "user_hit_ratio,mean_seconds\n", 0) == 0);
  CHECK(det_text.find("bomp,1,100,0.97,") != std::string::npos);

  const std::string mse = dir.file("mse.csv");
  emit_mse_csv(points, mse);
  const std::string mse_text = slurp(mse);
  CHECK(count_lines(mse_text) == 3);
  // Round-trip double formatting: 0.015625 is exact in binary.
  CHECK(mse_text.find("bomp,1,100,0.015625,0") != std::string::npos);
  CHECK(mse_text.find("brnn,2,100,0.25,3") != std::string::npos);

  std::vector<TimingRow> trows(1);
  trows[0].method = Method::iht;
  trows[0].Ns = 16;
  trows[0].n = 2;
  trows[0].samples = 1000;
  trows[0].mean_seconds = 3.25e-06;
  const std::string tim = dir.file("timing.csv");
  emit_timing_csv(trows, tim);
  const std::string tim_text = slurp(tim);
  CHECK(tim_text ==
        "method,Ns,n,samples,mean_seconds\niht,16,2,1000,3.25e-06\n");

  neural::TrainingTrace trace;
  trace.checkpoints.resize(2);
  trace.checkpoints[0].batch = 100;
  trace.checkpoints[0].train_loss = 1.5;
  trace.checkpoints[0].val_user_hit = 0.5;
  trace.checkpoints[0].val_exact_set = 0.25;
  trace.checkpoints[1].batch = 200;
  trace.checkpoints[1].train_loss = 0.75;
  trace.checkpoints[1].val_user_hit = 0.625;
  trace.checkpoints[1].val_exact_set = 0.5;
  const std::string tr = dir.file("trace.csv");
  emit_trace_csv(trace, tr);
  CHECK(slurp(tr) ==
        "batch,train_loss,val_user_hit,val_exact_set\n"
        "100,1.5,0.5,0.25\n"
        "200,0.75,0.625,0.5\n");

  // Emission is a pure function of its inputs.
  const std::string det2 = dir.file("detection2.csv");
  emit_detection_csv(points, det2);
  CHECK(slurp(det2) == det_text);
}

TEST_CASE("the manifest records size and hash of every report") {
  TempDir dir;
  const std::string a = dir.file("a.csv");
  const std::string b = dir.file("b.csv");
  {
    std::ofstream(a) << "method,n\nbomp,1\n";
    std::ofstream(b) << "batch,loss\n1,0.5\n";
  }
  const ExperimentConfig cfg = small_experiment();
  const std::string manifest_path = dir.file("manifest.json");
  emit_manifest(cfg, {a, b}, manifest_path);

  const nlohmann::json manifest = nlohmann::json::parse(slurp(manifest_path));
  const ExperimentConfig round =
      manifest.at("experiment").get<ExperimentConfig>();
  CHECK(round.system == cfg.system);

  REQUIRE(manifest.at("reports").size() == 2);
  for (const std::string& name : {std::string("a.csv"), std::string("b.csv")}) {
    const auto& entry = manifest.at("reports").at(name);
    CHECK(entry.at("bytes").get<std::size_t>() ==
          fs::file_size(dir.file(name)));
    const std::string hash = entry.at("fnv1a64").get<std::string>();
    REQUIRE(hash.size() == 18);
    CHECK(hash.rfind("0x", 0) == 0);
    CHECK(hash.find_first_not_of("0123456789abcdef", 2) == std::string::npos);
  }

  // Hashing a missing report is an error, not a silent omission.
  CHECK_THROWS(emit_manifest(cfg, {dir.file("missing.csv")},
                             dir.file("m2.json")));
}
