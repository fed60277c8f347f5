// Acceptance gate: one line per criterion, exit status 0 only when every
// criterion holds. Runs the full desk-scale experiment, so expect minutes,
// not seconds. Criterion 9 shells out to the CLI named by $CSMUD_CLI.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

#include "csmud/bench.hpp"
#include "csmud/kernels.hpp"
#include "csmud/neural.hpp"
#include "csmud/recovery.hpp"
#include "csmud/rng.hpp"
#include "csmud/sysmodel.hpp"
#include "csmud/threading.hpp"
#include "csmud/gradcheck.hpp"

using namespace csmud;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(int index, const std::string& name, bool pass,
            const std::string& detail, double elapsed) {
  std::printf("%s  criterion %2d  %-34s %s (%.1f s)\n",
              pass ? "PASS" : "FAIL", index, name.c_str(), detail.c_str(),
              elapsed);
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string fmt(const char* format, ...) {
  char buf[512];
  va_list args;
  va_start(args, format);
  std::vsnprintf(buf, sizeof(buf), format, args);
  va_end(args);
  return buf;
}

// The desk-scale preset every trend criterion runs on. Training defaults to
// a single pass over the generated samples, the protocol the convergence
// comparison is defined on; the sweep criterion raises epochs to reach the
// networks' plateau before ranking them against the solvers.
bench::ExperimentConfig desk_experiment() {
  bench::ExperimentConfig cfg;
  cfg.system.K = 20;
  cfg.system.Ns = 16;
  cfg.system.L = 3;
  cfg.system.n = 2;
  cfg.system.snr_db = 10.0;
  cfg.system.seed = 1;
  cfg.train.epochs = 1;
  cfg.train.batch_size = 250;
  cfg.train.learning_rate = 0.01;
  cfg.train.momentum = 0.9;
  cfg.train.eval_every = 100;
  cfg.train.seed = 1;
  cfg.train_samples = 200000;
  cfg.val_samples = 10000;
  cfg.test_samples = 10000;
  cfg.methods = {bench::Method::omp,  bench::Method::bomp,
                 bench::Method::iht,  bench::Method::biht,
                 bench::Method::brnn, bench::Method::dnn};
  cfg.sweep_values = {1, 2};
  cfg.sweep_trials = 1000;
  return cfg;
}

// --- 1: block activation truth table ----------------------------------------

bool truth_table_holds(int L) {
  // Exhaustive patterns over negative / zero / positive entries, with two
  // magnitudes per sign so ties and interior values are covered.
  const std::vector<double> values = {-2.0, -0.5, 0.0, 0.5, 2.0};
  const int count = static_cast<int>(std::pow(values.size(), L));

  std::vector<double> X(static_cast<std::size_t>(count) * L);
  for (int p = 0; p < count; ++p) {
    int rem = p;
    for (int l = 0; l < L; ++l) {
      X[static_cast<std::size_t>(p) * L + l] =
          values[static_cast<std::size_t>(rem) % values.size()];
      rem /= static_cast<int>(values.size());
    }
  }

  std::vector<double> Y(X.size()), Yp(X.size());
  std::vector<std::uint8_t> mask(count), maskp(count);
  kernels::serial::block_activation_forward(count, L, L, X.data(), Y.data(),
                                            mask.data());
  kernels::block_activation_forward(count, L, L, X.data(), Yp.data(),
                                    maskp.data());

  for (int p = 0; p < count; ++p) {
    double mx = X[static_cast<std::size_t>(p) * L];
    for (int l = 1; l < L; ++l)
      mx = std::max(mx, X[static_cast<std::size_t>(p) * L + l]);
    const bool pass_through = mx > 0.0;
    if (mask[static_cast<std::size_t>(p)] != (pass_through ? 1 : 0))
      return false;
    for (int l = 0; l < L; ++l) {
      const std::size_t i = static_cast<std::size_t>(p) * L + l;
      const double expect = pass_through ? X[i] : 0.0;
      if (Y[i] != expect) return false;   // exact, no tolerance
      if (Yp[i] != Y[i]) return false;    // parallel bit-identical
    }
    if (maskp[static_cast<std::size_t>(p)] != mask[static_cast<std::size_t>(p)])
      return false;
  }
  return true;
}

void criterion_1() {
  const auto t0 = Clock::now();
  bool ok = true;
  for (int L = 1; L <= 4 && ok; ++L) ok = truth_table_holds(L);
  const double el = seconds_since(t0);
  report(1, "block activation truth table", ok && el < 1.0,
         ok ? fmt("exhaustive for L=1..4, exact") : "mismatch found", el);
}

// --- 2: finite-difference gradient oracle -----------------------------------

void criterion_2() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t checked = 0, skipped = 0;
  bool ok = true;

  for (int trial = 0; trial < 20 && ok; ++trial) {
    neural::NetworkShape shape;
    shape.arch = trial % 2 == 0 ? neural::Arch::brnn : neural::Arch::dnn;
    shape.head = trial % 4 < 2 ? neural::Head::softmax : neural::Head::sigmoid;
    shape.users = 4;
    shape.block_size = 2;
    shape.measurement_len = 5;
    shape.relu_layers = 2;
    shape.residual_blocks = 2;
    neural::Network<double> net(shape, 1000 + trial);

    Rng rng(500 + trial);
    const int batch = 5;
    std::vector<double> X(static_cast<std::size_t>(batch) *
                          shape.input_width());
    for (auto& v : X) v = rng.normal(1.0);
    std::vector<std::vector<std::int32_t>> active(batch);
    for (auto& a : active) {
      const auto users = sysmodel::sample_activity(
          shape.users, 1 + static_cast<int>(rng.below(2)), rng);
      a.assign(users.begin(), users.end());
    }

    // Step 1e-5 sits near the optimum for a double-precision central
    // difference of an O(1) loss; 1e-6 leaves visible cancellation noise.
    const auto rep = gradcheck::fd_gradient_check(net, X, batch, active, 1e-5);
    worst = std::max(worst, rep.max_rel_err);
    checked += rep.checked;
    skipped += rep.skipped;
    if (rep.checked == 0 || rep.max_rel_err >= 1e-5) ok = false;
  }

  const double el = seconds_since(t0);
  report(2, "gradient matches 64-bit FD", ok && el < 30.0,
         fmt("max rel err %.2e over %zu coords (%zu kink-skipped)", worst,
             checked, skipped),
         el);
}

// --- 3: brute-force oracle equivalence --------------------------------------

void criterion_3() {
  const auto t0 = Clock::now();
  SystemConfig cfg;
  cfg.K = 8;
  cfg.Ns = 8;
  cfg.L = 2;
  cfg.n = 2;
  cfg.seed = 33;
  const Dictionary dict = sysmodel::dictionary_for(cfg);

  const int trials = 1000;
  int oracle_ok = 0, bomp_ok = 0;
  for (int t = 0; t < trials; ++t) {
    Rng rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(t)));
    const auto gt = sysmodel::make_ground_truth(
        cfg.K, cfg.L, sysmodel::sample_activity(cfg.K, cfg.n, rng),
        sysmodel::sample_channel(cfg.K, cfg.L, rng));
    const auto meas = sysmodel::synthesize_measurement(dict, gt.x, 0.0, rng);

    const auto oracle = recovery::brute_force_oracle(dict, meas.y, cfg.n);
    if (oracle.residual_norm < 1e-9) ++oracle_ok;
    const auto bomp = recovery::bomp_solve(dict, meas.y, cfg.n);
    if (bomp.support_users == gt.active_set) ++bomp_ok;
  }

  const double el = seconds_since(t0);
  const double bomp_rate = static_cast<double>(bomp_ok) / trials;
  report(3, "noiseless oracle equivalence",
         oracle_ok == trials && bomp_rate >= 0.95 && el < 60.0,
         fmt("oracle residual<1e-9 in %d/%d, BOMP support match %.3f",
             oracle_ok, trials, bomp_rate),
         el);
}

// --- 4: single-user recovery at full scale ----------------------------------

void criterion_4() {
  const auto t0 = Clock::now();
  SystemConfig cfg;
  cfg.K = 100;
  cfg.Ns = 40;
  cfg.L = 6;
  cfg.n = 1;
  cfg.seed = 44;
  const Dictionary dict = sysmodel::dictionary_for(cfg);

  const int trials = 1000;
  int bomp_ok = 0, biht_ok = 0;
  for (int t = 0; t < trials; ++t) {
    Rng rng(derive_seed(cfg.seed, 2000 + static_cast<std::uint64_t>(t)));
    const auto gt = sysmodel::make_ground_truth(
        cfg.K, cfg.L, sysmodel::sample_activity(cfg.K, cfg.n, rng),
        sysmodel::sample_channel(cfg.K, cfg.L, rng));
    const auto meas = sysmodel::synthesize_measurement(dict, gt.x, 0.0, rng);

    if (recovery::bomp_solve(dict, meas.y, 1).support_users == gt.active_set)
      ++bomp_ok;
    if (recovery::biht_solve(dict, meas.y, 1).support_users == gt.active_set)
      ++biht_ok;
  }

  const double el = seconds_since(t0);
  report(4, "single-user recovery >= 99%",
         bomp_ok >= 990 && biht_ok >= 990 && el < 120.0,
         fmt("BOMP %d/%d, BIHT %d/%d", bomp_ok, trials, biht_ok, trials), el);
}

// --- 5: SNR calibration ------------------------------------------------------

void criterion_5() {
  const auto t0 = Clock::now();
  const bench::ExperimentConfig cfg = desk_experiment();
  const Dictionary dict = sysmodel::dictionary_for(cfg.system);
  const auto ds =
      sysmodel::generate_dataset(cfg.system, sysmodel::Split::train, 10000);

  double sig = 0.0, noise = 0.0;
  for (const auto& s : ds.samples) {
    const Eigen::VectorXcd clean = dict.matrix() * s.x;
    sig += clean.squaredNorm();
    noise += (s.y - clean).squaredNorm();
  }
  const double realized_db = 10.0 * std::log10(sig / noise);
  const double err = std::abs(realized_db - cfg.system.snr_db);

  report(5, "dataset SNR within 0.2 dB", err <= 0.2,
         fmt("target %.1f dB, realized %.3f dB over 10000 samples",
             cfg.system.snr_db, realized_db),
         seconds_since(t0));
}

// --- 6 & 7: convergence trend and detection orderings ------------------------

// Fig.-3 protocol: one pass over the generated training samples, both
// networks on identical data, shuffles, learning rate, and initialization.
// The comparison reads the final 100-batch checkpoint of that pass.
void criterion_6() {
  const auto t0 = Clock::now();
  const bench::ExperimentConfig cfg = desk_experiment();

  std::optional<bench::ConvergenceResult> conv;
  try {
    conv.emplace(bench::run_convergence(cfg, nullptr));
  } catch (const std::exception& e) {
    report(6, "BRNN converges at or below DNN", false,
           std::string("training failed: ") + e.what(), seconds_since(t0));
    return;
  }

  const auto& bt = conv->brnn_trace.checkpoints;
  const auto& dt = conv->dnn_trace.checkpoints;
  const double brnn_loss = bt.back().train_loss;
  const double dnn_loss = dt.back().train_loss;
  const double brnn_exact = bt.back().val_exact_set;
  const double dnn_exact = dt.back().val_exact_set;

  const double el = seconds_since(t0);
  const bool ok = !bt.empty() && !dt.empty() && brnn_loss <= dnn_loss &&
                  brnn_exact >= dnn_exact - 0.02 && el < 7200.0;
  report(6, "BRNN converges at or below DNN", ok,
         fmt("single pass (%ld batches): final loss brnn %.4f vs dnn %.4f, "
             "final val exact %.3f vs %.3f",
             conv->brnn_trace.total_batches, brnn_loss, dnn_loss, brnn_exact,
             dnn_exact),
         el);
}

// The sweeps rank fully trained networks against the solvers, so this
// criterion trains its own pair well past the single pass (the solver
// baselines have no training dial; the networks get their plateau).
void criterion_7() {
  const auto t0 = Clock::now();
  bench::ExperimentConfig cfg = desk_experiment();
  cfg.train.epochs = 25;

  std::optional<bench::ConvergenceResult> conv;
  try {
    conv.emplace(bench::run_convergence(cfg, nullptr));
  } catch (const std::exception& e) {
    report(7, "BRNN ordering across sweep", false,
           std::string("training failed: ") + e.what(), seconds_since(t0));
    return;
  }

  std::vector<bench::SweepPoint> points;
  try {
    points = bench::run_sweep(cfg, &conv->nets, nullptr);
  } catch (const std::exception& e) {
    report(7, "BRNN ordering across sweep", false,
           std::string("sweep failed: ") + e.what(), seconds_since(t0));
    return;
  }

  const auto find = [&](bench::Method m, int n) -> const bench::SweepPoint* {
    for (const auto& p : points)
      if (p.method == m && p.value == n) return &p;
    return nullptr;
  };

  bool ok = true;
  std::ostringstream detail;
  detail << "25 epochs; ";
  for (int n : cfg.sweep_values) {
    const auto* brnn = find(bench::Method::brnn, n);
    const auto* iht = find(bench::Method::iht, n);
    const auto* biht = find(bench::Method::biht, n);
    if (!brnn || !iht || !biht) {
      ok = false;
      break;
    }
    if (brnn->exact_set_rate < iht->exact_set_rate ||
        brnn->exact_set_rate < biht->exact_set_rate)
      ok = false;
    detail << "n=" << n << " exact brnn " << brnn->exact_set_rate << " iht "
           << iht->exact_set_rate << " biht " << biht->exact_set_rate << "; ";
  }

  const auto* brnn2 = find(bench::Method::brnn, cfg.system.n);
  const auto* dnn2 = find(bench::Method::dnn, cfg.system.n);
  if (!brnn2 || !dnn2 || brnn2->mean_mse > dnn2->mean_mse) ok = false;
  if (brnn2 && dnn2)
    detail << "mse@n=" << cfg.system.n << " brnn " << brnn2->mean_mse
           << " vs dnn " << dnn2->mean_mse;

  report(7, "BRNN ordering across sweep", ok, detail.str(),
         seconds_since(t0));
}

// --- 8: inference speed at full scale ----------------------------------------

void criterion_8() {
  const auto t0 = Clock::now();
  SystemConfig cfg;
  cfg.K = 100;
  cfg.Ns = 40;
  cfg.L = 6;
  cfg.n = 6;
  cfg.snr_db = 10.0;
  cfg.seed = 8;

  // Brief training pass so the timed model is a trained artifact.
  neural::Network<float> net(neural::shape_for(cfg, neural::Arch::brnn),
                             neural::default_init_seed(cfg));
  try {
    const auto train_ds =
        sysmodel::generate_dataset(cfg, sysmodel::Split::train, 10000);
    const auto val_ds =
        sysmodel::generate_dataset(cfg, sysmodel::Split::val, 1000);
    const auto train_set = neural::featurize_dataset(train_ds);
    const auto val_set = neural::featurize_dataset(val_ds);
    neural::TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 250;
    tc.eval_every = 40;
    const auto trace = neural::train(net, train_set, val_set, tc);
    (void)trace;
  } catch (const std::exception& e) {
    report(8, "BRNN inference 10x faster than BIHT", false,
           std::string("training failed: ") + e.what(), seconds_since(t0));
    return;
  }

  const Dictionary dict = sysmodel::dictionary_for(cfg);
  const auto timing_ds = sysmodel::generate_sweep_dataset(cfg, cfg.n, 1000);

  const int saved_threads = max_threads();
  set_max_threads(1);

  // Warm-up pass for both methods, excluded from the measurement.
  for (int w = 0; w < 50; ++w) {
    const auto& s = timing_ds.samples[static_cast<std::size_t>(w) %
                                      timing_ds.samples.size()];
    recovery::biht_solve(dict, s.y, cfg.n);
    const auto row = neural::featurize(s.y);
    std::vector<float> input(row.begin(), row.end());
    net.infer(input, 1);
  }

  const auto tb = Clock::now();
  for (const auto& s : timing_ds.samples)
    recovery::biht_solve(dict, s.y, cfg.n);
  const double biht_per =
      seconds_since(tb) / static_cast<double>(timing_ds.samples.size());

  const auto tn = Clock::now();
  for (const auto& s : timing_ds.samples) {
    const auto row = neural::featurize(s.y);
    std::vector<float> input(row.begin(), row.end());
    const auto probs = net.infer(input, 1);
    std::vector<double> scores(probs.begin(), probs.end());
    volatile auto sink =
        neural::top_users(scores.data(), cfg.K, cfg.n).size();
    (void)sink;
  }
  const double brnn_per =
      seconds_since(tn) / static_cast<double>(timing_ds.samples.size());

  set_max_threads(saved_threads);

  const double ratio = biht_per / brnn_per;
  report(8, "BRNN inference 10x faster than BIHT", ratio >= 10.0,
         fmt("biht %.3f ms vs brnn %.3f ms per sample, ratio %.1fx",
             biht_per * 1e3, brnn_per * 1e3, ratio),
         seconds_since(t0));
}

// --- 9: byte-identical CLI artifacts ------------------------------------------

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

int run_cmd(const std::string& cmd) {
  const int rc = std::system((cmd + " > /dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

void criterion_9() {
  const auto t0 = Clock::now();
  const char* bin = std::getenv("CSMUD_CLI");
  if (!bin) {
    report(9, "deterministic generate and train", false,
           "CSMUD_CLI not set", 0.0);
    return;
  }

  const fs::path dir = fs::temp_directory_path() /
                       ("csmud_accept_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const std::string base =
      std::string("\"") + bin +
      "\" --quiet --threads 1 "
      "--override system.K=4 --override system.Ns=6 --override system.L=1 "
      "--override system.n=1 --override system.seed=11 "
      "--override train_samples=60 --override val_samples=20 "
      "--override test_samples=20 --override train.epochs=1 "
      "--override train.batch_size=10 --override train.eval_every=3 ";

  bool ok = true;
  std::string detail = "generate + train byte-identical across reruns";
  const std::string d1 = (dir / "d1").string(), d2 = (dir / "d2").string();
  if (run_cmd(base + "generate --out " + d1) != 0 ||
      run_cmd(base + "generate --out " + d2) != 0) {
    ok = false;
    detail = "generate failed";
  }
  if (ok) {
    for (const char* name : {"train.bin", "val.bin", "test.bin"}) {
      if (file_bytes(fs::path(d1) / name) != file_bytes(fs::path(d2) / name)) {
        ok = false;
        detail = std::string("dataset bytes differ: ") + name;
      }
    }
  }

  if (ok) {
    const std::string m1 = (dir / "m1.model").string();
    const std::string m2 = (dir / "m2.model").string();
    if (run_cmd(base + "train --data " + d1 + " --out " + m1) != 0 ||
        run_cmd(base + "train --data " + d1 + " --out " + m2) != 0) {
      ok = false;
      detail = "train failed";
    } else if (file_bytes(m1) != file_bytes(m2)) {
      ok = false;
      detail = "model bytes differ";
    }
  }

  std::error_code ec;
  fs::remove_all(dir, ec);
  report(9, "deterministic generate and train", ok, detail,
         seconds_since(t0));
}

// --- 10: MMSE ridge limits ----------------------------------------------------

void criterion_10() {
  const auto t0 = Clock::now();
  const bench::ExperimentConfig cfg = desk_experiment();
  const Dictionary dict = sysmodel::dictionary_for(cfg.system);

  Rng rng(90);
  const auto gt = sysmodel::make_ground_truth(
      cfg.system.K, cfg.system.L,
      sysmodel::sample_activity(cfg.system.K, cfg.system.n, rng),
      sysmodel::sample_channel(cfg.system.K, cfg.system.L, rng));
  const auto meas = sysmodel::synthesize_measurement(dict, gt.x, 0.1, rng);

  const auto ls =
      recovery::mmse_estimate(dict, meas.y, gt.active_set, 0.0, 1.0);
  const auto low =
      recovery::mmse_estimate(dict, meas.y, gt.active_set, 1e-6, 1.0);
  const auto high =
      recovery::mmse_estimate(dict, meas.y, gt.active_set, 1e6, 1.0);

  const double ls_norm = ls.x_hat.norm();
  const double low_err = (low.x_hat - ls.x_hat).norm() / ls_norm;
  const double high_norm = high.x_hat.norm() / ls_norm;

  bool monotone = true;
  double prev = std::numeric_limits<double>::infinity();
  std::vector<double> norms;
  for (double ratio : {1e-3, 1e-1, 1.0, 10.0, 1e3}) {
    const double cur =
        recovery::mmse_estimate(dict, meas.y, gt.active_set, ratio, 1.0)
            .x_hat.norm();
    if (cur >= prev) monotone = false;
    prev = cur;
    norms.push_back(cur);
  }

  const bool ok = low_err < 1e-4 && high_norm < 1e-4 && monotone;
  report(10, "MMSE ridge limits and monotonicity", ok,
         fmt("LS gap %.1e at ratio 1e-6, norm %.1e at 1e6, monotone %s",
             low_err, high_norm, monotone ? "yes" : "no"),
         seconds_since(t0));
}

}  // namespace

int main() {
  std::printf("acceptance gate: 10 criteria\n");
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7();
  criterion_8();
  criterion_9();
  criterion_10();
  std::printf("%d/10 criteria passed\n", 10 - g_failures);
  return g_failures == 0 ? 0 : 1;
}
