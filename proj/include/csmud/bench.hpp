#pragma once

#include <iosfwd>
#include <json.hpp>
#include <string>
#include <vector>

#include "csmud/config.hpp"
#include "csmud/neural.hpp"
#include "csmud/recovery.hpp"

namespace csmud::bench {

enum class Method { omp, bomp, iht, biht, oracle, brnn, dnn };

std::string method_name(Method m);
Method method_from_name(const std::string& name);  // case-insensitive

// What the sweep points vary: the true active-user count n, or the pilot
// length Ns (n then stays at the preset's value).
enum class SweepAxis { active_users, pilot_length };

std::string axis_name(SweepAxis a);          // "n" / "Ns"
SweepAxis axis_from_name(const std::string& name);

// One experiment bundle: a system preset, how to train the networks on it,
// which methods appear in the report tables, and the sweep / timing grids.
// Sweep points get fresh data on a seed stream disjoint from the
// train/val/test splits.
struct ExperimentConfig {
  SystemConfig system;
  neural::TrainConfig train;
  int train_samples = 200000;
  int val_samples = 10000;
  int test_samples = 10000;

  // Row subset of the sweep and timing tables. The oracle is accepted only
  // where its enumeration budget holds; network rows additionally need
  // trained models at run time.
  std::vector<Method> methods = {Method::omp,  Method::bomp, Method::iht,
                                 Method::biht, Method::brnn, Method::dnn};

  SweepAxis sweep_axis = SweepAxis::active_users;
  std::vector<int> sweep_values = {1, 2};
  int sweep_trials = 1000;
  // Channel MSE column: ||x_hat - x||^2 / ||x||^2 when set, the raw squared
  // error otherwise.
  bool normalize_mse = true;

  std::vector<int> timing_ns = {16};  // pilot lengths of the timing grid
  std::vector<int> timing_n = {2};
  int timing_samples = 1000;
  int timing_warmup = 50;

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Detection + estimation metrics for one (method, sweep value) point.
// Network rows refit the detected support with the ridge estimator before
// scoring the MSE column. A zero estimate against a nonzero truth follows
// the x_hat = 0 convention (MSE contribution 1 normalized, ||x||^2 raw) and
// is counted in empty_supports.
struct SweepPoint {
  Method method = Method::bomp;
  SweepAxis axis = SweepAxis::active_users;
  int value = 0;
  int trials = 0;
  double exact_set_rate = 0.0;
  double user_hit_ratio = 0.0;
  double ci_halfwidth = 0.0;  // 1.96 * sqrt(p (1-p) / trials) on exact rate
  double mean_mse = 0.0;
  long empty_supports = 0;
  double mean_seconds = 0.0;
};

struct TimingRow {
  Method method = Method::bomp;
  int Ns = 0;
  int n = 0;
  int samples = 0;
  double mean_seconds = 0.0;
};

struct NetworkSet {
  neural::Network<float> brnn;
  neural::Network<float> dnn;
};

struct ConvergenceResult {
  neural::TrainingTrace brnn_trace;
  neural::TrainingTrace dnn_trace;
  NetworkSet nets;
};

// Trains the BRNN and the plain DNN on identical data, identical shuffle
// stream, and a shared init seed, then returns both traces and the trained
// networks for the sweeps.
ConvergenceResult run_convergence(const ExperimentConfig& cfg,
                                  std::ostream* log = nullptr);

// Fresh data per point at the preset SNR; every method receives the true
// active count. Network rows need `nets` and, on a pilot-length sweep, a
// matching input width; mismatching points are skipped.
std::vector<SweepPoint> run_sweep(const ExperimentConfig& cfg,
                                  const NetworkSet* nets,
                                  std::ostream* log = nullptr);

// Per-sample wall time over a (Ns, n) grid, single-threaded, with a warm-up
// pass excluded from the measurement. Network timing uses freshly
// initialized models when the provided ones do not match the point's shape
// (weights do not change the arithmetic).
std::vector<TimingRow> run_timing(const ExperimentConfig& cfg,
                                  const NetworkSet* nets,
                                  std::ostream* log = nullptr);

void emit_detection_csv(const std::vector<SweepPoint>& points,
                        const std::string& path);
void emit_mse_csv(const std::vector<SweepPoint>& points,
                  const std::string& path);
void emit_timing_csv(const std::vector<TimingRow>& rows,
                     const std::string& path);
void emit_trace_csv(const neural::TrainingTrace& trace,
                    const std::string& path);

// manifest.json: experiment config plus size and FNV-1a 64 hash of every
// emitted report, so a rerun can be diffed at a glance.
void emit_manifest(const ExperimentConfig& cfg,
                   const std::vector<std::string>& report_paths,
                   const std::string& path);

}  // namespace csmud::bench
