#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "csmud/config.hpp"
#include "csmud/dictionary.hpp"
#include "csmud/rng.hpp"

namespace csmud::sysmodel {

// K x Ns matrix of BPSK pilot symbols; every entry is exactly +1 or -1 and
// rows are pairwise distinct.
struct PilotSet {
  Eigen::MatrixXd symbols;

  int user_count() const { return static_cast<int>(symbols.rows()); }
  int pilot_len() const { return static_cast<int>(symbols.cols()); }
};

struct GroundTruth {
  std::vector<int> active_set;  // sorted user indices
  Eigen::VectorXcd h;           // K*L channel taps, all users
  Eigen::VectorXcd x;           // h masked to the active blocks
};

struct Measurement {
  Eigen::VectorXcd y;
  double noise_var = 0.0;  // total variance per complex entry
  double snr_db = 0.0;     // realized target, metadata only
};

enum class Split { train, val, test };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct Sample {
  Eigen::VectorXcd y;
  Eigen::VectorXcd x;
  std::vector<std::int32_t> active_set;
};

struct Dataset {
  SystemConfig config;
  Split split = Split::train;
  double noise_var = 0.0;
  std::vector<Sample> samples;
};

// K distinct rows of iid uniform +-1 symbols. Throws ConfigError when
// K > 2^Ns (no K distinct rows exist).
PilotSet generate_pilots(int K, int Ns, Rng& rng);

// (Ns+L-1) x L Toeplitz matrix; column j is the pilot shifted down by j
// rows and zero padded.
Eigen::MatrixXcd build_conv_matrix(const Eigen::VectorXd& pilot, int L);

// Horizontal concatenation of the per-user convolution matrices.
Dictionary assemble_dictionary(const PilotSet& pilots, int L);

// Convenience: pilots + dictionary for a config, seeded from config.seed.
Dictionary dictionary_for(const SystemConfig& config);

// K*L iid circularly symmetric complex Gaussian taps with per-tap variance
// 1/L, so each user's expected channel energy is 1.
Eigen::VectorXcd sample_channel(int K, int L, Rng& rng);

// Uniformly random n-subset of {0..K-1}, sorted.
std::vector<int> sample_activity(int K, int n, Rng& rng);

GroundTruth make_ground_truth(int K, int L, std::vector<int> active_set,
                              Eigen::VectorXcd h);

// sigma^2 such that E||Sx||^2 / (M sigma^2) hits the target SNR, with the
// signal-power expectation estimated over the given ensemble of x vectors.
double calibrate_noise_variance(const Dictionary& dict,
                                const std::vector<Eigen::VectorXcd>& ensemble_x,
                                double snr_db);

// Same, with E||Sx||^2 computed from the tap variance in closed form.
double analytic_noise_variance(const Dictionary& dict, int n_active,
                               double tap_variance, double snr_db);

// y = Sx + n with iid complex Gaussian noise of total per-entry variance
// noise_var (split evenly between real and imaginary parts).
Measurement synthesize_measurement(const Dictionary& dict,
                                   const Eigen::VectorXcd& x, double noise_var,
                                   Rng& rng);

// count independent samples. Per-sample seeds derive from
// derive_seed(derive_seed(config.seed, split_index), sample_index), so the
// result is identical for any worker count. Train/val samples carry exactly
// config.n active users; test samples draw n uniformly from {1..config.n}
// (or n = 0 throughout when config.n = 0). Noise variance is calibrated
// empirically over the generated ensemble by default.
Dataset generate_dataset(const SystemConfig& config, Split split, int count,
                         bool analytic_calibration = false);

// Fixed-n evaluation data for sweep points: same pilots as the preset, a
// seed stream disjoint from the three named splits (one stream per active
// count), every sample with exactly n_active users. Tagged as a val split.
Dataset generate_sweep_dataset(const SystemConfig& config, int n_active,
                               int count);

// Binary dataset container; see save_dataset() in sysmodel.cpp for the
// exact layout. Round trips are bit exact.
void save_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

// Header inspection without reading the sample payload.
struct DatasetInfo {
  SystemConfig config;
  Split split = Split::train;
  std::size_t count = 0;
  double noise_var = 0.0;
};

DatasetInfo peek_dataset(const std::string& path);

}  // namespace csmud::sysmodel
