#include "csmud/sysmodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "binio.hpp"
#include "csmud/threading.hpp"

static_assert(std::endian::native == std::endian::little,
              "dataset container assumes a little-endian host");

namespace csmud::sysmodel {

namespace {

// Seed-stream tags under a dataset's master seed.
constexpr std::uint64_t kPilotStream = 0;
constexpr std::uint64_t kSplitStreamBase = 1;   // +0 train, +1 val, +2 test
constexpr std::uint64_t kSweepStreamBase = 16;  // +n, fixed-n sweep data

constexpr char kDatasetMagic[8] = {'C', 'S', 'M', 'U', 'D', 'S', 'E', 'T'};
constexpr std::uint8_t kDatasetVersion = 1;

int split_index(Split s) { return static_cast<int>(s); }

}  // namespace

std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split tag: " + name);
}

PilotSet generate_pilots(int K, int Ns, Rng& rng) {
  if (K < 1 || Ns < 1) throw ConfigError("pilot dimensions must be positive");
  if (Ns < 63 && static_cast<std::uint64_t>(K) > (1ull << Ns))
    throw ConfigError("cannot draw " + std::to_string(K) +
                      " distinct BPSK pilots of length " + std::to_string(Ns));

  PilotSet pilots;
  pilots.symbols.resize(K, Ns);
  std::set<std::vector<std::int8_t>> seen;
  for (int k = 0; k < K; ++k) {
    std::vector<std::int8_t> row(Ns);
    do {
      for (int s = 0; s < Ns; ++s) row[s] = rng.pm_one() > 0 ? 1 : -1;
    } while (!seen.insert(row).second);
    for (int s = 0; s < Ns; ++s) pilots.symbols(k, s) = row[s];
  }
  return pilots;
}

Eigen::MatrixXcd build_conv_matrix(const Eigen::VectorXd& pilot, int L) {
  if (L < 1) throw std::invalid_argument("L must be >= 1");
  const int Ns = static_cast<int>(pilot.size());
  Eigen::MatrixXcd conv = Eigen::MatrixXcd::Zero(Ns + L - 1, L);
  for (int j = 0; j < L; ++j)
    for (int i = j; i < j + Ns; ++i) conv(i, j) = pilot[i - j];
  return conv;
}

Dictionary assemble_dictionary(const PilotSet& pilots, int L) {
  const int K = pilots.user_count();
  const int Ns = pilots.pilot_len();
  Eigen::MatrixXcd stacked(Ns + L - 1, static_cast<Eigen::Index>(K) * L);
  for (int k = 0; k < K; ++k)
    stacked.middleCols(static_cast<Eigen::Index>(k) * L, L) =
        build_conv_matrix(pilots.symbols.row(k).transpose(), L);
  return Dictionary(std::move(stacked), L);
}

Dictionary dictionary_for(const SystemConfig& config) {
  Rng rng(derive_seed(config.seed, kPilotStream));
  return assemble_dictionary(generate_pilots(config.K, config.Ns, rng),
                             config.L);
}

Eigen::VectorXcd sample_channel(int K, int L, Rng& rng) {
  const double sigma = std::sqrt(1.0 / (2.0 * L));  // per real dimension
  Eigen::VectorXcd h(static_cast<Eigen::Index>(K) * L);
  for (Eigen::Index i = 0; i < h.size(); ++i) {
    const double re = rng.normal(sigma);
    const double im = rng.normal(sigma);
    h[i] = {re, im};
  }
  return h;
}

std::vector<int> sample_activity(int K, int n, Rng& rng) {
  if (n < 0 || n > K) throw std::invalid_argument("active count out of range");
  std::vector<int> idx(K);
  for (int i = 0; i < K; ++i) idx[i] = i;
  for (int i = 0; i < n; ++i)
    std::swap(idx[i], idx[i + static_cast<int>(rng.below(K - i))]);
  std::vector<int> active(idx.begin(), idx.begin() + n);
  std::sort(active.begin(), active.end());
  return active;
}

GroundTruth make_ground_truth(int K, int L, std::vector<int> active_set,
                              Eigen::VectorXcd h) {
  if (h.size() != static_cast<Eigen::Index>(K) * L)
    throw std::invalid_argument("channel vector length mismatch");
  GroundTruth gt;
  gt.x = Eigen::VectorXcd::Zero(h.size());
  for (int k : active_set)
    gt.x.segment(static_cast<Eigen::Index>(k) * L, L) =
        h.segment(static_cast<Eigen::Index>(k) * L, L);
  gt.active_set = std::move(active_set);
  gt.h = std::move(h);
  return gt;
}

double calibrate_noise_variance(const Dictionary& dict,
                                const std::vector<Eigen::VectorXcd>& ensemble_x,
                                double snr_db) {
  if (!std::isfinite(snr_db)) throw std::invalid_argument("snr_db not finite");
  if (ensemble_x.empty())
    throw std::invalid_argument("empty calibration ensemble");
  double power = 0.0;
  for (const auto& x : ensemble_x) power += (dict.matrix() * x).squaredNorm();
  power /= static_cast<double>(ensemble_x.size());
  const double per_entry = power / dict.rows();
  return per_entry / std::pow(10.0, snr_db / 10.0);
}

double analytic_noise_variance(const Dictionary& dict, int n_active,
                               double tap_variance, double snr_db) {
  if (!std::isfinite(snr_db)) throw std::invalid_argument("snr_db not finite");
  double frob2 = 0.0;
  for (int k = 0; k < dict.user_count(); ++k) {
    const double f = dict.block_frobenius_norms()[k];
    frob2 += f * f;
  }
  const double expected_power =
      n_active * tap_variance * frob2 / dict.user_count();
  const double per_entry = expected_power / dict.rows();
  return per_entry / std::pow(10.0, snr_db / 10.0);
}

Measurement synthesize_measurement(const Dictionary& dict,
                                   const Eigen::VectorXcd& x, double noise_var,
                                   Rng& rng) {
  if (x.size() != dict.cols())
    throw std::invalid_argument("signal length does not match dictionary");
  Measurement m;
  m.y = dict.matrix() * x;
  m.noise_var = noise_var;
  if (noise_var > 0.0) {
    const double sigma = std::sqrt(noise_var / 2.0);
    for (Eigen::Index i = 0; i < m.y.size(); ++i) {
      const double re = rng.normal(sigma);
      const double im = rng.normal(sigma);
      m.y[i] += std::complex<double>(re, im);
    }
  }
  return m;
}

namespace {

// Shared generation core. `uniform_n` draws each sample's active count
// uniformly from {1..config.n} (the test-split convention); otherwise every
// sample has exactly config.n active users.
Dataset generate_with_master(const SystemConfig& config, Split tag,
                             std::uint64_t split_master, bool uniform_n,
                             int count, bool analytic_calibration) {
  config.validate();
  if (count < 1) throw ConfigError("dataset count must be >= 1");

  const Dictionary dict = dictionary_for(config);

  // Pass 1: clean block-sparse signals, one derived seed per sample.
  std::vector<GroundTruth> truths(count);
  std::vector<double> powers(count);
  const int nt = resolved_threads();
#pragma omp parallel for num_threads(nt) if (nt > 1) schedule(static)
  for (int i = 0; i < count; ++i) {
    Rng g(derive_seed(split_master, static_cast<std::uint64_t>(i)));
    int n_i = config.n;
    if (uniform_n && config.n > 0)
      n_i = 1 + static_cast<int>(g.below(static_cast<std::uint64_t>(config.n)));
    auto active = sample_activity(config.K, n_i, g);
    auto h = sample_channel(config.K, config.L, g);
    truths[i] = make_ground_truth(config.K, config.L, std::move(active),
                                  std::move(h));
    powers[i] = (dict.matrix() * truths[i].x).squaredNorm();
  }

  double noise_var;
  if (analytic_calibration) {
    const double expected_n = uniform_n ? (config.n + 1) / 2.0 : config.n;
    double frob2 = 0.0;
    for (int k = 0; k < config.K; ++k) {
      const double f = dict.block_frobenius_norms()[k];
      frob2 += f * f;
    }
    const double per_entry =
        expected_n * (1.0 / config.L) * frob2 / config.K / dict.rows();
    noise_var = per_entry / std::pow(10.0, config.snr_db / 10.0);
  } else {
    double mean_power = 0.0;
    for (int i = 0; i < count; ++i) mean_power += powers[i];
    mean_power /= count;
    noise_var =
        mean_power / dict.rows() / std::pow(10.0, config.snr_db / 10.0);
  }

  // Pass 2: measurements, with an independent noise stream per sample.
  Dataset ds;
  ds.config = config;
  ds.split = tag;
  ds.noise_var = noise_var;
  ds.samples.resize(count);
#pragma omp parallel for num_threads(nt) if (nt > 1) schedule(static)
  for (int i = 0; i < count; ++i) {
    const std::uint64_t sample_seed =
        derive_seed(split_master, static_cast<std::uint64_t>(i));
    Rng noise_rng(derive_seed(sample_seed, 1));
    Measurement m = synthesize_measurement(dict, truths[i].x, noise_var,
                                           noise_rng);
    Sample& s = ds.samples[i];
    s.y = std::move(m.y);
    s.x = std::move(truths[i].x);
    s.active_set.assign(truths[i].active_set.begin(),
                        truths[i].active_set.end());
  }
  return ds;
}

}  // namespace

Dataset generate_dataset(const SystemConfig& config, Split split, int count,
                         bool analytic_calibration) {
  const std::uint64_t split_master =
      derive_seed(config.seed, kSplitStreamBase + split_index(split));
  return generate_with_master(config, split, split_master,
                              split == Split::test, count,
                              analytic_calibration);
}

Dataset generate_sweep_dataset(const SystemConfig& config, int n_active,
                               int count) {
  SystemConfig pc = config;
  pc.n = n_active;
  const std::uint64_t split_master = derive_seed(
      config.seed, kSweepStreamBase + static_cast<std::uint64_t>(n_active));
  return generate_with_master(pc, Split::val, split_master, false, count,
                              false);
}

// ---------------------------------------------------------------------------
// Container layout (all little endian):
//   8 bytes   magic "CSMUDSET"
//   1 byte    version (1)
//   u32       header length
//   ...       UTF-8 JSON header {config, split, count, noise_var}
//   per sample:
//     2M f64    y  (re, im interleaved)
//     2KL f64   x  (re, im interleaved)
//     varint    active count, then one varint per sorted user index
// ---------------------------------------------------------------------------

namespace {

void write_f64(std::ostream& out, double v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}

void write_varint(std::ostream& out, std::uint64_t v) {
  while (v >= 0x80) {
    const std::uint8_t byte = static_cast<std::uint8_t>(v) | 0x80;
    out.put(static_cast<char>(byte));
    v >>= 7;
  }
  out.put(static_cast<char>(v));
}

double read_f64(std::istream& in, const char* what) {
  double v;
  binio::read_exact(in, reinterpret_cast<char*>(&v), 8, what);
  return v;
}

std::uint64_t read_varint(std::istream& in, const char* what) {
  std::uint64_t v = 0;
  int shift = 0;
  while (true) {
    const int c = in.get();
    if (c == EOF)
      throw IntegrityError(std::string("truncated dataset: ") + what);
    v |= static_cast<std::uint64_t>(c & 0x7f) << shift;
    if ((c & 0x80) == 0) break;
    shift += 7;
    if (shift > 63) throw IntegrityError("varint overflow");
  }
  return v;
}

void write_complex_vector(std::ostream& out, const Eigen::VectorXcd& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    write_f64(out, v[i].real());
    write_f64(out, v[i].imag());
  }
}

Eigen::VectorXcd read_complex_vector(std::istream& in, Eigen::Index size,
                                     const char* what) {
  Eigen::VectorXcd v(size);
  for (Eigen::Index i = 0; i < size; ++i) {
    const double re = read_f64(in, what);
    const double im = read_f64(in, what);
    v[i] = {re, im};
  }
  return v;
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write dataset file: " + path);

  nlohmann::json header;
  header["config"] = dataset.config;
  header["split"] = split_name(dataset.split);
  header["count"] = dataset.samples.size();
  header["noise_var"] = dataset.noise_var;
  binio::write_container_header(out, kDatasetMagic, kDatasetVersion, header);

  for (const Sample& s : dataset.samples) {
    write_complex_vector(out, s.y);
    write_complex_vector(out, s.x);
    write_varint(out, s.active_set.size());
    for (std::int32_t k : s.active_set)
      write_varint(out, static_cast<std::uint64_t>(k));
  }
  if (!out) throw std::runtime_error("I/O failure writing dataset: " + path);
}

namespace {

DatasetInfo read_dataset_header(std::istream& in, const std::string& path) {
  const auto header =
      binio::read_container_header(in, kDatasetMagic, kDatasetVersion, path);
  DatasetInfo info;
  try {
    info.config = header.at("config").get<SystemConfig>();
    info.split = split_from_name(header.at("split").get<std::string>());
    info.count = header.at("count").get<std::size_t>();
    info.noise_var = header.at("noise_var").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("malformed dataset header: ") + e.what());
  }
  return info;
}

}  // namespace

DatasetInfo peek_dataset(const std::string& path) {
  if (!std::filesystem::exists(path))
    throw MissingArtifactError("dataset file not found: " + path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path);
  return read_dataset_header(in, path);
}

Dataset load_dataset(const std::string& path) {
  if (!std::filesystem::exists(path))
    throw MissingArtifactError("dataset file not found: " + path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path);

  const DatasetInfo info = read_dataset_header(in, path);
  Dataset ds;
  ds.config = info.config;
  ds.split = info.split;
  ds.noise_var = info.noise_var;
  const std::size_t count = info.count;

  const Eigen::Index m = ds.config.measurement_len();
  const Eigen::Index kl = ds.config.signal_len();
  ds.samples.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    Sample& s = ds.samples[i];
    s.y = read_complex_vector(in, m, "measurement payload");
    s.x = read_complex_vector(in, kl, "signal payload");
    const std::uint64_t n_active = read_varint(in, "active count");
    if (n_active > static_cast<std::uint64_t>(ds.config.K))
      throw IntegrityError("active set larger than user count");
    s.active_set.resize(n_active);
    for (std::uint64_t j = 0; j < n_active; ++j)
      s.active_set[j] =
          static_cast<std::int32_t>(read_varint(in, "active index"));
  }
  return ds;
}

}  // namespace csmud::sysmodel
