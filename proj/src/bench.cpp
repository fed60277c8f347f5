#include "csmud/bench.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <stdexcept>

#include "csmud/hash.hpp"
#include "csmud/rng.hpp"
#include "csmud/sysmodel.hpp"
#include "csmud/threading.hpp"

namespace csmud::bench {

namespace {

using Clock = std::chrono::steady_clock;

// Shortest round-trip decimal form, locale independent.
void append_double(std::string& out, double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report: " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("I/O failure writing report: " + path);
}

struct ThreadGuard {
  int saved = max_threads();
  explicit ThreadGuard(int n) { set_max_threads(n); }
  ~ThreadGuard() { set_max_threads(saved); }
};

bool support_matches(const std::vector<int>& guess,
                     const std::vector<std::int32_t>& truth) {
  if (guess.size() != truth.size()) return false;
  for (std::size_t i = 0; i < guess.size(); ++i)
    if (guess[i] != truth[i]) return false;
  return true;
}

double overlap_ratio(const std::vector<int>& guess,
                     const std::vector<std::int32_t>& truth) {
  if (truth.empty()) return 1.0;
  std::size_t overlap = 0;
  for (std::size_t i = 0, j = 0; i < guess.size() && j < truth.size();) {
    if (guess[i] == truth[j]) {
      ++overlap, ++i, ++j;
    } else if (guess[i] < truth[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return static_cast<double>(overlap) / truth.size();
}

// One recovery for the sweep: detected support plus the estimate the MSE
// column scores (solvers score their own output, networks a ridge refit of
// the detected support).
struct TrialOutput {
  std::vector<int> support;
  Eigen::VectorXcd x_hat;
};

TrialOutput run_trial(Method method, const Dictionary& dict,
                      const sysmodel::Sample& sample, int n, double noise_var,
                      const NetworkSet* nets,
                      const recovery::SolverParams& params) {
  switch (method) {
    case Method::omp: {
      auto r = recovery::omp_solve(dict, sample.y, n * dict.block_size(),
                                   params);
      return {std::move(r.support_users), std::move(r.x_hat)};
    }
    case Method::bomp: {
      auto r = recovery::bomp_solve(dict, sample.y, n, params);
      return {std::move(r.support_users), std::move(r.x_hat)};
    }
    case Method::iht: {
      auto r = recovery::iht_solve(dict, sample.y, n * dict.block_size(),
                                   params);
      return {std::move(r.support_users), std::move(r.x_hat)};
    }
    case Method::biht: {
      auto r = recovery::biht_solve(dict, sample.y, n, params);
      return {std::move(r.support_users), std::move(r.x_hat)};
    }
    case Method::oracle: {
      auto r = recovery::brute_force_oracle(dict, sample.y, n);
      return {std::move(r.support_users), std::move(r.x_hat)};
    }
    case Method::brnn:
    case Method::dnn: {
      const neural::Network<float>& net =
          method == Method::brnn ? nets->brnn : nets->dnn;
      const auto row = neural::featurize(sample.y);
      std::vector<float> input(row.size());
      for (std::size_t i = 0; i < row.size(); ++i)
        input[i] = static_cast<float>(row[i]);
      const auto probs = net.infer(input, 1);
      std::vector<double> scores(probs.size());
      for (std::size_t i = 0; i < probs.size(); ++i)
        scores[i] = static_cast<double>(probs[i]);
      auto support = neural::top_users(scores.data(), dict.user_count(), n);
      auto est = recovery::mmse_estimate(dict, sample.y, support, noise_var,
                                         1.0 / dict.block_size());
      return {std::move(support), std::move(est.x_hat)};
    }
  }
  throw std::logic_error("unreachable method");
}

}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::omp: return "omp";
    case Method::bomp: return "bomp";
    case Method::iht: return "iht";
    case Method::biht: return "biht";
    case Method::oracle: return "oracle";
    case Method::brnn: return "brnn";
    case Method::dnn: return "dnn";
  }
  return "?";
}

Method method_from_name(const std::string& name) {
  std::string lower(name);
  for (char& c : lower) c = static_cast<char>(std::tolower(c));
  for (Method m : {Method::omp, Method::bomp, Method::iht, Method::biht,
                   Method::oracle, Method::brnn, Method::dnn})
    if (lower == method_name(m)) return m;
  throw ConfigError("unknown method name: " + name);
}

std::string axis_name(SweepAxis a) {
  return a == SweepAxis::active_users ? "n" : "Ns";
}

SweepAxis axis_from_name(const std::string& name) {
  if (name == "n") return SweepAxis::active_users;
  if (name == "Ns") return SweepAxis::pilot_length;
  throw ConfigError("unknown sweep axis: " + name + " (want n or Ns)");
}

void to_json(nlohmann::json& j, const Method& m) { j = method_name(m); }
void from_json(const nlohmann::json& j, Method& m) {
  m = method_from_name(j.get<std::string>());
}

namespace {

// The system preset a sweep point runs under, and the active count every
// method is told.
SystemConfig point_config(const ExperimentConfig& cfg, int value) {
  SystemConfig pc = cfg.system;
  if (cfg.sweep_axis == SweepAxis::active_users)
    pc.n = value;
  else
    pc.Ns = value;
  return pc;
}

}  // namespace

void ExperimentConfig::validate() const {
  system.validate();
  if (train_samples < 1 || val_samples < 1 || test_samples < 1)
    throw ConfigError("split sizes must be positive");
  if (methods.empty()) throw ConfigError("methods must be nonempty");
  for (std::size_t i = 0; i < methods.size(); ++i)
    for (std::size_t k = i + 1; k < methods.size(); ++k)
      if (methods[i] == methods[k])
        throw ConfigError("duplicate method: " + method_name(methods[i]));
  if (sweep_values.empty())
    throw ConfigError("sweep needs at least one point");
  for (int v : sweep_values) point_config(*this, v).validate();
  if (sweep_trials < 1) throw ConfigError("sweep trials must be positive");
  if (timing_ns.empty() || timing_n.empty())
    throw ConfigError("timing grid must be nonempty");
  for (int ns : timing_ns)
    if (ns < 1) throw ConfigError("timing Ns must be positive");
  for (int n : timing_n)
    if (n < 1 || n > system.K) throw ConfigError("timing n out of range");
  if (timing_samples < 1 || timing_warmup < 0)
    throw ConfigError("invalid timing sample counts");
  if (std::find(methods.begin(), methods.end(), Method::oracle) !=
      methods.end()) {
    const auto check = [&](int n) {
      if (!recovery::oracle_enumerable(system.K, n))
        throw ConfigError("oracle not enumerable at n=" + std::to_string(n));
    };
    for (int v : sweep_values) check(point_config(*this, v).n);
    for (int n : timing_n) check(n);
  }
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"system", c.system},
                     {"train", c.train},
                     {"train_samples", c.train_samples},
                     {"val_samples", c.val_samples},
                     {"test_samples", c.test_samples},
                     {"methods", c.methods},
                     {"sweep_axis", axis_name(c.sweep_axis)},
                     {"sweep_values", c.sweep_values},
                     {"sweep_trials", c.sweep_trials},
                     {"normalize_mse", c.normalize_mse},
                     {"timing_ns", c.timing_ns},
                     {"timing_n", c.timing_n},
                     {"timing_samples", c.timing_samples},
                     {"timing_warmup", c.timing_warmup}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  j.at("system").get_to(c.system);
  j.at("train").get_to(c.train);
  j.at("train_samples").get_to(c.train_samples);
  j.at("val_samples").get_to(c.val_samples);
  j.at("test_samples").get_to(c.test_samples);
  j.at("methods").get_to(c.methods);
  c.sweep_axis = axis_from_name(j.at("sweep_axis").get<std::string>());
  j.at("sweep_values").get_to(c.sweep_values);
  j.at("sweep_trials").get_to(c.sweep_trials);
  j.at("normalize_mse").get_to(c.normalize_mse);
  j.at("timing_ns").get_to(c.timing_ns);
  j.at("timing_n").get_to(c.timing_n);
  j.at("timing_samples").get_to(c.timing_samples);
  j.at("timing_warmup").get_to(c.timing_warmup);
}

ConvergenceResult run_convergence(const ExperimentConfig& cfg,
                                  std::ostream* log) {
  cfg.validate();
  const SystemConfig& sc = cfg.system;

  neural::LabeledSet train_set, val_set;
  {
    if (log) *log << "generating " << cfg.train_samples << " train samples\n";
    auto ds = sysmodel::generate_dataset(sc, sysmodel::Split::train,
                                         cfg.train_samples);
    train_set = neural::featurize_dataset(ds);
  }
  {
    if (log) *log << "generating " << cfg.val_samples << " val samples\n";
    auto ds =
        sysmodel::generate_dataset(sc, sysmodel::Split::val, cfg.val_samples);
    val_set = neural::featurize_dataset(ds);
  }

  const std::uint64_t init_seed = neural::default_init_seed(sc);
  neural::Network<float> brnn(neural::shape_for(sc, neural::Arch::brnn),
                              init_seed);
  neural::Network<float> dnn(neural::shape_for(sc, neural::Arch::dnn),
                             init_seed);

  if (log) *log << "training brnn\n";
  auto brnn_trace = neural::train(brnn, train_set, val_set, cfg.train);
  if (log) *log << "training dnn\n";
  auto dnn_trace = neural::train(dnn, train_set, val_set, cfg.train);

  return ConvergenceResult{std::move(brnn_trace), std::move(dnn_trace),
                           NetworkSet{std::move(brnn), std::move(dnn)}};
}

std::vector<SweepPoint> run_sweep(const ExperimentConfig& cfg,
                                  const NetworkSet* nets, std::ostream* log) {
  cfg.validate();
  recovery::SolverParams params;

  std::vector<SweepPoint> points;
  for (int value : cfg.sweep_values) {
    const SystemConfig pc = point_config(cfg, value);
    const int n = pc.n;
    if (log)
      *log << "sweep point " << axis_name(cfg.sweep_axis) << "=" << value
           << "\n";
    const sysmodel::Dataset ds =
        sysmodel::generate_sweep_dataset(pc, n, cfg.sweep_trials);
    const Dictionary dict = sysmodel::dictionary_for(pc);

    for (Method method : cfg.methods) {
      if (method == Method::brnn || method == Method::dnn) {
        if (!nets) continue;
        // A pilot-length sweep changes the input width; trained networks
        // only apply at their own shape.
        if (nets->brnn.shape() != neural::shape_for(pc, neural::Arch::brnn)) {
          if (log)
            *log << "  " << method_name(method)
                 << " skipped: shape mismatch\n";
          continue;
        }
      }
      SweepPoint p;
      p.method = method;
      p.axis = cfg.sweep_axis;
      p.value = value;
      p.trials = cfg.sweep_trials;
      double mse_sum = 0.0;
      double hit_sum = 0.0;
      long exact = 0;
      const auto t0 = Clock::now();
      for (const auto& sample : ds.samples) {
        const TrialOutput out =
            run_trial(method, dict, sample, n, ds.noise_var, nets, params);
        if (support_matches(out.support, sample.active_set)) ++exact;
        hit_sum += overlap_ratio(out.support, sample.active_set);
        // With a zero estimate the error reduces to ||x||^2 (normalized: 1)
        // by itself; only the counter needs the case.
        const double truth_norm2 = sample.x.squaredNorm();
        const double err2 = (out.x_hat - sample.x).squaredNorm();
        if (out.x_hat.squaredNorm() == 0.0 && truth_norm2 > 0.0)
          ++p.empty_supports;
        mse_sum += cfg.normalize_mse && truth_norm2 > 0.0 ? err2 / truth_norm2
                                                          : err2;
      }
      p.mean_seconds =
          std::chrono::duration<double>(Clock::now() - t0).count() /
          cfg.sweep_trials;
      p.exact_set_rate = static_cast<double>(exact) / cfg.sweep_trials;
      p.user_hit_ratio = hit_sum / cfg.sweep_trials;
      p.mean_mse = mse_sum / cfg.sweep_trials;
      p.ci_halfwidth = 1.96 * std::sqrt(p.exact_set_rate *
                                        (1.0 - p.exact_set_rate) /
                                        cfg.sweep_trials);
      points.push_back(p);
      if (log)
        *log << "  " << method_name(method)
             << " exact=" << p.exact_set_rate << " mse=" << p.mean_mse << "\n";
    }
  }
  return points;
}

std::vector<TimingRow> run_timing(const ExperimentConfig& cfg,
                                  const NetworkSet* nets, std::ostream* log) {
  cfg.validate();
  ThreadGuard guard(1);
  recovery::SolverParams params;

  std::vector<TimingRow> rows;
  for (int ns : cfg.timing_ns) {
    for (int n : cfg.timing_n) {
      SystemConfig pc = cfg.system;
      pc.Ns = ns;
      pc.n = n;
      pc.validate();
      if (log) *log << "timing point Ns=" << ns << " n=" << n << "\n";
      const sysmodel::Dataset ds =
          sysmodel::generate_sweep_dataset(pc, n, cfg.timing_samples);
      const Dictionary dict = sysmodel::dictionary_for(pc);

      const bool wants_nets =
          std::find(cfg.methods.begin(), cfg.methods.end(), Method::brnn) !=
              cfg.methods.end() ||
          std::find(cfg.methods.begin(), cfg.methods.end(), Method::dnn) !=
              cfg.methods.end();

      // Networks must match this point's input width; fall back to fresh
      // initialization (weights do not change the arithmetic being timed).
      const neural::NetworkShape brnn_shape =
          neural::shape_for(pc, neural::Arch::brnn);
      const bool reuse = nets && nets->brnn.shape() == brnn_shape;
      std::optional<NetworkSet> fresh;
      if (wants_nets && !reuse) {
        const std::uint64_t init_seed = neural::default_init_seed(pc);
        fresh.emplace(NetworkSet{
            neural::Network<float>(brnn_shape, init_seed),
            neural::Network<float>(neural::shape_for(pc, neural::Arch::dnn),
                                   init_seed)});
      }
      const NetworkSet* local = reuse ? nets : (fresh ? &*fresh : nullptr);

      for (Method method : cfg.methods) {
        for (int w = 0; w < cfg.timing_warmup; ++w) {
          const auto& sample =
              ds.samples[static_cast<std::size_t>(w) % ds.samples.size()];
          run_trial(method, dict, sample, n, ds.noise_var, local, params);
        }
        const auto t0 = Clock::now();
        for (const auto& sample : ds.samples)
          run_trial(method, dict, sample, n, ds.noise_var, local, params);
        const double total =
            std::chrono::duration<double>(Clock::now() - t0).count();

        TimingRow row;
        row.method = method;
        row.Ns = ns;
        row.n = n;
        row.samples = static_cast<int>(ds.samples.size());
        row.mean_seconds = total / row.samples;
        rows.push_back(row);
        if (log)
          *log << "  " << method_name(method) << " "
               << row.mean_seconds * 1e6 << " us/sample\n";
      }
    }
  }
  return rows;
}

void emit_detection_csv(const std::vector<SweepPoint>& points,
                        const std::string& path) {
  std::string text =
      "method,axis,value,trials,exact_set_rate,ci_halfwidth,user_hit_ratio,"
      "mean_seconds\n";
  for (const SweepPoint& p : points) {
    text += method_name(p.method);
    text += ',';
    text += axis_name(p.axis);
    text += ',';
    text += std::to_string(p.value);
    text += ',';
    text += std::to_string(p.trials);
    text += ',';
    append_double(text, p.exact_set_rate);
    text += ',';
    append_double(text, p.ci_halfwidth);
    text += ',';
    append_double(text, p.user_hit_ratio);
    text += ',';
    append_double(text, p.mean_seconds);
    text += '\n';
  }
  write_text_file(path, text);
}

void emit_mse_csv(const std::vector<SweepPoint>& points,
                  const std::string& path) {
  std::string text = "method,axis,value,trials,mean_mse,empty_supports\n";
  for (const SweepPoint& p : points) {
    text += method_name(p.method);
    text += ',';
    text += axis_name(p.axis);
    text += ',';
    text += std::to_string(p.value);
    text += ',';
    text += std::to_string(p.trials);
    text += ',';
    append_double(text, p.mean_mse);
    text += ',';
    text += std::to_string(p.empty_supports);
    text += '\n';
  }
  write_text_file(path, text);
}

void emit_timing_csv(const std::vector<TimingRow>& rows,
                     const std::string& path) {
  std::string text = "method,Ns,n,samples,mean_seconds\n";
  for (const TimingRow& r : rows) {
    text += method_name(r.method);
    text += ',';
    text += std::to_string(r.Ns);
    text += ',';
    text += std::to_string(r.n);
    text += ',';
    text += std::to_string(r.samples);
    text += ',';
    append_double(text, r.mean_seconds);
    text += '\n';
  }
  write_text_file(path, text);
}

void emit_trace_csv(const neural::TrainingTrace& trace,
                    const std::string& path) {
  std::string text = "batch,train_loss,val_user_hit,val_exact_set\n";
  for (const neural::Checkpoint& c : trace.checkpoints) {
    text += std::to_string(c.batch);
    text += ',';
    append_double(text, c.train_loss);
    text += ',';
    append_double(text, c.val_user_hit);
    text += ',';
    append_double(text, c.val_exact_set);
    text += '\n';
  }
  write_text_file(path, text);
}

void emit_manifest(const ExperimentConfig& cfg,
                   const std::vector<std::string>& report_paths,
                   const std::string& path) {
  nlohmann::json manifest;
  manifest["experiment"] = cfg;
  nlohmann::json reports = nlohmann::json::object();
  for (const std::string& report : report_paths) {
    std::ifstream in(report, std::ios::binary);
    if (!in) throw std::runtime_error("cannot hash report: " + report);
    const std::string bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    char hex[19];
    std::snprintf(hex, sizeof(hex), "0x%016llx",
                  static_cast<unsigned long long>(
                      fnv1a64(bytes.data(), bytes.size())));
    reports[std::filesystem::path(report).filename().string()] = {
        {"bytes", bytes.size()}, {"fnv1a64", hex}};
  }
  manifest["reports"] = reports;
  write_text_file(path, manifest.dump(2) + "\n");
}

}  // namespace csmud::bench
