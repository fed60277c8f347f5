// Command line front end: dataset generation, network training, model
// evaluation, the benchmark suite, and embedded self-tests. Exit codes:
// 0 success, 1 failed check, 2 configuration / usage error, 3 missing
// artifact, 130 when a training run was interrupted (latest state is
// persisted first).

#include <algorithm>
#include <atomic>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "csmud/bench.hpp"
#include "csmud/config.hpp"
#include "csmud/neural.hpp"
#include "csmud/recovery.hpp"
#include "csmud/selfcheck.hpp"
#include "csmud/sysmodel.hpp"
#include "csmud/threading.hpp"

namespace fs = std::filesystem;
using namespace csmud;

namespace {

std::atomic<bool> g_interrupt{false};

void handle_sigint(int) { g_interrupt.store(true); }

struct GlobalOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool quiet = false;
  bool dump_config = false;
};

// Every key in `incoming` must already exist in `reference` (recursively),
// so typos in config files fail loudly instead of being ignored.
void check_known_keys(const nlohmann::json& reference,
                      const nlohmann::json& incoming,
                      const std::string& prefix) {
  for (auto it = incoming.begin(); it != incoming.end(); ++it) {
    if (!reference.contains(it.key()))
      throw ConfigError("unknown config key: " + prefix + it.key());
    if (it->is_object() && reference[it.key()].is_object())
      check_known_keys(reference[it.key()], *it, prefix + it.key() + ".");
  }
}

void apply_override(nlohmann::json& merged, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must be key=value: " + spec);
  const std::string dotted = spec.substr(0, eq);
  const std::string value = spec.substr(eq + 1);

  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    parts.push_back(dotted.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }

  nlohmann::json* node = &merged;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object())
      throw ConfigError("unknown config key: " + dotted);
    node = &(*node)[parts[i]];
  }
  if (!node->contains(parts.back()))
    throw ConfigError("unknown config key: " + dotted);

  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(value);
  } catch (const nlohmann::json::exception&) {
    parsed = value;  // bare strings need no quoting
  }
  (*node)[parts.back()] = parsed;
}

nlohmann::json merged_config_json(const GlobalOpts& g) {
  nlohmann::json merged = bench::ExperimentConfig{};
  if (!g.config_path.empty()) {
    if (!fs::exists(g.config_path))
      throw MissingArtifactError("config file not found: " + g.config_path);
    std::ifstream in(g.config_path);
    nlohmann::json file;
    try {
      in >> file;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("cannot parse config " + g.config_path + ": " +
                        e.what());
    }
    check_known_keys(merged, file, "");
    merged.merge_patch(file);
  }
  for (const std::string& o : g.overrides) apply_override(merged, o);
  if (g.seed) merged["system"]["seed"] = *g.seed;
  return merged;
}

bench::ExperimentConfig resolve_config(const GlobalOpts& g) {
  const nlohmann::json merged = merged_config_json(g);
  bench::ExperimentConfig cfg;
  try {
    cfg = merged.get<bench::ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void resolve_threads(const GlobalOpts& g) {
  if (g.threads) {
    if (*g.threads < 0) throw ConfigError("--threads must be >= 0");
    set_max_threads(*g.threads);
    return;
  }
  if (const char* env = std::getenv("CSMUD_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 0)
      throw ConfigError(std::string("invalid CSMUD_THREADS: ") + env);
    set_max_threads(static_cast<int>(v));
  }
}

std::ostream* log_stream(const GlobalOpts& g) {
  return g.quiet ? nullptr : &std::cerr;
}

int count_for_split(const bench::ExperimentConfig& cfg, sysmodel::Split s) {
  switch (s) {
    case sysmodel::Split::train: return cfg.train_samples;
    case sysmodel::Split::val: return cfg.val_samples;
    case sysmodel::Split::test: return cfg.test_samples;
  }
  return 0;
}

// --- generate ---------------------------------------------------------------

struct GenerateOpts {
  std::string split = "all";
  int count = 0;  // 0 = per-config split size
  std::string out = "data";
  bool analytic = false;
};

int cmd_generate(const bench::ExperimentConfig& cfg, const GenerateOpts& opt,
                 std::ostream* log) {
  std::vector<sysmodel::Split> splits;
  if (opt.split == "all") {
    splits = {sysmodel::Split::train, sysmodel::Split::val,
              sysmodel::Split::test};
  } else {
    splits = {sysmodel::split_from_name(opt.split)};
  }
  // n = 0 means every label is the empty set, which the softmax activity
  // head cannot train on.
  if (cfg.system.n == 0 &&
      std::find(splits.begin(), splits.end(), sysmodel::Split::train) !=
          splits.end())
    throw ConfigError("system.n = 0 makes train labels degenerate");
  fs::create_directories(opt.out);

  for (sysmodel::Split s : splits) {
    const int count = opt.count > 0 ? opt.count : count_for_split(cfg, s);
    if (log)
      *log << "generating " << count << " " << sysmodel::split_name(s)
           << " samples\n";
    const auto ds =
        sysmodel::generate_dataset(cfg.system, s, count, opt.analytic);
    const fs::path path =
        fs::path(opt.out) / (sysmodel::split_name(s) + ".bin");
    sysmodel::save_dataset(ds, path.string());
    std::cout << path.string() << "\n";
  }
  return 0;
}

// --- train ------------------------------------------------------------------

struct TrainOpts {
  std::string arch = "brnn";
  std::string out = "model.bin";
  std::string data_dir;  // empty = generate in memory
  std::string trace_csv;
  std::string resume;  // continue training an existing model
};

int cmd_train(const bench::ExperimentConfig& cfg, const TrainOpts& opt,
              std::ostream* log) {
  const neural::Arch arch = neural::arch_from_name(opt.arch);

  SystemConfig system = cfg.system;
  neural::LabeledSet train_set, val_set;
  if (!opt.data_dir.empty()) {
    const auto train_path = (fs::path(opt.data_dir) / "train.bin").string();
    const auto val_path = (fs::path(opt.data_dir) / "val.bin").string();
    auto train_ds = sysmodel::load_dataset(train_path);
    auto val_ds = sysmodel::load_dataset(val_path);
    if (!(train_ds.config == val_ds.config))
      throw ConfigError("train/val datasets disagree on the system preset");
    system = train_ds.config;
    train_set = neural::featurize_dataset(train_ds);
    val_set = neural::featurize_dataset(val_ds);
  } else {
    if (log) *log << "generating " << cfg.train_samples << " train samples\n";
    auto train_ds = sysmodel::generate_dataset(
        system, sysmodel::Split::train, cfg.train_samples);
    train_set = neural::featurize_dataset(train_ds);
    train_ds.samples.clear();
    if (log) *log << "generating " << cfg.val_samples << " val samples\n";
    auto val_ds = sysmodel::generate_dataset(system, sysmodel::Split::val,
                                             cfg.val_samples);
    val_set = neural::featurize_dataset(val_ds);
  }

  std::optional<neural::Network<float>> net;
  long prior_batches = 0;
  if (!opt.resume.empty()) {
    net.emplace(neural::load_model<float>(opt.resume));
    if (net->shape() != neural::shape_for(system, arch))
      throw ConfigError("resume model does not match the config and --arch");
    prior_batches = net->trained_batches();
    if (log)
      *log << "resuming " << opt.resume << " after " << prior_batches
           << " batches\n";
  } else {
    net.emplace(neural::shape_for(system, arch),
                neural::default_init_seed(system));
  }
  if (log) *log << "training " << opt.arch << "\n";
  auto trace = neural::train(*net, train_set, val_set, cfg.train, &g_interrupt);
  // A resumed run continues the batch numbering where the model left off.
  for (auto& c : trace.checkpoints) c.batch += prior_batches;

  neural::save_model(*net, opt.out, /*with_optimizer_state=*/true);
  if (!opt.trace_csv.empty()) bench::emit_trace_csv(trace, opt.trace_csv);

  nlohmann::json summary;
  summary["model"] = opt.out;
  summary["batches"] = prior_batches + trace.total_batches;
  summary["interrupted"] = trace.interrupted;
  summary["restored_best"] = trace.restored_best;
  if (trace.best_index >= 0) {
    const auto& best =
        trace.checkpoints[static_cast<std::size_t>(trace.best_index)];
    summary["best_val_exact_set"] = best.val_exact_set;
    summary["best_val_user_hit"] = best.val_user_hit;
  }
  std::cout << summary.dump(2) << "\n";

  if (trace.interrupted) {
    if (log) *log << "interrupted; latest state saved to " << opt.out << "\n";
    return 130;
  }
  return 0;
}

// --- eval -------------------------------------------------------------------

struct EvalOpts {
  std::string model;
  std::string data;  // empty = generate the test split
};

template <typename Scalar>
nlohmann::json eval_with(const std::string& model_path,
                         const sysmodel::Dataset& ds, int batch_size) {
  const auto net = neural::load_model<Scalar>(model_path);
  if (net.shape().users != ds.config.K ||
      net.shape().block_size != ds.config.L ||
      net.shape().measurement_len != ds.config.measurement_len())
    throw ConfigError("model shape does not match the dataset preset");
  const auto set = neural::featurize_dataset(ds);
  const auto m = neural::evaluate(net, set, batch_size);
  nlohmann::json out;
  out["model"] = model_path;
  out["arch"] = neural::arch_name(net.shape().arch);
  out["count"] = set.count;
  out["exact_set_rate"] = m.exact_set_rate;
  out["user_hit_ratio"] = m.user_hit_ratio;
  return out;
}

int cmd_eval(const bench::ExperimentConfig& cfg, const EvalOpts& opt,
             std::ostream* log) {
  sysmodel::Dataset ds;
  if (!opt.data.empty()) {
    ds = sysmodel::load_dataset(opt.data);
  } else {
    if (log) *log << "generating " << cfg.test_samples << " test samples\n";
    ds = sysmodel::generate_dataset(cfg.system, sysmodel::Split::test,
                                    cfg.test_samples);
  }
  const auto info = neural::peek_model(opt.model);
  const nlohmann::json out =
      info.scalar == "f64"
          ? eval_with<double>(opt.model, ds, cfg.train.batch_size)
          : eval_with<float>(opt.model, ds, cfg.train.batch_size);
  std::cout << out.dump(2) << "\n";
  return 0;
}

// --- bench ------------------------------------------------------------------

struct BenchOpts {
  std::string mode = "all";
  std::string out = "reports";
  std::string brnn_model;
  std::string dnn_model;
};

int cmd_bench(const bench::ExperimentConfig& cfg, const BenchOpts& opt,
              std::ostream* log) {
  if (opt.mode != "all" && opt.mode != "convergence" && opt.mode != "sweep" &&
      opt.mode != "timing")
    throw ConfigError("unknown bench mode: " + opt.mode);
  fs::create_directories(opt.out);
  const auto path_of = [&](const char* name) {
    return (fs::path(opt.out) / name).string();
  };
  std::vector<std::string> reports;

  std::optional<bench::NetworkSet> nets;
  if (opt.mode == "all" || opt.mode == "convergence") {
    auto conv = bench::run_convergence(cfg, log);
    bench::emit_trace_csv(conv.brnn_trace, path_of("convergence_brnn.csv"));
    bench::emit_trace_csv(conv.dnn_trace, path_of("convergence_dnn.csv"));
    reports.push_back(path_of("convergence_brnn.csv"));
    reports.push_back(path_of("convergence_dnn.csv"));
    neural::save_model(conv.nets.brnn, path_of("brnn.model"), false);
    neural::save_model(conv.nets.dnn, path_of("dnn.model"), false);
    nets.emplace(std::move(conv.nets));
  } else if (!opt.brnn_model.empty() && !opt.dnn_model.empty()) {
    nets.emplace(bench::NetworkSet{
        neural::load_model<float>(opt.brnn_model),
        neural::load_model<float>(opt.dnn_model)});
  }

  if (opt.mode == "all" || opt.mode == "sweep") {
    const auto points =
        bench::run_sweep(cfg, nets ? &*nets : nullptr, log);
    bench::emit_detection_csv(points, path_of("detection.csv"));
    bench::emit_mse_csv(points, path_of("mse.csv"));
    reports.push_back(path_of("detection.csv"));
    reports.push_back(path_of("mse.csv"));
  }

  if (opt.mode == "all" || opt.mode == "timing") {
    const auto rows = bench::run_timing(cfg, nets ? &*nets : nullptr, log);
    bench::emit_timing_csv(rows, path_of("timing.csv"));
    reports.push_back(path_of("timing.csv"));
  }

  bench::emit_manifest(cfg, reports, path_of("manifest.json"));
  std::cout << path_of("manifest.json") << "\n";
  return 0;
}

// --- check ------------------------------------------------------------------

struct CheckOpts {
  std::string dataset;
  std::string model;
};

// Embedded self-tests, plus integrity checks of any artifacts named on the
// command line. Reads at most those artifacts, writes nothing.
int cmd_check(const CheckOpts& opt) {
  int failures = 0;
  const auto report = [&](const std::string& name, bool ok,
                          const std::string& detail) {
    std::cout << (ok ? "ok    " : "FAIL  ") << name;
    if (!detail.empty()) std::cout << ": " << detail;
    std::cout << "\n";
    if (!ok) ++failures;
  };

  for (const auto& r : selfcheck::run_embedded_checks())
    report(r.name, r.passed, r.detail);

  if (!opt.dataset.empty()) {
    try {
      const auto info = sysmodel::peek_dataset(opt.dataset);
      auto ds = sysmodel::load_dataset(opt.dataset);
      report("dataset " + opt.dataset, true,
             sysmodel::split_name(info.split) + ", " +
                 std::to_string(ds.samples.size()) + " samples");
    } catch (const MissingArtifactError&) {
      throw;  // missing file keeps its own exit code
    } catch (const std::exception& e) {
      report("dataset " + opt.dataset, false, e.what());
    }
  }
  if (!opt.model.empty()) {
    try {
      const auto info = neural::peek_model(opt.model);
      if (info.scalar == "f64")
        neural::load_model<double>(opt.model);
      else
        neural::load_model<float>(opt.model);
      report("model " + opt.model, true,
             neural::arch_name(info.shape.arch) + ", " +
                 std::to_string(info.trained_batches) + " batches");
    } catch (const MissingArtifactError&) {
      throw;
    } catch (const std::exception& e) {
      report("model " + opt.model, false, e.what());
    }
  }

  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, handle_sigint);

  CLI::App app{"block-sparse multiuser detection workbench"};
  app.require_subcommand(0, 1);

  GlobalOpts g;
  std::uint64_t seed_val = 0;
  int threads_val = 0;
  app.add_option("--config", g.config_path, "JSON experiment config file");
  app.add_option("--override", g.overrides,
                 "dotted key=value config override, repeatable "
                 "(e.g. system.K=100)");
  auto* seed_opt =
      app.add_option("--seed", seed_val, "override the master seed");
  auto* threads_opt = app.add_option(
      "--threads", threads_val,
      "worker threads (0 = all cores; env CSMUD_THREADS as fallback)");
  app.add_flag("--quiet", g.quiet, "suppress progress logging");
  app.add_flag("--dump-config", g.dump_config,
               "print the merged config and exit");

  GenerateOpts gen;
  auto* cmd_gen = app.add_subcommand("generate", "write dataset containers");
  cmd_gen->add_option("--split", gen.split, "train, val, test, or all")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  cmd_gen->add_option("--count", gen.count,
                      "samples per split (0 = per-config sizes)");
  cmd_gen->add_option("--out", gen.out, "output directory");
  cmd_gen->add_flag("--analytic", gen.analytic,
                    "calibrate noise analytically instead of empirically");

  TrainOpts tr;
  auto* cmd_tr = app.add_subcommand("train", "train a detection network");
  cmd_tr->add_option("--arch", tr.arch, "brnn or dnn")
      ->check(CLI::IsMember({"brnn", "dnn"}));
  cmd_tr->add_option("--out", tr.out, "model output path");
  cmd_tr->add_option("--data", tr.data_dir,
                     "directory with train.bin/val.bin (default: generate)");
  cmd_tr->add_option("--trace", tr.trace_csv, "write the training trace CSV");
  cmd_tr->add_option("--resume", tr.resume,
                     "continue training this model; the trace keeps counting "
                     "from its batch total");

  EvalOpts ev;
  auto* cmd_ev = app.add_subcommand("eval", "evaluate a model on a dataset");
  cmd_ev->add_option("--model", ev.model, "model file")->required();
  cmd_ev->add_option("--data", ev.data,
                     "dataset file (default: generate the test split)");

  BenchOpts be;
  auto* cmd_be = app.add_subcommand("bench", "run the benchmark suite");
  cmd_be->add_option("--mode", be.mode, "all, convergence, sweep, or timing");
  cmd_be->add_option("--out", be.out, "report directory");
  cmd_be->add_option("--brnn", be.brnn_model,
                     "trained brnn model for sweep/timing modes");
  cmd_be->add_option("--dnn", be.dnn_model,
                     "trained dnn model for sweep/timing modes");

  CheckOpts ck;
  auto* cmd_ck = app.add_subcommand(
      "check", "run embedded self-tests, optionally verify artifacts");
  cmd_ck->add_option("--dataset", ck.dataset, "dataset file to verify");
  cmd_ck->add_option("--model", ck.model, "model file to verify");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (seed_opt->count() > 0) g.seed = seed_val;
  if (threads_opt->count() > 0) g.threads = threads_val;

  try {
    resolve_threads(g);
    if (g.dump_config) {
      std::cout << merged_config_json(g).dump(2) << "\n";
      return 0;
    }
    std::ostream* log = log_stream(g);
    if (cmd_ck->parsed()) return cmd_check(ck);
    const bench::ExperimentConfig cfg = resolve_config(g);
    if (cmd_gen->parsed()) return cmd_generate(cfg, gen, log);
    if (cmd_tr->parsed()) return cmd_train(cfg, tr, log);
    if (cmd_ev->parsed()) return cmd_eval(cfg, ev, log);
    if (cmd_be->parsed()) return cmd_bench(cfg, be, log);
    std::cerr << app.help() << "\n";
    return 2;
  } catch (const MissingArtifactError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IntegrityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
