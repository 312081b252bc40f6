// fmtd: command-line driver for base training, fork generation, attacks and evaluation.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fmtd/config.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace fmtd;

namespace {

enum Exit { ok = 0, bad_config = 2, io_failure = 3, numeric_failure = 4 };

/// CRC32 over a file, or over every regular file of a directory (sorted by name, names included).
std::string content_hash(const fs::path& p) {
  if (fs::is_regular_file(p)) {
    const auto bytes = read_file_bytes(p);
    return hex32(crc32_of(bytes.data(), bytes.size()));
  }
  if (!fs::is_directory(p)) throw io_error("input not found: " + p.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(p))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<std::uint8_t> all;
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, p).generic_string();
    all.insert(all.end(), rel.begin(), rel.end());
    const auto bytes = read_file_bytes(f);
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  return hex32(crc32_of(all.data(), all.size()));
}

struct Run {
  std::string command;
  KeyValueConfig config;
  std::map<std::string, std::string> inputs;  // role -> path
  nlohmann::ordered_json sub_seeds = nlohmann::ordered_json::object();
  fs::path out;

  /// run.json and config.txt let the command be repeated exactly.
  void write_manifest(const nlohmann::ordered_json& summary) const {
    nlohmann::ordered_json j;
    j["tool"] = "fmtd";
    j["version"] = kToolVersion;
    j["command"] = command;
    nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
    for (const auto& [k, v] : config_defaults()) cfg[k] = config.str(k);
    j["config"] = cfg;
    nlohmann::ordered_json in = nlohmann::ordered_json::object();
    for (const auto& [role, path] : inputs) in[role] = {{"path", path}, {"crc32", content_hash(path)}};
    j["inputs"] = in;
    j["sub_seeds"] = sub_seeds;
    j["summary"] = summary;
    write_text(out / "run.json", j.dump(2) + "\n");
    write_text(out / "config.txt", config.dump());
  }

  static void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p);
    if (!f || !(f << text)) throw io_error("cannot write " + p.string());
  }
};

void add_input(Run& run, const std::string& role, const std::string& path) {
  if (!fs::exists(path)) throw io_error("input not found: " + path);
  run.inputs[role] = path;
}

void add_dataset_input(Run& run) {
  if (run.config.str("dataset.kind") == "mnist") {
    const fs::path dir = run.config.str("dataset.path");
    if (!fs::is_directory(dir)) throw io_error("dataset not found: " + dir.string());
    run.inputs["dataset"] = dir.string();
  }
}

std::vector<std::uint64_t> u64_list(const KeyValueConfig& c, const std::string& key) {
  std::vector<std::uint64_t> out;
  for (const auto& s : c.list(key)) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stoull(s, &pos));
      if (pos != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw config_error("config key '" + key + "' expects unsigned integers, got '" + s + "'");
    }
  }
  return out;
}

int cmd_train_base(Run& run) {
  add_dataset_input(run);
  const Datasets d = prepare_datasets(run.config);
  const std::uint64_t seed = run.config.u64("seed");
  const ArchitectureSpec a = architecture(run.config, d.train);
  run.sub_seeds["init"] = derive_seed(seed, stream::init);
  run.sub_seeds["shuffle"] = derive_seed(seed, stream::shuffle);
  run.sub_seeds["dropout"] = derive_seed(seed, stream::dropout);
  const auto result = train(init_model(a, seed), d.train, d.validation, train_hyper(run.config), stop_rule(run.config), seed);
  Model model = result.model;
  model.provenance = "base seed=" + std::to_string(seed);
  save_model(model, run.out / "base.fmtd");
  std::ofstream h(run.out / "history.csv");
  h << "epoch,train_loss,train_accuracy,val_loss,val_accuracy\n" << std::setprecision(10);
  for (const auto& e : result.history.epochs)
    h << e.epoch << ',' << e.train_loss << ',' << e.train_accuracy << ',' << e.val_loss << ',' << e.val_accuracy << "\n";
  const double test_acc = evaluate_dataset(Network<float>(model), d.test).accuracy;
  nlohmann::ordered_json s;
  s["model_hash"] = model_hash(model);
  s["architecture"] = a.to_string();
  s["best_epoch"] = result.history.best_epoch;
  s["epochs_run"] = result.history.epochs_run();
  s["val_accuracy"] = result.history.best_val_accuracy;
  s["test_accuracy"] = test_acc;
  s["seconds"] = result.history.seconds;
  run.write_manifest(s);
  std::cout << "base model " << (run.out / "base.fmtd").string() << " hash " << model_hash(model) << " val "
            << result.history.best_val_accuracy << " test " << test_acc << " epochs " << result.history.epochs_run()
            << "\n";
  return ok;
}

int cmd_fork(Run& run, const std::string& base_path) {
  const ForkConfig cfg = fork_config(run.config);
  add_input(run, "base", base_path);
  add_dataset_input(run);
  const Model base = load_model(base_path);
  const Datasets d = prepare_datasets(run.config);
  run.sub_seeds["forks_master"] = cfg.master_seed;
  for (std::size_t i = 0; i < cfg.n; ++i) run.sub_seeds["fork_" + std::to_string(i)] = cfg.fork_seed(i);
  const Ensemble e = generate_ensemble(base, cfg, d.train, d.validation, static_cast<unsigned>(run.config.u64("workers")));
  save_ensemble(e, run.out / "ensemble");
  double mean_epochs = 0;
  for (int ep : e.per_model_epochs) mean_epochs += ep;
  mean_epochs /= static_cast<double>(e.size());
  nlohmann::ordered_json s;
  s["n"] = e.size();
  s["w"] = cfg.w;
  s["base_hash"] = e.base_hash;
  s["per_model_val_accuracy"] = e.per_model_val_accuracy;
  s["per_model_epochs"] = e.per_model_epochs;
  s["mean_epochs"] = mean_epochs;
  s["wall_seconds"] = e.wall_seconds;
  run.write_manifest(s);
  std::cout << e.size() << " forks in " << (run.out / "ensemble").string() << ", mean retrain epochs " << mean_epochs
            << ", " << e.wall_seconds << " s\n";
  return ok;
}

int cmd_attack(Run& run, const std::string& model_path) {
  const AttackConfig acfg = attack_config(run.config);
  const SuiteKind kind = suite_kind(run.config);
  add_input(run, "model", model_path);
  add_dataset_input(run);
  const Model model = load_model(model_path);
  const Datasets d = prepare_datasets(run.config);
  const std::uint64_t seed = run.config.u64("seed");
  run.sub_seeds["attack_bases"] = derive_seed(seed, stream::attack_bases);
  const AttackSuite suite = build_attack_suite(model, d.test, kind, acfg, seed,
                                               run.config.u64("attack.count"),
                                               static_cast<unsigned>(run.config.u64("workers")));
  save_suite(suite, run.out / "suite");
  nlohmann::ordered_json s;
  s["kind"] = to_string(suite.kind);
  s["examples"] = suite.examples.size();
  s["converged"] = suite.converged_count();
  s["mean_distortion"] = suite.mean_distortion();
  s["base_model_asr"] = transfer_asr(Network<float>(model), suite);
  run.write_manifest(s);
  std::cout << suite.converged_count() << "/" << suite.examples.size() << " converged, mean distortion "
            << suite.mean_distortion() << "\n";
  return ok;
}

void write_reports(const Run& run, const std::vector<MetricsReport>& reports, const std::string& stem) {
  std::ofstream csv(run.out / (stem + ".csv"));
  write_reports_csv(csv, reports);
  if (!csv) throw io_error("cannot write " + (run.out / (stem + ".csv")).string());
  Run::write_text(run.out / (stem + ".json"), reports_json(reports).dump(2) + "\n");
}

int cmd_evaluate(Run& run, const std::string& ensemble_dir, const std::string& suite_dir,
                 std::optional<std::uint64_t> n_flag) {
  const DefenseConfig def = defense_config(run.config);
  const Fusion fusion_kind = fusion(run.config);
  add_input(run, "ensemble", ensemble_dir);
  if (!suite_dir.empty()) add_input(run, "suite", suite_dir);
  add_dataset_input(run);
  const Ensemble e = load_ensemble(ensemble_dir);
  const Datasets d = prepare_datasets(run.config);
  std::optional<AttackSuite> suite;
  if (!suite_dir.empty()) suite = load_suite(suite_dir);
  const CompiledEnsemble nets = compile(e);
  run.sub_seeds["serial_order"] = derive_seed(def.serial_seed, stream::serial_order);
  const std::size_t n = n_flag ? *n_flag : e.size();
  const EvalConfig cfg{fusion_kind, def, n, e.config.w, run.config.u64("seed")};
  const MetricsReport r = evaluate(nets, d.test, suite ? &*suite : nullptr, cfg);
  write_reports(run, {r}, "report");
  nlohmann::ordered_json s = report_json(r);
  s["identities_hold"] = metric_identities_hold(r);
  if (suite) {
    const auto h = distinct_count_histogram(nets, *suite);
    s["p_distinct_gt_1"] = h.p_d_greater_than_one();
    s["thwarted_given_d1"] = std::isnan(h.thwarted_given_d1) ? nlohmann::ordered_json() : nlohmann::ordered_json(h.thwarted_given_d1);
  }
  run.write_manifest(s);
  std::cout << "p7 " << r.p[7].value() << " p15 " << r.p[15].value();
  if (r.has_attack_side()) std::cout << " p1 " << r.p[1].value() << " p13 " << r.p[13].value();
  std::cout << "\n";
  return ok;
}

int cmd_sweep(Run& run, const std::string& base_path, const std::string& suite_dir) {
  add_input(run, "base", base_path);
  add_input(run, "suite", suite_dir);
  add_dataset_input(run);
  const Model base = load_model(base_path);
  const AttackSuite suite = load_suite(suite_dir);
  const Datasets d = prepare_datasets(run.config);
  const auto& c = run.config;
  SweepGrid g;
  g.n_values.clear();
  for (double v : c.num_list("sweep.n")) g.n_values.push_back(static_cast<std::size_t>(v));
  g.w_values = c.num_list("sweep.w");
  g.t_values = c.num_list("sweep.t");
  g.ts_values = c.num_list("sweep.ts");
  g.modes.clear();
  for (const auto& m : c.list("sweep.modes")) g.modes.push_back(parse_mode(m));
  g.seeds = u64_list(c, "sweep.seeds");
  g.serial_seed = c.u64("defense.serial_seed");
  const TrainHyper hyper = train_hyper(c);
  const auto workers = static_cast<unsigned>(c.u64("workers"));
  auto provide = [&](double w, std::uint64_t seed, std::size_t n) {
    const ForkConfig fc{n, w, derive_seed(seed, stream::forks), hyper};
    run.sub_seeds["w=" + std::to_string(w) + ",seed=" + std::to_string(seed)] = fc.master_seed;
    const fs::path dir = run.out / "ensembles" / ("w" + std::to_string(w) + "_s" + std::to_string(seed));
    Ensemble e = generate_ensemble(base, fc, d.train, d.validation, workers);
    save_ensemble(e, dir);
    return e;
  };
  const auto reports = sweep(g, provide, d.test, suite);
  write_reports(run, reports, "sweep");
  bool identities = true;
  for (const auto& r : reports) identities = identities && metric_identities_hold(r);
  nlohmann::ordered_json s;
  s["rows"] = reports.size();
  s["identities_hold"] = identities;
  run.write_manifest(s);
  std::cout << reports.size() << " sweep rows written to " << (run.out / "sweep.csv").string() << "\n";
  return ok;
}

int cmd_bench(Run& run, const std::string& ensemble_dir) {
  add_input(run, "ensemble", ensemble_dir);
  add_dataset_input(run);
  const Ensemble e = load_ensemble(ensemble_dir);
  const Datasets d = prepare_datasets(run.config);
  BenchOptions opt;
  opt.batch_sizes.clear();
  for (double b : run.config.num_list("bench.batch_sizes")) opt.batch_sizes.push_back(static_cast<std::size_t>(b));
  opt.ts_values = run.config.num_list("bench.ts");
  opt.repetitions = run.config.u64("bench.repetitions");
  opt.warmup = run.config.u64("bench.warmup");
  opt.seed = run.config.u64("seed");
  run.sub_seeds["bench_order"] = opt.seed;
  const BenchReport rep = bench_inference(compile(e), d.test, opt);
  std::ofstream csv(run.out / "bench.csv");
  write_bench_csv(csv, rep);
  nlohmann::ordered_json s;
  s["ensemble_size"] = rep.ensemble_size;
  for (const auto& [ts, m] : rep.mean_models_used) {
    std::ostringstream key_os;
    key_os << "Ts=" << ts;
    const std::string key = key_os.str();
    s["mean_models_used"][key] = m;
    s["cost_ratio"][key] = rep.cost_ratio.at(ts);
    s["models_used_distribution"][key] = rep.models_used_distribution.at(ts);
  }
  run.write_manifest(s);
  for (const auto& [ts, m] : rep.mean_models_used) std::cout << "Ts " << ts << " mean models used " << m << "\n";
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fork moving-target defense lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  std::string config_path, out_dir, data_dir, base_path, model_path, ensemble_dir, suite_dir;
  std::optional<std::uint64_t> seed, n;
  std::optional<double> w, t, ts, kappa;
  std::string mode, fusion_name, arch_name;
  bool synthetic = false;
  std::vector<std::string> sets;
  unsigned workers = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "run seed");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--data", data_dir, "MNIST IDX directory");
    sub->add_flag("--synthetic", synthetic, "use the synthetic dataset");
    sub->add_option("--set", sets, "override any config key (key=value)");
    sub->add_option("--workers", workers, "worker threads");
    sub->add_option("--arch", arch_name, "architecture preset or descriptor");
  };
  auto* train_cmd = app.add_subcommand("train-base", "train the base model");
  common(train_cmd);

  auto* fork_cmd = app.add_subcommand("fork", "generate a fork ensemble from a base model");
  common(fork_cmd);
  fork_cmd->add_option("--base", base_path, "base model file")->required();
  fork_cmd->add_option("--n", n, "ensemble size N");
  fork_cmd->add_option("--w", w, "perturbation intensity");

  auto* attack_cmd = app.add_subcommand("attack", "build a C&W attack suite against a model");
  common(attack_cmd);
  attack_cmd->add_option("--model", model_path, "model file")->required();
  attack_cmd->add_option("--kappa", kappa, "confidence parameter");

  auto* eval_cmd = app.add_subcommand("evaluate", "detection and thwarting metrics for an ensemble");
  common(eval_cmd);
  eval_cmd->add_option("--ensemble", ensemble_dir, "ensemble directory")->required();
  eval_cmd->add_option("--suite", suite_dir, "attack suite directory");
  eval_cmd->add_option("--n", n, "use the first N forks");
  eval_cmd->add_option("--t", t, "full-ensemble threshold T");
  eval_cmd->add_option("--ts", ts, "serial threshold Ts");
  eval_cmd->add_option("--mode", mode, "autonomous | human-in-the-loop");
  eval_cmd->add_option("--fusion", fusion_name, "full | serial");

  auto* sweep_cmd = app.add_subcommand("sweep", "metrics over a grid of N, w, thresholds, modes and seeds");
  common(sweep_cmd);
  sweep_cmd->add_option("--base", base_path, "base model file")->required();
  sweep_cmd->add_option("--suite", suite_dir, "attack suite directory")->required();

  auto* bench_cmd = app.add_subcommand("bench", "inference cost of full and serial fusion");
  common(bench_cmd);
  bench_cmd->add_option("--ensemble", ensemble_dir, "ensemble directory")->required();
  bench_cmd->add_option("--ts", ts, "single serial threshold (overrides bench.ts)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : bad_config;
  }

  try {
    Run run;
    run.command = app.get_subcommands().front()->get_name();
    run.config = config_path.empty() ? KeyValueConfig() : KeyValueConfig::from_file(config_path);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw config_error("--set expects key=value, got '" + kv + "'");
      run.config.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    // Dedicated flags win over --set and the config file.
    if (seed) run.config.set("seed", std::to_string(*seed));
    if (!out_dir.empty()) run.config.set("out", out_dir);
    if (!data_dir.empty()) {
      run.config.set("dataset.kind", "mnist");
      run.config.set("dataset.path", data_dir);
    }
    if (synthetic) run.config.set("dataset.kind", "synthetic");
    if (workers) run.config.set("workers", std::to_string(workers));
    if (!arch_name.empty()) run.config.set("model.arch", arch_name);
    if (n && run.command == "fork") run.config.set("fork.n", std::to_string(*n));
    auto num = [](double v) {
      std::ostringstream os;
      os << std::setprecision(17) << v;
      return os.str();
    };
    if (w) run.config.set("fork.w", num(*w));
    if (t) run.config.set("defense.t", num(*t));
    if (ts) {
      run.config.set("defense.ts", num(*ts));
      if (run.command == "bench") run.config.set("bench.ts", num(*ts));
    }
    if (kappa) run.config.set("attack.kappa", num(*kappa));
    if (!mode.empty()) run.config.set("defense.mode", mode);
    if (!fusion_name.empty()) run.config.set("defense.fusion", fusion_name);

    run.out = run.config.str("out");
    fs::create_directories(run.out);

    if (run.command == "train-base") return cmd_train_base(run);
    if (run.command == "fork") return cmd_fork(run, base_path);
    if (run.command == "attack") return cmd_attack(run, model_path);
    if (run.command == "evaluate") return cmd_evaluate(run, ensemble_dir, suite_dir, n);
    if (run.command == "sweep") return cmd_sweep(run, base_path, suite_dir);
    return cmd_bench(run, ensemble_dir);
  } catch (const config_error& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return bad_config;
  } catch (const shape_error& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return bad_config;
  } catch (const format_error& e) {
    std::cerr << (e.which() == format_error::kind::checksum ? "checksum error: " : "format error: ") << e.what() << "\n";
    return io_failure;
  } catch (const io_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return io_failure;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return io_failure;
  } catch (const numeric_error& e) {
    std::cerr << "numeric failure: " << e.what() << " (last good epoch " << e.last_good_epoch() << ")\n";
    return numeric_failure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return numeric_failure;
  }
}
