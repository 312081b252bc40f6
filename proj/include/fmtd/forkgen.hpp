#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fmtd/serialize.hpp"
#include "fmtd/train.hpp"

namespace fmtd {

struct ForkConfig {
  std::size_t n = 20;     // ensemble size N
  double w = 0.2;         // perturbation intensity
  std::uint64_t master_seed = 0;
  TrainHyper retrain_hyper{};

  void validate() const {
    if (n < 1) throw config_error("fork count N must be >= 1");
    if (!(w >= 0.0) || !std::isfinite(w)) throw config_error("perturbation intensity w must be >= 0");
    retrain_hyper.validate();
  }

  /// Seed of fork `index`; a fork's model depends only on this, not on N.
  std::uint64_t fork_seed(std::size_t index) const {
    return derive_seed(derive_seed(master_seed, stream::forks), static_cast<std::uint64_t>(index));
  }
};

/// Add u ~ Uniform[w*min(M), w*max(M)] to every element of every parameter tensor M
/// (weights and biases alike). min/max are taken over the unperturbed tensor.
template <class T>
ModelParams<T> perturb_params(const ModelParams<T>& model, double w, std::uint64_t seed) {
  if (!(w >= 0.0)) throw config_error("perturbation intensity w must be >= 0");
  ModelParams<T> out = model;
  out.provenance = model.provenance + " | perturb w=" + std::to_string(w) + " seed=" + std::to_string(seed);
  Rng rng(derive_seed(seed, stream::perturb));
  for (auto& nt : out.tensors) {
    auto vals = nt.tensor.values();
    if (vals.empty()) continue;
    const auto [mn, mx] = std::minmax_element(vals.begin(), vals.end());
    const double lo = w * static_cast<double>(*mn), hi = w * static_cast<double>(*mx);
    for (auto& v : vals) {
      const double base = static_cast<double>(v);
      const double u = lo + (hi - lo) * uniform01(rng);
      T next = static_cast<T>(base + u);
      // Rounding to T can leave the offset a fraction of an ulp outside [lo, hi]; step back in.
      for (int guard = 0; guard < 4 && static_cast<double>(next) - base > hi; ++guard)
        next = std::nextafter(next, -std::numeric_limits<T>::infinity());
      for (int guard = 0; guard < 4 && static_cast<double>(next) - base < lo; ++guard)
        next = std::nextafter(next, std::numeric_limits<T>::infinity());
      v = next;
    }
  }
  return out;
}

/// Perturb the base model and retrain it under the plateau rule.
template <class T>
TrainResult<T> fork_model(const ModelParams<T>& base, double w, std::uint64_t seed, const LabeledDataset& train_set,
                          const LabeledDataset& val_set, const TrainHyper& hyper) {
  auto result = train(perturb_params(base, w, seed), train_set, val_set, hyper, StopRule::plateau, seed);
  result.model.provenance += " | retrained epochs=" + std::to_string(result.history.epochs_run()) +
                             " best=" + std::to_string(result.history.best_epoch);
  return result;
}

struct Ensemble {
  std::vector<Model> models;
  std::string base_hash;
  ForkConfig config;
  std::vector<double> per_model_val_accuracy;
  std::vector<int> per_model_epochs;  // retraining epochs run
  std::vector<std::uint64_t> seeds;
  double wall_seconds = 0.0;

  std::size_t size() const { return models.size(); }

  /// The first `n` forks; identical to generating with N = n under the same seed.
  Ensemble prefix(std::size_t n) const {
    if (n > size()) throw config_error("ensemble prefix " + std::to_string(n) + " exceeds size " + std::to_string(size()));
    Ensemble e = *this;
    e.models.resize(n);
    e.per_model_val_accuracy.resize(n);
    e.per_model_epochs.resize(n);
    e.seeds.resize(n);
    e.config.n = n;
    return e;
  }
};

/// Generate N forks. Forks are independent and may run on `workers` threads; the result
/// does not depend on completion order.
inline Ensemble generate_ensemble(const Model& base, const ForkConfig& config, const LabeledDataset& train_set,
                                  const LabeledDataset& val_set, unsigned workers = 1) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Ensemble e;
  e.base_hash = model_hash(base);
  e.config = config;
  e.models.resize(config.n);
  e.per_model_val_accuracy.resize(config.n);
  e.per_model_epochs.resize(config.n);
  for (std::size_t i = 0; i < config.n; ++i) e.seeds.push_back(config.fork_seed(i));

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> failures(config.n);
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < config.n;) {
      try {
        auto r = fork_model(base, config.w, e.seeds[i], train_set, val_set, config.retrain_hyper);
        e.per_model_val_accuracy[i] = r.history.best_val_accuracy;
        e.per_model_epochs[i] = r.history.epochs_run();
        r.model.provenance = "fork " + std::to_string(i) + " of base " + e.base_hash + " | " + r.model.provenance;
        e.models[i] = std::move(r.model);
      } catch (...) {
        failures[i] = std::current_exception();
      }
    }
  };
  const unsigned threads = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(config.n)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (std::size_t i = 0; i < config.n; ++i) {
    if (!failures[i]) continue;
    try {
      std::rethrow_exception(failures[i]);
    } catch (const numeric_error& err) {
      throw numeric_error("fork " + std::to_string(i) + " failed: " + err.what(), err.last_good_epoch());
    } catch (const std::exception& err) {
      throw error("fork " + std::to_string(i) + " failed: " + err.what());
    }
  }
  e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return e;
}

inline std::string fork_file_name(std::size_t i) {
  std::ostringstream os;
  os << "fork_" << std::setw(3) << std::setfill('0') << i << ".fmtd";
  return os.str();
}

/// Directory layout: manifest.txt plus fork_NNN.fmtd per model.
inline void save_ensemble(const Ensemble& e, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream m(dir / "manifest.txt");
  if (!m) throw io_error("cannot write " + (dir / "manifest.txt").string());
  m << std::setprecision(17);
  m << "fmtd-ensemble 1\n";
  m << "base_hash " << e.base_hash << "\n";
  m << "n " << e.size() << "\n";
  m << "w " << e.config.w << "\n";
  m << "master_seed " << e.config.master_seed << "\n";
  const auto& h = e.config.retrain_hyper;
  m << "retrain " << h.learning_rate << ' ' << h.momentum << ' ' << h.dropout_rate << ' ' << h.batch_size << ' '
    << h.max_epochs << ' ' << h.plateau_patience << "\n";
  m << "wall_seconds " << e.wall_seconds << "\n";
  for (std::size_t i = 0; i < e.size(); ++i) {
    save_model(e.models[i], dir / fork_file_name(i));
    m << "fork " << i << " seed " << e.seeds[i] << " val_accuracy " << e.per_model_val_accuracy[i] << " epochs "
      << e.per_model_epochs[i] << " file " << fork_file_name(i) << " hash " << model_hash(e.models[i]) << "\n";
  }
  if (!m) throw io_error("write failed for ensemble manifest in " + dir.string());
}

inline Ensemble load_ensemble(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.txt");
  if (!m) throw io_error("ensemble manifest not found in " + dir.string());
  Ensemble e;
  std::string line;
  std::size_t n = 0;
  while (std::getline(m, line)) {
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "fmtd-ensemble") {
      int version = 0;
      is >> version;
      if (version != 1) throw format_error(format_error::kind::version, "unsupported ensemble manifest version");
    } else if (key == "base_hash") {
      is >> e.base_hash;
    } else if (key == "n") {
      is >> n;
    } else if (key == "w") {
      is >> e.config.w;
    } else if (key == "master_seed") {
      is >> e.config.master_seed;
    } else if (key == "retrain") {
      auto& h = e.config.retrain_hyper;
      is >> h.learning_rate >> h.momentum >> h.dropout_rate >> h.batch_size >> h.max_epochs >> h.plateau_patience;
    } else if (key == "wall_seconds") {
      is >> e.wall_seconds;
    } else if (key == "fork") {
      std::size_t idx = 0;
      std::string k1, k2, k3, k4, k5, file, hash;
      std::uint64_t seed = 0;
      double acc = 0;
      int epochs = 0;
      is >> idx >> k1 >> seed >> k2 >> acc >> k3 >> epochs >> k4 >> file >> k5 >> hash;
      if (!is || idx != e.models.size())
        throw format_error(format_error::kind::malformed, "bad fork line in ensemble manifest: " + line);
      Model model = load_model(dir / file);
      if (model_hash(model) != hash)
        throw format_error(format_error::kind::checksum, "fork " + std::to_string(idx) + " hash differs from manifest");
      e.models.push_back(std::move(model));
      e.seeds.push_back(seed);
      e.per_model_val_accuracy.push_back(acc);
      e.per_model_epochs.push_back(epochs);
    }
  }
  if (n != e.models.size())
    throw format_error(format_error::kind::malformed, "ensemble manifest lists " + std::to_string(e.models.size()) +
                                                          " forks, header says " + std::to_string(n));
  e.config.n = n;
  return e;
}

}  // namespace fmtd
