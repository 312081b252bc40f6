#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fmtd/attack.hpp"
#include "fmtd/bench.hpp"
#include "fmtd/data.hpp"
#include "fmtd/defense.hpp"
#include "fmtd/eval.hpp"
#include "fmtd/forkgen.hpp"
#include "fmtd/train.hpp"

namespace fmtd {

inline constexpr const char* kToolVersion = "0.1.0";

/// Every recognised key with its default. Files hold `key = value` lines; '#' starts a comment.
inline const std::map<std::string, std::string>& config_defaults() {
  static const std::map<std::string, std::string> d = {
      {"seed", "0"},
      {"out", "fmtd-out"},
      {"workers", "1"},
      {"dataset.kind", "mnist"},
      {"dataset.path", "data/mnist-desk"},
      {"dataset.split_seed", "0"},
      {"dataset.test_count", "2000"},
      {"dataset.validation_count", "1000"},
      {"synthetic.classes", "2"},
      {"synthetic.per_class", "200"},
      {"synthetic.side", "8"},
      {"synthetic.noise", "0.05"},
      {"model.arch", "cnn-a-small"},
      {"train.learning_rate", "0.1"},
      {"train.momentum", "0.9"},
      {"train.lr_decay", "1"},
      {"train.momentum_decay", "1"},
      {"train.decay_interval_epochs", "0"},
      {"train.dropout_rate", "0.5"},
      {"train.batch_size", "128"},
      {"train.max_epochs", "50"},
      {"train.plateau_patience", "5"},
      {"train.stop", "plateau"},
      {"fork.n", "20"},
      {"fork.w", "0.2"},
      {"attack.kind", "targeted-grid"},
      {"attack.count", "100"},
      {"attack.kappa", "0"},
      {"attack.binary_search_steps", "9"},
      {"attack.c_initial", "0.01"},
      {"attack.c_max", "1e10"},
      {"attack.inner_iterations", "500"},
      {"attack.inner_learning_rate", "0.01"},
      {"attack.abort_early", "1"},
      {"attack.optimizer", "gradient-descent"},
      {"defense.t", "1"},
      {"defense.ts", "1"},
      {"defense.mode", "autonomous"},
      {"defense.serial_seed", "0"},
      {"defense.fusion", "full"},
      {"sweep.n", "3,6,10,20"},
      {"sweep.w", "0.2"},
      {"sweep.t", "1"},
      {"sweep.ts", ""},
      {"sweep.modes", "autonomous"},
      {"sweep.seeds", "0"},
      {"bench.batch_sizes", "1,8,32"},
      {"bench.ts", "0.5,1"},
      {"bench.repetitions", "30"},
      {"bench.warmup", "5"},
  };
  return d;
}

class KeyValueConfig {
 public:
  KeyValueConfig() : values_(config_defaults()) {}

  static KeyValueConfig from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot read config file " + path.string());
    KeyValueConfig c;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const auto eq = line.find('=');
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) continue;
      if (eq == std::string::npos)
        throw config_error(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
      c.set(key, trim(line.substr(eq + 1)));
    }
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    if (!config_defaults().contains(key)) throw config_error("unknown config key '" + key + "'");
    values_[key] = value;
  }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw config_error("unknown config key '" + key + "'");
    return it->second;
  }
  double num(const std::string& key) const { return parse_double(key, str(key)); }
  std::uint64_t u64(const std::string& key) const {
    const std::string& s = str(key);
    try {
      std::size_t pos = 0;
      const auto v = std::stoull(s, &pos);
      if (pos == s.size() && !s.empty() && s[0] != '-') return v;
    } catch (const std::exception&) {
    }
    throw config_error("config key '" + key + "' expects an unsigned integer, got '" + s + "'");
  }
  std::vector<double> num_list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& t : split_list(str(key))) out.push_back(parse_double(key, t));
    return out;
  }
  std::vector<std::string> list(const std::string& key) const { return split_list(str(key)); }

  /// Resolved snapshot, one `key = value` per line in key order.
  std::string dump() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
    return os.str();
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }
  static std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!trim(item).empty()) out.push_back(trim(item));
    return out;
  }
  static double parse_double(const std::string& key, const std::string& s) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw config_error("config key '" + key + "' expects a number, got '" + s + "'");
  }

  std::map<std::string, std::string> values_;
};

inline TrainHyper train_hyper(const KeyValueConfig& c) {
  TrainHyper h;
  h.learning_rate = c.num("train.learning_rate");
  h.momentum = c.num("train.momentum");
  h.lr_decay = c.num("train.lr_decay");
  h.momentum_decay = c.num("train.momentum_decay");
  h.decay_interval_epochs = static_cast<int>(c.u64("train.decay_interval_epochs"));
  h.dropout_rate = c.num("train.dropout_rate");
  h.batch_size = c.u64("train.batch_size");
  h.max_epochs = static_cast<int>(c.u64("train.max_epochs"));
  h.plateau_patience = static_cast<int>(c.u64("train.plateau_patience"));
  h.validate();
  return h;
}

inline StopRule stop_rule(const KeyValueConfig& c) {
  const auto& s = c.str("train.stop");
  if (s == "plateau") return StopRule::plateau;
  if (s == "fixed") return StopRule::fixed_epochs;
  throw config_error("train.stop must be plateau or fixed");
}

inline ForkConfig fork_config(const KeyValueConfig& c) {
  ForkConfig f{c.u64("fork.n"), c.num("fork.w"), derive_seed(c.u64("seed"), stream::forks), train_hyper(c)};
  f.validate();
  return f;
}

inline AttackConfig attack_config(const KeyValueConfig& c) {
  AttackConfig a;
  a.kappa = c.num("attack.kappa");
  a.binary_search_steps = static_cast<int>(c.u64("attack.binary_search_steps"));
  a.c_initial = c.num("attack.c_initial");
  a.c_max = c.num("attack.c_max");
  a.inner_iterations = static_cast<int>(c.u64("attack.inner_iterations"));
  a.inner_learning_rate = c.num("attack.inner_learning_rate");
  a.abort_early = c.u64("attack.abort_early") != 0;
  a.optimizer = parse_optimizer(c.str("attack.optimizer"));
  a.validate();
  return a;
}

inline SuiteKind suite_kind(const KeyValueConfig& c) {
  const auto& k = c.str("attack.kind");
  if (k == "targeted-grid") return SuiteKind::targeted_grid;
  if (k == "non-targeted") return SuiteKind::non_targeted;
  throw config_error("attack.kind must be targeted-grid or non-targeted");
}

inline DefenseConfig defense_config(const KeyValueConfig& c) {
  DefenseConfig d{c.num("defense.t"), c.num("defense.ts"), parse_mode(c.str("defense.mode")), c.u64("defense.serial_seed")};
  d.validate();
  return d;
}

inline Fusion fusion(const KeyValueConfig& c) {
  const auto& f = c.str("defense.fusion");
  if (f == "full") return Fusion::full;
  if (f == "serial") return Fusion::serial;
  throw config_error("defense.fusion must be full or serial");
}

/// Train / validation / test partitions of the configured dataset.
struct Datasets {
  LabeledDataset train, validation, test;
};

/// MNIST directories may hold the official train/t10k files or the 10k desk subset
/// (desk-*); the desk subset is split into test, validation and train by split_seed.
inline Datasets prepare_datasets(const KeyValueConfig& c) {
  const std::uint64_t split_seed = c.u64("dataset.split_seed");
  const std::size_t val_count = c.u64("dataset.validation_count");
  const std::string& kind = c.str("dataset.kind");
  LabeledDataset pool, test;
  if (kind == "mnist") {
    const std::filesystem::path dir = c.str("dataset.path");
    if (!std::filesystem::is_directory(dir)) throw io_error("dataset not found: " + dir.string());
    if (std::filesystem::exists(dir / "train-images-idx3-ubyte")) {
      pool = load_idx_dir(dir, "train");
      test = load_idx_dir(dir, "t10k");
    } else {
      const LabeledDataset all = load_idx_dir(dir, "desk");
      Split s = split(all, {c.u64("dataset.test_count"), derive_seed(split_seed, 1)});
      pool = std::move(s.train);
      test = std::move(s.validation);
      test.name = all.name + ":test";
    }
  } else if (kind == "synthetic") {
    const std::size_t per_class = c.u64("synthetic.per_class");
    SyntheticSpec spec{c.u64("synthetic.classes"), per_class, c.u64("synthetic.side"), split_seed, c.num("synthetic.noise")};
    const LabeledDataset all = make_synthetic(spec);
    Split s = split(all, {c.u64("dataset.test_count") == 2000 ? all.size() / 5 : c.u64("dataset.test_count"),
                          derive_seed(split_seed, 1)});
    pool = std::move(s.train);
    test = std::move(s.validation);
  } else {
    throw config_error("dataset.kind must be mnist or synthetic");
  }
  Split tv = split(pool, {std::min(val_count, pool.size() > 1 ? pool.size() / 2 : 0), derive_seed(split_seed, 2)});
  return {std::move(tv.train), std::move(tv.validation), std::move(test)};
}

inline ArchitectureSpec architecture(const KeyValueConfig& c, const LabeledDataset& ds) {
  return arch::by_name(c.str("model.arch"), ds.images.dim(1), ds.images.dim(3), ds.class_count);
}

}  // namespace fmtd
