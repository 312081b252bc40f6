#pragma once

#include <boost/rational.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "fmtd/attack.hpp"
#include "fmtd/defense.hpp"
#include "json.hpp"

namespace fmtd {

/// Exact count ratio; value() is NaN when the denominator is zero.
struct Ratio {
  std::size_t num = 0, den = 0;
  bool empty() const { return den == 0; }
  double value() const {
    return den ? static_cast<double>(num) / static_cast<double>(den) : std::numeric_limits<double>::quiet_NaN();
  }
  boost::rational<long long> exact() const {
    return den ? boost::rational<long long>(static_cast<long long>(num), static_cast<long long>(den))
               : boost::rational<long long>(0);
  }
};

enum class Fusion { full, serial };
inline std::string to_string(Fusion f) { return f == Fusion::full ? "full" : "serial"; }

/// Detection/thwarting taxonomy. p[k] is block k conditioned on its parent block:
///   attacked input: 1 detected / 2 missed; 3,4 thwarted or not given 1; 5,6 given 2;
///   clean input: 7 false positive / 8 true negative; 9,10 correct or not given 7; 11,12 given 8;
///   13 successful defense = (3 + 5) / attacked; 14 = 1 - 13; 15 clean accuracy = (9 + 11) / clean.
struct MetricsReport {
  std::array<Ratio, 16> p{};  // index 0 unused
  Mode mode = Mode::autonomous;
  Fusion fusion = Fusion::full;
  std::size_t n = 0;
  double w = 0.0;
  double threshold = 1.0;  // T for full fusion, Ts for serial
  std::uint64_t seed = 0;
  std::size_t adversarial_excluded = 0;  // non-converged suite entries
  double mean_models_used_clean = 0.0;
  double mean_models_used_adversarial = 0.0;

  double operator[](std::size_t k) const { return p.at(k).value(); }
  bool has_attack_side() const { return !p[1].empty(); }
};

/// Labels of every model for every input: rows = inputs, columns = models.
using LabelMatrix = std::vector<std::vector<std::size_t>>;

inline LabelMatrix label_matrix(const CompiledEnsemble& nets, const Tensor<float>& images) {
  const std::size_t n = images.dims().empty() ? 0 : images.dim(0);
  LabelMatrix m(n, std::vector<std::size_t>(nets.size()));
  for (std::size_t j = 0; j < nets.size(); ++j) {
    const auto labels = classify(nets[j], images);
    for (std::size_t i = 0; i < n; ++i) m[i][j] = labels[i];
  }
  return m;
}

/// Converged adversarial images stacked into one batch, with their ground truths.
struct AdversarialBatch {
  Tensor<float> images;
  std::vector<std::size_t> truth;
  std::size_t excluded = 0;
};

inline AdversarialBatch adversarial_batch(const AttackSuite& suite) {
  AdversarialBatch b;
  std::vector<float> data;
  std::vector<std::size_t> dims;
  for (const auto& e : suite.examples) {
    if (!e.converged) {
      ++b.excluded;
      continue;
    }
    if (dims.empty()) dims = e.adversarial.dims();
    data.insert(data.end(), e.adversarial.values().begin(), e.adversarial.values().end());
    b.truth.push_back(e.true_label);
  }
  std::vector<std::size_t> full{b.truth.size()};
  full.insert(full.end(), dims.begin(), dims.end());
  if (dims.empty()) full = {0};
  b.images = Tensor<float>(std::move(full), std::move(data));
  return b;
}

struct EvalConfig {
  Fusion fusion = Fusion::full;
  DefenseConfig defense{};
  std::size_t n = 0;  // use the first n models; 0 = all
  double w = 0.0;     // recorded only
  std::uint64_t seed = 0;
};

inline constexpr std::uint64_t kAdversarialIdBase = std::uint64_t{1} << 40;

/// Metrics from precomputed label matrices. Clean inputs get ids 0..; attacked inputs
/// kAdversarialIdBase + j. When `oracle` is null, human mode uses the ground truth.
inline MetricsReport evaluate_labels(const LabelMatrix& clean, std::span<const std::size_t> clean_truth,
                                     const LabelMatrix* adversarial, std::span<const std::size_t> adversarial_truth,
                                     const EvalConfig& cfg, const HumanOracle* oracle = nullptr) {
  cfg.defense.validate();
  if (clean.empty()) throw config_error("evaluation needs a non-empty clean set");
  if (adversarial && adversarial->empty()) throw config_error("evaluation needs a non-empty attack suite");
  const std::size_t total_models = clean.front().size();
  const std::size_t n = cfg.n ? cfg.n : total_models;
  if (n > total_models) throw config_error("N exceeds ensemble size");

  HumanOracle truth_oracle;
  if (!oracle) {
    for (std::size_t i = 0; i < clean_truth.size(); ++i) truth_oracle.add(i, clean_truth[i]);
    for (std::size_t j = 0; j < adversarial_truth.size(); ++j) truth_oracle.add(kAdversarialIdBase + j, adversarial_truth[j]);
    oracle = &truth_oracle;
  }
  auto run = [&](const std::vector<std::size_t>& row, std::uint64_t id) {
    const std::span<const std::size_t> models(row.data(), n);
    if (cfg.fusion == Fusion::full) return fuse_full({models.begin(), models.end()}, cfg.defense, oracle, id);
    return fuse_serial_labels(models, cfg.defense, oracle, id);
  };

  MetricsReport r;
  r.mode = cfg.defense.mode;
  r.fusion = cfg.fusion;
  r.n = n;
  r.w = cfg.w;
  r.threshold = cfg.fusion == Fusion::full ? cfg.defense.T : cfg.defense.Ts;
  r.seed = cfg.seed;

  std::size_t fp = 0, correct_fp = 0, correct_tn = 0, used = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const DefenseOutcome o = run(clean[i], i);
    used += o.models_used;
    const bool correct = o.final_label == clean_truth[i];
    if (o.verdict == Verdict::adversarial) {
      ++fp;
      correct_fp += correct;
    } else {
      correct_tn += correct;
    }
  }
  const std::size_t nc = clean.size();
  r.p[7] = {fp, nc};
  r.p[8] = {nc - fp, nc};
  r.p[9] = {correct_fp, fp};
  r.p[10] = {fp - correct_fp, fp};
  r.p[11] = {correct_tn, nc - fp};
  r.p[12] = {nc - fp - correct_tn, nc - fp};
  r.p[15] = {correct_fp + correct_tn, nc};
  r.mean_models_used_clean = static_cast<double>(used) / static_cast<double>(nc);

  if (adversarial) {
    std::size_t det = 0, thw_det = 0, thw_miss = 0;
    used = 0;
    for (std::size_t j = 0; j < adversarial->size(); ++j) {
      const DefenseOutcome o = run((*adversarial)[j], kAdversarialIdBase + j);
      used += o.models_used;
      const bool thwarted = o.final_label == adversarial_truth[j];
      if (o.verdict == Verdict::adversarial) {
        ++det;
        thw_det += thwarted;
      } else {
        thw_miss += thwarted;
      }
    }
    const std::size_t na = adversarial->size();
    r.p[1] = {det, na};
    r.p[2] = {na - det, na};
    r.p[3] = {thw_det, det};
    r.p[4] = {det - thw_det, det};
    r.p[5] = {thw_miss, na - det};
    r.p[6] = {na - det - thw_miss, na - det};
    r.p[13] = {thw_det + thw_miss, na};
    r.p[14] = {na - thw_det - thw_miss, na};
    r.mean_models_used_adversarial = static_cast<double>(used) / static_cast<double>(na);
  }
  return r;
}

/// Full pipeline: classify the clean set and the converged suite entries with every fork.
inline MetricsReport evaluate(const CompiledEnsemble& nets, const LabeledDataset& clean_set, const AttackSuite* suite,
                              const EvalConfig& cfg, const HumanOracle* oracle = nullptr) {
  if (clean_set.size() == 0) throw config_error("evaluation needs a non-empty clean set");
  if (suite && suite->examples.empty()) throw config_error("evaluation needs a non-empty attack suite");
  const LabelMatrix clean = label_matrix(nets, clean_set.images);
  if (!suite) return evaluate_labels(clean, clean_set.labels, nullptr, {}, cfg, oracle);
  const AdversarialBatch adv = adversarial_batch(*suite);
  if (adv.truth.empty()) throw config_error("attack suite has no converged examples");
  const LabelMatrix am = label_matrix(nets, adv.images);
  MetricsReport r = evaluate_labels(clean, clean_set.labels, &am, adv.truth, cfg, oracle);
  r.adversarial_excluded = adv.excluded;
  return r;
}

/// Complementary pairs sum to their parent exactly, and p13 / p15 equal their
/// compositions p1 p3 + p2 p5 and p7 p9 + p8 p11 in rational arithmetic.
inline bool metric_identities_hold(const MetricsReport& r) {
  auto pair_ok = [&](std::size_t a, std::size_t b) {
    return r.p[a].den == r.p[b].den && (r.p[a].den == 0 || r.p[a].num + r.p[b].num == r.p[a].den);
  };
  auto term = [&](std::size_t a, std::size_t b) { return r.p[a].exact() * r.p[b].exact(); };
  bool ok = pair_ok(7, 8) && pair_ok(9, 10) && pair_ok(11, 12);
  ok = ok && r.p[15].exact() == term(7, 9) + term(8, 11);
  if (r.mode == Mode::human_in_the_loop) ok = ok && (r.p[9].empty() || r.p[9].num == r.p[9].den);
  if (r.has_attack_side()) {
    ok = ok && pair_ok(1, 2) && pair_ok(3, 4) && pair_ok(5, 6) && pair_ok(13, 14);
    ok = ok && r.p[13].exact() == term(1, 3) + term(2, 5);
    if (r.mode == Mode::human_in_the_loop) ok = ok && (r.p[3].empty() || r.p[3].num == r.p[3].den);
  }
  return ok;
}

struct DistinctCountHistogram {
  std::vector<std::size_t> counts;  // counts[D], D = number of distinct labels
  double thwarted_given_d1 = std::numeric_limits<double>::quiet_NaN();
  std::size_t total() const {
    std::size_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
  double p_d_greater_than_one() const {
    const std::size_t t = total();
    return t ? 1.0 - static_cast<double>(counts.size() > 1 ? counts[1] : 0) / static_cast<double>(t) : 0.0;
  }
};

inline DistinctCountHistogram distinct_count_histogram(const LabelMatrix& labels, std::span<const std::size_t> truth) {
  if (labels.empty()) throw config_error("distinct-count histogram of an empty suite");
  DistinctCountHistogram h;
  h.counts.assign(labels.front().size() + 1, 0);
  std::size_t d1 = 0, d1_truth = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::vector<std::size_t> row = labels[i];
    std::sort(row.begin(), row.end());
    const auto d = static_cast<std::size_t>(std::unique(row.begin(), row.end()) - row.begin());
    ++h.counts[d];
    if (d == 1) {
      ++d1;
      d1_truth += row.front() == truth[i];
    }
  }
  if (d1) h.thwarted_given_d1 = static_cast<double>(d1_truth) / static_cast<double>(d1);
  return h;
}

inline DistinctCountHistogram distinct_count_histogram(const CompiledEnsemble& nets, const AttackSuite& suite) {
  const AdversarialBatch adv = adversarial_batch(suite);
  if (adv.truth.empty()) throw config_error("distinct-count histogram of an empty suite");
  return distinct_count_histogram(label_matrix(nets, adv.images), adv.truth);
}

/// Fraction of converged suite entries that `net` labels wrongly.
inline double transfer_asr(const Network<float>& net, const AttackSuite& suite) {
  const AdversarialBatch adv = adversarial_batch(suite);
  if (adv.truth.empty()) return 0.0;
  const auto labels = classify(net, adv.images);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) wrong += labels[i] != adv.truth[i];
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

struct AsrPoint {
  double kappa = 0.0;
  double mean_distortion = 0.0;
  double asr = 0.0;
};

inline std::vector<AsrPoint> asr_vs_distortion(const Network<float>& net, const std::vector<AttackSuite>& suites_by_kappa) {
  std::vector<AsrPoint> curve;
  for (const auto& s : suites_by_kappa)
    curve.push_back({s.generation_config.kappa, s.mean_distortion(), transfer_asr(net, s)});
  std::sort(curve.begin(), curve.end(), [](const AsrPoint& a, const AsrPoint& b) { return a.kappa < b.kappa; });
  return curve;
}

struct SweepGrid {
  std::vector<std::size_t> n_values{20};
  std::vector<double> w_values{0.2};
  std::vector<double> t_values{1.0};   // full fusion thresholds
  std::vector<double> ts_values{};     // serial thresholds (empty = no serial cells)
  std::vector<Mode> modes{Mode::autonomous};
  std::vector<std::uint64_t> seeds{0};
  std::uint64_t serial_seed = 0;
};

/// Returns the ensemble for (w, seed) with at least `n` forks.
using EnsembleProvider = std::function<Ensemble(double w, std::uint64_t seed, std::size_t n)>;

/// One report per (w, seed, N, mode, threshold) cell. Each (w, seed) ensemble is built once
/// at max N; smaller N use its leading forks, which equal an ensemble generated at that N.
inline std::vector<MetricsReport> sweep(const SweepGrid& grid, const EnsembleProvider& provide,
                                        const LabeledDataset& clean_set, const AttackSuite& suite) {
  if (grid.n_values.empty() || grid.w_values.empty() || grid.seeds.empty() || grid.modes.empty() ||
      (grid.t_values.empty() && grid.ts_values.empty()))
    throw config_error("sweep grid has an empty axis");
  const std::size_t max_n = *std::max_element(grid.n_values.begin(), grid.n_values.end());
  const AdversarialBatch adv = adversarial_batch(suite);
  if (adv.truth.empty()) throw config_error("attack suite has no converged examples");
  std::vector<MetricsReport> out;
  for (double w : grid.w_values)
    for (std::uint64_t seed : grid.seeds) {
      const Ensemble e = provide(w, seed, max_n).prefix(max_n);
      const CompiledEnsemble nets = compile(e);
      const LabelMatrix clean = label_matrix(nets, clean_set.images);
      const LabelMatrix am = label_matrix(nets, adv.images);
      for (std::size_t n : grid.n_values)
        for (Mode mode : grid.modes) {
          EvalConfig cfg{Fusion::full, {1.0, 1.0, mode, grid.serial_seed}, n, w, seed};
          for (double t : grid.t_values) {
            cfg.fusion = Fusion::full;
            cfg.defense.T = t;
            out.push_back(evaluate_labels(clean, clean_set.labels, &am, adv.truth, cfg));
            out.back().adversarial_excluded = adv.excluded;
          }
          if (n < 3) continue;
          for (double ts : grid.ts_values) {
            cfg.fusion = Fusion::serial;
            cfg.defense.Ts = ts;
            out.push_back(evaluate_labels(clean, clean_set.labels, &am, adv.truth, cfg));
            out.back().adversarial_excluded = adv.excluded;
          }
        }
    }
  return out;
}

// Fixed column order for report CSV files.
inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols = [] {
    std::vector<std::string> c{"mode", "fusion", "N", "w", "threshold", "seed"};
    for (int k = 1; k <= 15; ++k) c.push_back("p" + std::to_string(k));
    for (int k = 1; k <= 15; ++k) {
      c.push_back("p" + std::to_string(k) + "_num");
      c.push_back("p" + std::to_string(k) + "_den");
    }
    c.insert(c.end(), {"adversarial_excluded", "mean_models_used_clean", "mean_models_used_adversarial"});
    return c;
  }();
  return cols;
}

inline void write_reports_csv(std::ostream& os, const std::vector<MetricsReport>& reports) {
  const auto& cols = report_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << "\n";
  os << std::setprecision(10);
  for (const auto& r : reports) {
    os << to_string(r.mode) << ',' << to_string(r.fusion) << ',' << r.n << ',' << r.w << ',' << r.threshold << ','
       << r.seed;
    for (int k = 1; k <= 15; ++k) {
      os << ',';
      if (!r.p[k].empty()) os << r.p[k].value();  // empty cell when undefined
    }
    for (int k = 1; k <= 15; ++k) os << ',' << r.p[k].num << ',' << r.p[k].den;
    os << ',' << r.adversarial_excluded << ',' << r.mean_models_used_clean << ',';
    if (r.has_attack_side()) os << r.mean_models_used_adversarial;
    os << "\n";
  }
}

inline nlohmann::ordered_json report_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(r.mode);
  j["fusion"] = to_string(r.fusion);
  j["N"] = r.n;
  j["w"] = r.w;
  j["threshold"] = r.threshold;
  j["seed"] = r.seed;
  for (int k = 1; k <= 15; ++k) {
    const std::string key = "p" + std::to_string(k);
    j[key] = r.p[k].empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(r.p[k].value());
  }
  nlohmann::ordered_json counts;
  for (int k = 1; k <= 15; ++k) counts["p" + std::to_string(k)] = {r.p[k].num, r.p[k].den};
  j["counts"] = counts;
  j["adversarial_excluded"] = r.adversarial_excluded;
  j["mean_models_used_clean"] = r.mean_models_used_clean;
  j["mean_models_used_adversarial"] =
      r.has_attack_side() ? nlohmann::ordered_json(r.mean_models_used_adversarial) : nlohmann::ordered_json(nullptr);
  return j;
}

inline nlohmann::ordered_json reports_json(const std::vector<MetricsReport>& reports) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : reports) arr.push_back(report_json(r));
  return arr;
}

struct MetricSummary {
  double mean = 0.0, min = 0.0, max = 0.0;
  std::size_t count = 0;
};

/// Mean and range of p_k over reports where it is defined.
inline MetricSummary summarize(const std::vector<MetricsReport>& reports, std::size_t k) {
  MetricSummary s{0.0, std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(), 0};
  for (const auto& r : reports) {
    if (r.p[k].empty()) continue;
    const double v = r.p[k].value();
    s.mean += v;
    s.min = std::min(s.min, v);
    s.max = std::max(s.max, v);
    ++s.count;
  }
  if (s.count) s.mean /= static_cast<double>(s.count);
  return s;
}

}  // namespace fmtd
