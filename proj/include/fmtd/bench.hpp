#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <ostream>
#include <vector>

#include "fmtd/eval.hpp"

namespace fmtd {

struct BenchCell {
  std::size_t batch_size = 1;
  Fusion mode = Fusion::full;
  double ts = 0.0;           // serial only
  double mean_us = 0.0;      // per-sample, mean of repetitions within [p5, p95]
  double p5_us = 0.0, p95_us = 0.0;
  double mean_models_used = 0.0;
  std::size_t repetitions = 0;
};

struct BenchReport {
  std::vector<BenchCell> cells;
  // Models consulted per input over the whole dataset, per Ts: histogram[k] = inputs using k models.
  std::map<double, std::vector<std::size_t>> models_used_distribution;
  std::map<double, double> mean_models_used;
  std::map<double, double> cost_ratio;  // serial mean model evaluations / N
  std::size_t ensemble_size = 0;
  std::size_t repetitions = 0;
};

struct BenchOptions {
  std::vector<std::size_t> batch_sizes{1, 8, 32};
  bool full = true;
  std::vector<double> ts_values{0.5, 1.0};
  std::size_t repetitions = 30;
  std::size_t warmup = 5;
  std::uint64_t seed = 0;
};

namespace detail {

inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace detail

/// Time full and serial fusion per sample over seeded batches. Only model-evaluation
/// counts are deterministic; wall-clock figures are informational.
inline BenchReport bench_inference(const CompiledEnsemble& nets, const LabeledDataset& dataset, const BenchOptions& opt) {
  if (dataset.size() == 0) throw config_error("bench needs a non-empty dataset");
  if (nets.empty()) throw config_error("bench needs a non-empty ensemble");
  if (opt.repetitions < 30) throw config_error("bench needs at least 30 repetitions per cell");
  BenchReport rep;
  rep.ensemble_size = nets.size();
  rep.repetitions = opt.repetitions;
  const auto order = seeded_permutation(dataset.size(), opt.seed);

  if (!opt.ts_values.empty() && nets.size() < 3) throw config_error("serial fusion needs at least 3 models");
  const LabelMatrix labels = opt.ts_values.empty() ? LabelMatrix{} : label_matrix(nets, dataset.images);
  for (double ts : opt.ts_values) {
    const DefenseConfig cfg{1.0, ts, Mode::autonomous, opt.seed};
    std::vector<std::size_t> hist(nets.size() + 1, 0);
    std::size_t total = 0;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const auto o = fuse_serial_labels(labels[i], cfg, nullptr, i);
      ++hist[o.models_used];
      total += o.models_used;
    }
    rep.models_used_distribution[ts] = hist;
    rep.mean_models_used[ts] = static_cast<double>(total) / static_cast<double>(dataset.size());
    rep.cost_ratio[ts] = rep.mean_models_used[ts] / static_cast<double>(nets.size());
  }

  std::size_t cursor = 0;
  auto next_batch = [&](std::size_t b) {
    std::vector<std::size_t> idx(b);
    for (auto& i : idx) i = order[cursor++ % order.size()];
    return idx;
  };
  using clock = std::chrono::steady_clock;

  auto run_cell = [&](std::size_t b, Fusion mode, double ts) {
    BenchCell cell{b, mode, ts, 0, 0, 0, 0, opt.repetitions};
    std::vector<double> per_sample;
    std::size_t used = 0, samples = 0;
    const DefenseConfig cfg{1.0, ts, Mode::autonomous, opt.seed};
    for (std::size_t r = 0; r < opt.warmup + opt.repetitions; ++r) {
      const auto idx = next_batch(b);
      const LabeledDataset batch = dataset.subset(idx);
      std::size_t batch_used = 0;
      const auto t0 = clock::now();
      if (mode == Fusion::full) {
        const LabelMatrix m = label_matrix(nets, batch.images);
        for (std::size_t i = 0; i < b; ++i) batch_used += fuse_full(m[i], cfg, nullptr, idx[i]).models_used;
      } else {
        for (std::size_t i = 0; i < b; ++i) {
          const Tensor<float> x = batch.example(i);
          batch_used += classify_serial(nets, {x, idx[i]}, cfg).models_used;
        }
      }
      const double us = std::chrono::duration<double, std::micro>(clock::now() - t0).count();
      if (r < opt.warmup) continue;
      per_sample.push_back(us / static_cast<double>(b));
      used += batch_used;
      samples += b;
    }
    cell.p5_us = detail::percentile(per_sample, 0.05);
    cell.p95_us = detail::percentile(per_sample, 0.95);
    double s = 0.0;
    std::size_t k = 0;
    for (double v : per_sample)
      if (v >= cell.p5_us && v <= cell.p95_us) {
        s += v;
        ++k;
      }
    cell.mean_us = k ? s / static_cast<double>(k) : cell.p5_us;
    cell.mean_models_used = static_cast<double>(used) / static_cast<double>(samples);
    return cell;
  };

  for (std::size_t b : opt.batch_sizes) {
    if (b == 0) throw config_error("batch size must be >= 1");
    if (opt.full) rep.cells.push_back(run_cell(b, Fusion::full, 0.0));
    for (double ts : opt.ts_values) rep.cells.push_back(run_cell(b, Fusion::serial, ts));
  }
  return rep;
}

inline void write_bench_csv(std::ostream& os, const BenchReport& rep) {
  os << "batch_size,mode,Ts,mean_us,p5_us,p95_us,mean_models_used,repetitions\n";
  os << std::setprecision(10);
  for (const auto& c : rep.cells) {
    os << c.batch_size << ',' << to_string(c.mode) << ',';
    if (c.mode == Fusion::serial) os << c.ts;
    os << ',' << c.mean_us << ',' << c.p5_us << ',' << c.p95_us << ',' << c.mean_models_used << ',' << c.repetitions
       << "\n";
  }
}

}  // namespace fmtd
