#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "fmtd/forkgen.hpp"
#include "fmtd/network.hpp"

namespace fmtd {

enum class Mode { autonomous, human_in_the_loop };
enum class Verdict { clean, adversarial };

inline std::string to_string(Mode m) { return m == Mode::autonomous ? "autonomous" : "human-in-the-loop"; }
inline std::string to_string(Verdict v) { return v == Verdict::clean ? "clean" : "adversarial"; }

inline Mode parse_mode(const std::string& s) {
  if (s == "autonomous") return Mode::autonomous;
  if (s == "human-in-the-loop" || s == "human") return Mode::human_in_the_loop;
  throw config_error("unknown mode '" + s + "' (autonomous | human-in-the-loop)");
}

struct DefenseConfig {
  double T = 1.0;   // full-ensemble detection threshold
  double Ts = 1.0;  // serial detection threshold
  Mode mode = Mode::autonomous;
  std::uint64_t serial_seed = 0;

  void validate() const {
    if (!(T > 0.0 && T <= 1.0)) throw config_error("T must be in (0,1]");
    if (!(Ts > 0.0 && Ts <= 1.0)) throw config_error("Ts must be in (0,1]");
  }
};

struct DefenseOutcome {
  Verdict verdict = Verdict::clean;
  std::size_t fused_label = 0;
  std::vector<std::size_t> per_model_labels;  // in evaluation order
  std::size_t models_used = 0;
  Mode mode = Mode::autonomous;
  bool human_invoked = false;
  std::size_t final_label = 0;
};

/// Perfect human operator: ground truth per input id.
class HumanOracle {
 public:
  HumanOracle() = default;
  explicit HumanOracle(std::unordered_map<std::uint64_t, std::size_t> labels) : labels_(std::move(labels)) {}
  void add(std::uint64_t id, std::size_t label) { labels_[id] = label; }
  std::size_t operator()(std::uint64_t id) const {
    const auto it = labels_.find(id);
    if (it == labels_.end()) throw config_error("human oracle has no label for input " + std::to_string(id));
    return it->second;
  }

 private:
  std::unordered_map<std::uint64_t, std::size_t> labels_;
};

/// One input to the defense; `id` keys the oracle and the serial selection order.
struct DefenseInput {
  const Tensor<float>& x;
  std::uint64_t id = 0;
};

/// Modal label and its count; ties go to the lowest label.
inline std::pair<std::size_t, std::size_t> modal_label(std::span<const std::size_t> labels) {
  std::map<std::size_t, std::size_t> counts;
  for (std::size_t l : labels) ++counts[l];
  std::pair<std::size_t, std::size_t> best{0, 0};
  for (const auto& [label, count] : counts)
    if (count > best.second) best = {label, count};
  return best;
}

inline std::size_t majority(std::span<const std::size_t> labels) {
  if (labels.empty()) throw config_error("majority of an empty label list");
  return modal_label(labels).first;
}

/// True when the modal label's share reaches the threshold (non-strict).
inline bool consistent(std::size_t modal_count, std::size_t total, double threshold) {
  return static_cast<double>(modal_count) / static_cast<double>(total) >= threshold - 1e-12;
}

inline Verdict detect(std::span<const std::size_t> labels, double T) {
  if (labels.empty()) throw config_error("detect on an empty label list");
  return consistent(modal_label(labels).second, labels.size(), T) ? Verdict::clean : Verdict::adversarial;
}

using CompiledEnsemble = std::vector<Network<float>>;

inline CompiledEnsemble compile(const Ensemble& e) {
  CompiledEnsemble nets;
  nets.reserve(e.size());
  for (const auto& m : e.models) nets.emplace_back(m);
  return nets;
}

inline std::size_t predict_label(const Network<float>& net, const Tensor<float>& x) {
  const Mat z = net.logits(net.example_matrix(x));
  return argmax(std::span<const double>(z.data(), static_cast<std::size_t>(z.cols())));
}

inline std::vector<std::size_t> ensemble_outputs(const CompiledEnsemble& nets, const Tensor<float>& x) {
  std::vector<std::size_t> labels;
  labels.reserve(nets.size());
  for (const auto& net : nets) labels.push_back(predict_label(net, x));
  return labels;
}

namespace detail {

inline void resolve(DefenseOutcome& out, Mode mode, const HumanOracle* oracle, std::uint64_t id) {
  out.mode = mode;
  if (mode == Mode::human_in_the_loop && !oracle) throw config_error("human-in-the-loop mode requires a human oracle");
  if (mode == Mode::human_in_the_loop && out.verdict == Verdict::adversarial) {
    out.human_invoked = true;
    out.final_label = (*oracle)(id);
  } else {
    out.final_label = out.fused_label;
  }
}

}  // namespace detail

/// Full fusion over precomputed labels.
inline DefenseOutcome fuse_full(std::vector<std::size_t> labels, const DefenseConfig& cfg, const HumanOracle* oracle,
                                std::uint64_t id) {
  DefenseOutcome out;
  out.verdict = detect(labels, cfg.T);
  out.fused_label = majority(labels);
  out.models_used = labels.size();
  out.per_model_labels = std::move(labels);
  detail::resolve(out, cfg.mode, oracle, id);
  return out;
}

inline DefenseOutcome classify_full(const CompiledEnsemble& nets, DefenseInput input, const DefenseConfig& cfg,
                                    const HumanOracle* oracle = nullptr) {
  cfg.validate();
  if (nets.empty()) throw config_error("empty ensemble");
  return fuse_full(ensemble_outputs(nets, input.x), cfg, oracle, input.id);
}

/// Order in which serial fusion consults the models for input `id`.
inline std::vector<std::size_t> serial_order(std::size_t n, std::uint64_t serial_seed, std::uint64_t id) {
  return seeded_permutation(n, derive_seed(derive_seed(serial_seed, stream::serial_order), id));
}

/// Serial fusion with early stopping. `label_of(i)` evaluates model i and is called
/// only for models actually consulted, in `order`.
inline DefenseOutcome fuse_serial(std::span<const std::size_t> order, double Ts,
                                  const std::function<std::size_t(std::size_t)>& label_of) {
  const std::size_t n = order.size();
  if (n < 3) throw config_error("serial fusion needs at least 3 models, got " + std::to_string(n));
  DefenseOutcome out;
  for (std::size_t k = 0; k < 3; ++k) out.per_model_labels.push_back(label_of(order[k]));
  while (true) {
    const auto [label, count] = modal_label(out.per_model_labels);
    if (consistent(count, out.per_model_labels.size(), Ts)) {
      out.verdict = Verdict::clean;
      break;
    }
    if (out.per_model_labels.size() == n) {
      out.verdict = Verdict::adversarial;
      break;
    }
    out.per_model_labels.push_back(label_of(order[out.per_model_labels.size()]));
  }
  out.models_used = out.per_model_labels.size();
  out.fused_label = majority(out.per_model_labels);
  return out;
}

inline DefenseOutcome classify_serial(const CompiledEnsemble& nets, DefenseInput input, const DefenseConfig& cfg,
                                      const HumanOracle* oracle = nullptr) {
  cfg.validate();
  const auto order = serial_order(nets.size(), cfg.serial_seed, input.id);
  DefenseOutcome out = fuse_serial(order, cfg.Ts, [&](std::size_t i) { return predict_label(nets[i], input.x); });
  detail::resolve(out, cfg.mode, oracle, input.id);
  return out;
}

/// Serial fusion over a precomputed label row (labels indexed by model).
inline DefenseOutcome fuse_serial_labels(std::span<const std::size_t> labels_by_model, const DefenseConfig& cfg,
                                         const HumanOracle* oracle, std::uint64_t id) {
  const auto order = serial_order(labels_by_model.size(), cfg.serial_seed, id);
  DefenseOutcome out = fuse_serial(order, cfg.Ts, [&](std::size_t i) { return labels_by_model[i]; });
  detail::resolve(out, cfg.mode, oracle, id);
  return out;
}

}  // namespace fmtd
