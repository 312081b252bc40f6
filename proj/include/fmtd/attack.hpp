#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fmtd/data.hpp"
#include "fmtd/network.hpp"
#include "fmtd/serialize.hpp"

namespace fmtd {

enum class InnerOptimizer { adam, gradient_descent };

inline std::string to_string(InnerOptimizer o) { return o == InnerOptimizer::adam ? "adam" : "gradient-descent"; }

inline InnerOptimizer parse_optimizer(const std::string& s) {
  if (s == "adam") return InnerOptimizer::adam;
  if (s == "gradient-descent") return InnerOptimizer::gradient_descent;
  throw config_error("attack optimizer must be adam or gradient-descent, got '" + s + "'");
}

struct AttackConfig {
  double kappa = 0.0;
  int binary_search_steps = 9;
  double c_initial = 1e-2;
  double c_max = 1e10;
  int inner_iterations = 500;
  double inner_learning_rate = 1e-2;
  // Stop an inner run once the objective has not improved over a tenth of the iterations.
  bool abort_early = true;
  // Plain descent barely moves pixels at 0 or 1, where tanh is flat. Adam rescales per pixel.
  InnerOptimizer optimizer = InnerOptimizer::gradient_descent;

  void validate() const {
    if (!(kappa >= 0.0)) throw config_error("kappa must be >= 0");
    if (!(c_initial > 0.0) || !(c_max >= c_initial)) throw config_error("need 0 < c_initial <= c_max");
    if (binary_search_steps < 0 || inner_iterations < 1) throw config_error("bad attack iteration counts");
    if (!(inner_learning_rate > 0.0)) throw config_error("inner_learning_rate must be > 0");
  }
};

struct AdversarialExample {
  Tensor<float> clean;
  Tensor<float> adversarial;
  Tensor<float> perturbation;  // adversarial - clean, elementwise in float
  std::size_t true_label = 0;
  std::optional<std::size_t> target_label;  // empty for non-targeted
  double kappa = 0.0;
  double distortion = 0.0;  // l2 norm of perturbation
  bool converged = false;
  std::string base_model_hash;
  double c = 0.0;                 // smallest Lagrange weight that succeeded (0 if none)
  std::size_t source_index = 0;   // row in the dataset the clean input came from
};

/// l2 distance accumulated in double.
template <class T>
double distortion(const Tensor<T>& x, const Tensor<T>& x_adv) {
  if (x.size() != x_adv.size())
    throw shape_error("distortion: dims " + dims_to_string(x.dims()) + " vs " + dims_to_string(x_adv.dims()));
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x_adv[i]) - static_cast<double>(x[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

struct RegularizerValue {
  double value = 0.0;
  Tensor<double> input_grad;
};

/// g(x') = max(max_{i != t} Z_i - Z_t, -kappa) on logits Z, and dg/dx'.
template <class T, class U>
RegularizerValue cw_regularizer(const Network<T>& net, const Tensor<U>& x_adv, std::size_t target, double kappa) {
  Mat g;
  const double v = objective_and_input_gradient(net, net.example_matrix(x_adv), CwMarginObjective{target, kappa}, &g);
  return {v, Tensor<double>(std::vector<std::size_t>(x_adv.dims()), std::vector<double>(g.data(), g.data() + g.size()))};
}

namespace detail {

inline AdversarialExample finish_example(const Tensor<float>& clean, std::vector<float> adv, std::size_t true_label,
                                         std::optional<std::size_t> target, double kappa, bool converged) {
  AdversarialExample ex;
  ex.clean = clean;
  ex.adversarial = Tensor<float>(clean.dims(), std::move(adv));
  ex.perturbation = Tensor<float>(clean.dims());
  for (std::size_t i = 0; i < clean.size(); ++i) ex.perturbation[i] = ex.adversarial[i] - clean[i];
  ex.true_label = true_label;
  ex.target_label = target;
  ex.kappa = kappa;
  ex.distortion = distortion(clean, ex.adversarial);
  ex.converged = converged;
  return ex;
}

struct InnerResult {
  bool success = false;
  double best_dist2 = std::numeric_limits<double>::infinity();
  std::vector<float> best;       // lowest-distortion successful iterate
  double closest_margin = std::numeric_limits<double>::infinity();
  std::vector<float> closest;    // iterate with the smallest margin (for failures)
};

/// Minimise ||x' - x||^2 + c * g(x') in tanh space for one value of c.
/// Every iterate is rounded to float before evaluation, so recorded images are exactly
/// what the model scores.
template <class T>
InnerResult cw_inner(const Network<T>& net, const Mat& x, std::size_t target, double c, const AttackConfig& cfg) {
  const Eigen::Index m = x.cols();
  Eigen::ArrayXXd u(1, m);
  for (Eigen::Index i = 0; i < m; ++i) u(0, i) = std::atanh((2.0 * x(0, i) - 1.0) * (1.0 - 1e-6));
  InnerResult r;
  Mat xq(1, m), grad, logits;
  Eigen::ArrayXXd adam_m = Eigen::ArrayXXd::Zero(1, m), adam_v = Eigen::ArrayXXd::Zero(1, m);
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double prev = std::numeric_limits<double>::infinity();
  const int check_every = std::max(1, cfg.inner_iterations / 10);
  for (int it = 0; it <= cfg.inner_iterations; ++it) {
    const Eigen::ArrayXXd th = u.tanh();
    for (Eigen::Index i = 0; i < m; ++i) xq(0, i) = static_cast<double>(static_cast<float>((th(0, i) + 1.0) * 0.5));
    const double g = objective_and_input_gradient(net, xq, CwMarginObjective{target, cfg.kappa}, &grad, &logits);
    const double dist2 = (xq - x).squaredNorm();
    const std::span<const double> z(logits.data(), static_cast<std::size_t>(logits.cols()));
    double margin = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < z.size(); ++k)
      if (k != target) margin = std::max(margin, z[k] - z[target]);
    const bool ok = argmax(z) == target && margin <= -cfg.kappa;
    auto snapshot = [&] {
      std::vector<float> img(static_cast<std::size_t>(m));
      for (Eigen::Index i = 0; i < m; ++i) img[static_cast<std::size_t>(i)] = static_cast<float>(xq(0, i));
      return img;
    };
    if (ok && dist2 < r.best_dist2) {
      r.success = true;
      r.best_dist2 = dist2;
      r.best = snapshot();
    }
    if (!r.success && margin < r.closest_margin) {
      r.closest_margin = margin;
      r.closest = snapshot();
    }
    if (it == cfg.inner_iterations) break;
    const double loss = dist2 + c * g;
    if (cfg.abort_early && it % check_every == 0) {
      if (loss > prev * 0.9999) break;
      prev = loss;
    }
    const Eigen::ArrayXXd du = (2.0 * (xq - x) + c * grad).array() * (1.0 - th.square()) * 0.5;
    if (cfg.optimizer == InnerOptimizer::gradient_descent) {
      u -= cfg.inner_learning_rate * du;
    } else {
      adam_m = beta1 * adam_m + (1.0 - beta1) * du;
      adam_v = beta2 * adam_v + (1.0 - beta2) * du.square();
      const double step = cfg.inner_learning_rate * std::sqrt(1.0 - std::pow(beta2, it + 1)) / (1.0 - std::pow(beta1, it + 1));
      u -= step * adam_m / (adam_v.sqrt() + adam_eps);
    }
  }
  return r;
}

template <class T>
AdversarialExample cw_targeted(const Network<T>& net, const Tensor<float>& clean, std::size_t true_label,
                               std::size_t target, const AttackConfig& cfg) {
  const Mat x = net.example_matrix(clean);
  InnerResult best;
  std::vector<float> closest;
  double closest_margin = std::numeric_limits<double>::infinity();
  double lo = 0.0, hi = 0.0;
  auto absorb = [&](InnerResult&& r) {
    if (r.success && r.best_dist2 < best.best_dist2) {
      best.success = true;
      best.best_dist2 = r.best_dist2;
      best.best = std::move(r.best);
    }
    if (!r.success && r.closest_margin < closest_margin) {
      closest_margin = r.closest_margin;
      closest = std::move(r.closest);
    }
    return r.success;
  };
  for (double c = cfg.c_initial; c <= cfg.c_max * (1.0 + 1e-9); c *= 10.0) {
    if (absorb(cw_inner(net, x, target, c, cfg))) {
      hi = c;
      break;
    }
    lo = c;
  }
  if (hi > 0.0) {
    for (int s = 0; s < cfg.binary_search_steps; ++s) {
      const double mid = 0.5 * (lo + hi);
      if (absorb(cw_inner(net, x, target, mid, cfg))) hi = mid;
      else lo = mid;
    }
  }
  AdversarialExample ex =
      finish_example(clean, best.success ? std::move(best.best) : std::move(closest), true_label, target, cfg.kappa, best.success);
  ex.c = best.success ? hi : 0.0;
  return ex;
}

}  // namespace detail

/// C&W l2 attack. With a target: minimum-distortion success over the c search. Without:
/// the targeted attack is run for every other label and the smallest success is kept.
template <class T>
AdversarialExample cw_l2(const Network<T>& net, const Tensor<float>& clean, std::size_t true_label,
                         std::optional<std::size_t> target, const AttackConfig& cfg) {
  cfg.validate();
  if (true_label >= net.classes()) throw config_error("true label out of range");
  if (target) {
    if (*target >= net.classes()) throw config_error("target label out of range");
    if (*target == true_label) throw config_error("target label equals true label");
    return detail::cw_targeted(net, clean, true_label, *target, cfg);
  }
  std::optional<AdversarialExample> best, fallback;
  for (std::size_t t = 0; t < net.classes(); ++t) {
    if (t == true_label) continue;
    AdversarialExample ex = detail::cw_targeted(net, clean, true_label, t, cfg);
    if (ex.converged && (!best || ex.distortion < best->distortion)) best = std::move(ex);
    else if (!ex.converged && !fallback) fallback = std::move(ex);
  }
  AdversarialExample out = best ? std::move(*best) : std::move(*fallback);
  out.target_label.reset();
  return out;
}

/// x' = clip(x + epsilon * sign(dCE/dx), 0, 1).
template <class T>
AdversarialExample fgsm(const Network<T>& net, const Tensor<float>& clean, std::size_t true_label, double epsilon) {
  if (!(epsilon >= 0.0)) throw config_error("epsilon must be >= 0");
  Mat g;
  objective_and_input_gradient(net, net.example_matrix(clean), CrossEntropyObjective{true_label}, &g);
  std::vector<float> adv(clean.size());
  for (std::size_t i = 0; i < adv.size(); ++i) {
    const double gi = g.data()[i];
    const double s = gi > 0.0 ? 1.0 : (gi < 0.0 ? -1.0 : 0.0);
    adv[i] = static_cast<float>(std::clamp(static_cast<double>(clean[i]) + epsilon * s, 0.0, 1.0));
  }
  const Mat z = net.logits(net.example_matrix(Tensor<float>(clean.dims(), adv)));
  const bool fooled = argmax(std::span<const double>(z.data(), static_cast<std::size_t>(z.cols()))) != true_label;
  return detail::finish_example(clean, std::move(adv), true_label, std::nullopt, 0.0, fooled);
}

enum class SuiteKind { targeted_grid, non_targeted };

inline std::string to_string(SuiteKind k) { return k == SuiteKind::targeted_grid ? "targeted-grid" : "non-targeted"; }

struct AttackSuite {
  std::vector<AdversarialExample> examples;
  SuiteKind kind = SuiteKind::targeted_grid;
  AttackConfig generation_config;
  std::string source_dataset;
  std::string base_model_hash;
  std::uint64_t seed = 0;

  std::size_t converged_count() const {
    std::size_t n = 0;
    for (const auto& e : examples) n += e.converged;
    return n;
  }
  double mean_distortion(bool converged_only = true) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& e : examples)
      if (e.converged || !converged_only) {
        s += e.distortion;
        ++n;
      }
    return n ? s / static_cast<double>(n) : 0.0;
  }
};

/// Rows of `dataset`, in seeded order, that `net` classifies correctly.
template <class T>
std::vector<std::size_t> correctly_classified_in_seeded_order(const Network<T>& net, const LabeledDataset& dataset,
                                                              std::uint64_t seed) {
  const auto predicted = classify(net, dataset.images);
  std::vector<std::size_t> out;
  for (std::size_t i : seeded_permutation(dataset.size(), derive_seed(seed, stream::attack_bases)))
    if (predicted[i] == dataset.labels[i]) out.push_back(i);
  return out;
}

/// Targeted grid: one seeded, correctly classified basis per class, attacked toward every
/// other class (ordered by basis class, then target). Non-targeted: `count` seeded,
/// correctly classified inputs.
inline AttackSuite build_attack_suite(const Model& model, const LabeledDataset& dataset, SuiteKind kind,
                                      const AttackConfig& config, std::uint64_t seed, std::size_t count = 100,
                                      unsigned workers = 1) {
  config.validate();
  const Network<float> net(model);
  const std::size_t classes = net.classes();
  const auto candidates = correctly_classified_in_seeded_order(net, dataset, seed);

  struct Job {
    std::size_t row;
    std::optional<std::size_t> target;
  };
  std::vector<Job> jobs;
  if (kind == SuiteKind::targeted_grid) {
    std::vector<std::optional<std::size_t>> basis(classes);
    for (std::size_t i : candidates)
      if (!basis[dataset.labels[i]]) basis[dataset.labels[i]] = i;
    std::string missing;
    for (std::size_t k = 0; k < classes; ++k)
      if (!basis[k]) missing += (missing.empty() ? "" : ",") + std::to_string(k);
    if (!missing.empty()) throw config_error("no correctly classified representative for classes: " + missing);
    for (std::size_t k = 0; k < classes; ++k)
      for (std::size_t t = 0; t < classes; ++t)
        if (t != k) jobs.push_back({*basis[k], t});
  } else {
    if (candidates.size() < count)
      throw config_error("only " + std::to_string(candidates.size()) + " correctly classified inputs, need " +
                         std::to_string(count));
    for (std::size_t j = 0; j < count; ++j) jobs.push_back({candidates[j], std::nullopt});
  }

  AttackSuite suite;
  suite.kind = kind;
  suite.generation_config = config;
  suite.source_dataset = dataset.name;
  suite.base_model_hash = model_hash(model);
  suite.seed = seed;
  suite.examples.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
      const std::size_t row = jobs[j].row;
      AdversarialExample ex = cw_l2(net, dataset.example(row), dataset.labels[row], jobs[j].target, config);
      ex.base_model_hash = suite.base_model_hash;
      ex.source_index = row;
      suite.examples[j] = std::move(ex);
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < workers; ++t) pool.emplace_back(worker);
  }
  return suite;
}

inline void save_suite(const AttackSuite& suite, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  TensorBundle bundle{"fmtd-attack-suite", {}};
  for (std::size_t i = 0; i < suite.examples.size(); ++i) {
    bundle.tensors.push_back({"clean/" + std::to_string(i), suite.examples[i].clean});
    bundle.tensors.push_back({"adversarial/" + std::to_string(i), suite.examples[i].adversarial});
  }
  write_file_bytes(dir / "images.fmtd", encode_bundle(bundle));
  std::ofstream m(dir / "manifest.txt");
  if (!m) throw io_error("cannot write suite manifest in " + dir.string());
  const auto& c = suite.generation_config;
  m << std::setprecision(17);
  m << "fmtd-attack-suite 1\n";
  m << "kind " << to_string(suite.kind) << "\n";
  m << "source_dataset " << suite.source_dataset << "\n";
  m << "base_hash " << suite.base_model_hash << "\n";
  m << "seed " << suite.seed << "\n";
  m << "config " << c.kappa << ' ' << c.binary_search_steps << ' ' << c.c_initial << ' ' << c.c_max << ' '
    << c.inner_iterations << ' ' << c.inner_learning_rate << ' ' << c.abort_early << "\n";
  m << "optimizer " << to_string(c.optimizer) << "\n";
  m << "count " << suite.examples.size() << "\n";
  m << "# index source true target kappa distortion converged c\n";
  for (std::size_t i = 0; i < suite.examples.size(); ++i) {
    const auto& e = suite.examples[i];
    m << "example " << i << ' ' << e.source_index << ' ' << e.true_label << ' '
      << (e.target_label ? static_cast<long long>(*e.target_label) : -1LL) << ' ' << e.kappa << ' ' << e.distortion
      << ' ' << e.converged << ' ' << e.c << "\n";
  }
  if (!m) throw io_error("write failed for suite manifest in " + dir.string());
}

inline AttackSuite load_suite(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.txt");
  if (!m) throw io_error("attack suite manifest not found in " + dir.string());
  const TensorBundle bundle = decode_bundle(read_file_bytes(dir / "images.fmtd"));
  AttackSuite s;
  std::size_t count = 0;
  std::string line;
  while (std::getline(m, line)) {
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "kind") {
      std::string k;
      is >> k;
      s.kind = k == "non-targeted" ? SuiteKind::non_targeted : SuiteKind::targeted_grid;
    } else if (key == "source_dataset") {
      is >> s.source_dataset;
    } else if (key == "base_hash") {
      is >> s.base_model_hash;
    } else if (key == "seed") {
      is >> s.seed;
    } else if (key == "config") {
      auto& c = s.generation_config;
      is >> c.kappa >> c.binary_search_steps >> c.c_initial >> c.c_max >> c.inner_iterations >> c.inner_learning_rate >>
          c.abort_early;
    } else if (key == "optimizer") {
      std::string o;
      is >> o;
      s.generation_config.optimizer = parse_optimizer(o);
    } else if (key == "count") {
      is >> count;
    } else if (key == "example") {
      std::size_t i = 0;
      long long target = -1;
      AdversarialExample e;
      is >> i >> e.source_index >> e.true_label >> target >> e.kappa >> e.distortion >> e.converged >> e.c;
      if (!is || i != s.examples.size() || bundle.tensors.size() < 2 * (i + 1))
        throw format_error(format_error::kind::malformed, "bad example line in suite manifest: " + line);
      if (target >= 0) e.target_label = static_cast<std::size_t>(target);
      e.clean = bundle.tensors[2 * i].tensor;
      e.adversarial = bundle.tensors[2 * i + 1].tensor;
      e.perturbation = Tensor<float>(e.clean.dims());
      for (std::size_t k = 0; k < e.clean.size(); ++k) e.perturbation[k] = e.adversarial[k] - e.clean[k];
      e.base_model_hash = s.base_model_hash;
      s.examples.push_back(std::move(e));
    }
  }
  if (count != s.examples.size() || bundle.tensors.size() != 2 * count)
    throw format_error(format_error::kind::malformed, "suite manifest and image bundle disagree in " + dir.string());
  return s;
}

}  // namespace fmtd
