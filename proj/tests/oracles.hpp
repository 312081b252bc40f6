#pragma once

// Independent reference computations shared by the test binaries.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fmtd/network.hpp"

namespace oracle {

using namespace fmtd;

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

/// Worst relative error between analytic parameter gradients and central differences of the mean CE loss.
/// The step is small enough that a ReLU or max-pool switch inside [theta-h, theta+h] is rare.
inline double worst_param_gradient_error(ModelParams<double> model, const Tensor<double>& batch,
                                         const std::vector<std::size_t>& labels, double h = 1e-5) {
  const auto analytic = loss_and_param_gradients(model, batch, labels).grads;
  double worst = 0.0;
  for (std::size_t t = 0; t < model.tensors.size(); ++t) {
    auto& theta = model.tensors[t].tensor;
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double saved = theta[k];
      theta[k] = saved + h;
      const double up = loss_and_param_gradients(model, batch, labels).loss;
      theta[k] = saved - h;
      const double down = loss_and_param_gradients(model, batch, labels).loss;
      theta[k] = saved;
      worst = std::max(worst, rel_err(analytic[t][k], (up - down) / (2 * h)));
    }
  }
  return worst;
}

/// Worst relative error of the input gradient against central differences, for any objective.
inline double worst_input_gradient_error(const ModelParams<double>& model, Tensor<double> x, const ObjectiveSpec& obj,
                                         double h = 1e-5) {
  const Network<double> net(model);
  const Tensor<double> g = input_gradient(net, x, obj);
  auto value = [&](const Tensor<double>& at) {
    return objective_and_input_gradient(net, net.example_matrix(at), obj, nullptr);
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double saved = x[k];
    x[k] = saved + h;
    const double up = value(x);
    x[k] = saved - h;
    const double down = value(x);
    x[k] = saved;
    worst = std::max(worst, rel_err(g[k], (up - down) / (2 * h)));
  }
  return worst;
}

/// Small random architecture with at most `max_params` parameters.
inline ArchitectureSpec random_small_arch(std::mt19937_64& rng, std::size_t max_params = 500) {
  for (;;) {
    auto pick = [&](std::size_t lo, std::size_t hi) {
      return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    const std::size_t side = pick(4, 8), channels = pick(1, 2), classes = pick(2, 4);
    std::vector<Layer> layers;
    std::size_t s = side;
    if (pick(0, 1)) {
      const std::size_t k = pick(2, 3);
      layers.push_back(Conv{pick(1, 3), k, k});
      s = s - k + 1;
      if (s >= 2 && pick(0, 1)) layers.push_back(MaxPool{2, 2});
    }
    layers.push_back(Dense{pick(2, 6)});
    if (pick(0, 1)) layers.push_back(Dense{pick(2, 5)});
    layers.push_back(Softmax{classes});
    ArchitectureSpec arch({side, side, channels}, layers);
    std::size_t n = 0;
    for (const auto& t : parameter_layout(arch)) n += t.tensor.size();
    if (n <= max_params) return arch;
  }
}

inline Tensor<double> random_batch(std::mt19937_64& rng, std::size_t n, const Shape3& s) {
  Tensor<double> x({n, s.h, s.w, s.c});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : x.values()) v = u(rng);
  return x;
}

/// Randomised model: Glorot init plus non-zero biases so ReLU patterns vary.
inline ModelParams<double> random_model(const ArchitectureSpec& arch, std::uint64_t seed) {
  auto m = init_model<double>(arch, seed);
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  for (auto& t : m.tensors)
    if (t.name.ends_with(".bias"))
      for (auto& v : t.tensor.values()) v = u(rng);
  return m;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fmtd-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace oracle
