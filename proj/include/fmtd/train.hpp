#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fmtd/data.hpp"
#include "fmtd/network.hpp"

namespace fmtd {

struct TrainHyper {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double lr_decay = 1.0;        // multiplier applied every decay_interval_epochs
  double momentum_decay = 1.0;
  int decay_interval_epochs = 0;  // 0 disables decay
  double dropout_rate = 0.5;
  std::size_t batch_size = 128;
  int max_epochs = 50;
  int plateau_patience = 5;

  void validate() const {
    if (!(learning_rate > 0.0)) throw config_error("learning_rate must be > 0");
    if (batch_size < 1) throw config_error("batch_size must be >= 1");
    if (plateau_patience < 1) throw config_error("plateau_patience must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw config_error("dropout_rate must be in [0,1)");
    if (max_epochs < 1) throw config_error("max_epochs must be >= 1");
  }

  /// Effective (learning rate, momentum) during 1-based `epoch`.
  std::pair<double, double> schedule(int epoch) const {
    if (decay_interval_epochs <= 0) return {learning_rate, momentum};
    const int k = (epoch - 1) / decay_interval_epochs;
    return {learning_rate * std::pow(lr_decay, k), momentum * std::pow(momentum_decay, k)};
  }
};

/// Momentum velocities, one per parameter tensor.
template <class T>
struct SgdState {
  std::vector<Tensor<T>> velocity;
};

/// v' = momentum * v - lr * g;  theta' = theta + v'.
template <class T>
void sgd_momentum_step(ModelParams<T>& params, const std::vector<Tensor<double>>& grads, SgdState<T>& state,
                       double learning_rate, double momentum) {
  if (grads.size() != params.tensors.size())
    throw shape_error("gradient count " + std::to_string(grads.size()) + " differs from parameter count " +
                      std::to_string(params.tensors.size()));
  if (state.velocity.empty())
    for (const auto& t : params.tensors) state.velocity.emplace_back(t.tensor.dims());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto& theta = params.tensors[i].tensor;
    auto& v = state.velocity[i];
    if (grads[i].dims() != theta.dims() || v.dims() != theta.dims())
      throw shape_error("gradient shape mismatch for " + params.tensors[i].name);
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double nv = momentum * static_cast<double>(v[k]) - learning_rate * grads[i][k];
      v[k] = static_cast<T>(nv);
      theta[k] = static_cast<T>(static_cast<double>(theta[k]) + nv);
    }
  }
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;  // measured on the fly with dropout active
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // 1-based; the returned snapshot
  double best_val_accuracy = 0.0;
  double seconds = 0.0;
  int epochs_run() const { return static_cast<int>(epochs.size()); }
};

enum class StopRule { plateau, fixed_epochs };

/// Returns true once `val_accuracy` has failed to strictly exceed its running best for
/// `patience` consecutive epochs.
class PlateauTracker {
 public:
  explicit PlateauTracker(int patience) : patience_(patience) {}
  /// Feed one epoch; returns true if it is a new best.
  bool update(double val_accuracy) {
    ++epoch_;
    if (epoch_ == 1 || val_accuracy > best_) {
      best_ = val_accuracy;
      best_epoch_ = epoch_;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }
  bool should_stop() const { return stale_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best() const { return best_; }

 private:
  int patience_;
  int epoch_ = 0, best_epoch_ = 0, stale_ = 0;
  double best_ = 0.0;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

template <class T>
EvalResult evaluate_dataset(const Network<T>& net, const LabeledDataset& ds, std::size_t chunk = 500) {
  const Mat x = net.batch_matrix(ds.images);
  double loss = 0.0;
  std::size_t correct = 0;
  for (Eigen::Index start = 0; start < x.rows(); start += static_cast<Eigen::Index>(chunk)) {
    const Eigen::Index rows = std::min<Eigen::Index>(static_cast<Eigen::Index>(chunk), x.rows() - start);
    const Mat z = net.logits(x.middleRows(start, rows));
    const std::span<const std::size_t> lab(ds.labels.data() + start, static_cast<std::size_t>(rows));
    loss += Network<T>::cross_entropy(z, lab, nullptr) * static_cast<double>(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
      Eigen::Index best = 0;
      for (Eigen::Index k = 1; k < z.cols(); ++k)
        if (z(r, k) > z(r, best)) best = k;
      if (static_cast<std::size_t>(best) == lab[static_cast<std::size_t>(r)]) ++correct;
    }
  }
  const auto n = static_cast<double>(ds.size());
  return {loss / n, static_cast<double>(correct) / n};
}

template <class T>
struct TrainResult {
  ModelParams<T> model;
  TrainHistory history;
};

/// Mini-batch momentum SGD with per-epoch seeded reshuffling. Returns the snapshot with
/// the highest validation accuracy (earliest on ties). Throws numeric_error on divergence.
template <class T>
TrainResult<T> train(ModelParams<T> model, const LabeledDataset& train_set, const LabeledDataset& val_set,
                     const TrainHyper& hyper, StopRule rule, std::uint64_t seed) {
  hyper.validate();
  if (train_set.size() == 0 || val_set.size() == 0) throw config_error("training and validation sets must be non-empty");
  const auto t0 = std::chrono::steady_clock::now();
  SgdState<T> state;
  Rng dropout_rng(derive_seed(seed, stream::dropout));
  PlateauTracker plateau(hyper.plateau_patience);
  TrainResult<T> out{model, {}};
  const Mat all = Network<T>(model).batch_matrix(train_set.images);
  const std::size_t n = train_set.size();

  for (int epoch = 1; epoch <= hyper.max_epochs; ++epoch) {
    const auto [lr, mom] = hyper.schedule(epoch);
    const auto order = seeded_permutation(n, derive_seed(derive_seed(seed, stream::shuffle), static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += hyper.batch_size) {
      const std::size_t rows = std::min(hyper.batch_size, n - start);
      Mat x(static_cast<Eigen::Index>(rows), all.cols());
      std::vector<std::size_t> labels(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        x.row(static_cast<Eigen::Index>(r)) = all.row(static_cast<Eigen::Index>(order[start + r]));
        labels[r] = train_set.labels[order[start + r]];
      }
      const Network<T> net(model);
      typename Network<T>::Trace trace;
      const Mat z = net.forward_trace(x, trace, &dropout_rng, hyper.dropout_rate);
      Mat dz;
      const double loss = Network<T>::cross_entropy(z, labels, &dz);
      if (!std::isfinite(loss))
        throw numeric_error("training diverged (non-finite loss) in epoch " + std::to_string(epoch), epoch - 1);
      loss_sum += loss * static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        Eigen::Index best = 0;
        for (Eigen::Index k = 1; k < z.cols(); ++k)
          if (z(static_cast<Eigen::Index>(r), k) > z(static_cast<Eigen::Index>(r), best)) best = k;
        if (static_cast<std::size_t>(best) == labels[r]) ++correct;
      }
      std::vector<Tensor<double>> grads;
      net.backward(trace, dz, &grads);
      sgd_momentum_step(model, grads, state, lr, mom);
    }
    for (const auto& t : model.tensors)
      if (!t.tensor.all_finite())
        throw numeric_error("training diverged (non-finite parameters) in epoch " + std::to_string(epoch), epoch - 1);

    const EvalResult val = evaluate_dataset(Network<T>(model), val_set);
    out.history.epochs.push_back({epoch, loss_sum / static_cast<double>(n),
                                  static_cast<double>(correct) / static_cast<double>(n), val.loss, val.accuracy});
    if (plateau.update(val.accuracy)) out.model = model;
    if (rule == StopRule::plateau && plateau.should_stop()) break;
  }
  out.history.best_epoch = plateau.best_epoch();
  out.history.best_val_accuracy = plateau.best();
  out.history.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace fmtd
