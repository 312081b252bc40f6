#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <variant>
#include <vector>

#include "fmtd/model.hpp"
#include "fmtd/rng.hpp"

namespace fmtd {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::RowVectorXd;

struct Prediction {
  std::vector<double> logits;  // softmax-layer input
  std::vector<double> probs;
  std::size_t label = 0;       // argmax, lowest index on ties
};

/// Cross-entropy toward `label`.
struct CrossEntropyObjective {
  std::size_t label = 0;
};
/// max(max_{i != target} Z_i - Z_target, -kappa) over logits Z.
struct CwMarginObjective {
  std::size_t target = 0;
  double kappa = 0.0;
};
using ObjectiveSpec = std::variant<CrossEntropyObjective, CwMarginObjective>;

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Value of the C&W margin and its gradient with respect to the logits.
inline double cw_margin(std::span<const double> logits, std::size_t target, double kappa,
                        std::vector<double>* dlogits = nullptr) {
  std::size_t other = target == 0 ? 1 : 0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (i != target && logits[i] > logits[other]) other = i;
  const double margin = logits[other] - logits[target];
  if (dlogits) {
    dlogits->assign(logits.size(), 0.0);
    if (margin > -kappa) {
      (*dlogits)[other] = 1.0;
      (*dlogits)[target] = -1.0;
    }
  }
  return std::max(margin, -kappa);
}

/// Compiled, immutable view of a model for computation. Storage may be float; all
/// arithmetic and accumulation is double. Safe for concurrent const use.
template <class T>
class Network {
 public:
  /// Intermediate values kept by a forward pass for backpropagation.
  struct Trace {
    std::vector<Mat> inputs;        // input to each layer
    std::vector<Mat> outputs;       // post-activation output of each layer
    std::vector<Mat> cols;          // im2col buffers (conv layers only)
    std::vector<std::vector<std::size_t>> pool_argmax;
    std::vector<Mat> dropout_masks; // scaled keep masks (dense layers, training only)
  };

  explicit Network(const ModelParams<T>& model) : arch_(model.arch), shapes_(model.arch.shapes()) {
    model.check_consistent();
    std::size_t t = 0;
    Shape3 in = arch_.input();
    for (std::size_t i = 0; i < arch_.layers().size(); ++i) {
      Compiled c;
      c.in = in;
      c.out = shapes_[i];
      const Layer& l = arch_.layers()[i];
      c.kind = l.index();
      if (const auto* cv = std::get_if<Conv>(&l)) {
        c.kh = cv->kh;
        c.kw = cv->kw;
      } else if (const auto* p = std::get_if<MaxPool>(&l)) {
        c.kh = p->ph;
        c.kw = p->pw;
      }
      if (c.kind != kPool) {
        const auto& w = model.tensors[t++].tensor;
        const auto& b = model.tensors[t++].tensor;
        const std::size_t rows = w.dim(0);
        const std::size_t cols = w.size() / rows;
        c.weight.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (std::size_t k = 0; k < w.size(); ++k) c.weight.data()[k] = static_cast<double>(w[k]);
        c.bias.resize(static_cast<Eigen::Index>(rows));
        for (std::size_t k = 0; k < b.size(); ++k) c.bias[static_cast<Eigen::Index>(k)] = static_cast<double>(b[k]);
      }
      layers_.push_back(std::move(c));
      in = shapes_[i];
    }
  }

  const ArchitectureSpec& arch() const { return arch_; }
  std::size_t input_size() const { return arch_.input().size(); }
  std::size_t classes() const { return arch_.classes(); }

  /// Flatten a batch ([n,h,w,c] or [n,m]) into an n x m matrix.
  template <class U>
  Mat batch_matrix(const Tensor<U>& batch) const {
    const auto& d = batch.dims();
    const Shape3 s = arch_.input();
    const bool ok = (d.size() == 4 && d[1] == s.h && d[2] == s.w && d[3] == s.c) ||
                    (d.size() == 2 && d[1] == s.size());
    if (!ok)
      throw shape_error("input layer: batch dims " + dims_to_string(d) + " do not match architecture input " +
                        std::to_string(s.h) + "x" + std::to_string(s.w) + "x" + std::to_string(s.c));
    Mat x(static_cast<Eigen::Index>(d[0]), static_cast<Eigen::Index>(s.size()));
    for (std::size_t k = 0; k < batch.size(); ++k) x.data()[k] = static_cast<double>(batch[k]);
    return x;
  }

  /// Single example of any rank whose element count equals the input size.
  template <class U>
  Mat example_matrix(const Tensor<U>& x) const {
    if (x.size() != input_size())
      throw shape_error("input layer: example has " + std::to_string(x.size()) + " elements, expected " +
                        std::to_string(input_size()));
    Mat m(1, static_cast<Eigen::Index>(input_size()));
    for (std::size_t k = 0; k < x.size(); ++k) m.data()[k] = static_cast<double>(x[k]);
    return m;
  }

  /// Logits for an n x m input matrix (inference mode).
  Mat logits(const Mat& x) const {
    Mat a = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) a = layer_forward(i, a, nullptr, nullptr, 0.0);
    return a;
  }

  /// Forward pass recording what backprop needs. Dropout active iff `dropout_rng` is set.
  Mat forward_trace(const Mat& x, Trace& trace, Rng* dropout_rng = nullptr, double dropout = 0.0) const {
    trace = Trace{};
    trace.inputs.resize(layers_.size());
    trace.outputs.resize(layers_.size());
    trace.cols.resize(layers_.size());
    trace.pool_argmax.resize(layers_.size());
    trace.dropout_masks.resize(layers_.size());
    Mat a = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      trace.inputs[i] = a;
      a = layer_forward(i, a, &trace, dropout_rng, dropout);
      trace.outputs[i] = a;
    }
    return a;
  }

  /// Backpropagate dLoss/dlogits. Returns dLoss/dinput; fills parameter gradients in
  /// `parameter_layout` order when `param_grads` is non-null.
  Mat backward(const Trace& trace, const Mat& dlogits, std::vector<Tensor<double>>* param_grads) const {
    std::vector<std::pair<Mat, RowVec>> grads(layers_.size());
    Mat d = dlogits;
    for (std::size_t i = layers_.size(); i-- > 0;) d = layer_backward(i, trace, d, param_grads ? &grads[i] : nullptr);
    if (param_grads) {
      param_grads->clear();
      const auto layout = parameter_layout(arch_);
      std::size_t t = 0;
      for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (layers_[i].kind == kPool) continue;
        const auto& [gw, gb] = grads[i];
        param_grads->emplace_back(layout[t++].tensor.dims(),
                                  std::vector<double>(gw.data(), gw.data() + gw.size()));
        param_grads->emplace_back(layout[t++].tensor.dims(),
                                  std::vector<double>(gb.data(), gb.data() + gb.size()));
      }
    }
    return d;
  }

  static Mat softmax_rows(const Mat& z) {
    Mat p(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      const double m = z.row(r).maxCoeff();
      double sum = 0.0;
      for (Eigen::Index c = 0; c < z.cols(); ++c) sum += (p(r, c) = std::exp(z(r, c) - m));
      p.row(r) /= sum;
    }
    return p;
  }

  /// Mean cross-entropy of logits against labels and its gradient w.r.t. the logits.
  static double cross_entropy(const Mat& z, std::span<const std::size_t> labels, Mat* dlogits) {
    const Mat p = softmax_rows(z);
    double loss = 0.0;
    const auto n = static_cast<double>(z.rows());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(r)]);
      const double m = z.row(r).maxCoeff();
      loss += m + std::log((z.row(r).array() - m).exp().sum()) - z(r, y);
    }
    if (dlogits) {
      *dlogits = p;
      for (Eigen::Index r = 0; r < z.rows(); ++r) (*dlogits)(r, static_cast<Eigen::Index>(labels[static_cast<std::size_t>(r)])) -= 1.0;
      *dlogits /= n;
    }
    return loss / n;
  }

 private:
  static constexpr std::size_t kConv = 0, kPool = 1, kDense = 2, kSoftmax = 3;

  struct Compiled {
    std::size_t kind = 0;
    Shape3 in, out;
    std::size_t kh = 0, kw = 0;
    Mat weight;
    RowVec bias;
  };

  Mat im2col(const Compiled& c, const Mat& x) const {
    const std::size_t n = static_cast<std::size_t>(x.rows());
    const std::size_t k = c.kh * c.kw * c.in.c;
    Mat cols(static_cast<Eigen::Index>(n * c.out.h * c.out.w), static_cast<Eigen::Index>(k));
    double* dst = cols.data();
    for (std::size_t s = 0; s < n; ++s) {
      const double* src = x.data() + s * c.in.size();
      for (std::size_t oy = 0; oy < c.out.h; ++oy)
        for (std::size_t ox = 0; ox < c.out.w; ++ox)
          for (std::size_t ky = 0; ky < c.kh; ++ky) {
            const double* row = src + ((oy + ky) * c.in.w + ox) * c.in.c;
            dst = std::copy(row, row + c.kw * c.in.c, dst);
          }
    }
    return cols;
  }

  void col2im_add(const Compiled& c, const Mat& dcols, Mat& dx) const {
    const std::size_t n = static_cast<std::size_t>(dx.rows());
    const double* src = dcols.data();
    for (std::size_t s = 0; s < n; ++s) {
      double* dst = dx.data() + s * c.in.size();
      for (std::size_t oy = 0; oy < c.out.h; ++oy)
        for (std::size_t ox = 0; ox < c.out.w; ++ox)
          for (std::size_t ky = 0; ky < c.kh; ++ky) {
            double* row = dst + ((oy + ky) * c.in.w + ox) * c.in.c;
            for (std::size_t j = 0; j < c.kw * c.in.c; ++j) row[j] += *src++;
          }
    }
  }

  Mat layer_forward(std::size_t i, const Mat& x, Trace* trace, Rng* rng, double dropout) const {
    const Compiled& c = layers_[i];
    const Eigen::Index n = x.rows();
    switch (c.kind) {
      case kConv: {
        Mat cols = im2col(c, x);
        Mat z = cols * c.weight.transpose();
        z.rowwise() += c.bias;
        z = z.cwiseMax(0.0);
        if (trace) trace->cols[i] = std::move(cols);
        return Eigen::Map<Mat>(z.data(), n, static_cast<Eigen::Index>(c.out.size()));
      }
      case kPool: {
        Mat y(n, static_cast<Eigen::Index>(c.out.size()));
        std::vector<std::size_t>* arg = trace ? &trace->pool_argmax[i] : nullptr;
        if (arg) arg->resize(static_cast<std::size_t>(y.size()));
        for (Eigen::Index s = 0; s < n; ++s) {
          const double* src = x.data() + s * x.cols();
          for (std::size_t oy = 0; oy < c.out.h; ++oy)
            for (std::size_t ox = 0; ox < c.out.w; ++ox)
              for (std::size_t ch = 0; ch < c.out.c; ++ch) {
                std::size_t best = ((oy * c.kh) * c.in.w + ox * c.kw) * c.in.c + ch;
                for (std::size_t py = 0; py < c.kh; ++py)
                  for (std::size_t px = 0; px < c.kw; ++px) {
                    const std::size_t idx = ((oy * c.kh + py) * c.in.w + ox * c.kw + px) * c.in.c + ch;
                    if (src[idx] > src[best]) best = idx;
                  }
                const std::size_t o = (oy * c.out.w + ox) * c.out.c + ch;
                y(s, static_cast<Eigen::Index>(o)) = src[best];
                if (arg) (*arg)[static_cast<std::size_t>(s) * c.out.size() + o] = best;
              }
        }
        return y;
      }
      case kDense: {
        Mat z = x * c.weight.transpose();
        z.rowwise() += c.bias;
        z = z.cwiseMax(0.0);
        if (trace && rng && dropout > 0.0) {
          const double keep = 1.0 - dropout;
          Mat mask(z.rows(), z.cols());
          for (Eigen::Index k = 0; k < mask.size(); ++k) mask.data()[k] = uniform01(*rng) < keep ? 1.0 / keep : 0.0;
          z = z.cwiseProduct(mask);
          trace->dropout_masks[i] = std::move(mask);
        }
        return z;
      }
      default: {
        Mat z = x * c.weight.transpose();
        z.rowwise() += c.bias;
        return z;
      }
    }
  }

  Mat layer_backward(std::size_t i, const Trace& trace, const Mat& dy, std::pair<Mat, RowVec>* grad) const {
    const Compiled& c = layers_[i];
    const Mat& x = trace.inputs[i];
    const Mat& y = trace.outputs[i];
    const Eigen::Index n = x.rows();
    switch (c.kind) {
      case kConv: {
        Mat dz = dy.cwiseProduct((y.array() > 0.0).matrix().cast<double>());
        Eigen::Map<const Mat> dzr(dz.data(), n * static_cast<Eigen::Index>(c.out.h * c.out.w),
                                  static_cast<Eigen::Index>(c.out.c));
        if (grad) {
          grad->first = dzr.transpose() * trace.cols[i];
          grad->second = dzr.colwise().sum();
        }
        const Mat dcols = dzr * c.weight;
        Mat dx = Mat::Zero(n, x.cols());
        col2im_add(c, dcols, dx);
        return dx;
      }
      case kPool: {
        Mat dx = Mat::Zero(n, x.cols());
        const auto& arg = trace.pool_argmax[i];
        for (Eigen::Index s = 0; s < n; ++s)
          for (std::size_t o = 0; o < c.out.size(); ++o)
            dx(s, static_cast<Eigen::Index>(arg[static_cast<std::size_t>(s) * c.out.size() + o])) +=
                dy(s, static_cast<Eigen::Index>(o));
        return dx;
      }
      case kDense: {
        Mat dz = dy;
        if (trace.dropout_masks[i].size() != 0) dz = dz.cwiseProduct(trace.dropout_masks[i]);
        dz = dz.cwiseProduct((y.array() > 0.0).matrix().cast<double>());
        if (grad) {
          grad->first = dz.transpose() * x;
          grad->second = dz.colwise().sum();
        }
        return dz * c.weight;
      }
      default: {
        if (grad) {
          grad->first = dy.transpose() * x;
          grad->second = dy.colwise().sum();
        }
        return dy * c.weight;
      }
    }
  }

  ArchitectureSpec arch_;
  std::vector<Shape3> shapes_;
  std::vector<Compiled> layers_;
};

inline Prediction make_prediction(std::span<const double> logits) {
  Prediction p;
  p.logits.assign(logits.begin(), logits.end());
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  p.probs.resize(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) sum += (p.probs[k] = std::exp(logits[k] - m));
  for (double& v : p.probs) v /= sum;
  p.label = argmax(p.logits);
  return p;
}

/// Inference on a batch; dropout off.
template <class T, class U>
std::vector<Prediction> forward(const Network<T>& net, const Tensor<U>& batch) {
  const Mat z = net.logits(net.batch_matrix(batch));
  std::vector<Prediction> out;
  out.reserve(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index r = 0; r < z.rows(); ++r)
    out.push_back(make_prediction(std::span<const double>(z.data() + r * z.cols(), static_cast<std::size_t>(z.cols()))));
  return out;
}

template <class T, class U>
std::vector<Prediction> forward(const ModelParams<T>& model, const Tensor<U>& batch) {
  return forward(Network<T>(model), batch);
}

/// Argmax labels only, processed in chunks to bound memory.
template <class T, class U>
std::vector<std::size_t> classify(const Network<T>& net, const Tensor<U>& batch, std::size_t chunk = 256) {
  const Mat x = net.batch_matrix(batch);
  std::vector<std::size_t> labels;
  labels.reserve(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index start = 0; start < x.rows(); start += static_cast<Eigen::Index>(chunk)) {
    const Eigen::Index rows = std::min<Eigen::Index>(static_cast<Eigen::Index>(chunk), x.rows() - start);
    const Mat z = net.logits(x.middleRows(start, rows));
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      Eigen::Index best = 0;
      for (Eigen::Index k = 1; k < z.cols(); ++k)
        if (z(r, k) > z(r, best)) best = k;
      labels.push_back(static_cast<std::size_t>(best));
    }
  }
  return labels;
}

template <class T>
struct LossAndGradients {
  double loss = 0.0;
  std::vector<Tensor<double>> grads;  // parameter_layout order
};

template <class T, class U>
LossAndGradients<T> loss_and_param_gradients(const Network<T>& net, const Tensor<U>& batch,
                                             std::span<const std::size_t> labels) {
  const Mat x = net.batch_matrix(batch);
  if (labels.size() != static_cast<std::size_t>(x.rows()))
    throw shape_error("label count " + std::to_string(labels.size()) + " differs from batch size " +
                      std::to_string(x.rows()));
  for (std::size_t y : labels)
    if (y >= net.classes()) throw config_error("label " + std::to_string(y) + " is not a valid class index");
  typename Network<T>::Trace trace;
  const Mat z = net.forward_trace(x, trace);
  Mat dz;
  LossAndGradients<T> out;
  out.loss = Network<T>::cross_entropy(z, labels, &dz);
  net.backward(trace, dz, &out.grads);
  return out;
}

template <class T, class U>
LossAndGradients<T> loss_and_param_gradients(const ModelParams<T>& model, const Tensor<U>& batch,
                                             std::span<const std::size_t> labels) {
  return loss_and_param_gradients(Network<T>(model), batch, labels);
}

/// Objective value and gradient w.r.t. one input (double precision).
template <class T>
double objective_and_input_gradient(const Network<T>& net, const Mat& x, const ObjectiveSpec& objective,
                                    Mat* grad, Mat* logits_out = nullptr) {
  typename Network<T>::Trace trace;
  const Mat z = net.forward_trace(x, trace);
  if (logits_out) *logits_out = z;
  Mat dz(1, z.cols());
  double value = 0.0;
  if (const auto* ce = std::get_if<CrossEntropyObjective>(&objective)) {
    if (ce->label >= net.classes()) throw config_error("objective label " + std::to_string(ce->label) + " out of range");
    const std::size_t labels[1] = {ce->label};
    value = Network<T>::cross_entropy(z, labels, &dz);
  } else {
    const auto& cw = std::get<CwMarginObjective>(objective);
    if (cw.target >= net.classes()) throw config_error("objective target " + std::to_string(cw.target) + " out of range");
    std::vector<double> d;
    value = cw_margin(std::span<const double>(z.data(), static_cast<std::size_t>(z.cols())), cw.target, cw.kappa, &d);
    for (std::size_t k = 0; k < d.size(); ++k) dz(0, static_cast<Eigen::Index>(k)) = d[k];
  }
  if (grad) *grad = net.backward(trace, dz, nullptr);
  return value;
}

/// Gradient of the objective w.r.t. a single input, same dims as `x`.
template <class T>
Tensor<T> input_gradient(const Network<T>& net, const Tensor<T>& x, const ObjectiveSpec& objective) {
  Mat g;
  objective_and_input_gradient(net, net.example_matrix(x), objective, &g);
  std::vector<T> data(static_cast<std::size_t>(g.size()));
  for (std::size_t k = 0; k < data.size(); ++k) data[k] = static_cast<T>(g.data()[k]);
  return Tensor<T>(x.dims(), std::move(data));
}

template <class T>
Tensor<T> input_gradient(const ModelParams<T>& model, const Tensor<T>& x, const ObjectiveSpec& objective) {
  return input_gradient(Network<T>(model), x, objective);
}

}  // namespace fmtd
