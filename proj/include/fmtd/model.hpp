#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fmtd/arch.hpp"
#include "fmtd/rng.hpp"
#include "fmtd/tensor.hpp"

namespace fmtd {

/// Expected parameter tensors for an architecture, in canonical order:
/// conv weights [filters, kh, kw, in_c]; fc/softmax weights [out, in]; biases [out].
inline std::vector<NamedTensor<float>> parameter_layout(const ArchitectureSpec& arch) {
  std::vector<NamedTensor<float>> out;
  const auto shapes = arch.shapes();
  Shape3 in = arch.input();
  for (std::size_t i = 0; i < arch.layers().size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i);
    const Layer& l = arch.layers()[i];
    if (const auto* c = std::get_if<Conv>(&l)) {
      out.push_back({prefix + ".weight", Tensor<float>({c->filters, c->kh, c->kw, in.c})});
      out.push_back({prefix + ".bias", Tensor<float>({c->filters})});
    } else if (std::holds_alternative<Dense>(l) || std::holds_alternative<Softmax>(l)) {
      const std::size_t units = shapes[i].c;
      out.push_back({prefix + ".weight", Tensor<float>({units, in.size()})});
      out.push_back({prefix + ".bias", Tensor<float>({units})});
    }
    in = shapes[i];
  }
  return out;
}

/// The classifier: architecture plus its weight and bias tensors. `T` is the storage
/// scalar (float for persisted models, double for numerical checks).
template <class T>
struct ModelParams {
  ArchitectureSpec arch;
  std::vector<NamedTensor<T>> tensors;
  std::string provenance;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.tensor.size();
    return n;
  }

  /// Throws shape_error unless tensors match `parameter_layout(arch)` by name and dims.
  void check_consistent() const {
    const auto layout = parameter_layout(arch);
    if (layout.size() != tensors.size())
      throw shape_error("model has " + std::to_string(tensors.size()) + " tensors, architecture expects " +
                        std::to_string(layout.size()));
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (layout[i].name != tensors[i].name || layout[i].tensor.dims() != tensors[i].tensor.dims())
        throw shape_error("tensor " + std::to_string(i) + " is " + tensors[i].name +
                          dims_to_string(tensors[i].tensor.dims()) + ", expected " + layout[i].name +
                          dims_to_string(layout[i].tensor.dims()));
    }
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> m{arch, {}, provenance};
    for (const auto& t : tensors) m.tensors.push_back({t.name, t.tensor.template cast<U>()});
    return m;
  }

  /// Same architecture and weights. Provenance is not persisted, so it is not compared.
  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.arch == b.arch && a.tensors == b.tensors;
  }
};

using Model = ModelParams<float>;

/// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
template <class T = float>
ModelParams<T> init_model(const ArchitectureSpec& arch, std::uint64_t seed) {
  ModelParams<T> m{arch, {}, "init seed=" + std::to_string(seed)};
  Rng rng(derive_seed(seed, stream::init));
  for (auto& nt : parameter_layout(arch)) {
    Tensor<T> t(nt.tensor.dims());
    if (nt.name.ends_with(".weight")) {
      const auto& d = t.dims();
      // conv: fan_in = kh*kw*in_c, fan_out = filters*kh*kw; dense: fan_in = in, fan_out = out
      const double receptive = d.size() == 4 ? static_cast<double>(d[1] * d[2]) : 1.0;
      const double fan_in = d.size() == 4 ? receptive * static_cast<double>(d[3]) : static_cast<double>(d[1]);
      const double fan_out = static_cast<double>(d[0]) * receptive;
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      for (auto& v : t.values()) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * limit);
    }
    m.tensors.push_back({nt.name, std::move(t)});
  }
  return m;
}

}  // namespace fmtd
