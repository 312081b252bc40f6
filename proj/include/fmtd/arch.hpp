#pragma once

#include <cstddef>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fmtd/error.hpp"

namespace fmtd {

/// Height, width, channels of one activation (channels-last).
struct Shape3 {
  std::size_t h = 0, w = 0, c = 0;
  std::size_t size() const { return h * w * c; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

// Valid padding, stride 1, followed by ReLU.
struct Conv {
  std::size_t filters = 0, kh = 0, kw = 0;
  friend bool operator==(const Conv&, const Conv&) = default;
};
// Stride equals the window; trailing rows/cols that do not fill a window are dropped.
struct MaxPool {
  std::size_t ph = 0, pw = 0;
  friend bool operator==(const MaxPool&, const MaxPool&) = default;
};
// Fully connected + ReLU (+ dropout while training).
struct Dense {
  std::size_t units = 0;
  friend bool operator==(const Dense&, const Dense&) = default;
};
// Linear head producing logits, followed by softmax.
struct Softmax {
  std::size_t classes = 0;
  friend bool operator==(const Softmax&, const Softmax&) = default;
};

using Layer = std::variant<Conv, MaxPool, Dense, Softmax>;

/// Ordered layer list with a fixed input shape. Text form, e.g.
///   "input 28x28x1; conv 32 3x3; pool 2x2; fc 200; softmax 10"
class ArchitectureSpec {
 public:
  ArchitectureSpec() = default;
  ArchitectureSpec(Shape3 input, std::vector<Layer> layers) : input_(input), layers_(std::move(layers)) {
    validate();
  }

  const Shape3& input() const { return input_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::size_t classes() const { return std::get<Softmax>(layers_.back()).classes; }

  /// Output shape of every layer (index i = after layer i). Throws shape_error naming the layer.
  std::vector<Shape3> shapes() const {
    std::vector<Shape3> out;
    Shape3 s = input_;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const Layer& l = layers_[i];
      if (const auto* c = std::get_if<Conv>(&l)) {
        if (c->filters == 0 || c->kh == 0 || c->kw == 0 || c->kh > s.h || c->kw > s.w)
          throw shape_error("layer " + std::to_string(i) + " (conv): kernel does not fit input " + shape_string(s));
        s = {s.h - c->kh + 1, s.w - c->kw + 1, c->filters};
      } else if (const auto* p = std::get_if<MaxPool>(&l)) {
        if (p->ph == 0 || p->pw == 0 || p->ph > s.h || p->pw > s.w)
          throw shape_error("layer " + std::to_string(i) + " (pool): window does not fit input " + shape_string(s));
        s = {s.h / p->ph, s.w / p->pw, s.c};
      } else if (const auto* d = std::get_if<Dense>(&l)) {
        if (d->units == 0) throw shape_error("layer " + std::to_string(i) + " (fc): zero units");
        s = {1, 1, d->units};
      } else {
        const auto& sm = std::get<Softmax>(l);
        if (sm.classes < 2) throw shape_error("layer " + std::to_string(i) + " (softmax): needs >= 2 classes");
        if (i + 1 != layers_.size()) throw shape_error("layer " + std::to_string(i) + " (softmax): must be last");
        s = {1, 1, sm.classes};
      }
      out.push_back(s);
    }
    return out;
  }

  std::string to_string() const {
    std::ostringstream os;
    os << "input " << shape_string(input_);
    for (const Layer& l : layers_) {
      os << "; ";
      std::visit(
          [&](const auto& v) {
            using L = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<L, Conv>) os << "conv " << v.filters << ' ' << v.kh << 'x' << v.kw;
            else if constexpr (std::is_same_v<L, MaxPool>) os << "pool " << v.ph << 'x' << v.pw;
            else if constexpr (std::is_same_v<L, Dense>) os << "fc " << v.units;
            else os << "softmax " << v.classes;
          },
          l);
    }
    return os.str();
  }

  static ArchitectureSpec parse(std::string_view text) {
    Shape3 input{};
    bool have_input = false;
    std::vector<Layer> layers;
    std::size_t start = 0;
    while (start <= text.size()) {
      std::size_t end = text.find(';', start);
      if (end == std::string_view::npos) end = text.size();
      std::istringstream is{std::string(text.substr(start, end - start))};
      std::string kind;
      if (is >> kind) {
        if (kind == "input") {
          input = parse_shape3(next_token(is, text), text);
          have_input = true;
        } else if (kind == "conv") {
          const std::size_t f = parse_count(next_token(is, text), text);
          const auto [kh, kw] = parse_pair(next_token(is, text), text);
          layers.emplace_back(Conv{f, kh, kw});
        } else if (kind == "pool") {
          const auto [ph, pw] = parse_pair(next_token(is, text), text);
          layers.emplace_back(MaxPool{ph, pw});
        } else if (kind == "fc") {
          layers.emplace_back(Dense{parse_count(next_token(is, text), text)});
        } else if (kind == "softmax") {
          layers.emplace_back(Softmax{parse_count(next_token(is, text), text)});
        } else {
          throw config_error("unknown layer kind '" + kind + "' in architecture '" + std::string(text) + "'");
        }
        std::string extra;
        if (is >> extra) throw config_error("unexpected '" + extra + "' in architecture '" + std::string(text) + "'");
      }
      start = end + 1;
    }
    if (!have_input) throw config_error("architecture lacks an input entry: '" + std::string(text) + "'");
    return ArchitectureSpec(input, std::move(layers));
  }

  friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;

 private:
  void validate() const {
    if (input_.size() == 0) throw shape_error("architecture input shape is empty");
    if (layers_.empty() || !std::holds_alternative<Softmax>(layers_.back()))
      throw shape_error("architecture must end with a softmax layer");
    (void)shapes();
  }

  static std::string shape_string(const Shape3& s) {
    return std::to_string(s.h) + "x" + std::to_string(s.w) + "x" + std::to_string(s.c);
  }
  static std::string next_token(std::istringstream& is, std::string_view text) {
    std::string tok;
    if (!(is >> tok)) throw config_error("truncated architecture '" + std::string(text) + "'");
    return tok;
  }
  static std::size_t parse_count(const std::string& tok, std::string_view text) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(tok, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != tok.size() || tok.empty() || tok[0] == '-')
      throw config_error("bad number '" + tok + "' in architecture '" + std::string(text) + "'");
    return v;
  }
  static std::vector<std::size_t> split_x(const std::string& tok, std::string_view text) {
    std::vector<std::size_t> parts;
    std::size_t s = 0;
    while (true) {
      const std::size_t e = tok.find('x', s);
      parts.push_back(parse_count(tok.substr(s, e == std::string::npos ? std::string::npos : e - s), text));
      if (e == std::string::npos) break;
      s = e + 1;
    }
    return parts;
  }
  static std::pair<std::size_t, std::size_t> parse_pair(const std::string& tok, std::string_view text) {
    const auto p = split_x(tok, text);
    if (p.size() != 2) throw config_error("expected HxW, got '" + tok + "'");
    return {p[0], p[1]};
  }
  static Shape3 parse_shape3(const std::string& tok, std::string_view text) {
    const auto p = split_x(tok, text);
    if (p.size() != 3) throw config_error("expected HxWxC, got '" + tok + "'");
    return {p[0], p[1], p[2]};
  }

  Shape3 input_{};
  std::vector<Layer> layers_;
};

namespace arch {

/// Two 32-filter and two 64-filter 3x3 convs with pooling, two FC-200, softmax.
inline ArchitectureSpec cnn_a(std::size_t side = 28, std::size_t channels = 1, std::size_t classes = 10) {
  return ArchitectureSpec({side, side, channels},
                          {Conv{32, 3, 3}, Conv{32, 3, 3}, MaxPool{2, 2}, Conv{64, 3, 3}, Conv{64, 3, 3},
                           MaxPool{2, 2}, Dense{200}, Dense{200}, Softmax{classes}});
}

/// Same topology as cnn_a with 8/16 filters and FC-64; sized for CPU test budgets.
inline ArchitectureSpec cnn_a_small(std::size_t side = 28, std::size_t channels = 1, std::size_t classes = 10) {
  return ArchitectureSpec({side, side, channels},
                          {Conv{8, 3, 3}, Conv{8, 3, 3}, MaxPool{2, 2}, Conv{16, 3, 3}, Conv{16, 3, 3},
                           MaxPool{2, 2}, Dense{64}, Dense{64}, Softmax{classes}});
}

/// Resolve a preset name ("cnn-a", "cnn-a-small") or a literal descriptor.
inline ArchitectureSpec by_name(std::string_view name, std::size_t side, std::size_t channels, std::size_t classes) {
  if (name == "cnn-a") return cnn_a(side, channels, classes);
  if (name == "cnn-a-small") return cnn_a_small(side, channels, classes);
  return ArchitectureSpec::parse(name);
}

}  // namespace arch

}  // namespace fmtd
