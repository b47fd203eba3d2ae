// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "droaug/autodiff.hpp"
#include "droaug/data.hpp"
#include "droaug/errors.hpp"

namespace droaug {

enum class ActivationKind { relu, requ, softmax };

inline const char* to_string(ActivationKind k) {
  switch (k) {
    case ActivationKind::relu: return "relu";
    case ActivationKind::requ: return "requ";
    case ActivationKind::softmax: return "softmax";
  }
  return "?";
}

template <class T>
Var<T> activate(const Var<T>& x, ActivationKind kind) {
  switch (kind) {
    case ActivationKind::relu: return relu(x);
    case ActivationKind::requ: return requ(x);
    case ActivationKind::softmax: return softmax(x);
  }
  throw ConfigError("unknown activation");
}

struct LayerSpec {
  enum class Kind { dense, conv2d, activation, flatten, preact_block, affine, global_avg_pool };
  Kind kind = Kind::flatten;
  std::size_t in = 0, out = 0, kernel = 0, stride = 1, pad = 0;
  ActivationKind act = ActivationKind::relu;

  std::string to_string() const {
    std::ostringstream os;
    switch (kind) {
      case Kind::dense: os << "dense(" << in << ',' << out << ')'; break;
      case Kind::conv2d:
        os << "conv(" << in << ',' << out << ',' << kernel << ',' << stride << ',' << pad << ')';
        break;
      case Kind::activation: os << droaug::to_string(act); break;
      case Kind::flatten: os << "flatten"; break;
      case Kind::preact_block:
        os << "preact(" << in << ',' << out << ',' << stride << ',' << droaug::to_string(act) << ')';
        break;
      case Kind::affine: os << "affine(" << in << ')'; break;
      case Kind::global_avg_pool: os << "gap"; break;
    }
    return os.str();
  }
};

/// Layer list with its input sample shape [C,H,W]; shapes are checked to compose.
struct Architecture {
  Shape input{1, 28, 28};
  std::vector<LayerSpec> layers;
  std::size_t classes = 10;

  std::string canonical() const {
    std::ostringstream os;
    os << "in(" << input[0] << ',' << input[1] << ',' << input[2] << ')';
    for (const auto& l : layers) os << '|' << l.to_string();
    return os.str();
  }
};

namespace detail {

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  int depth = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i < s.size() && s[i] == '(') ++depth;
    if (i < s.size() && s[i] == ')') --depth;
    if (i == s.size() || (s[i] == sep && depth == 0)) {
      out.emplace_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

inline ActivationKind parse_activation(std::string_view name) {
  if (name == "relu") return ActivationKind::relu;
  if (name == "requ") return ActivationKind::requ;
  if (name == "softmax") return ActivationKind::softmax;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

inline std::size_t parse_extent(const std::string& tok) {
  std::size_t pos = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(tok, &pos);
  } catch (const std::exception&) {
    throw ConfigError("expected a positive integer, got '" + tok + "'");
  }
  if (pos != tok.size()) throw ConfigError("expected a positive integer, got '" + tok + "'");
  return v;
}

inline Shape parse_dims(const std::string& text) {
  Shape out;
  for (const auto& t : split(text, 'x')) out.push_back(parse_extent(trim(t)));
  if (out.size() != 3) throw ConfigError("input shape must be CxHxW, got '" + text + "'");
  return out;
}

/// Walks the layer list, checking each layer against the running sample shape.
inline std::size_t check_composition(const Architecture& a) {
  Shape cur = a.input;
  auto need3 = [&](const LayerSpec& l) {
    if (cur.size() != 3) throw ShapeError(l.to_string() + " needs a [C,H,W] input, got " + to_string(cur));
    if (l.in != 0 && cur[0] != l.in) {
      throw ShapeError(l.to_string() + " expects " + std::to_string(l.in) + " channels, got " +
                       to_string(cur));
    }
  };
  for (const auto& l : a.layers) {
    switch (l.kind) {
      case LayerSpec::Kind::dense:
        if (cur.size() != 1 || cur[0] != l.in) {
          throw ShapeError(l.to_string() + " cannot follow output shape " + to_string(cur));
        }
        cur = {l.out};
        break;
      case LayerSpec::Kind::conv2d: {
        need3(l);
        if (cur[1] + 2 * l.pad < l.kernel || cur[2] + 2 * l.pad < l.kernel || l.stride == 0) {
          throw ShapeError(l.to_string() + " does not fit input " + to_string(cur));
        }
        cur = {l.out, (cur[1] + 2 * l.pad - l.kernel) / l.stride + 1,
               (cur[2] + 2 * l.pad - l.kernel) / l.stride + 1};
        break;
      }
      case LayerSpec::Kind::preact_block:
        need3(l);
        if (l.stride == 0) throw ShapeError("preact stride must be positive");
        cur = {l.out, (cur[1] + 2 - 3) / l.stride + 1, (cur[2] + 2 - 3) / l.stride + 1};
        break;
      case LayerSpec::Kind::affine: need3(l); break;
      case LayerSpec::Kind::global_avg_pool:
        need3(l);
        cur = {cur[0]};
        break;
      case LayerSpec::Kind::flatten: cur = {numel(cur)}; break;
      case LayerSpec::Kind::activation: break;
    }
  }
  if (cur.size() != 1) throw ShapeError("architecture must end in a flat [K] output, got " + to_string(cur));
  return cur[0];
}

inline LayerSpec parse_layer(const std::string& token) {
  const auto open = token.find('(');
  const std::string name = trim(token.substr(0, open));
  std::vector<std::size_t> args;
  std::string act_arg;
  if (open != std::string::npos) {
    if (token.back() != ')') throw ConfigError("malformed layer '" + token + "'");
    for (const auto& a : split(std::string_view(token).substr(open + 1, token.size() - open - 2), ',')) {
      const std::string t = trim(a);
      if (!t.empty() && !std::isdigit(static_cast<unsigned char>(t[0]))) {
        act_arg = t;
      } else {
        args.push_back(parse_extent(t));
      }
    }
  }
  LayerSpec l;
  auto want = [&](std::size_t n) {
    if (args.size() != n) throw ConfigError("layer '" + token + "' expects " + std::to_string(n) + " arguments");
  };
  if (name == "dense") {
    want(2);
    l.kind = LayerSpec::Kind::dense;
    l.in = args[0];
    l.out = args[1];
  } else if (name == "conv") {
    want(5);
    l.kind = LayerSpec::Kind::conv2d;
    l.in = args[0];
    l.out = args[1];
    l.kernel = args[2];
    l.stride = args[3];
    l.pad = args[4];
  } else if (name == "preact") {
    want(3);
    l.kind = LayerSpec::Kind::preact_block;
    l.in = args[0];
    l.out = args[1];
    l.stride = args[2];
    if (!act_arg.empty()) l.act = parse_activation(act_arg);
  } else if (name == "affine") {
    want(1);
    l.kind = LayerSpec::Kind::affine;
    l.in = args[0];
  } else if (name == "flatten") {
    l.kind = LayerSpec::Kind::flatten;
  } else if (name == "gap") {
    l.kind = LayerSpec::Kind::global_avg_pool;
  } else if (name == "relu" || name == "requ" || name == "softmax") {
    l.kind = LayerSpec::Kind::activation;
    l.act = parse_activation(name);
  } else {
    throw ConfigError("unknown layer '" + name + "'");
  }
  return l;
}

inline Architecture preset_architecture(const std::string& name, const Shape& input, std::size_t classes,
                                        ActivationKind act) {
  using K = LayerSpec::Kind;
  auto dense = [](std::size_t i, std::size_t o) { return LayerSpec{K::dense, i, o}; };
  auto conv = [](std::size_t i, std::size_t o, std::size_t s) { return LayerSpec{K::conv2d, i, o, 3, s, 1}; };
  LayerSpec a{K::activation};
  a.act = act;
  Architecture arch;
  arch.input = input;
  const std::size_t c = input[0];
  auto spatial = [](std::size_t n) { return (n + 2 - 3) / 2 + 1; };
  if (name == "mlp-small") {
    arch.layers = {LayerSpec{K::flatten}, dense(numel(input), 256), a, dense(256, 128), a,
                   dense(128, classes)};
  } else if (name == "cnn-small") {
    const std::size_t h = spatial(spatial(input[1])), w = spatial(spatial(input[2]));
    arch.layers = {conv(c, 8, 2), a, conv(8, 16, 2), a, LayerSpec{K::flatten}, dense(16 * h * w, classes)};
  } else if (name == "preact-mini") {
    LayerSpec b1{K::preact_block, 8, 8, 0, 1};
    LayerSpec b2{K::preact_block, 8, 16, 0, 2};
    b1.act = b2.act = act;
    arch.layers = {conv(c, 8, 2), b1, b2, LayerSpec{K::affine, 16}, a, LayerSpec{K::global_avg_pool},
                   dense(16, classes)};
  } else {
    throw ConfigError("unknown model preset '" + name + "'");
  }
  return arch;
}

}  // namespace detail

/// Parses a preset ("cnn-small", optionally "cnn-small:act=requ,input=3x32x32,classes=100")
/// or an explicit layer list ("in(1,28,28)|flatten|dense(784,10)").
inline Architecture parse_architecture(std::string_view text) {
  const std::string spec = detail::trim(text);
  if (spec.rfind("in(", 0) == 0) {
    const auto parts = detail::split(spec, '|');
    Architecture arch;
    const std::string head = detail::trim(parts[0]);
    if (head.back() != ')') throw ConfigError("malformed input declaration '" + head + "'");
    Shape in;
    for (const auto& t : detail::split(std::string_view(head).substr(3, head.size() - 4), ','))
      in.push_back(detail::parse_extent(detail::trim(t)));
    if (in.size() != 3) throw ConfigError("input declaration needs C,H,W");
    arch.input = in;
    for (std::size_t i = 1; i < parts.size(); ++i) arch.layers.push_back(detail::parse_layer(detail::trim(parts[i])));
    arch.classes = detail::check_composition(arch);
    return arch;
  }
  const auto colon = spec.find(':');
  const std::string name = spec.substr(0, colon);
  Shape input{1, 28, 28};
  std::size_t classes = 10;
  ActivationKind act = ActivationKind::relu;
  if (colon != std::string::npos) {
    for (const auto& opt : detail::split(std::string_view(spec).substr(colon + 1), ',')) {
      const auto eq = opt.find('=');
      if (eq == std::string::npos) throw ConfigError("malformed preset option '" + opt + "'");
      const std::string key = detail::trim(opt.substr(0, eq)), val = detail::trim(opt.substr(eq + 1));
      if (key == "act") {
        act = detail::parse_activation(val);
      } else if (key == "input") {
        input = detail::parse_dims(val);
      } else if (key == "classes") {
        classes = detail::parse_extent(val);
      } else {
        throw ConfigError("unknown preset option '" + key + "'");
      }
    }
  }
  Architecture arch = detail::preset_architecture(name, input, classes, act);
  arch.classes = detail::check_composition(arch);
  return arch;
}

/// Classifier f_theta built from an Architecture. Parameters are leaves with
/// requires_grad; names are unique and stable ("layer3.weight").
template <class T>
class Model {
 public:
  using Param = std::pair<std::string, Var<T>>;

  Model() = default;
  explicit Model(Architecture arch) : arch_(std::move(arch)) { allocate(); }

  const Architecture& architecture() const { return arch_; }
  std::string descriptor() const { return arch_.canonical(); }
  const Shape& input_shape() const { return arch_.input; }
  std::size_t num_classes() const { return arch_.classes; }

  const std::vector<Param>& params() const { return params_; }
  std::vector<Param>& params() { return params_; }

  std::vector<Var<T>> parameter_vars() const {
    std::vector<Var<T>> out;
    for (const auto& p : params_) out.push_back(p.second);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.second.size();
    return n;
  }

  const Var<T>& param(const std::string& name) const {
    for (const auto& p : params_)
      if (p.first == name) return p.second;
    throw ConfigError("no parameter named '" + name + "'");
  }

  /// Deep copy with fresh parameter leaves.
  Model clone() const {
    Model m;
    m.arch_ = arch_;
    for (const auto& [name, v] : params_) m.params_.emplace_back(name, Var<T>::leaf(v.value(), true));
    return m;
  }

  /// Draws parameters deterministically from `seed`: He-normal for weights feeding
  /// relu/requ, LeCun-normal otherwise, zero biases, unit scales.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& [name, v] : params_) {
      Tensor<T>& t = v.mutable_value();
      const auto kind = init_kind_.at(name);
      if (kind.first == Init::zeros) {
        std::fill(t.data().begin(), t.data().end(), T(0));
      } else if (kind.first == Init::ones) {
        std::fill(t.data().begin(), t.data().end(), T(1));
      } else {
        const double fan_in = double(t.size()) / double(t.dim(0));
        const double stddev = std::sqrt((kind.second ? 2.0 : 1.0) / fan_in);
        std::normal_distribution<double> dist(0.0, stddev);
        for (auto& x : t.data()) x = T(dist(rng));
      }
    }
  }

  /// Logits [N,K] for images [N,C,H,W].
  Var<T> forward(const Var<T>& images) const {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != arch_.input[0] || s[2] != arch_.input[1] || s[3] != arch_.input[2]) {
      throw ShapeError("model input " + to_string(s) + " does not match " + to_string(arch_.input));
    }
    Var<T> h = images;
    std::size_t pi = 0;
    for (std::size_t li = 0; li < arch_.layers.size(); ++li) {
      const LayerSpec& l = arch_.layers[li];
      switch (l.kind) {
        case LayerSpec::Kind::dense: {
          const auto& w = params_[pi++].second;
          const auto& b = params_[pi++].second;
          h = matmul(h, w, false, true) + b;
          break;
        }
        case LayerSpec::Kind::conv2d: {
          const auto& w = params_[pi++].second;
          const auto& b = params_[pi++].second;
          h = conv(h, w, b, l.kernel, l.stride, l.pad);
          break;
        }
        case LayerSpec::Kind::activation: h = activate(h, l.act); break;
        case LayerSpec::Kind::flatten: h = reshape(h, Shape{h.shape()[0], h.size() / h.shape()[0]}); break;
        case LayerSpec::Kind::affine: {
          const auto& sc = params_[pi++].second;
          const auto& sh = params_[pi++].second;
          h = h * sc + sh;
          break;
        }
        case LayerSpec::Kind::global_avg_pool: {
          const Shape hs = h.shape();
          const std::size_t n = hs[0], c = hs[1], hw = hs[2] * hs[3];
          h = scale(reshape(sum_to(reshape(h, Shape{n, c, hw}), Shape{n, c, 1}), Shape{n, c}),
                    T(1) / T(hw));
          break;
        }
        case LayerSpec::Kind::preact_block: {
          const auto& s1 = params_[pi++].second;
          const auto& b1 = params_[pi++].second;
          const auto& w1 = params_[pi++].second;
          const auto& c1 = params_[pi++].second;
          const auto& s2 = params_[pi++].second;
          const auto& b2 = params_[pi++].second;
          const auto& w2 = params_[pi++].second;
          const auto& c2 = params_[pi++].second;
          const Var<T> a = activate(h * s1 + b1, l.act);
          Var<T> shortcut = h;
          if (l.in != l.out || l.stride != 1) {
            const auto& ws = params_[pi++].second;
            const auto& cs = params_[pi++].second;
            shortcut = conv(a, ws, cs, 1, l.stride, 0);
          }
          Var<T> r = conv(a, w1, c1, 3, l.stride, 1);
          r = activate(r * s2 + b2, l.act);
          r = conv(r, w2, c2, 3, 1, 1);
          h = r + shortcut;
          break;
        }
      }
    }
    return h;
  }

 private:
  enum class Init { weight, zeros, ones };

  static Var<T> conv(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t k, std::size_t stride,
                     std::size_t pad) {
    const Shape& s = x.shape();
    ConvGeom gm{s[1], s[2], s[3], k, stride, pad};
    const std::size_t cout = w.shape()[0];
    Var<T> y = matmul(w, im2col(x, gm));
    y = y + reshape(b, Shape{cout, 1});
    return reshape(y, Shape{s[0], cout, gm.out_height(), gm.out_width()});
  }

  void add_param(const std::string& name, Shape shape, Init init, bool he = false) {
    for (const auto& p : params_)
      if (p.first == name) throw ConfigError("duplicate parameter name " + name);
    params_.emplace_back(name, Var<T>::leaf(Tensor<T>(std::move(shape), T(0)), true));
    init_kind_[name] = {init, he};
  }

  void allocate() {
    detail::check_composition(arch_);
    params_.clear();
    init_kind_.clear();
    auto feeds_rectifier = [&](std::size_t li) {
      for (std::size_t j = li + 1; j < arch_.layers.size(); ++j) {
        const auto& n = arch_.layers[j];
        if (n.kind == LayerSpec::Kind::affine) continue;
        return n.kind == LayerSpec::Kind::activation && n.act != ActivationKind::softmax;
      }
      return false;
    };
    for (std::size_t li = 0; li < arch_.layers.size(); ++li) {
      const LayerSpec& l = arch_.layers[li];
      const std::string p = "layer" + std::to_string(li) + ".";
      switch (l.kind) {
        case LayerSpec::Kind::dense:
          add_param(p + "weight", {l.out, l.in}, Init::weight, feeds_rectifier(li));
          add_param(p + "bias", {l.out}, Init::zeros);
          break;
        case LayerSpec::Kind::conv2d:
          add_param(p + "weight", {l.out, l.in * l.kernel * l.kernel}, Init::weight, feeds_rectifier(li));
          add_param(p + "bias", {l.out}, Init::zeros);
          break;
        case LayerSpec::Kind::affine:
          add_param(p + "scale", {l.in, 1, 1}, Init::ones);
          add_param(p + "shift", {l.in, 1, 1}, Init::zeros);
          break;
        case LayerSpec::Kind::preact_block: {
          const bool rect = l.act != ActivationKind::softmax;
          add_param(p + "affine1.scale", {l.in, 1, 1}, Init::ones);
          add_param(p + "affine1.shift", {l.in, 1, 1}, Init::zeros);
          add_param(p + "conv1.weight", {l.out, l.in * 9}, Init::weight, rect);
          add_param(p + "conv1.bias", {l.out}, Init::zeros);
          add_param(p + "affine2.scale", {l.out, 1, 1}, Init::ones);
          add_param(p + "affine2.shift", {l.out, 1, 1}, Init::zeros);
          add_param(p + "conv2.weight", {l.out, l.out * 9}, Init::weight, rect);
          add_param(p + "conv2.bias", {l.out}, Init::zeros);
          if (l.in != l.out || l.stride != 1) {
            add_param(p + "shortcut.weight", {l.out, l.in}, Init::weight, false);
            add_param(p + "shortcut.bias", {l.out}, Init::zeros);
          }
          break;
        }
        default: break;
      }
    }
  }

  Architecture arch_;
  std::vector<Param> params_;
  std::unordered_map<std::string, std::pair<Init, bool>> init_kind_;
};

template <class T>
Model<T> build_model(const Architecture& arch, std::uint64_t seed) {
  Model<T> m(arch);
  m.initialize(seed);
  return m;
}

template <class T>
Model<T> build_model(std::string_view spec, std::uint64_t seed) {
  return build_model<T>(parse_architecture(spec), seed);
}

/// -sum_k labels_k log softmax(logits)_k per row, shape [N].
template <class T>
Var<T> per_sample_cross_entropy(const Var<T>& logits, const Var<T>& labels) {
  if (logits.shape() != labels.shape() || logits.shape().size() != 2) {
    throw ShapeError("cross entropy expects matching [N,K] logits and labels");
  }
  const std::size_t n = logits.shape()[0];
  return -reshape(sum_last(labels * log_softmax(logits)), Shape{n});
}

/// Mean over the batch of the per-sample cross entropy.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const Var<T>& labels) {
  return mean(per_sample_cross_entropy(logits, labels));
}

/// Argmax predictions, evaluated without recording a graph in chunks of `chunk`.
template <class T>
std::vector<int> predict(const Model<T>& model, const Tensor<T>& images, std::size_t chunk = 1000) {
  NoGradGuard ng;
  const std::size_t n = images.dim(0);
  const std::size_t per = images.size() / n;
  std::vector<int> out;
  out.reserve(n);
  for (std::size_t b = 0; b < n; b += chunk) {
    const std::size_t cnt = std::min(chunk, n - b);
    Shape s = images.shape();
    s[0] = cnt;
    std::vector<T> part(images.raw() + b * per, images.raw() + (b + cnt) * per);
    const auto logits = model.forward(Var<T>::constant(Tensor<T>(s, std::move(part))));
    const auto am = argmax_rows(logits.value());
    out.insert(out.end(), am.begin(), am.end());
  }
  return out;
}

/// Fraction of samples whose argmax prediction equals the label.
template <class T>
double accuracy(const Model<T>& model, const Dataset& data, std::size_t chunk = 1000) {
  std::size_t correct = 0;
  for (std::size_t b = 0; b < data.size(); b += chunk) {
    const std::size_t cnt = std::min(chunk, data.size() - b);
    const Batch<T> batch = make_batch<T>(data, b, cnt);
    const auto pred = predict(model, batch.images, chunk);
    for (std::size_t i = 0; i < cnt; ++i) correct += pred[i] == data.labels[b + i];
  }
  return double(correct) / double(data.size());
}

}  // namespace droaug
