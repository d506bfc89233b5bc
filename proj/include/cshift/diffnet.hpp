#pragma once

// Minimal differentiable classifiers: convolution, fully connected, ReLU,
// average pooling and flatten layers with hand-written forward and backward
// passes in 64-bit arithmetic.
//
// Architectures are described by a string such as
//   "in=3x16x16;conv=8k3s1p1;relu;pool=2;conv=16k3s1p1;relu;pool=2;flatten;linear=4"
// and the parameter layout is a pure function of that string.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cshift/rng.hpp"
#include "cshift/tensor.hpp"

namespace cshift {

enum class LayerKind { Conv, Linear, ReLU, AvgPool, Flatten };

struct Layer {
  LayerKind kind = LayerKind::Flatten;
  Shape in_shape;
  Shape out_shape;
  // Conv
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  // AvgPool
  std::size_t pool = 0;
  // Conv: out x in x k x k, Linear: out x in. Bias has one entry per output unit.
  std::vector<double> weight;
  std::vector<double> bias;

  [[nodiscard]] bool has_parameters() const { return kind == LayerKind::Conv || kind == LayerKind::Linear; }
  [[nodiscard]] std::size_t fan_in() const {
    return kind == LayerKind::Conv ? in_shape.channels * kernel * kernel : in_shape.size();
  }
};

struct LayerGrad {
  std::vector<double> weight;
  std::vector<double> bias;
};

using Gradients = std::vector<LayerGrad>;

class Network {
 public:
  Network() = default;

  /// Builds a network with all parameters zero.
  static Network from_descriptor(std::string_view descriptor);

  [[nodiscard]] const std::string& descriptor() const { return descriptor_; }
  [[nodiscard]] Shape input_shape() const { return input_; }
  [[nodiscard]] std::size_t classes() const { return layers_.empty() ? 0 : layers_.back().out_shape.size(); }
  [[nodiscard]] const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Parameters in layer order, weights before biases.
  [[nodiscard]] std::vector<double> flat_parameters() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const auto& l : layers_) {
      out.insert(out.end(), l.weight.begin(), l.weight.end());
      out.insert(out.end(), l.bias.begin(), l.bias.end());
    }
    return out;
  }

  void set_flat_parameters(std::span<const double> values) {
    if (values.size() != parameter_count()) {
      throw std::invalid_argument("parameter blob has " + std::to_string(values.size()) + " values, architecture '" +
                                  descriptor_ + "' needs " + std::to_string(parameter_count()));
    }
    std::size_t k = 0;
    for (auto& l : layers_) {
      for (double& w : l.weight) w = values[k++];
      for (double& b : l.bias) b = values[k++];
    }
  }

  /// Kaiming-uniform weights (bound sqrt(6 / fan_in)). Biases are zero except
  /// in the first parametric layer, where they cancel a constant mid-grey
  /// input (0.5) so that the initial pre-activations are centred.
  void initialize(std::uint64_t seed) {
    Rng rng = substream(seed, {tag::init});
    bool first = true;
    for (auto& l : layers_) {
      if (!l.has_parameters()) continue;
      const double bound = std::sqrt(6.0 / static_cast<double>(l.fan_in()));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (double& w : l.weight) w = dist(rng);
      const std::size_t per_out = l.weight.size() / l.bias.size();
      for (std::size_t o = 0; o < l.bias.size(); ++o) {
        double s = 0.0;
        if (first)
          for (std::size_t k = 0; k < per_out; ++k) s += l.weight[o * per_out + k];
        l.bias[o] = first ? -0.5 * s : 0.0;
      }
      first = false;
    }
  }

  [[nodiscard]] Gradients zero_gradients() const {
    Gradients g(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      g[i].weight.assign(layers_[i].weight.size(), 0.0);
      g[i].bias.assign(layers_[i].bias.size(), 0.0);
    }
    return g;
  }

  friend bool operator==(const Network& a, const Network& b) {
    return a.descriptor_ == b.descriptor_ && a.flat_parameters() == b.flat_parameters();
  }

 private:
  std::string descriptor_;
  Shape input_;
  std::vector<Layer> layers_;
};

namespace detail {

inline std::size_t parse_count(std::string_view s, std::string_view token) {
  if (s.empty()) throw std::invalid_argument("empty number in layer '" + std::string(token) + "'");
  std::size_t v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') throw std::invalid_argument("bad number in layer '" + std::string(token) + "'");
    v = v * 10 + static_cast<std::size_t>(c - '0');
  }
  return v;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto pos = s.find(sep, start);
    const auto end = pos == std::string_view::npos ? s.size() : pos;
    out.push_back(s.substr(start, end - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// Parses "8k3s1p1" into (out, kernel, stride, pad); s and p are optional.
inline void parse_conv(std::string_view v, std::string_view token, Layer& l, std::size_t& out) {
  const auto k = v.find('k');
  if (k == std::string_view::npos) throw std::invalid_argument("conv layer needs a kernel: '" + std::string(token) + "'");
  out = parse_count(v.substr(0, k), token);
  std::string_view rest = v.substr(k + 1);
  const auto s = rest.find('s');
  const auto p = rest.find('p');
  const auto kernel_end = std::min(s, p);
  l.kernel = parse_count(rest.substr(0, kernel_end), token);
  if (s != std::string_view::npos) l.stride = parse_count(rest.substr(s + 1, (p == std::string_view::npos ? rest.size() : p) - s - 1), token);
  if (p != std::string_view::npos) l.pad = parse_count(rest.substr(p + 1), token);
}

}  // namespace detail

inline Network Network::from_descriptor(std::string_view descriptor) {
  Network net;
  net.descriptor_ = std::string(descriptor);
  const auto tokens = detail::split(descriptor, ';');
  if (tokens.empty() || tokens.front().substr(0, 3) != "in=") {
    throw std::invalid_argument("architecture must start with in=CxHxW: '" + std::string(descriptor) + "'");
  }
  const auto dims = detail::split(tokens.front().substr(3), 'x');
  if (dims.size() != 3) throw std::invalid_argument("input shape must be CxHxW: '" + std::string(tokens.front()) + "'");
  net.input_ = {detail::parse_count(dims[0], tokens.front()), detail::parse_count(dims[1], tokens.front()),
                detail::parse_count(dims[2], tokens.front())};
  if (net.input_.size() == 0) throw std::invalid_argument("input shape must be non-empty");

  Shape cur = net.input_;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    const std::string_view tok = tokens[t];
    const auto eq = tok.find('=');
    const std::string_view name = tok.substr(0, eq);
    const std::string_view val = eq == std::string_view::npos ? std::string_view{} : tok.substr(eq + 1);
    Layer l;
    l.in_shape = cur;
    if (name == "conv") {
      std::size_t out = 0;
      detail::parse_conv(val, tok, l, out);
      if (l.kernel == 0 || l.stride == 0 || out == 0) throw std::invalid_argument("degenerate conv layer '" + std::string(tok) + "'");
      if (cur.height + 2 * l.pad < l.kernel || cur.width + 2 * l.pad < l.kernel) {
        throw std::invalid_argument("conv kernel larger than padded input at '" + std::string(tok) + "'");
      }
      l.kind = LayerKind::Conv;
      l.out_shape = {out, (cur.height + 2 * l.pad - l.kernel) / l.stride + 1, (cur.width + 2 * l.pad - l.kernel) / l.stride + 1};
      l.weight.assign(out * cur.channels * l.kernel * l.kernel, 0.0);
      l.bias.assign(out, 0.0);
    } else if (name == "linear") {
      const std::size_t out = detail::parse_count(val, tok);
      if (out == 0) throw std::invalid_argument("linear layer needs outputs: '" + std::string(tok) + "'");
      l.kind = LayerKind::Linear;
      l.out_shape = {out, 1, 1};
      l.weight.assign(out * cur.size(), 0.0);
      l.bias.assign(out, 0.0);
    } else if (name == "relu") {
      l.kind = LayerKind::ReLU;
      l.out_shape = cur;
    } else if (name == "pool") {
      l.kind = LayerKind::AvgPool;
      l.pool = detail::parse_count(val, tok);
      if (l.pool == 0 || cur.height % l.pool != 0 || cur.width % l.pool != 0) {
        throw std::invalid_argument("pool size must divide " + to_string(cur) + " at '" + std::string(tok) + "'");
      }
      l.out_shape = {cur.channels, cur.height / l.pool, cur.width / l.pool};
    } else if (name == "flatten") {
      l.kind = LayerKind::Flatten;
      l.out_shape = {cur.size(), 1, 1};
    } else {
      throw std::invalid_argument("unknown layer '" + std::string(tok) + "'");
    }
    cur = l.out_shape;
    net.layers_.push_back(std::move(l));
  }
  if (net.layers_.empty() || net.layers_.back().kind != LayerKind::Linear) {
    throw std::invalid_argument("architecture must end with a linear layer: '" + std::string(descriptor) + "'");
  }
  return net;
}

// ---------------------------------------------------------------------------
// Architecture registry

inline std::string input_token(Shape s) { return "in=" + to_string(s); }

/// Two conv/ReLU/pool stages followed by a linear head.
inline std::string cnn_descriptor(Shape in, std::size_t classes) {
  return input_token(in) + ";conv=8k3s1p1;relu;pool=2;conv=16k3s1p1;relu;pool=2;flatten;linear=" + std::to_string(classes);
}

inline std::string linear_descriptor(Shape in, std::size_t classes) {
  return input_token(in) + ";flatten;linear=" + std::to_string(classes);
}

inline std::string mlp_descriptor(Shape in, std::size_t classes) {
  return input_token(in) + ";flatten;linear=32;relu;linear=" + std::to_string(classes);
}

inline const std::vector<std::string>& architecture_names() {
  static const std::vector<std::string> names{"cnn", "linear", "mlp"};
  return names;
}

inline std::string architecture(std::string_view name, Shape in, std::size_t classes) {
  if (name == "cnn") return cnn_descriptor(in, classes);
  if (name == "linear") return linear_descriptor(in, classes);
  if (name == "mlp") return mlp_descriptor(in, classes);
  if (name.substr(0, 3) == "in=") return std::string(name);
  throw std::invalid_argument("unknown architecture '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Forward / backward

/// Layer inputs recorded during a forward pass; inputs[l] feeds layer l.
struct Trace {
  std::vector<std::vector<double>> inputs;
  std::vector<double> logits;
};

namespace detail {

inline void conv_forward(const Layer& l, const std::vector<double>& in, std::vector<double>& out) {
  const auto [ci, h, w] = l.in_shape;
  const auto [co, oh, ow] = l.out_shape;
  const std::size_t k = l.kernel;
  const auto s = static_cast<std::ptrdiff_t>(l.stride);
  const auto p = static_cast<std::ptrdiff_t>(l.pad);
  out.assign(l.out_shape.size(), 0.0);
  for (std::size_t o = 0; o < co; ++o) {
    double* dst = out.data() + o * oh * ow;
    for (std::size_t q = 0; q < oh * ow; ++q) dst[q] = l.bias[o];
    for (std::size_t c = 0; c < ci; ++c) {
      const double* src = in.data() + c * h * w;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double wt = l.weight[((o * ci + c) * k + ky) * k + kx];
          for (std::size_t y = 0; y < oh; ++y) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y) * s + static_cast<std::ptrdiff_t>(ky) - p;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const double* row = src + iy * static_cast<std::ptrdiff_t>(w);
            double* orow = dst + y * ow;
            for (std::size_t x = 0; x < ow; ++x) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x) * s + static_cast<std::ptrdiff_t>(kx) - p;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              orow[x] += wt * row[ix];
            }
          }
        }
      }
    }
  }
}

inline void conv_backward(const Layer& l, const std::vector<double>& in, const std::vector<double>& dout,
                          LayerGrad* g, std::vector<double>* din) {
  const auto [ci, h, w] = l.in_shape;
  const auto [co, oh, ow] = l.out_shape;
  const std::size_t k = l.kernel;
  const auto s = static_cast<std::ptrdiff_t>(l.stride);
  const auto p = static_cast<std::ptrdiff_t>(l.pad);
  if (din) din->assign(l.in_shape.size(), 0.0);
  for (std::size_t o = 0; o < co; ++o) {
    const double* d = dout.data() + o * oh * ow;
    if (g) {
      double sb = 0.0;
      for (std::size_t q = 0; q < oh * ow; ++q) sb += d[q];
      g->bias[o] += sb;
    }
    for (std::size_t c = 0; c < ci; ++c) {
      const double* src = in.data() + c * h * w;
      double* dsrc = din ? din->data() + c * h * w : nullptr;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::size_t widx = ((o * ci + c) * k + ky) * k + kx;
          const double wt = l.weight[widx];
          double gw = 0.0;
          for (std::size_t y = 0; y < oh; ++y) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y) * s + static_cast<std::ptrdiff_t>(ky) - p;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const double* drow = d + y * ow;
            const std::ptrdiff_t roff = iy * static_cast<std::ptrdiff_t>(w);
            for (std::size_t x = 0; x < ow; ++x) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x) * s + static_cast<std::ptrdiff_t>(kx) - p;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              gw += drow[x] * src[roff + ix];
              if (dsrc) dsrc[roff + ix] += wt * drow[x];
            }
          }
          if (g) g->weight[widx] += gw;
        }
      }
    }
  }
}

inline void linear_forward(const Layer& l, const std::vector<double>& in, std::vector<double>& out) {
  const std::size_t n = l.in_shape.size();
  const std::size_t m = l.out_shape.size();
  out.resize(m);
  for (std::size_t o = 0; o < m; ++o) {
    const double* row = l.weight.data() + o * n;
    double acc = l.bias[o];
    for (std::size_t i = 0; i < n; ++i) acc += row[i] * in[i];
    out[o] = acc;
  }
}

inline void linear_backward(const Layer& l, const std::vector<double>& in, const std::vector<double>& dout,
                            LayerGrad* g, std::vector<double>* din) {
  const std::size_t n = l.in_shape.size();
  const std::size_t m = l.out_shape.size();
  if (din) din->assign(n, 0.0);
  for (std::size_t o = 0; o < m; ++o) {
    const double d = dout[o];
    const double* row = l.weight.data() + o * n;
    if (g) {
      g->bias[o] += d;
      double* grow = g->weight.data() + o * n;
      for (std::size_t i = 0; i < n; ++i) grow[i] += d * in[i];
    }
    if (din) {
      for (std::size_t i = 0; i < n; ++i) (*din)[i] += row[i] * d;
    }
  }
}

inline void pool_forward(const Layer& l, const std::vector<double>& in, std::vector<double>& out) {
  const auto [c, h, w] = l.in_shape;
  const std::size_t k = l.pool;
  const std::size_t oh = h / k, ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  out.assign(l.out_shape.size(), 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) acc += in[(ch * h + y * k + dy) * w + x * k + dx];
        out[(ch * oh + y) * ow + x] = acc * inv;
      }
    }
  }
}

inline void pool_backward(const Layer& l, const std::vector<double>& dout, std::vector<double>& din) {
  const auto [c, h, w] = l.in_shape;
  const std::size_t k = l.pool;
  const std::size_t oh = h / k, ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  din.assign(l.in_shape.size(), 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        const double d = dout[(ch * oh + y) * ow + x] * inv;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) din[(ch * h + y * k + dy) * w + x * k + dx] = d;
      }
}

inline void check_input(const Network& net, const ImageTensor& x) {
  if (x.shape != net.input_shape() || x.data.size() != net.input_shape().size()) {
    throw std::invalid_argument("input shape mismatch: network expects " + to_string(net.input_shape()) + ", got " +
                                to_string(x.shape) + " with " + std::to_string(x.data.size()) + " values");
  }
}

}  // namespace detail

inline Trace forward_trace(const Network& net, const ImageTensor& x) {
  detail::check_input(net, x);
  Trace t;
  const auto& layers = net.layers();
  t.inputs.reserve(layers.size());
  std::vector<double> cur = x.data;
  std::vector<double> next;
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::Conv: detail::conv_forward(l, cur, next); break;
      case LayerKind::Linear: detail::linear_forward(l, cur, next); break;
      case LayerKind::AvgPool: detail::pool_forward(l, cur, next); break;
      case LayerKind::ReLU:
        next = cur;
        for (double& v : next) v = v > 0.0 ? v : 0.0;
        break;
      case LayerKind::Flatten: next = cur; break;
    }
    t.inputs.push_back(std::move(cur));
    cur = std::move(next);
    next.clear();
  }
  t.logits = std::move(cur);
  return t;
}

inline std::vector<double> forward(const Network& net, const ImageTensor& x) { return forward_trace(net, x).logits; }

/// Activations feeding the final linear layer; used as the embedding space
/// for Frechet distances.
inline std::vector<double> penultimate(const Network& net, const ImageTensor& x) {
  return forward_trace(net, x).inputs.back();
}

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline std::size_t predict(const Network& net, const ImageTensor& x) { return argmax(forward(net, x)); }

/// Back-propagates dL/dlogits. Parameter gradients are accumulated into
/// `param_grads` (when given); the input gradient overwrites `input_grad`.
inline void backward(const Network& net, const Trace& trace, std::span<const double> dlogits, Gradients* param_grads,
                     std::vector<double>* input_grad) {
  const auto& layers = net.layers();
  if (dlogits.size() != trace.logits.size()) throw std::invalid_argument("dlogits length mismatch");
  std::vector<double> dcur(dlogits.begin(), dlogits.end());
  std::vector<double> dprev;
  for (std::size_t li = layers.size(); li-- > 0;) {
    const Layer& l = layers[li];
    const auto& in = trace.inputs[li];
    const bool need_din = li > 0 || input_grad != nullptr;
    LayerGrad* g = param_grads ? &(*param_grads)[li] : nullptr;
    switch (l.kind) {
      case LayerKind::Conv: detail::conv_backward(l, in, dcur, g, need_din ? &dprev : nullptr); break;
      case LayerKind::Linear: detail::linear_backward(l, in, dcur, g, need_din ? &dprev : nullptr); break;
      case LayerKind::AvgPool: detail::pool_backward(l, dcur, dprev); break;
      case LayerKind::ReLU:
        // Subgradient at 0 is 0.
        dprev = dcur;
        for (std::size_t i = 0; i < dprev.size(); ++i)
          if (!(in[i] > 0.0)) dprev[i] = 0.0;
        break;
      case LayerKind::Flatten: dprev = dcur; break;
    }
    if (!need_din) break;
    dcur = std::move(dprev);
    dprev.clear();
  }
  if (input_grad) *input_grad = std::move(dcur);
}

// ---------------------------------------------------------------------------
// Losses

struct LossSpec {
  enum class Kind { CrossEntropy, KLDivergence };
  Kind kind = Kind::CrossEntropy;
  std::size_t target = 0;
  std::vector<double> reference;  // logits of the reference distribution for KL

  static LossSpec cross_entropy(std::size_t target) { return {Kind::CrossEntropy, target, {}}; }
  static LossSpec kl_divergence(std::vector<double> reference_logits) {
    return {Kind::KLDivergence, 0, std::move(reference_logits)};
  }
};

inline std::vector<double> log_softmax(std::span<const double> z) {
  if (z.empty()) throw std::invalid_argument("softmax of empty logits");
  double m = -std::numeric_limits<double>::infinity();
  for (double v : z) {
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite logit");
    m = std::max(m, v);
  }
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  const double lse = m + std::log(s);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
  return out;
}

inline std::vector<double> softmax(std::span<const double> z) {
  auto out = log_softmax(z);
  for (double& v : out) v = std::exp(v);
  return out;
}

namespace detail {
inline void check_loss(std::span<const double> logits, const LossSpec& spec) {
  if (spec.kind == LossSpec::Kind::CrossEntropy) {
    if (spec.target >= logits.size()) {
      throw std::invalid_argument("target class " + std::to_string(spec.target) + " out of range for " +
                                  std::to_string(logits.size()) + " logits");
    }
  } else if (spec.reference.size() != logits.size()) {
    throw std::invalid_argument("KL reference has " + std::to_string(spec.reference.size()) + " logits, expected " +
                                std::to_string(logits.size()));
  }
}
}  // namespace detail

inline double loss(std::span<const double> logits, const LossSpec& spec) {
  detail::check_loss(logits, spec);
  const auto logq = log_softmax(logits);
  if (spec.kind == LossSpec::Kind::CrossEntropy) return -logq[spec.target];
  const auto logp = log_softmax(spec.reference);
  double kl = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) kl += std::exp(logp[i]) * (logp[i] - logq[i]);
  return std::max(kl, 0.0);
}

/// dL/dlogits: softmax - onehot for CE, softmax(logits) - softmax(reference) for KL.
inline std::vector<double> loss_gradient(std::span<const double> logits, const LossSpec& spec) {
  detail::check_loss(logits, spec);
  auto g = softmax(logits);
  if (spec.kind == LossSpec::Kind::CrossEntropy) {
    g[spec.target] -= 1.0;
  } else {
    const auto p = softmax(spec.reference);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= p[i];
  }
  return g;
}

/// Loss value and its gradient with respect to the input image.
struct InputGradient {
  double loss = 0.0;
  std::vector<double> logits;
  ImageTensor grad;
};

inline InputGradient loss_and_grad_input(const Network& net, const ImageTensor& x, const LossSpec& spec) {
  const Trace t = forward_trace(net, x);
  InputGradient out;
  out.loss = loss(t.logits, spec);
  const auto dl = loss_gradient(t.logits, spec);
  std::vector<double> gx;
  backward(net, t, dl, nullptr, &gx);
  out.logits = t.logits;
  out.grad = ImageTensor(x.shape, std::move(gx));
  return out;
}

inline ImageTensor grad_input(const Network& net, const ImageTensor& x, const LossSpec& spec) {
  return loss_and_grad_input(net, x, spec).grad;
}

/// Adds `scale * src` into `dst` layer by layer.
inline void accumulate(Gradients& dst, const Gradients& src, double scale = 1.0) {
  for (std::size_t l = 0; l < dst.size(); ++l) {
    for (std::size_t i = 0; i < dst[l].weight.size(); ++i) dst[l].weight[i] += scale * src[l].weight[i];
    for (std::size_t i = 0; i < dst[l].bias.size(); ++i) dst[l].bias[i] += scale * src[l].bias[i];
  }
}

inline void scale(Gradients& g, double s) {
  for (auto& l : g) {
    for (double& v : l.weight) v *= s;
    for (double& v : l.bias) v *= s;
  }
}

/// Parameter gradient of a single example's loss.
inline Gradients sample_grad_params(const Network& net, const ImageTensor& x, const LossSpec& spec) {
  const Trace t = forward_trace(net, x);
  Gradients g = net.zero_gradients();
  backward(net, t, loss_gradient(t.logits, spec), &g, nullptr);
  return g;
}

/// Mean parameter gradient over a batch. Per-sample gradients are formed
/// separately and summed in index order, then divided by the batch size.
inline Gradients grad_params(const Network& net, std::span<const ImageTensor> images, std::span<const LossSpec> specs) {
  if (images.empty()) throw std::invalid_argument("empty batch");
  if (images.size() != specs.size()) throw std::invalid_argument("batch images and losses differ in length");
  Gradients total = net.zero_gradients();
  for (std::size_t i = 0; i < images.size(); ++i) accumulate(total, sample_grad_params(net, images[i], specs[i]));
  const double n = static_cast<double>(images.size());
  for (auto& l : total) {
    for (double& v : l.weight) v /= n;
    for (double& v : l.bias) v /= n;
  }
  return total;
}

/// theta <- theta - lr * g.
inline Network sgd_step(const Network& net, const Gradients& grads, double learning_rate) {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning rate must be finite and non-negative");
  }
  const auto& layers = net.layers();
  if (grads.size() != layers.size()) throw std::invalid_argument("gradient layer count mismatch");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (grads[l].weight.size() != layers[l].weight.size() || grads[l].bias.size() != layers[l].bias.size()) {
      throw std::invalid_argument("gradient shape mismatch at layer " + std::to_string(l));
    }
    for (double v : grads[l].weight)
      if (!std::isfinite(v)) throw std::domain_error("non-finite gradient at layer " + std::to_string(l));
    for (double v : grads[l].bias)
      if (!std::isfinite(v)) throw std::domain_error("non-finite gradient at layer " + std::to_string(l));
  }
  Network out = net;
  auto& ol = out.layers();
  for (std::size_t l = 0; l < ol.size(); ++l) {
    for (std::size_t i = 0; i < ol[l].weight.size(); ++i) ol[l].weight[i] -= learning_rate * grads[l].weight[i];
    for (std::size_t i = 0; i < ol[l].bias.size(); ++i) ol[l].bias[i] -= learning_rate * grads[l].bias[i];
  }
  return out;
}

}  // namespace cshift
