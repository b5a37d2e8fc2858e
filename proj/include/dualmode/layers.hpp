#pragma once

// Layers that run in streaming and full-context mode with one set of weights.
// The Mode argument is the only thing that changes between the two passes;
// the exceptions are DualNorm, which keeps one parameter set per mode.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "dualmode/mode.hpp"
#include "dualmode/rng.hpp"
#include "dualmode/tensor.hpp"

namespace dualmode {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParameterList = std::vector<NamedTensor>;

inline std::size_t count_parameters(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Tensor uniform(Shape shape, std::size_t fan_in) {
    const double a = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng_.uniform(-a, a);
    return Tensor::from(std::move(shape), std::move(v), true);
  }
  static Tensor constant(Shape shape, double value) {
    const auto n = numel(shape);
    return Tensor::from(std::move(shape), std::vector<double>(n, value), true);
  }

 private:
  Rng rng_;
};

// ---------------------------------------------------------------------------

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear create(Initializer& init, std::size_t in, std::size_t out) {
    return {init.uniform({in, out}, in), Initializer::constant({out}, 0.0)};
  }
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor forward(const Tensor& x) const { return matmul(x, weight) + bias; }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

// ---------------------------------------------------------------------------
// Temporal convolution.

namespace detail {
inline Tensor temporal_conv(const Tensor& x, const Tensor& kernel, bool depthwise,
                            std::size_t pad_left, std::size_t pad_right) {
  return depthwise ? depthwise_conv1d(x, kernel, pad_left, pad_right)
                   : conv1d(x, kernel, pad_left, pad_right);
}
}  // namespace detail

// Symmetric "same" convolution of odd kernel size k. In streaming mode the
// kernel is multiplied by a constant mask that keeps the (k+1)/2 leftmost taps
// (offsets -(k-1)/2 .. 0), which makes it a causal convolution of that size.
class DualConv1D {
 public:
  // kernel: [k, C] when depthwise, else [k, Cin, Cout]; bias: [Cout].
  DualConv1D(Tensor kernel, Tensor bias, bool depthwise)
      : kernel_(std::move(kernel)), bias_(std::move(bias)), depthwise_(depthwise) {
    const std::size_t k = kernel_.dim(0);
    if (k % 2 == 0) throw std::invalid_argument("DualConv1D: kernel size must be odd, got " + std::to_string(k));
    if (bias_.size() != out_channels())
      throw shape_error("DualConv1D", kernel_.shape(), bias_.shape());
    mask_values_.assign(k, 0);
    for (std::size_t j = 0; j < (k + 1) / 2; ++j) mask_values_[j] = 1;
    Shape mask_shape = depthwise_ ? Shape{k, 1} : Shape{k, 1, 1};
    std::vector<double> m(mask_values_.begin(), mask_values_.end());
    mask_ = Tensor::from(mask_shape, std::move(m));
  }

  static DualConv1D create(Initializer& init, std::size_t kernel_size, std::size_t in_channels,
                           std::size_t out_channels, bool depthwise) {
    if (kernel_size % 2 == 0)
      throw std::invalid_argument("DualConv1D: kernel size must be odd, got " + std::to_string(kernel_size));
    if (depthwise && in_channels != out_channels)
      throw std::invalid_argument("DualConv1D: depthwise convolution needs in == out channels");
    Shape ks = depthwise ? Shape{kernel_size, in_channels}
                         : Shape{kernel_size, in_channels, out_channels};
    const std::size_t fan_in = depthwise ? kernel_size : kernel_size * in_channels;
    return DualConv1D(init.uniform(std::move(ks), fan_in),
                      Initializer::constant({out_channels}, 0.0), depthwise);
  }

  std::size_t kernel_size() const { return kernel_.dim(0); }
  std::size_t in_channels() const { return kernel_.dim(1); }
  std::size_t out_channels() const { return depthwise_ ? kernel_.dim(1) : kernel_.dim(2); }
  bool depthwise() const { return depthwise_; }
  const Tensor& kernel() const { return kernel_; }
  const Tensor& bias() const { return bias_; }
  const std::vector<std::uint8_t>& stream_mask() const { return mask_values_; }

  Tensor forward(const Tensor& x, Mode mode) const {
    if (x.rank() != 2 || x.dim(1) != in_channels())
      throw shape_error("DualConv1D", x.shape(),
                        "does not match " + std::to_string(in_channels()) + " input channels");
    const std::size_t half = (kernel_size() - 1) / 2;
    const Tensor w = mode == Mode::Streaming ? kernel_ * mask_ : kernel_;
    return detail::temporal_conv(x, w, depthwise_, half, half) + bias_;
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".kernel", kernel_});
    out.push_back({prefix + ".bias", bias_});
  }

 private:
  Tensor kernel_;
  Tensor bias_;
  bool depthwise_;
  Tensor mask_;
  std::vector<std::uint8_t> mask_values_;
};

// Plain causal convolution with `taps` weights over offsets -(taps-1) .. 0.
class CausalConv1D {
 public:
  CausalConv1D(Tensor kernel, Tensor bias, bool depthwise)
      : kernel_(std::move(kernel)), bias_(std::move(bias)), depthwise_(depthwise) {}

  static CausalConv1D create(Initializer& init, std::size_t taps, std::size_t in_channels,
                             std::size_t out_channels, bool depthwise) {
    if (depthwise && in_channels != out_channels)
      throw std::invalid_argument("CausalConv1D: depthwise convolution needs in == out channels");
    Shape ks = depthwise ? Shape{taps, in_channels} : Shape{taps, in_channels, out_channels};
    const std::size_t fan_in = depthwise ? taps : taps * in_channels;
    return CausalConv1D(init.uniform(std::move(ks), fan_in),
                        Initializer::constant({out_channels}, 0.0), depthwise);
  }

  // Standalone causal convolution holding copies of the left (k+1)/2 taps.
  static CausalConv1D from_left_taps(const DualConv1D& dual) {
    const std::size_t taps = (dual.kernel_size() + 1) / 2;
    const std::size_t per_tap = dual.kernel().size() / dual.kernel_size();
    Shape ks = dual.kernel().shape();
    ks[0] = taps;
    std::vector<double> w(dual.kernel().data().begin(),
                          dual.kernel().data().begin() + taps * per_tap);
    std::vector<double> b(dual.bias().data().begin(), dual.bias().data().end());
    return CausalConv1D(Tensor::from(ks, std::move(w), true),
                        Tensor::from(dual.bias().shape(), std::move(b), true), dual.depthwise());
  }

  std::size_t taps() const { return kernel_.dim(0); }
  std::size_t in_channels() const { return kernel_.dim(1); }
  const Tensor& kernel() const { return kernel_; }

  Tensor forward(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != in_channels())
      throw shape_error("CausalConv1D", x.shape(),
                        "does not match " + std::to_string(in_channels()) + " input channels");
    return detail::temporal_conv(x, kernel_, depthwise_, taps() - 1, 0) + bias_;
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".kernel", kernel_});
    out.push_back({prefix + ".bias", bias_});
  }

 private:
  Tensor kernel_;
  Tensor bias_;
  bool depthwise_;
};

// ---------------------------------------------------------------------------
// Average pooling through time, parameter-free.
// Streaming: cumulative mean of frames 1..t. Full context: global mean.

inline Tensor dual_avg_pool(const Tensor& x, Mode mode) {
  if (x.rank() != 2 || x.dim(0) == 0) throw shape_error("dual_avg_pool", x.shape(), "must be [T>=1, C]");
  const std::size_t T = x.dim(0);
  if (mode == Mode::FullContext) return broadcast_to(mean(x, 0), x.shape());
  std::vector<double> counts(T);
  for (std::size_t t = 0; t < T; ++t) counts[t] = static_cast<double>(t + 1);
  return cumsum(x, 0) / Tensor::from({T, 1}, std::move(counts));
}

// ---------------------------------------------------------------------------

// Multi-head scaled dot-product self-attention. Projections are shared by both
// modes; streaming mode restricts each query's softmax to keys 1..t.
class DualSelfAttention {
 public:
  static DualSelfAttention create(Initializer& init, std::size_t channels, std::size_t heads) {
    if (heads == 0 || channels % heads != 0)
      throw std::invalid_argument("DualSelfAttention: channels must be divisible by heads");
    DualSelfAttention a;
    a.heads_ = heads;
    a.query_ = Linear::create(init, channels, channels);
    a.key_ = Linear::create(init, channels, channels);
    a.value_ = Linear::create(init, channels, channels);
    a.output_ = Linear::create(init, channels, channels);
    return a;
  }

  std::size_t channels() const { return query_.in_features(); }
  std::size_t heads() const { return heads_; }
  std::size_t head_dim() const { return channels() / heads_; }
  Linear& output_projection() { return output_; }
  Linear& value_projection() { return value_; }
  Linear& key_projection() { return key_; }

  static std::vector<std::uint8_t> causal_keep(std::size_t T) {
    std::vector<std::uint8_t> keep(T * T, 0);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j <= i; ++j) keep[i * T + j] = 1;
    return keep;
  }

  // Per-head attention weights [T, T].
  std::vector<Tensor> attention_weights(const Tensor& x, Mode mode) const {
    check(x);
    const Tensor q = query_.forward(x);
    const Tensor k = key_.forward(x);
    std::vector<Tensor> out;
    for (std::size_t h = 0; h < heads_; ++h) out.push_back(head_weights(q, k, h, mode, x.dim(0)));
    return out;
  }

  Tensor forward(const Tensor& x, Mode mode) const {
    check(x);
    const Tensor q = query_.forward(x);
    const Tensor k = key_.forward(x);
    const Tensor v = value_.forward(x);
    std::vector<Tensor> per_head;
    for (std::size_t h = 0; h < heads_; ++h) {
      const Tensor w = head_weights(q, k, h, mode, x.dim(0));
      per_head.push_back(matmul(w, slice(v, 1, h * head_dim(), head_dim())));
    }
    const Tensor merged = heads_ == 1 ? per_head[0] : concat(per_head, 1);
    return output_.forward(merged);
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    query_.collect(prefix + ".query", out);
    key_.collect(prefix + ".key", out);
    value_.collect(prefix + ".value", out);
    output_.collect(prefix + ".output", out);
  }

 private:
  void check(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != channels() || x.dim(0) == 0)
      throw shape_error("DualSelfAttention", x.shape(),
                        "does not match " + std::to_string(channels()) + " channels");
  }

  Tensor head_weights(const Tensor& q, const Tensor& k, std::size_t h, Mode mode,
                      std::size_t T) const {
    const Tensor qh = heads_ == 1 ? q : slice(q, 1, h * head_dim(), head_dim());
    const Tensor kh = heads_ == 1 ? k : slice(k, 1, h * head_dim(), head_dim());
    const Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(head_dim())));
    if (mode == Mode::FullContext) return softmax(scores);
    const auto keep = causal_keep(T);
    return softmax(scores, keep);
  }

  std::size_t heads_ = 1;
  Linear query_, key_, value_, output_;
};

// ---------------------------------------------------------------------------

enum class NormKind { Layer, Batch };

// Normalization with an independent {gamma, beta} (and, for the batch variant,
// running mean/variance) per mode. A single-set instance serves models that
// only ever run in one mode.
class DualNorm {
 public:
  static DualNorm create(std::size_t channels, NormKind kind, bool per_mode = true,
                         double eps = 1e-6) {
    DualNorm n;
    n.kind_ = kind;
    n.eps_ = eps;
    const std::size_t sets = per_mode ? 2 : 1;
    for (std::size_t s = 0; s < sets; ++s) {
      n.gamma_.push_back(Initializer::constant({channels}, 1.0));
      n.beta_.push_back(Initializer::constant({channels}, 0.0));
      if (kind == NormKind::Batch) {
        n.running_mean_.push_back(Tensor::zeros({channels}));
        n.running_var_.push_back(Tensor::full({channels}, 1.0));
      }
    }
    return n;
  }

  NormKind kind() const { return kind_; }
  bool per_mode() const { return gamma_.size() == 2; }
  std::size_t channels() const { return gamma_[0].size(); }
  Tensor& gamma(Mode m) { return gamma_[slot(m)]; }
  Tensor& beta(Mode m) { return beta_[slot(m)]; }
  const Tensor& gamma(Mode m) const { return gamma_[slot(m)]; }
  const Tensor& beta(Mode m) const { return beta_[slot(m)]; }
  const Tensor& running_mean(Mode m) const { return running_mean_.at(slot(m)); }
  const Tensor& running_var(Mode m) const { return running_var_.at(slot(m)); }

  // Training passes of the batch variant normalize with the statistics of all
  // frames of all sequences given and update the active mode's running stats.
  std::vector<Tensor> forward(std::span<const Tensor> xs, Mode mode, bool training) const {
    for (const auto& x : xs)
      if (x.rank() != 2 || x.dim(1) != channels())
        throw shape_error("DualNorm", x.shape(),
                          "does not match " + std::to_string(channels()) + " channels");
    std::vector<Tensor> out;
    if (kind_ == NormKind::Layer) {
      for (const auto& x : xs) out.push_back(affine(layer_normalize(x), mode));
      return out;
    }
    if (!training) {
      for (const auto& x : xs) out.push_back(infer_batch_style(x, mode));
      return out;
    }
    std::vector<Tensor> parts(xs.begin(), xs.end());
    const Tensor all = parts.size() == 1 ? parts[0] : concat(parts, 0);
    const Tensor mu = mean(all, 0);
    const Tensor centered = all - mu;
    const Tensor var = mean(square(centered), 0);
    const Tensor normalized = affine(centered / sqrt(add_scalar(var, eps_)), mode);
    update_running(mode, mu, var);
    std::size_t offset = 0;
    for (const auto& x : xs) {
      out.push_back(parts.size() == 1 ? normalized : slice(normalized, 0, offset, x.dim(0)));
      offset += x.dim(0);
    }
    return out;
  }

  Tensor forward(const Tensor& x, Mode mode, bool training) const {
    return forward(std::span<const Tensor>(&x, 1), mode, training).front();
  }

  // Inference path; never touches running statistics.
  Tensor infer(const Tensor& x, Mode mode) const {
    if (x.rank() != 2 || x.dim(1) != channels())
      throw shape_error("DualNorm", x.shape(),
                        "does not match " + std::to_string(channels()) + " channels");
    return kind_ == NormKind::Layer ? affine(layer_normalize(x), mode) : infer_batch_style(x, mode);
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    for (std::size_t s = 0; s < gamma_.size(); ++s) {
      const std::string suffix = set_suffix(s);
      out.push_back({prefix + ".gamma" + suffix, gamma_[s]});
      out.push_back({prefix + ".beta" + suffix, beta_[s]});
    }
  }
  void collect_buffers(const std::string& prefix, ParameterList& out) const {
    for (std::size_t s = 0; s < running_mean_.size(); ++s) {
      const std::string suffix = set_suffix(s);
      out.push_back({prefix + ".running_mean" + suffix, running_mean_[s]});
      out.push_back({prefix + ".running_var" + suffix, running_var_[s]});
    }
  }

 private:
  std::size_t slot(Mode m) const { return gamma_.size() == 2 ? mode_index(m) : 0; }
  std::string set_suffix(std::size_t s) const {
    if (gamma_.size() == 1) return "";
    return s == 0 ? ".streaming" : ".fullcontext";
  }

  Tensor affine(const Tensor& normalized, Mode mode) const {
    return normalized * gamma_[slot(mode)] + beta_[slot(mode)];
  }

  Tensor layer_normalize(const Tensor& x) const {
    const Tensor centered = x - mean(x, 1);
    const Tensor var = mean(square(centered), 1);
    return centered / sqrt(add_scalar(var, eps_));
  }

  Tensor infer_batch_style(const Tensor& x, Mode mode) const {
    const auto& rm = running_mean_[slot(mode)];
    const auto& rv = running_var_[slot(mode)];
    std::vector<double> inv(rv.size());
    for (std::size_t c = 0; c < inv.size(); ++c) inv[c] = 1.0 / std::sqrt(rv[c] + eps_);
    const Tensor centered = x - rm;
    return affine(centered * Tensor::from(rv.shape(), std::move(inv)), mode);
  }

  void update_running(Mode mode, const Tensor& mu, const Tensor& var) const {
    auto rm = running_mean_[slot(mode)].mutable_data();
    auto rv = running_var_[slot(mode)].mutable_data();
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm[c] = (1.0 - momentum_) * rm[c] + momentum_ * mu[c];
      rv[c] = (1.0 - momentum_) * rv[c] + momentum_ * var[c];
    }
  }

  NormKind kind_ = NormKind::Layer;
  double eps_ = 1e-6;
  double momentum_ = 0.1;
  std::vector<Tensor> gamma_, beta_;
  // Buffers, not parameters; updated by training passes of the active mode.
  mutable std::vector<Tensor> running_mean_, running_var_;
};

// ---------------------------------------------------------------------------

// Squeeze-and-excitation over time: pool, bottleneck feed-forward pair, sigmoid
// gate, elementwise rescale. Pooling is the dual-mode average pool.
struct SEBlock {
  Linear squeeze;  // C -> B
  Linear excite;   // B -> C

  static SEBlock create(Initializer& init, std::size_t channels, std::size_t bottleneck) {
    return {Linear::create(init, channels, bottleneck), Linear::create(init, bottleneck, channels)};
  }

  Tensor gate(const Tensor& x, Mode mode) const {
    return sigmoid(excite.forward(swish(squeeze.forward(dual_avg_pool(x, mode)))));
  }
  Tensor forward(const Tensor& x, Mode mode) const { return x * gate(x, mode); }

  void collect(const std::string& prefix, ParameterList& out) const {
    squeeze.collect(prefix + ".squeeze", out);
    excite.collect(prefix + ".excite", out);
  }
};

struct FeedForward {
  Linear expand;
  Linear project;

  static FeedForward create(Initializer& init, std::size_t channels, std::size_t hidden) {
    return {Linear::create(init, channels, hidden), Linear::create(init, hidden, channels)};
  }
  Tensor forward(const Tensor& x) const { return project.forward(swish(expand.forward(x))); }
  void collect(const std::string& prefix, ParameterList& out) const {
    expand.collect(prefix + ".expand", out);
    project.collect(prefix + ".project", out);
  }
};

}  // namespace dualmode
