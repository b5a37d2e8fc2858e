#pragma once

// Toy-scale ContextNet-lite and Conformer-lite encoders built from dual-mode
// layers. Time reduction stacks `stride` consecutive frames and projects them,
// so reduced frame t' depends on source frames up to t' * stride.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "dualmode/layers.hpp"

namespace dualmode {

enum class Architecture { ContextNetLite, ConformerLite };

// DualMode is the weight-shared model; StreamingOnly builds the equivalent
// standalone causal model (causal convs of (k+1)/2 taps, one norm set).
enum class EncoderVariant { DualMode, StreamingOnly };

inline std::string to_string(Architecture a) {
  return a == Architecture::ContextNetLite ? "contextnet_lite" : "conformer_lite";
}
inline Architecture parse_architecture(const std::string& s) {
  if (s == "contextnet_lite") return Architecture::ContextNetLite;
  if (s == "conformer_lite") return Architecture::ConformerLite;
  throw std::invalid_argument("encoder.architecture: unknown value '" + s + "'");
}
inline std::string to_string(EncoderVariant v) {
  return v == EncoderVariant::DualMode ? "dual_mode" : "streaming_only";
}
inline EncoderVariant parse_variant(const std::string& s) {
  if (s == "dual_mode") return EncoderVariant::DualMode;
  if (s == "streaming_only") return EncoderVariant::StreamingOnly;
  throw std::invalid_argument("encoder.variant: unknown value '" + s + "'");
}
inline std::string to_string(NormKind k) { return k == NormKind::Layer ? "layer" : "batch"; }
inline NormKind parse_norm_kind(const std::string& s) {
  if (s == "layer") return NormKind::Layer;
  if (s == "batch") return NormKind::Batch;
  throw std::invalid_argument("encoder.norm: unknown value '" + s + "'");
}

struct EncoderConfig {
  Architecture architecture = Architecture::ContextNetLite;
  EncoderVariant variant = EncoderVariant::DualMode;
  NormKind norm = NormKind::Layer;
  std::size_t blocks = 2;
  std::size_t channels = 16;
  std::size_t kernel_size = 5;
  std::size_t heads = 1;
  std::size_t stride = 2;
  std::size_t feature_dim = 8;
  std::size_t se_reduction = 2;   // contextnet_lite SE bottleneck = channels / se_reduction
  std::size_t ff_multiplier = 2;  // conformer_lite feed-forward width = channels * ff_multiplier

  void validate() const {
    auto positive = [](std::size_t v, const char* field) {
      if (v < 1) throw std::invalid_argument(std::string("encoder.") + field + " must be >= 1");
    };
    positive(blocks, "blocks");
    positive(channels, "channels");
    positive(kernel_size, "kernel_size");
    positive(heads, "heads");
    positive(stride, "stride");
    positive(feature_dim, "feature_dim");
    positive(se_reduction, "se_reduction");
    positive(ff_multiplier, "ff_multiplier");
    if (kernel_size % 2 == 0)
      throw std::invalid_argument("encoder.kernel_size must be odd, got " + std::to_string(kernel_size));
    if (architecture == Architecture::ConformerLite && channels % heads != 0)
      throw std::invalid_argument("encoder.heads must divide encoder.channels");
  }

  std::size_t se_bottleneck() const { return std::max<std::size_t>(1, channels / se_reduction); }
};

struct EncoderOutput {
  Tensor hidden;  // [T', channels]
  std::size_t length = 0;
  Mode mode = Mode::Streaming;
};

inline std::size_t reduced_length(std::size_t frames, std::size_t stride) {
  return (frames + stride - 1) / stride;
}

// Depthwise temporal convolution of an encoder block.
using TemporalConv = std::variant<DualConv1D, CausalConv1D>;

class Encoder {
 public:
  Encoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Initializer init(seed);
    const std::size_t C = cfg_.channels;
    front_ = Linear::create(init, cfg_.stride * cfg_.feature_dim, C);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      if (cfg_.architecture == Architecture::ContextNetLite) {
        ContextNetBlock blk{make_conv(init), Linear::create(init, C, C), make_norm(),
                            SEBlock::create(init, C, cfg_.se_bottleneck())};
        contextnet_.push_back(std::move(blk));
      } else {
        ConformerBlock blk{make_norm(),
                           FeedForward::create(init, C, C * cfg_.ff_multiplier),
                           make_norm(),
                           DualSelfAttention::create(init, C, cfg_.heads),
                           make_norm(),
                           Linear::create(init, C, C),
                           make_conv(init),
                           Linear::create(init, C, C),
                           make_norm()};
        conformer_.push_back(std::move(blk));
      }
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  std::size_t output_dim() const { return cfg_.channels; }
  bool supports(Mode m) const {
    return cfg_.variant == EncoderVariant::DualMode || m == Mode::Streaming;
  }

  // Inference forward pass (batch-style norms read running statistics).
  EncoderOutput encode(const Tensor& x, Mode mode) const {
    auto out = forward(std::span<const Tensor>(&x, 1), mode, false);
    return std::move(out.front());
  }

  // Forward pass over several unpadded sequences. The sequences interact only
  // through batch-style normalization statistics during training.
  std::vector<EncoderOutput> forward(std::span<const Tensor> xs, Mode mode, bool training) const {
    if (!supports(mode))
      throw std::invalid_argument("streaming_only encoder cannot run in fullcontext mode");
    const Mode layer_mode = cfg_.variant == EncoderVariant::StreamingOnly ? Mode::Streaming : mode;
    std::vector<Tensor> hs;
    for (const auto& x : xs) hs.push_back(front(x));
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      if (cfg_.architecture == Architecture::ContextNetLite)
        hs = contextnet_block(contextnet_[b], hs, layer_mode, training);
      else
        hs = conformer_block(conformer_[b], hs, layer_mode, training);
    }
    std::vector<EncoderOutput> out;
    for (auto& h : hs) out.push_back({h, h.dim(0), mode});
    return out;
  }

  ParameterList parameters(const std::string& prefix = "encoder") const {
    ParameterList out;
    front_.collect(prefix + ".front", out);
    for (std::size_t b = 0; b < contextnet_.size(); ++b) {
      const auto& blk = contextnet_[b];
      const std::string p = prefix + ".block" + std::to_string(b);
      collect_conv(blk.conv, p + ".conv", out);
      blk.pointwise.collect(p + ".pointwise", out);
      blk.norm.collect(p + ".norm", out);
      blk.se.collect(p + ".se", out);
    }
    for (std::size_t b = 0; b < conformer_.size(); ++b) {
      const auto& blk = conformer_[b];
      const std::string p = prefix + ".block" + std::to_string(b);
      blk.ff_norm.collect(p + ".ff_norm", out);
      blk.ff.collect(p + ".ff", out);
      blk.attn_norm.collect(p + ".attn_norm", out);
      blk.attn.collect(p + ".attn", out);
      blk.conv_norm.collect(p + ".conv_norm", out);
      blk.conv_in.collect(p + ".conv_in", out);
      collect_conv(blk.conv, p + ".conv", out);
      blk.conv_out.collect(p + ".conv_out", out);
      blk.out_norm.collect(p + ".out_norm", out);
    }
    return out;
  }

  ParameterList buffers(const std::string& prefix = "encoder") const {
    ParameterList out;
    for (std::size_t b = 0; b < contextnet_.size(); ++b)
      contextnet_[b].norm.collect_buffers(prefix + ".block" + std::to_string(b) + ".norm", out);
    for (std::size_t b = 0; b < conformer_.size(); ++b) {
      const std::string p = prefix + ".block" + std::to_string(b);
      conformer_[b].ff_norm.collect_buffers(p + ".ff_norm", out);
      conformer_[b].attn_norm.collect_buffers(p + ".attn_norm", out);
      conformer_[b].conv_norm.collect_buffers(p + ".conv_norm", out);
      conformer_[b].out_norm.collect_buffers(p + ".out_norm", out);
    }
    return out;
  }

  std::vector<const DualConv1D*> dual_convs() const {
    std::vector<const DualConv1D*> out;
    auto grab = [&](const TemporalConv& c) {
      if (auto* d = std::get_if<DualConv1D>(&c)) out.push_back(d);
    };
    for (const auto& b : contextnet_) grab(b.conv);
    for (const auto& b : conformer_) grab(b.conv);
    return out;
  }

 private:
  struct ContextNetBlock {
    TemporalConv conv;
    Linear pointwise;
    DualNorm norm;
    SEBlock se;
  };
  struct ConformerBlock {
    DualNorm ff_norm;
    FeedForward ff;
    DualNorm attn_norm;
    DualSelfAttention attn;
    DualNorm conv_norm;
    Linear conv_in;
    TemporalConv conv;
    Linear conv_out;
    DualNorm out_norm;
  };

  TemporalConv make_conv(Initializer& init) const {
    const std::size_t C = cfg_.channels;
    if (cfg_.variant == EncoderVariant::DualMode)
      return DualConv1D::create(init, cfg_.kernel_size, C, C, true);
    return CausalConv1D::create(init, (cfg_.kernel_size + 1) / 2, C, C, true);
  }
  DualNorm make_norm() const {
    return DualNorm::create(cfg_.channels, cfg_.norm, cfg_.variant == EncoderVariant::DualMode);
  }
  static void collect_conv(const TemporalConv& c, const std::string& prefix, ParameterList& out) {
    std::visit([&](const auto& conv) { conv.collect(prefix, out); }, c);
  }
  static Tensor apply_conv(const TemporalConv& c, const Tensor& x, Mode mode) {
    if (auto* d = std::get_if<DualConv1D>(&c)) return d->forward(x, mode);
    return std::get<CausalConv1D>(c).forward(x);
  }

  Tensor front(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != cfg_.feature_dim)
      throw shape_error("encoder", x.shape(),
                        "does not match feature_dim " + std::to_string(cfg_.feature_dim));
    if (x.dim(0) == 0) throw shape_error("encoder", x.shape(), "has no frames");
    const std::size_t T = x.dim(0);
    const std::size_t Tr = reduced_length(T, cfg_.stride);
    const std::size_t pad = Tr * cfg_.stride - T;
    Tensor padded = pad == 0 ? x : concat({x, Tensor::zeros({pad, cfg_.feature_dim})}, 0);
    return front_.forward(reshape(padded, {Tr, cfg_.stride * cfg_.feature_dim}));
  }

  static std::vector<Tensor> contextnet_block(const ContextNetBlock& blk,
                                              const std::vector<Tensor>& xs, Mode mode,
                                              bool training) {
    std::vector<Tensor> hs;
    for (const auto& x : xs) hs.push_back(blk.pointwise.forward(apply_conv(blk.conv, x, mode)));
    hs = blk.norm.forward(hs, mode, training);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < xs.size(); ++i)
      out.push_back(xs[i] + blk.se.forward(swish(hs[i]), mode));
    return out;
  }

  static std::vector<Tensor> conformer_block(const ConformerBlock& blk,
                                             const std::vector<Tensor>& xs, Mode mode,
                                             bool training) {
    std::vector<Tensor> hs = blk.ff_norm.forward(xs, mode, training);
    std::vector<Tensor> cur;
    for (std::size_t i = 0; i < xs.size(); ++i) cur.push_back(xs[i] + blk.ff.forward(hs[i]));
    hs = blk.attn_norm.forward(cur, mode, training);
    for (std::size_t i = 0; i < cur.size(); ++i) cur[i] = cur[i] + blk.attn.forward(hs[i], mode);
    hs = blk.conv_norm.forward(cur, mode, training);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      const Tensor c = apply_conv(blk.conv, blk.conv_in.forward(hs[i]), mode);
      cur[i] = cur[i] + blk.conv_out.forward(swish(c));
    }
    return blk.out_norm.forward(cur, mode, training);
  }

  EncoderConfig cfg_;
  Linear front_;
  std::vector<ContextNetBlock> contextnet_;
  std::vector<ConformerBlock> conformer_;
};

inline Encoder build_encoder(const EncoderConfig& cfg, std::uint64_t seed) { return Encoder(cfg, seed); }

}  // namespace dualmode
