#pragma once

// RNN-T prediction network, joint network, the transducer loss, and greedy
// decoding with emission times. Blank is output index 0; labels are 1..V.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualmode/encoder.hpp"

namespace dualmode {

inline constexpr int kBlank = 0;

struct DecoderConfig {
  std::size_t vocab_size = 6;  // V, labels 1..V
  std::size_t embed_dim = 16;
  std::size_t hidden = 64;
  std::size_t joint_dim = 32;

  void validate() const {
    if (vocab_size < 1) throw std::invalid_argument("decoder.vocab_size must be >= 1");
    if (embed_dim < 1) throw std::invalid_argument("decoder.embed_dim must be >= 1");
    if (hidden < 1) throw std::invalid_argument("decoder.hidden must be >= 1");
    if (joint_dim < 1) throw std::invalid_argument("decoder.joint_dim must be >= 1");
  }
};

inline double log_add_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

inline void check_tokens(std::span<const int> tokens, std::size_t vocab_size) {
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] < 1 || static_cast<std::size_t>(tokens[i]) > vocab_size)
      throw std::out_of_range("token " + std::to_string(tokens[i]) + " at position " +
                              std::to_string(i) + " outside 1.." + std::to_string(vocab_size));
}

// ---------------------------------------------------------------------------

// Embedding + one GRU cell. Row 0 of the embedding doubles as the start symbol.
class PredictionNet {
 public:
  static PredictionNet create(Initializer& init, std::size_t vocab_size, std::size_t embed_dim,
                              std::size_t hidden) {
    PredictionNet p;
    p.vocab_size_ = vocab_size;
    p.embedding_ = init.uniform({vocab_size + 1, embed_dim}, 1);
    p.input_gates_ = Linear::create(init, embed_dim, 3 * hidden);
    p.hidden_gates_ = Linear::create(init, hidden, 3 * hidden);
    return p;
  }

  std::size_t hidden() const { return hidden_gates_.in_features(); }
  std::size_t vocab_size() const { return vocab_size_; }

  Tensor initial_state() const { return Tensor::zeros({1, hidden()}); }

  // State after consuming `token` (0 = start) from `state`.
  Tensor step(const Tensor& state, int token) const {
    const int ids[1] = {token};
    return cell(input_gates_.forward(embedding(embedding_, ids)), state);
  }

  // Rows 0..U: state after the start symbol followed by y_1..y_u.
  Tensor forward(std::span<const int> tokens) const {
    check_tokens(tokens, vocab_size_);
    std::vector<int> ids{kBlank};
    ids.insert(ids.end(), tokens.begin(), tokens.end());
    const Tensor gx = input_gates_.forward(embedding(embedding_, ids));
    std::vector<Tensor> rows;
    Tensor h = initial_state();
    for (std::size_t u = 0; u < ids.size(); ++u) {
      h = cell(ids.size() == 1 ? gx : slice(gx, 0, u, 1), h);
      rows.push_back(h);
    }
    return rows.size() == 1 ? rows[0] : concat(rows, 0);
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".embedding", embedding_});
    input_gates_.collect(prefix + ".input_gates", out);
    hidden_gates_.collect(prefix + ".hidden_gates", out);
  }

 private:
  // GRU: r, z gates; candidate n = tanh(x_n + r * h_n); h' = n + z * (h - n).
  Tensor cell(const Tensor& gx, const Tensor& h) const {
    const std::size_t H = hidden();
    const Tensor gh = hidden_gates_.forward(h);
    const Tensor r = sigmoid(slice(gx, 1, 0, H) + slice(gh, 1, 0, H));
    const Tensor z = sigmoid(slice(gx, 1, H, H) + slice(gh, 1, H, H));
    const Tensor n = tanh(slice(gx, 1, 2 * H, H) + r * slice(gh, 1, 2 * H, H));
    return n + z * (h - n);
  }

  std::size_t vocab_size_ = 0;
  Tensor embedding_;
  Linear input_gates_;
  Linear hidden_gates_;
};

// z(t,u,.) = log_softmax(W_o tanh(W_e h_t + W_p g_u + b) + b_o).
class JointNet {
 public:
  static JointNet create(Initializer& init, std::size_t encoder_dim, std::size_t prediction_dim,
                         std::size_t joint_dim, std::size_t vocab_size) {
    JointNet j;
    j.encoder_proj_ = init.uniform({encoder_dim, joint_dim}, encoder_dim);
    j.prediction_proj_ = init.uniform({prediction_dim, joint_dim}, prediction_dim);
    j.combine_bias_ = Initializer::constant({joint_dim}, 0.0);
    j.output_ = Linear::create(init, joint_dim, vocab_size + 1);
    return j;
  }

  std::size_t outputs() const { return output_.out_features(); }
  Tensor& encoder_projection() { return encoder_proj_; }
  Tensor& prediction_projection() { return prediction_proj_; }
  Tensor& combine_bias() { return combine_bias_; }
  Linear& output() { return output_; }

  // h: [T', He], g: [U+1, Hp] -> normalized lattice [T', U+1, V+1].
  Tensor forward(const Tensor& h, const Tensor& g) const {
    if (h.rank() != 2 || h.dim(1) != encoder_proj_.dim(0))
      throw shape_error("joint", h.shape(), encoder_proj_.shape());
    if (g.rank() != 2 || g.dim(1) != prediction_proj_.dim(0))
      throw shape_error("joint", g.shape(), prediction_proj_.shape());
    const std::size_t T = h.dim(0), U1 = g.dim(0), J = combine_bias_.size();
    const Tensor e = reshape(matmul(h, encoder_proj_), {T, 1, J});
    const Tensor p = reshape(matmul(g, prediction_proj_) + combine_bias_, {1, U1, J});
    const Tensor hidden = reshape(tanh(e + p), {T * U1, J});
    return reshape(log_softmax(output_.forward(hidden)), {T, U1, outputs()});
  }

  // Single node: h_t [1, He], g_u [1, Hp] -> [1, V+1] log-probabilities.
  Tensor step(const Tensor& h_t, const Tensor& g_u) const {
    const Tensor a = matmul(h_t, encoder_proj_) + matmul(g_u, prediction_proj_) + combine_bias_;
    return log_softmax(output_.forward(tanh(a)));
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".encoder_proj", encoder_proj_});
    out.push_back({prefix + ".prediction_proj", prediction_proj_});
    out.push_back({prefix + ".combine_bias", combine_bias_});
    output_.collect(prefix + ".output", out);
  }

 private:
  Tensor encoder_proj_;
  Tensor prediction_proj_;
  Tensor combine_bias_;
  Linear output_;
};

// ---------------------------------------------------------------------------

// View over a [T', U+1, V+1] tensor of per-node log-probabilities.
struct TransducerLattice {
  Tensor log_probs;

  explicit TransducerLattice(Tensor lp) : log_probs(std::move(lp)) {
    if (log_probs.rank() != 3) throw shape_error("lattice", log_probs.shape(), "is not [T', U+1, V+1]");
  }
  std::size_t frames() const { return log_probs.dim(0); }
  std::size_t target_length() const { return log_probs.dim(1) - 1; }
  std::size_t outputs() const { return log_probs.dim(2); }
  double operator()(std::size_t t, std::size_t u, std::size_t v) const {
    return log_probs[(t * log_probs.dim(1) + u) * outputs() + v];
  }
};

// Throws when any node's log-probabilities do not sum to one.
inline void check_normalized(const TransducerLattice& lat, double tol = 1e-6) {
  const std::size_t V1 = lat.outputs();
  const auto z = lat.log_probs.data();
  for (std::size_t n = 0; n < lat.frames() * (lat.target_length() + 1); ++n) {
    double lse = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < V1; ++v) lse = log_add_exp(lse, z[n * V1 + v]);
    if (!(std::abs(lse) <= tol))
      throw std::domain_error("rnnt_loss: lattice node " + std::to_string(n) +
                              " is not normalized (logsumexp = " + std::to_string(lse) + ")");
  }
}

namespace detail {
inline void check_lattice_targets(const TransducerLattice& lat, std::span<const int> y,
                                  const char* op) {
  if (lat.frames() < 1) throw shape_error(op, lat.log_probs.shape(), "has no frames");
  if (lat.target_length() != y.size())
    throw shape_error(op, lat.log_probs.shape(),
                      "does not match " + std::to_string(y.size()) + " targets");
  for (int tok : y)
    if (tok < 1 || static_cast<std::size_t>(tok) >= lat.outputs())
      throw std::out_of_range(std::string(op) + ": target " + std::to_string(tok) + " out of range");
}
}  // namespace detail

// Negative log-likelihood of y summed over all monotonic alignments, computed
// with the log-space forward recursion. The gradient with respect to each
// log-probability is minus the posterior occupancy of the matching transition.
inline Tensor rnnt_loss(const Tensor& lattice, std::span<const int> y, bool validate = true) {
  const TransducerLattice lat(lattice);
  detail::check_lattice_targets(lat, y, "rnnt_loss");
  if (validate) check_normalized(lat);
  const std::size_t T = lat.frames(), U = y.size();
  const double ninf = -std::numeric_limits<double>::infinity();
  std::vector<double> alpha(T * (U + 1), ninf);
  auto A = [&](std::size_t t, std::size_t u) -> double& { return alpha[t * (U + 1) + u]; };
  A(0, 0) = 0.0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u <= U; ++u) {
      if (t == 0 && u == 0) continue;
      double v = ninf;
      if (t > 0) v = A(t - 1, u) + lat(t - 1, u, kBlank);
      if (u > 0) v = log_add_exp(v, A(t, u - 1) + lat(t, u - 1, y[u - 1]));
      A(t, u) = v;
    }
  const double log_likelihood = A(T - 1, U) + lat(T - 1, U, kBlank);
  if (!std::isfinite(log_likelihood)) throw NumericError("rnnt_loss: no alignment has finite probability");

  std::vector<int> targets(y.begin(), y.end());
  return detail::make_result(
      "rnnt_loss", Shape{}, {-log_likelihood}, {lattice},
      [T, U, targets, alpha, log_likelihood](const Node& self, std::span<const double> g,
                                             std::span<std::vector<double>* const> pg) {
        const TransducerLattice lat(Tensor(self.parents[0]));
        const std::size_t V1 = lat.outputs();
        const double ninf = -std::numeric_limits<double>::infinity();
        std::vector<double> beta(T * (U + 1), ninf);
        auto A = [&](std::size_t t, std::size_t u) { return alpha[t * (U + 1) + u]; };
        auto B = [&](std::size_t t, std::size_t u) -> double& { return beta[t * (U + 1) + u]; };
        B(T - 1, U) = lat(T - 1, U, kBlank);
        for (std::size_t t = T; t-- > 0;)
          for (std::size_t u = U + 1; u-- > 0;) {
            if (t == T - 1 && u == U) continue;
            double v = ninf;
            if (t + 1 < T) v = B(t + 1, u) + lat(t, u, kBlank);
            if (u < U) v = log_add_exp(v, B(t, u + 1) + lat(t, u, targets[u]));
            B(t, u) = v;
          }
        auto& d = *pg[0];
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t u = 0; u <= U; ++u) {
            const std::size_t base = (t * (U + 1) + u) * V1;
            if (t + 1 < T)
              d[base + kBlank] -= g[0] * std::exp(A(t, u) + lat(t, u, kBlank) + B(t + 1, u) - log_likelihood);
            else if (u == U)
              d[base + kBlank] -= g[0] * std::exp(A(t, u) + lat(t, u, kBlank) - log_likelihood);
            if (u < U)
              d[base + targets[u]] -=
                  g[0] * std::exp(A(t, u) + lat(t, u, targets[u]) + B(t, u + 1) - log_likelihood);
          }
      });
}

// Exhaustive enumeration of every alignment: T'-1 frame-advancing blanks
// interleaved with the U labels, closed by the blank at (T', U).
inline double rnnt_loss_bruteforce(const Tensor& lattice, std::span<const int> y) {
  const TransducerLattice lat(lattice);
  detail::check_lattice_targets(lat, y, "rnnt_loss_bruteforce");
  const std::size_t T = lat.frames(), U = y.size();
  if (T - 1 + U > 12)
    throw std::invalid_argument("rnnt_loss_bruteforce: instance too large (path length " +
                                std::to_string(T - 1 + U) + " > 12)");
  double total = 0.0;
  // Each alignment is a bit pattern over T-1+U moves: 1 = emit label, 0 = blank.
  const std::size_t moves = T - 1 + U;
  for (std::uint32_t pattern = 0; pattern < (1u << moves); ++pattern) {
    if (static_cast<std::size_t>(__builtin_popcount(pattern)) != U) continue;
    std::size_t t = 0, u = 0;
    double p = 1.0;
    for (std::size_t m = 0; m < moves; ++m) {
      if (pattern & (1u << m)) {
        p *= std::exp(lat(t, u, y[u]));
        ++u;
      } else {
        p *= std::exp(lat(t, u, kBlank));
        ++t;
      }
    }
    p *= std::exp(lat(T - 1, U, kBlank));
    total += p;
  }
  return -std::log(total);
}

// ---------------------------------------------------------------------------
// Decoding.

struct EmissionRecord {
  std::string id;
  std::vector<int> tokens;
  std::vector<std::size_t> frames;  // 1-based encoder frame of each emission
  std::size_t stride = 1;           // source frames per encoder frame
  std::size_t delay_frames = 0;     // look-ahead the decoder waited for
  double frame_ms = 10.0;

  std::size_t source_frame(std::size_t i) const { return frames.at(i) * stride + delay_frames; }
};

// Standard RNN-T greedy loop. `scorer.log_probs(t)` scores encoder frame t
// (0-based) against the current prediction state; `scorer.accept(token)`
// advances that state. At most max_symbols_per_frame labels per frame.
template <class Scorer>
EmissionRecord greedy_search(std::size_t num_frames, Scorer& scorer,
                             std::size_t max_symbols_per_frame = 4) {
  if (max_symbols_per_frame < 1) throw std::invalid_argument("max_symbols_per_frame must be >= 1");
  EmissionRecord rec;
  for (std::size_t t = 0; t < num_frames; ++t) {
    for (std::size_t emitted = 0; emitted < max_symbols_per_frame; ++emitted) {
      const std::vector<double> scores = scorer.log_probs(t);
      std::size_t best = 0;
      for (std::size_t v = 1; v < scores.size(); ++v)
        if (scores[v] > scores[best]) best = v;
      if (best == static_cast<std::size_t>(kBlank)) break;
      rec.tokens.push_back(static_cast<int>(best));
      rec.frames.push_back(t + 1);
      scorer.accept(static_cast<int>(best));
    }
  }
  return rec;
}

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
};

// Encoder + prediction network + joint network.
class TransducerModel {
 public:
  TransducerModel(const ModelConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), encoder_(cfg.encoder, mix_seed(seed, 1)) {
    cfg_.decoder.validate();
    Initializer init(mix_seed(seed, 2));
    prediction_ = PredictionNet::create(init, cfg.decoder.vocab_size, cfg.decoder.embed_dim,
                                        cfg.decoder.hidden);
    joint_ = JointNet::create(init, encoder_.output_dim(), cfg.decoder.hidden,
                              cfg.decoder.joint_dim, cfg.decoder.vocab_size);
  }

  const ModelConfig& config() const { return cfg_; }
  const Encoder& encoder() const { return encoder_; }
  const PredictionNet& prediction() const { return prediction_; }
  const JointNet& joint() const { return joint_; }
  JointNet& joint() { return joint_; }

  // Lattices for several utterances in one mode (shared batch statistics for
  // batch-style norms in training).
  std::vector<Tensor> lattices(std::span<const Tensor> features,
                               std::span<const std::vector<int>> targets, Mode mode,
                               bool training) const {
    if (features.size() != targets.size())
      throw std::invalid_argument("lattices: features and targets differ in count");
    const auto enc = encoder_.forward(features, mode, training);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < enc.size(); ++i)
      out.push_back(joint_.forward(enc[i].hidden, prediction_.forward(targets[i])));
    return out;
  }

  Tensor lattice(const Tensor& features, std::span<const int> targets, Mode mode,
                 bool training = false) const {
    std::vector<int> y(targets.begin(), targets.end());
    return lattices(std::span<const Tensor>(&features, 1),
                    std::span<const std::vector<int>>(&y, 1), mode, training)
        .front();
  }

  ParameterList parameters(const std::string& prefix = "") const {
    ParameterList out = encoder_.parameters(prefix + "encoder");
    prediction_.collect(prefix + "prediction", out);
    joint_.collect(prefix + "joint", out);
    return out;
  }
  ParameterList buffers(const std::string& prefix = "") const {
    return encoder_.buffers(prefix + "encoder");
  }

 private:
  ModelConfig cfg_;
  Encoder encoder_;
  PredictionNet prediction_;
  JointNet joint_;
};

namespace detail {
class ModelScorer {
 public:
  ModelScorer(const TransducerModel& model, const Tensor& encoded)
      : model_(model), encoded_(encoded) {
    state_ = model_.prediction().step(model_.prediction().initial_state(), kBlank);
  }
  std::vector<double> log_probs(std::size_t t) const {
    const Tensor lp = model_.joint().step(slice(encoded_, 0, t, 1), state_);
    return {lp.data().begin(), lp.data().end()};
  }
  void accept(int token) { state_ = model_.prediction().step(state_, token); }

 private:
  const TransducerModel& model_;
  Tensor encoded_;
  Tensor state_;
};
}  // namespace detail

// Greedy decode of one utterance. The encoder runs once over the input; in
// streaming mode every encoder frame is a function of its own past only, so
// the loop below reads frames strictly in order as a streaming decoder would.
inline EmissionRecord greedy_decode(const TransducerModel& model, const Tensor& features, Mode mode,
                                    std::size_t max_symbols_per_frame = 4) {
  NoGradGuard no_grad;
  const EncoderOutput enc = model.encoder().encode(features, mode);
  detail::ModelScorer scorer(model, enc.hidden);
  EmissionRecord rec = greedy_search(enc.length, scorer, max_symbols_per_frame);
  rec.stride = model.config().encoder.stride;
  return rec;
}

}  // namespace dualmode
