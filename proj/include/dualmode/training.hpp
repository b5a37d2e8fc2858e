#pragma once

// Joint dual-mode training with inplace distillation, randomly sampled
// training, and the separate-weights ablation.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dualmode/data.hpp"
#include "dualmode/transducer.hpp"

namespace dualmode {

enum class ModeStrategy { Joint, Sampled };
enum class WeightSharing { Shared, Separate };
enum class KlDirection { TeacherStudent, StudentTeacher };
enum class DistillAveraging { Node, Utterance };

constexpr std::string_view to_string(ModeStrategy s) { return s == ModeStrategy::Joint ? "joint" : "sampled"; }
constexpr std::string_view to_string(WeightSharing s) { return s == WeightSharing::Shared ? "shared" : "separate"; }
constexpr std::string_view to_string(KlDirection d) {
  return d == KlDirection::TeacherStudent ? "teacher_student" : "student_teacher";
}
constexpr std::string_view to_string(DistillAveraging a) { return a == DistillAveraging::Node ? "node" : "utterance"; }

inline ModeStrategy parse_mode_strategy(std::string_view s) {
  if (s == "joint") return ModeStrategy::Joint;
  if (s == "sampled") return ModeStrategy::Sampled;
  throw std::invalid_argument("unknown train.mode_strategy '" + std::string(s) + "'");
}
inline WeightSharing parse_weight_sharing(std::string_view s) {
  if (s == "shared") return WeightSharing::Shared;
  if (s == "separate") return WeightSharing::Separate;
  throw std::invalid_argument("unknown train.weight_sharing '" + std::string(s) + "'");
}
inline KlDirection parse_kl_direction(std::string_view s) {
  if (s == "teacher_student") return KlDirection::TeacherStudent;
  if (s == "student_teacher") return KlDirection::StudentTeacher;
  throw std::invalid_argument("unknown train.kl_direction '" + std::string(s) + "'");
}
inline DistillAveraging parse_distill_averaging(std::string_view s) {
  if (s == "node") return DistillAveraging::Node;
  if (s == "utterance") return DistillAveraging::Utterance;
  throw std::invalid_argument("unknown train.distill_averaging '" + std::string(s) + "'");
}

struct TrainConfig {
  double w_full = 1.0;
  double w_stream = 1.0;
  double w_distill = 1.0;
  int teacher_shift = 0;
  double stream_probability = 0.5;
  double learning_rate = 3e-3;
  std::size_t warmup_steps = 50;
  std::size_t total_steps = 3000;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
  ModeStrategy mode_strategy = ModeStrategy::Joint;
  WeightSharing weight_sharing = WeightSharing::Shared;
  bool distill = true;
  KlDirection kl_direction = KlDirection::TeacherStudent;
  DistillAveraging distill_averaging = DistillAveraging::Node;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  double clip_norm = 5.0;  // global gradient norm; 0 disables
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 0;

  void validate() const {
    auto weight = [](double w, const char* name) {
      if (!std::isfinite(w) || w < 0.0)
        throw std::invalid_argument(std::string("train.") + name + " must be finite and non-negative");
    };
    weight(w_full, "w_full");
    weight(w_stream, "w_stream");
    weight(w_distill, "w_distill");
    if (teacher_shift < -2 || teacher_shift > 2)
      throw std::invalid_argument("train.teacher_shift must lie in -2..2");
    if (!(stream_probability >= 0.0 && stream_probability <= 1.0))
      throw std::invalid_argument("train.stream_probability must lie in [0, 1]");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw std::invalid_argument("train.learning_rate must be positive");
    if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(epsilon > 0.0))
      throw std::invalid_argument("train.beta1/beta2 must lie in [0, 1) and train.epsilon be positive");
    if (!(clip_norm >= 0.0)) throw std::invalid_argument("train.clip_norm must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Adam.

struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
};

inline double learning_rate_at(double base, std::size_t warmup, std::size_t step) {
  if (warmup == 0) return base;
  return base * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup));
}

// One Adam step with bias correction. Moments are created on first use.
inline void optimizer_update(OptimizerState& state, const ParameterList& params,
                             const std::vector<std::vector<double>>& grads, double lr_t) {
  if (grads.size() != params.size())
    throw std::invalid_argument("optimizer_update: " + std::to_string(grads.size()) +
                                " gradients for " + std::to_string(params.size()) + " parameters");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.size(), 0.0);
      state.v.emplace_back(p.tensor.size(), 0.0);
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].tensor;
    auto w = p.mutable_data();
    const auto& g = grads[i];
    if (g.size() != w.size() || state.m[i].size() != w.size())
      throw shape_error("optimizer_update", p.shape(), "does not match its gradient or moments");
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      w[j] -= lr_t * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Inplace distillation.

namespace detail {

inline double log_sum_excluding(const double* z, std::size_t n, int skip_a, int skip_b) {
  double acc = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < n; ++v)
    if (static_cast<int>(v) != skip_a && static_cast<int>(v) != skip_b) acc = log_add_exp(acc, z[v]);
  return acc;
}

// Log of the collapsed distribution at one node: (label, blank, rest) when a
// next label exists, (blank, rest) otherwise.
inline std::vector<double> collapse_log(const double* z, std::size_t n, int label) {
  if (label > 0) return {z[label], z[kBlank], log_sum_excluding(z, n, kBlank, label)};
  return {z[kBlank], log_sum_excluding(z, n, kBlank, kBlank)};
}

// d(log q_i)/dz for the collapsed distribution, accumulated as coef_i * d(log q_i).
inline void collapse_backward(const double* z, std::size_t n, int label, std::span<const double> lq,
                              std::span<const double> coef, double* dz) {
  if (label > 0) {
    dz[label] += coef[0];
    dz[kBlank] += coef[1];
    if (std::isfinite(lq[2]))
      for (std::size_t v = 0; v < n; ++v)
        if (static_cast<int>(v) != kBlank && static_cast<int>(v) != label)
          dz[v] += coef[2] * std::exp(z[v] - lq[2]);
  } else {
    dz[kBlank] += coef[0];
    if (std::isfinite(lq[1]))
      for (std::size_t v = 1; v < n; ++v) dz[v] += coef[1] * std::exp(z[v] - lq[1]);
  }
}

inline double collapsed_kl(std::span<const double> lp, std::span<const double> lq) {
  double kl = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (lp[i] == -std::numeric_limits<double>::infinity()) continue;
    kl += std::exp(lp[i]) * (lp[i] - lq[i]);
  }
  return kl;
}

}  // namespace detail

// KL(p || q) between two collapsed distributions given as probabilities.
inline double collapsed_kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("collapsed_kl: size mismatch");
  std::vector<double> lp, lq;
  for (double x : p) lp.push_back(std::log(x));
  for (double x : q) lq.push_back(std::log(x));
  return detail::collapsed_kl(lp, lq);
}

// Teacher frame paired with 0-based student frame t under shift s.
inline std::size_t shifted_frame(std::size_t t, int shift, std::size_t frames) {
  const long long r = static_cast<long long>(t) + shift;
  return static_cast<std::size_t>(std::clamp<long long>(r, 0, static_cast<long long>(frames) - 1));
}

// Mean over lattice nodes of the KL divergence between collapsed teacher and
// student distributions. The teacher contributes values only.
inline Tensor inplace_distill_loss(const Tensor& teacher, const Tensor& student, std::span<const int> y,
                                   int shift = 0, KlDirection direction = KlDirection::TeacherStudent) {
  if (teacher.shape() != student.shape())
    throw shape_error("inplace_distill_loss", teacher.shape(), student.shape());
  const TransducerLattice lat(student);
  detail::check_lattice_targets(lat, y, "inplace_distill_loss");
  const std::size_t T = lat.frames(), U = y.size(), V1 = lat.outputs();
  const double nodes = static_cast<double>(T * (U + 1));
  const std::vector<double> tv(teacher.data().begin(), teacher.data().end());
  const std::vector<int> targets(y.begin(), y.end());
  auto label_at = [&targets, U](std::size_t u) { return u < U ? targets[u] : kBlank; };

  const auto sv = student.data();
  double total = 0.0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u <= U; ++u) {
      const double* zs = sv.data() + (t * (U + 1) + u) * V1;
      const double* zt = tv.data() + (shifted_frame(t, shift, T) * (U + 1) + u) * V1;
      const auto ls = detail::collapse_log(zs, V1, label_at(u));
      const auto lt = detail::collapse_log(zt, V1, label_at(u));
      total += direction == KlDirection::TeacherStudent ? detail::collapsed_kl(lt, ls)
                                                        : detail::collapsed_kl(ls, lt);
    }
  return detail::make_result(
      "inplace_distill_loss", Shape{}, {total / nodes}, {student},
      [T, U, V1, nodes, tv, targets, shift, direction](const Node& self, std::span<const double> g,
                                                       std::span<std::vector<double>* const> pg) {
        const auto& sv = self.parents[0]->value;
        auto& d = *pg[0];
        const double scale = g[0] / nodes;
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t u = 0; u <= U; ++u) {
            const int label = u < U ? targets[u] : kBlank;
            const std::size_t base = (t * (U + 1) + u) * V1;
            const double* zs = sv.data() + base;
            const double* zt = tv.data() + (shifted_frame(t, shift, T) * (U + 1) + u) * V1;
            const auto ls = detail::collapse_log(zs, V1, label);
            const auto lt = detail::collapse_log(zt, V1, label);
            std::vector<double> coef(ls.size(), 0.0);
            for (std::size_t i = 0; i < ls.size(); ++i) {
              if (direction == KlDirection::TeacherStudent) {
                if (lt[i] != -std::numeric_limits<double>::infinity()) coef[i] = -std::exp(lt[i]) * scale;
              } else if (ls[i] != -std::numeric_limits<double>::infinity()) {
                coef[i] = std::exp(ls[i]) * (ls[i] - lt[i] + 1.0) * scale;
              }
            }
            detail::collapse_backward(zs, V1, label, ls, coef, d.data() + base);
          }
      });
}

// ---------------------------------------------------------------------------
// Models and steps.

// One stack shared by both modes, or one stack per mode.
class DualModeModel {
 public:
  DualModeModel(const ModelConfig& cfg, WeightSharing sharing, std::uint64_t seed) : sharing_(sharing) {
    stacks_.emplace_back(cfg, seed);
    if (sharing == WeightSharing::Separate) stacks_.emplace_back(cfg, mix_seed(seed, 7));
  }

  WeightSharing sharing() const { return sharing_; }
  const ModelConfig& config() const { return stacks_.front().config(); }
  const TransducerModel& stack(Mode m) const {
    return stacks_.size() == 1 || m == Mode::Streaming ? stacks_[0] : stacks_[1];
  }
  bool supports(Mode m) const { return stack(m).encoder().supports(m); }

  ParameterList parameters() const {
    if (stacks_.size() == 1) return stacks_[0].parameters();
    ParameterList out = stacks_[0].parameters("streaming.");
    for (auto& p : stacks_[1].parameters("fullcontext.")) out.push_back(std::move(p));
    return out;
  }
  ParameterList buffers() const {
    if (stacks_.size() == 1) return stacks_[0].buffers();
    ParameterList out = stacks_[0].buffers("streaming.");
    for (auto& p : stacks_[1].buffers("fullcontext.")) out.push_back(std::move(p));
    return out;
  }

 private:
  WeightSharing sharing_;
  std::vector<TransducerModel> stacks_;
};

struct StepResult {
  std::size_t step = 0;
  std::optional<double> loss_full;
  std::optional<double> loss_stream;
  std::optional<double> loss_distill;
  double loss_total = 0.0;
  std::optional<Mode> mode_chosen;
  double lr = 0.0;
};

// Differentiable pieces of one step's objective.
struct Objective {
  Tensor total;
  std::optional<Tensor> full;
  std::optional<Tensor> stream;
  std::optional<Tensor> distill;
};

namespace detail {

struct BatchLattices {
  std::vector<Tensor> lattices;
  std::vector<std::vector<int>> targets;
};

inline BatchLattices batch_lattices(const TransducerModel& model, const PaddedBatch& batch, Mode mode,
                                    bool training) {
  std::vector<Tensor> feats;
  BatchLattices out;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    feats.push_back(batch.features_of(b));
    out.targets.push_back(batch.targets_of(b));
  }
  out.lattices = model.lattices(feats, out.targets, mode, training);
  return out;
}

inline Tensor sum_all(const std::vector<Tensor>& xs) {
  Tensor acc = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) acc = acc + xs[i];
  return acc;
}

inline Tensor mean_rnnt(const BatchLattices& bl) {
  std::vector<Tensor> losses;
  for (std::size_t i = 0; i < bl.lattices.size(); ++i)
    losses.push_back(rnnt_loss(bl.lattices[i], bl.targets[i], false));
  return scale(sum_all(losses), 1.0 / static_cast<double>(losses.size()));
}

inline void check_finite(const std::optional<Tensor>& t, const char* name, std::size_t step) {
  if (t && !std::isfinite(t->item()))
    throw NumericError(std::string(name) + " is not finite at step " + std::to_string(step));
}

}  // namespace detail

// Sum of per-utterance RNN-T losses over the valid region of every row.
inline Tensor batch_rnnt_loss(const TransducerModel& model, const PaddedBatch& batch, Mode mode,
                              bool training = false) {
  const auto bl = detail::batch_lattices(model, batch, mode, training);
  std::vector<Tensor> losses;
  for (std::size_t i = 0; i < bl.lattices.size(); ++i) losses.push_back(rnnt_loss(bl.lattices[i], bl.targets[i]));
  return detail::sum_all(losses);
}

class Trainer {
 public:
  Trainer(DualModeModel& model, const TrainConfig& cfg)
      : model_(model), cfg_(cfg), params_(model.parameters()), mode_rng_(mix_seed(cfg.seed, 11)) {
    cfg_.validate();
    opt_.beta1 = cfg_.beta1;
    opt_.beta2 = cfg_.beta2;
    opt_.epsilon = cfg_.epsilon;
  }

  const TrainConfig& config() const { return cfg_; }
  const OptimizerState& optimizer() const { return opt_; }
  std::size_t steps_taken() const { return opt_.step; }

  bool distill_active() const { return cfg_.distill && cfg_.w_distill > 0.0; }

  // Algorithm-1 objective: w_full*L_full + w_stream*L_stream + w_distill*L_distill.
  Objective joint_objective(const PaddedBatch& batch) const {
    Objective o;
    std::optional<detail::BatchLattices> full, stream;
    if (cfg_.w_full > 0.0 || distill_active())
      full = detail::batch_lattices(model_.stack(Mode::FullContext), batch, Mode::FullContext, true);
    if (cfg_.w_stream > 0.0 || distill_active())
      stream = detail::batch_lattices(model_.stack(Mode::Streaming), batch, Mode::Streaming, true);
    std::vector<Tensor> terms;
    if (full && cfg_.w_full > 0.0) {
      o.full = guarded("loss_full", [&] { return detail::mean_rnnt(*full); });
      terms.push_back(scale(*o.full, cfg_.w_full));
    }
    if (stream && cfg_.w_stream > 0.0) {
      o.stream = guarded("loss_stream", [&] { return detail::mean_rnnt(*stream); });
      terms.push_back(scale(*o.stream, cfg_.w_stream));
    }
    if (distill_active()) {
      o.distill = guarded("loss_distill", [&] { return distill_term(*full, *stream); });
      terms.push_back(scale(*o.distill, cfg_.w_distill));
    }
    if (terms.empty()) throw std::invalid_argument("joint training with every loss weight zero");
    o.total = detail::sum_all(terms);
    return o;
  }

  Objective sampled_objective(const PaddedBatch& batch, Mode mode) const {
    Objective o;
    const auto bl = detail::batch_lattices(model_.stack(mode), batch, mode, true);
    const char* name = mode == Mode::Streaming ? "loss_stream" : "loss_full";
    (mode == Mode::Streaming ? o.stream : o.full) = guarded(name, [&] { return detail::mean_rnnt(bl); });
    o.total = mode == Mode::Streaming ? *o.stream : *o.full;
    return o;
  }

  StepResult joint_step(const PaddedBatch& batch) {
    const Objective o = joint_objective(batch);
    return apply(o, std::nullopt);
  }

  StepResult sampled_step(const PaddedBatch& batch) {
    const Mode mode = draw_mode();
    const Objective o = sampled_objective(batch, mode);
    return apply(o, mode);
  }

  StepResult step(const PaddedBatch& batch) {
    return cfg_.mode_strategy == ModeStrategy::Joint ? joint_step(batch) : sampled_step(batch);
  }

  Mode draw_mode() { return mode_rng_.bernoulli(cfg_.stream_probability) ? Mode::Streaming : Mode::FullContext; }

 private:
  // Loss functions that hit a non-finite value report which component failed.
  template <class F>
  Tensor guarded(const char* name, F&& f) const {
    try {
      return f();
    } catch (const NumericError& e) {
      throw NumericError(std::string(name) + " is not finite at step " + std::to_string(opt_.step + 1) + " (" +
                         e.what() + ")");
    }
  }

  Tensor distill_term(const detail::BatchLattices& full, const detail::BatchLattices& stream) const {
    std::vector<Tensor> parts;
    double weight_sum = 0.0;
    for (std::size_t i = 0; i < stream.lattices.size(); ++i) {
      const Tensor kl = inplace_distill_loss(stop_gradient(full.lattices[i]), stream.lattices[i],
                                             stream.targets[i], cfg_.teacher_shift, cfg_.kl_direction);
      const double w = cfg_.distill_averaging == DistillAveraging::Node
                           ? static_cast<double>(stream.lattices[i].dim(0) * stream.lattices[i].dim(1))
                           : 1.0;
      weight_sum += w;
      parts.push_back(scale(kl, w));
    }
    return scale(detail::sum_all(parts), 1.0 / weight_sum);
  }

  StepResult apply(const Objective& o, std::optional<Mode> mode) {
    StepResult r;
    r.step = opt_.step + 1;
    detail::check_finite(o.full, "loss_full", r.step);
    detail::check_finite(o.stream, "loss_stream", r.step);
    detail::check_finite(o.distill, "loss_distill", r.step);
    detail::check_finite(o.total, "loss_total", r.step);
    const GradientMap gm = backward(o.total);
    std::vector<std::vector<double>> grads;
    double norm2 = 0.0;
    for (const auto& p : params_) {
      const auto* g = gm.find(p.tensor);
      grads.push_back(g ? *g : std::vector<double>(p.tensor.size(), 0.0));
      for (double x : grads.back()) norm2 += x * x;
    }
    if (!std::isfinite(norm2)) throw NumericError("gradient is not finite at step " + std::to_string(r.step));
    if (cfg_.clip_norm > 0.0 && std::sqrt(norm2) > cfg_.clip_norm) {
      const double k = cfg_.clip_norm / std::sqrt(norm2);
      for (auto& g : grads)
        for (double& x : g) x *= k;
    }
    r.lr = learning_rate_at(cfg_.learning_rate, cfg_.warmup_steps, r.step);
    optimizer_update(opt_, params_, grads, r.lr);
    if (o.full) r.loss_full = o.full->item();
    if (o.stream) r.loss_stream = o.stream->item();
    if (o.distill) r.loss_distill = o.distill->item();
    r.loss_total = o.total.item();
    r.mode_chosen = mode;
    return r;
  }

  DualModeModel& model_;
  TrainConfig cfg_;
  ParameterList params_;
  OptimizerState opt_;
  Rng mode_rng_;
};

}  // namespace dualmode
