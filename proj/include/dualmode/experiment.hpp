#pragma once

// Experiment configuration, the training loop, and the ablation grid.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualmode/checkpoint.hpp"
#include "dualmode/data.hpp"
#include "dualmode/eval.hpp"
#include "dualmode/training.hpp"

namespace dualmode {

using nlohmann::json;

struct DataConfig {
  std::string train_manifest;  // empty: synthesize train_count utterances in memory
  std::string eval_manifest;   // empty: synthesize eval_count utterances in memory
  std::size_t train_count = 2048;
  std::size_t eval_count = 256;
};

// In-memory eval utterances are drawn from a disjoint index range.
inline constexpr std::size_t kEvalIndexOffset = 1000000;

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  SynthTaskConfig synth;
  DataConfig data;
  std::size_t max_symbols_per_frame = 4;
  std::string output_dir;

  void validate() const {
    model.encoder.validate();
    model.decoder.validate();
    train.validate();
    synth.validate();
    if (model.decoder.vocab_size != synth.vocab_size)
      throw std::invalid_argument("decoder.vocab_size (" + std::to_string(model.decoder.vocab_size) +
                                  ") differs from synth.vocab_size (" + std::to_string(synth.vocab_size) + ")");
    if (model.encoder.feature_dim != synth.feature_dim)
      throw std::invalid_argument("encoder.feature_dim (" + std::to_string(model.encoder.feature_dim) +
                                  ") differs from synth.feature_dim (" + std::to_string(synth.feature_dim) + ")");
    if (max_symbols_per_frame < 1) throw std::invalid_argument("eval.max_symbols_per_frame must be >= 1");
    if (model.encoder.variant == EncoderVariant::StreamingOnly && train.mode_strategy == ModeStrategy::Joint &&
        (train.w_full > 0.0 || (train.distill && train.w_distill > 0.0)))
      throw std::invalid_argument("a streaming_only encoder trains with train.w_full = 0 and no distillation");
    if (model.encoder.variant == EncoderVariant::StreamingOnly && train.mode_strategy == ModeStrategy::Sampled &&
        train.stream_probability < 1.0)
      throw std::invalid_argument("a streaming_only encoder needs train.stream_probability = 1");
  }
};

// ---------------------------------------------------------------------------
// JSON mapping. Unknown keys are rejected so typos do not pass silently.

namespace detail {

inline void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw std::invalid_argument(section + " must be a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw std::invalid_argument("unknown key " + section + "." + k);
}

template <class T>
void read(const json& j, const char* key, T& dst, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(section + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline json to_json(const EncoderConfig& c) {
  return {{"architecture", to_string(c.architecture)},
          {"variant", to_string(c.variant)},
          {"norm", to_string(c.norm)},
          {"blocks", c.blocks},
          {"channels", c.channels},
          {"kernel_size", c.kernel_size},
          {"heads", c.heads},
          {"stride", c.stride},
          {"feature_dim", c.feature_dim},
          {"se_reduction", c.se_reduction},
          {"ff_multiplier", c.ff_multiplier}};
}

inline EncoderConfig encoder_config_from_json(const json& j) {
  detail::check_keys(j, "encoder", {"architecture", "variant", "norm", "blocks", "channels", "kernel_size",
                                    "heads", "stride", "feature_dim", "se_reduction", "ff_multiplier"});
  EncoderConfig c;
  if (j.contains("architecture")) c.architecture = parse_architecture(j.at("architecture").get<std::string>());
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  if (j.contains("norm")) c.norm = parse_norm_kind(j.at("norm").get<std::string>());
  detail::read(j, "blocks", c.blocks, "encoder");
  detail::read(j, "channels", c.channels, "encoder");
  detail::read(j, "kernel_size", c.kernel_size, "encoder");
  detail::read(j, "heads", c.heads, "encoder");
  detail::read(j, "stride", c.stride, "encoder");
  detail::read(j, "feature_dim", c.feature_dim, "encoder");
  detail::read(j, "se_reduction", c.se_reduction, "encoder");
  detail::read(j, "ff_multiplier", c.ff_multiplier, "encoder");
  return c;
}

inline json to_json(const DecoderConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim}, {"hidden", c.hidden}, {"joint_dim", c.joint_dim}};
}

inline DecoderConfig decoder_config_from_json(const json& j) {
  detail::check_keys(j, "decoder", {"vocab_size", "embed_dim", "hidden", "joint_dim"});
  DecoderConfig c;
  detail::read(j, "vocab_size", c.vocab_size, "decoder");
  detail::read(j, "embed_dim", c.embed_dim, "decoder");
  detail::read(j, "hidden", c.hidden, "decoder");
  detail::read(j, "joint_dim", c.joint_dim, "decoder");
  return c;
}

inline json to_json(const TrainConfig& c) {
  return {{"w_full", c.w_full},
          {"w_stream", c.w_stream},
          {"w_distill", c.w_distill},
          {"teacher_shift", c.teacher_shift},
          {"stream_probability", c.stream_probability},
          {"learning_rate", c.learning_rate},
          {"warmup_steps", c.warmup_steps},
          {"total_steps", c.total_steps},
          {"batch_size", c.batch_size},
          {"mode_strategy", to_string(c.mode_strategy)},
          {"weight_sharing", to_string(c.weight_sharing)},
          {"distill", c.distill},
          {"kl_direction", to_string(c.kl_direction)},
          {"distill_averaging", to_string(c.distill_averaging)},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon},
          {"clip_norm", c.clip_norm},
          {"log_every", c.log_every},
          {"checkpoint_every", c.checkpoint_every}};
}

inline TrainConfig train_config_from_json(const json& j) {
  detail::check_keys(j, "train",
                     {"w_full", "w_stream", "w_distill", "teacher_shift", "stream_probability", "learning_rate",
                      "warmup_steps", "total_steps", "batch_size", "mode_strategy", "weight_sharing", "distill",
                      "kl_direction", "distill_averaging", "beta1", "beta2", "epsilon", "clip_norm", "log_every",
                      "checkpoint_every"});
  TrainConfig c;
  detail::read(j, "w_full", c.w_full, "train");
  detail::read(j, "w_stream", c.w_stream, "train");
  detail::read(j, "w_distill", c.w_distill, "train");
  detail::read(j, "teacher_shift", c.teacher_shift, "train");
  detail::read(j, "stream_probability", c.stream_probability, "train");
  detail::read(j, "learning_rate", c.learning_rate, "train");
  detail::read(j, "warmup_steps", c.warmup_steps, "train");
  detail::read(j, "total_steps", c.total_steps, "train");
  detail::read(j, "batch_size", c.batch_size, "train");
  if (j.contains("mode_strategy")) c.mode_strategy = parse_mode_strategy(j.at("mode_strategy").get<std::string>());
  if (j.contains("weight_sharing"))
    c.weight_sharing = parse_weight_sharing(j.at("weight_sharing").get<std::string>());
  detail::read(j, "distill", c.distill, "train");
  if (j.contains("kl_direction")) c.kl_direction = parse_kl_direction(j.at("kl_direction").get<std::string>());
  if (j.contains("distill_averaging"))
    c.distill_averaging = parse_distill_averaging(j.at("distill_averaging").get<std::string>());
  detail::read(j, "beta1", c.beta1, "train");
  detail::read(j, "beta2", c.beta2, "train");
  detail::read(j, "epsilon", c.epsilon, "train");
  detail::read(j, "clip_norm", c.clip_norm, "train");
  detail::read(j, "log_every", c.log_every, "train");
  detail::read(j, "checkpoint_every", c.checkpoint_every, "train");
  return c;
}

inline json to_json(const SynthTaskConfig& c) {
  return {{"vocab_size", c.vocab_size},         {"segment_frames", c.segment_frames},
          {"noise", c.noise},                   {"min_tokens", c.min_tokens},
          {"max_tokens", c.max_tokens},         {"trailing_silence", c.trailing_silence},
          {"feature_dim", c.feature_dim},       {"seed", c.seed}};
}

inline SynthTaskConfig synth_config_from_json(const json& j) {
  detail::check_keys(j, "synth", {"vocab_size", "segment_frames", "noise", "min_tokens", "max_tokens",
                                  "trailing_silence", "feature_dim", "seed"});
  SynthTaskConfig c;
  detail::read(j, "vocab_size", c.vocab_size, "synth");
  detail::read(j, "segment_frames", c.segment_frames, "synth");
  detail::read(j, "noise", c.noise, "synth");
  detail::read(j, "min_tokens", c.min_tokens, "synth");
  detail::read(j, "max_tokens", c.max_tokens, "synth");
  detail::read(j, "trailing_silence", c.trailing_silence, "synth");
  detail::read(j, "feature_dim", c.feature_dim, "synth");
  detail::read(j, "seed", c.seed, "synth");
  return c;
}

inline json to_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},
          {"encoder", to_json(c.model.encoder)},
          {"decoder", to_json(c.model.decoder)},
          {"train", to_json(c.train)},
          {"synth", to_json(c.synth)},
          {"data",
           {{"train_manifest", c.data.train_manifest},
            {"eval_manifest", c.data.eval_manifest},
            {"train_count", c.data.train_count},
            {"eval_count", c.data.eval_count}}},
          {"eval", {{"max_symbols_per_frame", c.max_symbols_per_frame}}},
          {"output_dir", c.output_dir}};
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
  detail::check_keys(j, "config", {"seed", "encoder", "decoder", "train", "synth", "data", "eval", "output_dir"});
  if (!j.contains("seed")) throw std::invalid_argument("config.seed is required");
  ExperimentConfig c;
  detail::read(j, "seed", c.seed, "config");
  if (j.contains("encoder")) c.model.encoder = encoder_config_from_json(j.at("encoder"));
  if (j.contains("decoder")) c.model.decoder = decoder_config_from_json(j.at("decoder"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("synth")) c.synth = synth_config_from_json(j.at("synth"));
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::check_keys(d, "data", {"train_manifest", "eval_manifest", "train_count", "eval_count"});
    detail::read(d, "train_manifest", c.data.train_manifest, "data");
    detail::read(d, "eval_manifest", c.data.eval_manifest, "data");
    detail::read(d, "train_count", c.data.train_count, "data");
    detail::read(d, "eval_count", c.data.eval_count, "data");
  }
  if (j.contains("eval")) {
    detail::check_keys(j.at("eval"), "eval", {"max_symbols_per_frame"});
    detail::read(j.at("eval"), "max_symbols_per_frame", c.max_symbols_per_frame, "eval");
  }
  detail::read(j, "output_dir", c.output_dir, "config");
  c.train.seed = c.seed;
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config " + path.string() + " is not valid JSON: " + e.what());
  }
  try {
    return experiment_config_from_json(j);
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string(e.what()) + " (in " + path.string() + ")");
  }
}

inline void override_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.train.seed = seed;
}

// ---------------------------------------------------------------------------
// Data sources.

inline std::vector<Utterance> training_utterances(const ExperimentConfig& c) {
  if (!c.data.train_manifest.empty()) return load_manifest(c.data.train_manifest, c.synth.vocab_size);
  return synthesize(c.synth, c.data.train_count);
}

inline std::vector<Utterance> evaluation_utterances(const ExperimentConfig& c) {
  if (!c.data.eval_manifest.empty()) return load_manifest(c.data.eval_manifest, c.synth.vocab_size);
  return synthesize(c.synth, c.data.eval_count, kEvalIndexOffset);
}

// Fixed-seed epoch shuffling; the final partial batch of an epoch is kept.
class BatchSchedule {
 public:
  BatchSchedule(std::span<const Utterance> utts, std::size_t batch_size, std::uint64_t seed)
      : utts_(utts), batch_size_(batch_size), rng_(mix_seed(seed, 5)) {
    if (utts.empty()) throw std::invalid_argument("training set is empty");
  }

  PaddedBatch next() {
    if (cursor_ >= order_.size()) reshuffle();
    const std::size_t n = std::min(batch_size_, order_.size() - cursor_);
    std::vector<Utterance> chosen;
    for (std::size_t i = 0; i < n; ++i) chosen.push_back(utts_[order_[cursor_ + i]]);
    cursor_ += n;
    return pad_batch(chosen);
  }

 private:
  void reshuffle() {
    order_.resize(utts_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    rng_.shuffle(std::span<std::size_t>(order_));
    cursor_ = 0;
  }

  std::span<const Utterance> utts_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

// ---------------------------------------------------------------------------
// Training.

inline json metrics_line(const StepResult& r) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json j = {{"step", r.step},
            {"loss_full", opt(r.loss_full)},
            {"loss_stream", opt(r.loss_stream)},
            {"loss_distill", opt(r.loss_distill)},
            {"loss_total", r.loss_total},
            {"lr", r.lr}};
  if (r.mode_chosen) j["mode"] = std::string(to_string(*r.mode_chosen));
  return j;
}

struct TrainingRun {
  std::unique_ptr<DualModeModel> model;
  std::vector<StepResult> history;
};

inline void save_model(const std::filesystem::path& path, const DualModeModel& model, const ExperimentConfig& c,
                       std::size_t step) {
  save_checkpoint(path, model.parameters(), model.buffers(), to_json(c), step);
}

// Trains on `train` for c.train.total_steps. With an output directory, writes
// metrics.jsonl, periodic checkpoint_<step>.ckpt, and the final model.ckpt.
inline TrainingRun run_training(const ExperimentConfig& c, std::span<const Utterance> train,
                                const std::filesystem::path& out_dir = {}) {
  c.validate();
  TrainingRun run;
  run.model = std::make_unique<DualModeModel>(c.model, c.train.weight_sharing, c.seed);
  Trainer trainer(*run.model, c.train);
  std::ofstream metrics;
  if (!out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + out_dir.string() + ": " + ec.message());
    metrics.open(out_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot open " + (out_dir / "metrics.jsonl").string());
  }
  if (c.train.total_steps > 0) {
    BatchSchedule schedule(train, c.train.batch_size, c.seed);
    for (std::size_t s = 1; s <= c.train.total_steps; ++s) {
      const StepResult r = trainer.step(schedule.next());
      run.history.push_back(r);
      const bool log = c.train.log_every > 0 && (s % c.train.log_every == 0 || s == c.train.total_steps);
      if (metrics.is_open() && log) metrics << metrics_line(r).dump() << '\n';
      if (!out_dir.empty() && c.train.checkpoint_every > 0 && s % c.train.checkpoint_every == 0)
        save_model(out_dir / ("checkpoint_" + std::to_string(s) + ".ckpt"), *run.model, c, s);
    }
  }
  if (!out_dir.empty()) {
    if (!metrics) throw std::runtime_error("failed writing " + (out_dir / "metrics.jsonl").string());
    save_model(out_dir / "model.ckpt", *run.model, c, trainer.steps_taken());
  }
  return run;
}

struct LoadedModel {
  ExperimentConfig config;
  std::unique_ptr<DualModeModel> model;
  std::size_t step = 0;
};

inline LoadedModel load_model(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  LoadedModel m;
  m.config = experiment_config_from_json(ck.config);
  m.model = std::make_unique<DualModeModel>(m.config.model, m.config.train.weight_sharing, m.config.seed);
  restore_checkpoint(ck, m.model->parameters(), m.model->buffers(), path);
  m.step = ck.step;
  return m;
}

inline EvalReport evaluate_model(const DualModeModel& model, std::span<const Utterance> utts, Mode mode,
                                 std::size_t lookahead_frames = 0, std::size_t max_symbols = 4) {
  if (!model.supports(mode))
    throw std::invalid_argument("checkpoint encoder is " + to_string(model.config().encoder.variant) +
                                " and cannot decode in " + std::string(to_string(mode)) + " mode");
  return evaluate(model.stack(mode), utts, mode, lookahead_frames, max_symbols);
}

// ---------------------------------------------------------------------------
// Ablation grid: the four weight-sharing / joint-training / distillation rows.

struct AblationRow {
  std::string name;
  WeightSharing weight_sharing = WeightSharing::Shared;
  ModeStrategy mode_strategy = ModeStrategy::Joint;
  bool distill = true;
  double wer = 0.0;
  std::optional<double> latency_p50;
  std::optional<double> latency_p90;
};

inline std::vector<AblationRow> ablation_grid() {
  auto row = [](const char* name, WeightSharing ws, ModeStrategy ms, bool distill) {
    AblationRow r;
    r.name = name;
    r.weight_sharing = ws;
    r.mode_strategy = ms;
    r.distill = distill;
    return r;
  };
  return {row("shared+joint+distill", WeightSharing::Shared, ModeStrategy::Joint, true),
          row("shared+joint", WeightSharing::Shared, ModeStrategy::Joint, false),
          row("shared+sampled", WeightSharing::Shared, ModeStrategy::Sampled, false),
          row("separate+joint+distill", WeightSharing::Separate, ModeStrategy::Joint, true)};
}

inline ExperimentConfig apply_row(ExperimentConfig c, const AblationRow& row) {
  c.train.weight_sharing = row.weight_sharing;
  c.train.mode_strategy = row.mode_strategy;
  c.train.distill = row.distill;
  return c;
}

// Every row uses the same seed, so initialization and data order coincide.
inline std::vector<AblationRow> run_ablation(const ExperimentConfig& c, std::span<const Utterance> train,
                                             std::span<const Utterance> eval,
                                             const std::function<void(const AblationRow&)>& on_row = {}) {
  std::vector<AblationRow> rows = ablation_grid();
  for (auto& row : rows) {
    const ExperimentConfig rc = apply_row(c, row);
    const TrainingRun run = run_training(rc, train);
    const EvalReport rep = evaluate_model(*run.model, eval, Mode::Streaming, 0, c.max_symbols_per_frame);
    row.wer = rep.wer.wer;
    row.latency_p50 = rep.latency->p50;
    row.latency_p90 = rep.latency->p90;
    if (on_row) on_row(row);
  }
  return rows;
}

inline json to_json(const std::vector<AblationRow>& rows) {
  json out = json::array();
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  for (const auto& r : rows)
    out.push_back({{"name", r.name},
                   {"weight_sharing", std::string(to_string(r.weight_sharing))},
                   {"mode_strategy", std::string(to_string(r.mode_strategy))},
                   {"distill", r.distill},
                   {"wer", r.wer},
                   {"latency_p50_ms", opt(r.latency_p50)},
                   {"latency_p90_ms", opt(r.latency_p90)}});
  return {{"rows", out}};
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  auto num = [](const std::optional<double>& v) {
    if (!v) return std::string("null");
    std::ostringstream s;
    s << std::fixed << std::setprecision(1) << *v;
    return s.str();
  };
  std::ostringstream os;
  os << std::left << std::setw(24) << "config" << std::right << std::setw(10) << "WER(%)" << std::setw(12)
     << "Lat@50(ms)" << std::setw(12) << "Lat@90(ms)" << '\n';
  for (const auto& r : rows)
    os << std::left << std::setw(24) << r.name << std::right << std::setw(10) << num(r.wer) << std::setw(12)
       << num(r.latency_p50) << std::setw(12) << num(r.latency_p90) << '\n';
  return os.str();
}

}  // namespace dualmode
