#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "test_util.hpp"

using namespace dualmode;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

Result run(const std::string& args) {
  const std::string cmd = std::string(DUALMODE_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof(buf), p)) r.output.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.model.encoder.blocks = 1;
  c.model.encoder.channels = 4;
  c.model.encoder.kernel_size = 3;
  c.model.encoder.feature_dim = 4;
  c.model.decoder.vocab_size = 3;
  c.model.decoder.embed_dim = 3;
  c.model.decoder.hidden = 4;
  c.model.decoder.joint_dim = 4;
  c.synth.vocab_size = 3;
  c.synth.feature_dim = 4;
  c.synth.segment_frames = 3;
  c.synth.trailing_silence = 3;
  c.data.train_count = 6;
  c.data.eval_count = 3;
  c.train.total_steps = 4;
  c.train.batch_size = 3;
  c.train.log_every = 1;
  override_seed(c, 17);
  return c;
}

// One dataset and one trained checkpoint shared by the tests below.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "dualmode_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write_config("tiny.json", tiny_experiment());
    data_ = run("gen-data --config " + (dir_ / "tiny.json").string() + " --out " + (dir_ / "data").string() +
                " --count 4");
    train_ = run("train --config " + (dir_ / "tiny.json").string() + " --out " + (dir_ / "run").string());
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static fs::path write_config(const std::string& name, const ExperimentConfig& c) {
    std::ofstream(dir_ / name) << to_json(c).dump(2);
    return dir_ / name;
  }
  static std::string ckpt() { return (dir_ / "run" / "model.ckpt").string(); }
  static std::string manifest() { return (dir_ / "data" / "manifest.jsonl").string(); }

  static inline fs::path dir_;
  static inline Result data_, train_;
};

}  // namespace

TEST_F(Cli, GenDataWritesManifestAndFeatures) {
  ASSERT_EQ(data_.code, 0) << data_.output;
  const auto utts = load_manifest(manifest(), 3);
  EXPECT_EQ(utts.size(), 4u);
  EXPECT_TRUE(fs::exists(dir_ / "data" / "feats" / (utts[0].id + ".dmf")));
}

TEST_F(Cli, GenDataZeroCount) {
  const Result r = run("gen-data --config " + (dir_ / "tiny.json").string() + " --out " + (dir_ / "empty").string() +
                       " --count 0");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(fs::file_size(dir_ / "empty" / "manifest.jsonl"), 0u);
}

TEST_F(Cli, BadConfigPathNamesPath) {
  const Result r = run("gen-data --config /nonexistent/cfg.json --out " + (dir_ / "x").string() + " --count 1");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("/nonexistent/cfg.json"), std::string::npos) << r.output;
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("evaluate --checkpoint " + ckpt() + " --data " + manifest() + " --mode sideways").code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, TrainWritesCheckpointAndMetrics) {
  ASSERT_EQ(train_.code, 0) << train_.output;
  EXPECT_TRUE(fs::exists(ckpt()));
  std::ifstream is(dir_ / "run" / "metrics.jsonl");
  int lines = 0;
  for (std::string line; std::getline(is, line); ++lines) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.at("loss_full").is_number());
    EXPECT_TRUE(j.at("loss_stream").is_number());
    EXPECT_TRUE(j.at("loss_distill").is_number());
  }
  EXPECT_EQ(lines, 4);
}

TEST_F(Cli, TrainIsDeterministic) {
  const Result r = run("train --config " + (dir_ / "tiny.json").string() + " --out " + (dir_ / "run2").string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(read_text(dir_ / "run" / "metrics.jsonl"), read_text(dir_ / "run2" / "metrics.jsonl"));
  EXPECT_EQ(read_text(ckpt()), read_text(dir_ / "run2" / "model.ckpt"));
}

TEST_F(Cli, SampledTrainingHasNoDistillColumn) {
  auto c = tiny_experiment();
  c.train.mode_strategy = ModeStrategy::Sampled;
  const auto cfg = write_config("sampled.json", c);
  const Result r = run("train --config " + cfg.string() + " --out " + (dir_ / "sampled").string());
  ASSERT_EQ(r.code, 0) << r.output;
  std::ifstream is(dir_ / "sampled" / "metrics.jsonl");
  for (std::string line; std::getline(is, line);) EXPECT_TRUE(nlohmann::json::parse(line).at("loss_distill").is_null());
}

TEST_F(Cli, SeedOverrideChangesResult) {
  const Result r = run("train --config " + (dir_ / "tiny.json").string() + " --out " + (dir_ / "seeded").string() +
                       " --seed-override 99");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(read_text(ckpt()), read_text(dir_ / "seeded" / "model.ckpt"));
  EXPECT_EQ(load_model(dir_ / "seeded" / "model.ckpt").config.seed, 99u);
}

TEST_F(Cli, DivergentTrainingExitsWithStep) {
  auto c = tiny_experiment();
  c.train.learning_rate = 1e300;
  c.train.warmup_steps = 0;
  const auto cfg = write_config("diverge.json", c);
  const Result r = run("train --config " + cfg.string() + " --out " + (dir_ / "diverge").string());
  EXPECT_EQ(r.code, 2) << r.output;
  EXPECT_NE(r.output.find("step"), std::string::npos) << r.output;
}

TEST_F(Cli, EvaluateStreamingAndFullContext) {
  const Result s = run("evaluate --checkpoint " + ckpt() + " --data " + manifest() + " --mode streaming");
  ASSERT_EQ(s.code, 0) << s.output;
  const auto js = nlohmann::json::parse(s.output);
  EXPECT_EQ(js.at("mode"), "streaming");
  EXPECT_TRUE(js.at("latency_ms").is_object());
  EXPECT_EQ(js.at("n"), 4);

  const fs::path out = dir_ / "full.json";
  const Result f = run("evaluate --checkpoint " + ckpt() + " --data " + manifest() + " --mode fullcontext --out " +
                       out.string());
  ASSERT_EQ(f.code, 0) << f.output;
  const auto jf = nlohmann::json::parse(read_text(out));
  EXPECT_TRUE(jf.at("latency_ms").is_null());
  EXPECT_TRUE(jf.at("wer").is_number());
}

TEST_F(Cli, LookAheadShiftsLatencyBySixtyMs) {
  const LoadedModel m = load_model(ckpt());
  const auto utts = load_manifest(manifest(), 3);
  const EvalReport base = evaluate_model(*m.model, utts, Mode::Streaming, 0);
  const EvalReport ahead = evaluate_model(*m.model, utts, Mode::Streaming, 6);
  // The streaming encoder is causal, so emissions over the original frames are
  // unchanged; padding can only append emissions after them.
  bool all_same = true;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const auto& a = base.records[i];
    const auto& b = ahead.records[i];
    ASSERT_GE(b.tokens.size(), a.tokens.size());
    EXPECT_TRUE(std::equal(a.frames.begin(), a.frames.end(), b.frames.begin()));
    if (a.tokens != b.tokens || a.tokens.empty()) {
      all_same = false;
      continue;
    }
    EXPECT_EQ(emission_latency_ms(b, utts[i]) - emission_latency_ms(a, utts[i]), 60.0);
  }
  if (all_same) {
    EXPECT_EQ(*ahead.latency->p50, *base.latency->p50 + 60.0);
    EXPECT_EQ(*ahead.latency->p90, *base.latency->p90 + 60.0);
  }
  const Result r = run("evaluate --checkpoint " + ckpt() + " --data " + manifest() +
                       " --mode streaming --lookahead-frames 6");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(nlohmann::json::parse(r.output), to_json(ahead));
}

TEST_F(Cli, ModeMismatchIsAnError) {
  auto c = tiny_experiment();
  c.model.encoder.variant = EncoderVariant::StreamingOnly;
  c.train.w_full = 0.0;
  c.train.distill = false;
  const auto cfg = write_config("streaming_only.json", c);
  ASSERT_EQ(run("train --config " + cfg.string() + " --out " + (dir_ / "so").string()).code, 0);
  const Result r = run("evaluate --checkpoint " + (dir_ / "so" / "model.ckpt").string() + " --data " + manifest() +
                       " --mode fullcontext");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("streaming_only"), std::string::npos) << r.output;
}

TEST_F(Cli, ExportLattice) {
  const auto utts = load_manifest(manifest(), 3);
  const fs::path csv = dir_ / "lat.csv";
  const Result r = run("export-lattice --checkpoint " + ckpt() + " --data " + manifest() + " --utterance-id " +
                       utts[0].id + " --out " + csv.string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(read_text(csv).rfind("u,token_id,source_frame\n", 0), 0u);

  const Result svg = run("export-lattice --checkpoint " + ckpt() + " --data " + manifest() + " --utterance-id " +
                         utts[0].id + " --out " + (dir_ / "plot.svg").string());
  ASSERT_EQ(svg.code, 0) << svg.output;
  EXPECT_TRUE(fs::exists(dir_ / "plot.svg"));
  EXPECT_TRUE(fs::exists(dir_ / "plot.csv"));

  const Result missing = run("export-lattice --checkpoint " + ckpt() + " --data " + manifest() +
                             " --utterance-id no_such_utt --out " + csv.string());
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.output.find("no_such_utt"), std::string::npos);
}

TEST_F(Cli, AblateWritesFourRows) {
  auto c = tiny_experiment();
  c.train.total_steps = 2;
  const auto cfg = write_config("ablate.json", c);
  const Result r = run("ablate --config " + cfg.string() + " --out " + (dir_ / "ablation").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rows = nlohmann::json::parse(read_text(dir_ / "ablation" / "ablation.json")).at("rows");
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& row : rows) {
    EXPECT_TRUE(row.contains("wer"));
    EXPECT_TRUE(row.contains("latency_p50_ms"));
    EXPECT_TRUE(row.contains("latency_p90_ms"));
  }
  EXPECT_TRUE(fs::exists(dir_ / "ablation" / "ablation.txt"));
}
