// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "test_util.hpp"

using namespace dualmode;
using testutil::random_tensor;
using testutil::relative_error;
using testutil::values;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail << "first failure: " << what << "; ";
    pass = pass && ok;
  }
};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double max_abs_diff(const Tensor& a, const Tensor& b, std::size_t count) {
  double m = 0.0;
  for (std::size_t i = 0; i < count; ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor random_lattice(std::size_t T, std::size_t U, std::size_t V1, std::mt19937_64& gen) {
  NoGradGuard guard;
  return Tensor::from({T, U + 1, V1}, values(log_softmax(random_tensor({T * (U + 1), V1}, gen, -2, 2, false))));
}

Tensor lattice_from(const std::vector<std::vector<std::vector<double>>>& p) {
  std::vector<double> v;
  for (const auto& a : p)
    for (const auto& b : a)
      for (double x : b) v.push_back(std::log(x));
  return Tensor::from({p.size(), p[0].size(), p[0][0].size()}, std::move(v));
}

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------

void causality(Outcome& o) {
  const auto t0 = Clock::now();
  std::mt19937_64 gen(101);
  std::normal_distribution<double> wild(0.0, 4.0);
  double worst = 0.0;
  int cases = 0;
  for (int trial = 0; trial < 240; ++trial) {
    EncoderConfig cfg;
    cfg.architecture = trial % 2 ? Architecture::ConformerLite : Architecture::ContextNetLite;
    cfg.norm = (trial / 2) % 2 ? NormKind::Batch : NormKind::Layer;
    cfg.blocks = 1 + gen() % 2;
    cfg.channels = 4 + 2 * (gen() % 3);
    cfg.heads = cfg.channels % 4 == 0 ? 2 : 1;
    cfg.kernel_size = 3 + 2 * (gen() % 3);
    cfg.stride = 1 + gen() % 3;
    cfg.feature_dim = 3;
    const Encoder enc(cfg, gen());
    const std::size_t T = 2 + gen() % 14;
    const std::size_t t = gen() % T;  // source frames 0..t are kept
    const Tensor x = random_tensor({T, 3}, gen, -1, 1, false);
    std::vector<double> v = values(x);
    for (std::size_t i = (t + 1) * 3; i < v.size(); ++i) v[i] = wild(gen);
    const Tensor a = enc.encode(x, Mode::Streaming).hidden;
    const Tensor b = enc.encode(Tensor::from(x.shape(), v), Mode::Streaming).hidden;
    // Encoder frames whose whole source span lies within 0..t.
    const std::size_t covered = (t + 1) / cfg.stride;
    worst = std::max(worst, max_abs_diff(a, b, covered * cfg.channels));
    ++cases;
  }
  const double secs = seconds_since(t0);
  o.require(worst <= 1e-9, "prefix changed by " + std::to_string(worst));
  o.require(secs < 60.0, "took " + std::to_string(secs) + " s");
  o.detail << cases << " cases, max diff " << worst << ", " << secs << " s";
}

void dual_conv_equivalence(Outcome& o) {
  std::mt19937_64 gen(102);
  double worst = 0.0;
  for (bool depthwise : {false, true})
    for (std::size_t k : {3u, 5u, 7u}) {
      Initializer init(200 + k + depthwise);
      const std::size_t C = 4;
      const auto dual = DualConv1D::create(init, k, C, C, depthwise);
      const auto causal = CausalConv1D::from_left_taps(dual);
      o.require(causal.taps() == (k + 1) / 2, "tap count for k=" + std::to_string(k));
      for (int trial = 0; trial < 10; ++trial) {
        const Tensor x = random_tensor({1 + gen() % 12, C}, gen, -3, 3, false);
        const Tensor a = dual.forward(x, Mode::Streaming);
        const Tensor b = causal.forward(x);
        o.require(a.shape() == b.shape(), "output shape");
        worst = std::max(worst, max_abs_diff(a, b, a.size()));
      }
    }
  o.require(worst <= 1e-12, "difference " + std::to_string(worst));
  o.detail << "k in {3,5,7}, dense and depthwise, max diff " << worst;
}

void rnnt_oracle(Outcome& o) {
  std::mt19937_64 gen(103);
  double worst = 0.0;
  for (int i = 0; i < 150; ++i) {
    const std::size_t T = 1 + gen() % 4, U = gen() % 4, V = 1 + gen() % 3;
    std::vector<int> y(U);
    for (int& tok : y) tok = 1 + static_cast<int>(gen() % V);
    const Tensor lat = random_lattice(T, U, V + 1, gen);
    worst = std::max(worst, std::abs(rnnt_loss(lat, y).item() - rnnt_loss_bruteforce(lat, y)));
  }
  o.require(worst <= 1e-9, "enumeration mismatch " + std::to_string(worst));

  const double ln4 = std::log(4.0);
  const std::vector<int> one{1};
  const double hand[3] = {rnnt_loss(lattice_from({{{0.5, 0.5}, {0.5, 0.5}}}), one).item(),
                          rnnt_loss(lattice_from({{{0.5, 0.5}}, {{0.5, 0.5}}}), {}).item(),
                          rnnt_loss(lattice_from({{{0.5, 0.5}, {0.5, 0.5}}, {{0.5, 0.5}, {0.5, 0.5}}}), one).item()};
  for (double h : hand) o.require(std::abs(h - 1.386294) <= 1e-6 && std::abs(h - ln4) <= 1e-6, "hand case");
  o.detail << "150 random instances, max diff " << worst << "; hand cases " << hand[0] << " " << hand[1] << " "
           << hand[2];
}

void gradient_suite(Outcome& o) {
  const auto t0 = Clock::now();
  std::mt19937_64 gen(104);
  std::map<std::string, double> worst;
  auto check = [&](const std::string& layer, const std::function<Tensor()>& f, const ParameterList& params) {
    for (const auto& p : params) worst[layer] = std::max(worst[layer], testutil::gradient_error(f, p.tensor));
  };
  auto weights = [&](const Tensor& y) { return random_tensor(y.shape(), gen, -1, 1, false); };

  for (Mode m : {Mode::Streaming, Mode::FullContext}) {
    Initializer init(m == Mode::Streaming ? 1 : 2);
    const Tensor x = random_tensor({6, 4}, gen);
    const Tensor w = weights(x);

    const auto lin = Linear::create(init, 4, 4);
    check("linear", [&] { return sum(lin.forward(x) * w); }, {{"x", x}, {"w", lin.weight}, {"b", lin.bias}});

    for (bool depthwise : {false, true}) {
      const auto conv = DualConv1D::create(init, 5, 4, 4, depthwise);
      ParameterList ps{{"x", x}};
      conv.collect("conv", ps);
      check(depthwise ? "dual_conv_depthwise" : "dual_conv", [&] { return sum(conv.forward(x, m) * w); }, ps);
    }

    check("avg_pool", [&] { return sum(dual_avg_pool(x, m) * w); }, {{"x", x}});

    const auto attn = DualSelfAttention::create(init, 4, 2);
    ParameterList ap{{"x", x}};
    attn.collect("attn", ap);
    check("attention", [&] { return sum(attn.forward(x, m) * w); }, ap);

    for (NormKind kind : {NormKind::Layer, NormKind::Batch}) {
      const auto norm = DualNorm::create(4, kind);
      for (Tensor t : {norm.gamma(m), norm.beta(m)}) {
        auto d = t.mutable_data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += 0.1 * static_cast<double>(i + 1);
      }
      check(kind == NormKind::Layer ? "layer_norm" : "batch_norm", [&] { return sum(norm.forward(x, m, true) * w); },
            {{"x", x}, {"gamma", norm.gamma(m)}, {"beta", norm.beta(m)}});
    }

    const auto se = SEBlock::create(init, 4, 2);
    ParameterList sp{{"x", x}};
    se.collect("se", sp);
    check("squeeze_excite", [&] { return sum(se.forward(x, m) * w); }, sp);

    const auto ff = FeedForward::create(init, 4, 6);
    ParameterList fp{{"x", x}};
    ff.collect("ff", fp);
    check("feed_forward", [&] { return sum(ff.forward(x) * w); }, fp);
  }

  Initializer init(3);
  const auto pred = PredictionNet::create(init, 3, 3, 4);
  const std::vector<int> y{2, 1, 3};
  const Tensor gw = weights(pred.forward(y));
  ParameterList pp;
  pred.collect("pred", pp);
  check("prediction_net", [&] { return sum(pred.forward(y) * gw); }, pp);

  const auto joint = JointNet::create(init, 4, 4, 5, 3);
  const Tensor h = random_tensor({3, 4}, gen), g = random_tensor({2, 4}, gen);
  const Tensor jw = weights(joint.forward(h, g));
  ParameterList jp{{"h", h}, {"g", g}};
  joint.collect("joint", jp);
  check("joint_net", [&] { return sum(joint.forward(h, g) * jw); }, jp);

  const Tensor lat = Tensor::from({3, 3, 4}, values(random_lattice(3, 2, 4, gen)), true);
  check("rnnt_loss", [&] { return rnnt_loss(lat, std::vector<int>{1, 3}, false); }, {{"lattice", lat}});

  const Tensor teacher = random_lattice(3, 2, 4, gen);
  const Tensor logits = random_tensor({9, 4}, gen, -2, 2, true);
  check("distill_loss",
        [&] { return inplace_distill_loss(teacher, reshape(log_softmax(logits), {3, 3, 4}), std::vector<int>{1, 3}, 1); },
        {{"logits", logits}});

  bool layers_ok = true;
  for (const auto& [name, err] : worst) {
    if (err >= 1e-5) o.require(false, name + " relative error " + std::to_string(err));
    layers_ok = layers_ok && err < 1e-5;
  }

  // Composed encoder + transducer loss over every parameter, both encoders.
  double composed = 0.0;
  for (auto arch : {Architecture::ContextNetLite, Architecture::ConformerLite}) {
    ModelConfig mc;
    mc.encoder.architecture = arch;
    mc.encoder.blocks = 1;
    mc.encoder.channels = 4;
    mc.encoder.kernel_size = 3;
    mc.encoder.heads = 2;
    mc.encoder.feature_dim = 3;
    mc.decoder.vocab_size = 3;
    mc.decoder.embed_dim = 3;
    mc.decoder.hidden = 4;
    mc.decoder.joint_dim = 4;
    const TransducerModel model(mc, 5);
    const Tensor x = random_tensor({5, 3}, gen, -1, 1, false);
    const std::vector<int> target{2, 3};
    for (Mode m : {Mode::Streaming, Mode::FullContext}) {
      auto build = [&] { return rnnt_loss(model.lattice(x, target, m), target); };
      const GradientMap grads = backward(build());
      for (const auto& p : model.parameters()) {
        const auto numeric = testutil::numeric_gradient([&] { return build().item(); }, p.tensor);
        composed = std::max(composed, relative_error(values(grads.of(p.tensor)), numeric));
      }
    }
  }
  o.require(composed < 1e-4, "composed relative error " + std::to_string(composed));
  const double secs = seconds_since(t0);
  o.require(secs < 120.0, "took " + std::to_string(secs) + " s");

  double layer_worst = 0.0;
  for (const auto& kv : worst) layer_worst = std::max(layer_worst, kv.second);
  o.detail << worst.size() << " layer types, worst " << layer_worst << (layers_ok ? "" : " (over 1e-5)")
           << "; composed " << composed << "; " << secs << " s";
}

void distillation(Outcome& o) {
  std::mt19937_64 gen(105);
  double identical = 0.0;
  for (int i = 0; i < 50; ++i) {
    const std::size_t T = 1 + gen() % 5, U = gen() % 4;
    std::vector<int> y(U);
    for (int& tok : y) tok = 1 + static_cast<int>(gen() % 3);
    const Tensor lat = random_lattice(T, U, 4, gen);
    for (auto dir : {KlDirection::TeacherStudent, KlDirection::StudentTeacher})
      identical = std::max(identical, std::abs(inplace_distill_loss(lat, lat, y, 0, dir).item()));
  }
  o.require(identical <= 1e-12, "identical lattices give " + std::to_string(identical));

  const std::vector<double> p{0.5, 0.25, 0.25}, q{0.25, 0.5, 0.25};
  const double hand = collapsed_kl(p, q);
  o.require(std::abs(hand - 0.173287) <= 1e-6, "hand case " + std::to_string(hand));

  // Stop-gradient: a teacher leaf receives nothing, and on a shared model the
  // parameters reached only through the teacher get exactly zero.
  const Tensor t_logits = random_tensor({6, 4}, gen, -2, 2, true);
  const Tensor s_logits = random_tensor({6, 4}, gen, -2, 2, true);
  const std::vector<int> y1{2};
  const GradientMap g = backward(inplace_distill_loss(reshape(log_softmax(t_logits), {3, 2, 4}),
                                                      reshape(log_softmax(s_logits), {3, 2, 4}), y1));
  bool teacher_zero = !g.contains(t_logits);
  for (double v : values(g.of(t_logits))) teacher_zero = teacher_zero && v == 0.0;
  o.require(teacher_zero, "teacher logits received gradient");

  ModelConfig mc;
  mc.encoder.blocks = 1;
  mc.encoder.channels = 4;
  mc.encoder.kernel_size = 3;
  mc.encoder.feature_dim = 3;
  mc.decoder.vocab_size = 3;
  mc.decoder.embed_dim = 3;
  mc.decoder.hidden = 4;
  mc.decoder.joint_dim = 4;
  const DualModeModel model(mc, WeightSharing::Shared, 6);
  const auto& m = model.stack(Mode::Streaming);
  const Tensor x = random_tensor({6, 3}, gen, -1, 1, false);
  const std::vector<int> y{1, 3};
  const Tensor frozen = [&] {
    NoGradGuard guard;
    const Tensor t = m.lattice(x, y, Mode::FullContext);
    return Tensor::from(t.shape(), values(t));
  }();
  const GradientMap with_stop = backward(
      inplace_distill_loss(stop_gradient(m.lattice(x, y, Mode::FullContext)), m.lattice(x, y, Mode::Streaming), y));
  const GradientMap with_const = backward(inplace_distill_loss(frozen, m.lattice(x, y, Mode::Streaming), y));
  std::size_t teacher_only = 0;
  for (const auto& p : model.parameters()) {
    o.require(values(with_stop.of(p.tensor)) == values(with_const.of(p.tensor)), "teacher path leaked into " + p.name);
    if (p.name.find(".fullcontext") == std::string::npos) continue;
    ++teacher_only;
    for (double v : values(with_stop.of(p.tensor))) o.require(v == 0.0, "nonzero gradient on " + p.name);
  }
  o.detail << "identical max " << identical << "; hand KL " << hand << "; teacher gradient exactly 0 ("
           << teacher_only << " teacher-only tensors)";
}

// Textbook Levenshtein distance, written out independently of the library.
std::size_t edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      d[i][j] = std::min(sub, std::min(d[i - 1][j], d[i][j - 1]) + 1);
    }
  return d[a.size()][b.size()];
}

void metrics(Outcome& o) {
  std::mt19937_64 gen(106);
  int mismatches = 0;
  for (int i = 0; i < 500; ++i) {
    std::vector<int> ref(1 + gen() % 10), hyp(gen() % 12);
    for (int& t : ref) t = 1 + static_cast<int>(gen() % 4);
    for (int& t : hyp) t = 1 + static_cast<int>(gen() % 4);
    const std::size_t dist = edit_distance(ref, hyp);
    const std::vector<std::vector<int>> refs{ref}, hyps{hyp};
    const WerReport r = wer(hyps, refs);
    const double expected = 100.0 * static_cast<double>(dist) / static_cast<double>(ref.size());
    if (align(ref, hyp).total() != dist || r.wer != expected) ++mismatches;
  }
  o.require(mismatches == 0, std::to_string(mismatches) + " WER mismatches");

  const std::vector<double> v{50, 10, 40, 30, 20};
  o.require(percentile_nearest_rank(v, 0.5) == 30.0, "p50 of five");
  o.require(percentile_nearest_rank(v, 0.9) == 50.0, "p90 of five");
  o.require(percentile_nearest_rank(v, 0.2) == 10.0, "p20 of five");
  o.require(percentile_nearest_rank({1, 2, 3, 4}, 0.5) == 2.0, "p50 of four");
  o.require(percentile_nearest_rank({7}, 0.9) == 7.0, "single value");
  o.require(percentile_nearest_rank({-30, -10, -20}, 0.5) == -20.0, "negative values");

  // Last token at encoder frame 4, stride 2: source frame 8; speech ended at 10.
  EmissionRecord rec;
  rec.id = "a";
  rec.tokens = {1, 2};
  rec.frames = {2, 4};
  rec.stride = 2;
  Utterance u;
  u.id = "a";
  u.end_of_speech_frame = 10;
  const double lat = emission_latency_ms(rec, u);
  o.require(lat == -20.0, "hand latency " + std::to_string(lat));
  o.detail << "500 WER pairs, " << mismatches << " mismatches; percentile cases; hand latency " << lat << " ms";
}

void parameter_accounting(Outcome& o) {
  std::size_t checked = 0;
  for (auto arch : {Architecture::ContextNetLite, Architecture::ConformerLite})
    for (std::size_t k : {3u, 5u, 7u}) {
      ModelConfig dual_cfg;
      dual_cfg.encoder.architecture = arch;
      dual_cfg.encoder.kernel_size = k;
      dual_cfg.encoder.heads = 2;
      ModelConfig stream_cfg = dual_cfg;
      stream_cfg.encoder.variant = EncoderVariant::StreamingOnly;
      const auto dual = DualModeModel(dual_cfg, WeightSharing::Shared, 1).parameters();
      const auto stream = DualModeModel(stream_cfg, WeightSharing::Shared, 1).parameters();

      std::map<std::string, Shape> stream_shapes;
      for (const auto& p : stream) stream_shapes[p.name] = p.tensor.shape();
      std::size_t norm_duplicates = 0, extra_taps = 0, kernels = 0;
      for (const auto& p : dual) {
        if (p.name.find(".fullcontext") != std::string::npos) {
          norm_duplicates += p.tensor.size();
          continue;
        }
        const auto pos = p.name.find(".streaming");
        const std::string key = pos == std::string::npos ? p.name : p.name.substr(0, pos);
        const auto it = stream_shapes.find(key);
        if (it == stream_shapes.end()) {
          o.require(false, "no streaming-only counterpart for " + p.name);
          continue;
        }
        if (it->second != p.tensor.shape()) {
          const bool temporal = key.find(".conv.kernel") != std::string::npos && p.tensor.dim(0) == k &&
                                it->second[0] == (k + 1) / 2;
          o.require(temporal, "unexpected shape difference in " + key);
          extra_taps += p.tensor.size() - numel(it->second);
          kernels += p.tensor.size() / k;  // one k-tap kernel per (in, out) channel pair
        }
        stream_shapes.erase(it);
      }
      o.require(stream_shapes.empty(), "streaming-only model has tensors the dual-mode one lacks");
      o.require(extra_taps == kernels * (k - 1) / 2, "extra taps differ from (k-1)/2 per kernel");
      o.require(count_parameters(dual) == count_parameters(stream) + norm_duplicates + extra_taps, "total count");
      ++checked;
    }

  ModelConfig def;
  const auto params = DualModeModel(def, WeightSharing::Shared, 1).parameters();
  std::size_t unshared = 0;
  for (const auto& p : params)
    if (p.name.find(".fullcontext") != std::string::npos) unshared += p.tensor.size();
  const double overhead = static_cast<double>(unshared) / static_cast<double>(count_parameters(params));
  o.detail << checked << " model pairs exact; default model full-context-only norm share " << overhead * 100.0
           << "%";
}

// ---------------------------------------------------------------------------

struct AblationPlan {
  std::vector<std::uint64_t> seeds;
  ExperimentConfig base;
};

AblationPlan load_plan(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open " + path.string());
  const json j = json::parse(is);
  AblationPlan plan;
  plan.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  plan.base = experiment_config_from_json(j.at("experiment"));
  return plan;
}

void ablation(Outcome& o) {
  const auto t0 = Clock::now();
  const AblationPlan plan = load_plan(DUALMODE_ABLATION_CONFIG);
  o.require(plan.seeds.size() == 3, "expected 3 pinned seeds");
  o.require(plan.base.train.total_steps <= 20000, "budget above 20k steps");
  int votes_a = 0, votes_b = 0, votes_c = 0;
  for (std::uint64_t seed : plan.seeds) {
    ExperimentConfig c = plan.base;
    override_seed(c, seed);
    const auto train = training_utterances(c);
    const auto eval = evaluation_utterances(c);
    const auto rows = run_ablation(c, train, eval);
    const AblationRow& distill = rows.at(0);  // shared+joint+distill
    const AblationRow& joint = rows.at(1);    // shared+joint
    const AblationRow& sampled = rows.at(2);  // shared+sampled

    ExperimentConfig sc = c;
    sc.model.encoder.variant = EncoderVariant::StreamingOnly;
    sc.train.w_full = 0.0;
    sc.train.distill = false;
    const TrainingRun standalone = run_training(sc, train);
    const double standalone_wer =
        evaluate_model(*standalone.model, eval, Mode::Streaming, 0, c.max_symbols_per_frame).wer.wer;

    const bool a = distill.latency_p50 && joint.latency_p50 && *distill.latency_p50 <= *joint.latency_p50;
    const bool b = joint.wer <= sampled.wer;
    const bool cc = distill.wer <= standalone_wer + 0.5;
    votes_a += a;
    votes_b += b;
    votes_c += cc;
    std::cout << "  seed " << seed << ":";
    for (const auto& r : rows)
      std::cout << " " << r.name << " wer=" << r.wer << " p50=" << (r.latency_p50 ? *r.latency_p50 : NAN)
                << " p90=" << (r.latency_p90 ? *r.latency_p90 : NAN) << ";";
    std::cout << " streaming_only wer=" << standalone_wer << " -> a=" << a << " b=" << b << " c=" << cc << std::endl;
  }
  const int majority = static_cast<int>(plan.seeds.size()) / 2 + 1;
  o.require(votes_a >= majority, "(a) distill latency");
  o.require(votes_b >= majority, "(b) joint vs sampled WER");
  o.require(votes_c >= majority, "(c) dual-mode vs streaming-only WER");
  const double secs = seconds_since(t0);
  o.require(secs <= 1800.0, "took " + std::to_string(secs) + " s");
  o.detail << "votes a=" << votes_a << " b=" << votes_b << " c=" << votes_c << " of " << plan.seeds.size() << ", "
           << plan.base.train.total_steps << " steps, " << secs << " s";
}

void determinism(Outcome& o) {
  const fs::path dir = fs::temp_directory_path() / "dualmode_acceptance_persist";
  fs::remove_all(dir);
  ExperimentConfig c;
  c.model.encoder.blocks = 1;
  c.model.encoder.channels = 6;
  c.model.encoder.norm = NormKind::Batch;
  c.model.decoder.hidden = 8;
  c.model.decoder.embed_dim = 4;
  c.model.decoder.joint_dim = 8;
  c.data.train_count = 24;
  c.train.total_steps = 10;
  c.train.batch_size = 4;
  override_seed(c, 9);
  const auto train = training_utterances(c);
  run_training(c, train, dir / "a");
  run_training(c, train, dir / "b");
  const std::string first = read_bytes(dir / "a" / "model.ckpt");
  o.require(!first.empty() && first == read_bytes(dir / "b" / "model.ckpt"), "repeated training differs");

  const LoadedModel m = load_model(dir / "a" / "model.ckpt");
  save_model(dir / "again.ckpt", *m.model, m.config, m.step);
  o.require(read_bytes(dir / "again.ckpt") == first, "checkpoint load/save not byte-exact");

  const auto utts = synthesize(c.synth, 8);
  const fs::path manifest = write_dataset(dir / "data", utts);
  const auto loaded = load_manifest(manifest, c.synth.vocab_size);
  bool features_equal = loaded.size() == utts.size();
  for (std::size_t i = 0; features_equal && i < utts.size(); ++i)
    features_equal = loaded[i].features.size() == utts[i].features.size() &&
                     std::memcmp(loaded[i].features.data(), utts[i].features.data(),
                                 utts[i].features.size() * sizeof(float)) == 0 &&
                     loaded[i].transcript == utts[i].transcript;
  o.require(features_equal, "feature round trip differs");
  const fs::path rewritten = write_dataset(dir / "data2", loaded);
  o.require(read_bytes(manifest) == read_bytes(rewritten), "manifest rewrite differs");
  bool files_equal = true;
  for (const auto& u : utts)
    files_equal = files_equal && read_bytes(dir / "data" / "feats" / (u.id + ".dmf")) ==
                                     read_bytes(dir / "data2" / "feats" / (u.id + ".dmf"));
  o.require(files_equal, "feature file rewrite differs");
  fs::remove_all(dir);
  o.detail << "checkpoint " << first.size() << " bytes identical across runs and after reload; 8 feature files";
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, void (*)(Outcome&)>> criteria{
      {"causality", causality},
      {"dual-conv equivalence", dual_conv_equivalence},
      {"rnn-t loss oracle", rnnt_oracle},
      {"gradient suite", gradient_suite},
      {"distillation", distillation},
      {"metric oracles", metrics},
      {"parameter accounting", parameter_accounting},
      {"ablation trend", ablation},
      {"determinism and persistence", determinism}};
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i + 1 << " (" << criteria[i].first
              << "): " << o.detail.str() << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
