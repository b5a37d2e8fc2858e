#pragma once

// Synthetic streaming-recognition task, the on-disk dataset format, and
// padded batching.
//
// Feature file (little-endian): "DMF1" | u32 T | u32 D | T*D f32, row-major.
// Manifest: JSON lines {"id", "feature_file", "num_frames", "feature_dim",
// "transcript", "end_of_speech_frame"}; feature_file is relative to the
// manifest's directory.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualmode/rng.hpp"
#include "dualmode/tensor.hpp"

namespace dualmode {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are written with native little-endian layout");

inline constexpr char kFeatureMagic[4] = {'D', 'M', 'F', '1'};

// Data-path failure carrying the offending file and utterance, when known.
class DataError : public std::runtime_error {
 public:
  DataError(const std::string& what, std::string path, std::string utterance_id = {})
      : std::runtime_error(format(what, path, utterance_id)),
        path_(std::move(path)),
        utterance_id_(std::move(utterance_id)) {}
  const std::string& path() const { return path_; }
  const std::string& utterance_id() const { return utterance_id_; }

 private:
  static std::string format(const std::string& what, const std::string& path,
                            const std::string& id) {
    std::string s = what;
    if (!id.empty()) s += " (utterance " + id + ")";
    if (!path.empty()) s += " [" + path + "]";
    return s;
  }
  std::string path_;
  std::string utterance_id_;
};

struct SynthTaskConfig {
  std::size_t vocab_size = 6;
  std::size_t segment_frames = 4;  // d, frames per token
  double noise = 0.3;              // sigma of additive Gaussian noise
  std::size_t min_tokens = 2;
  std::size_t max_tokens = 6;
  std::size_t trailing_silence = 8;
  std::size_t feature_dim = 8;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab_size < 2) throw std::invalid_argument("synth.vocab_size must be >= 2");
    if (segment_frames < 2) throw std::invalid_argument("synth.segment_frames must be >= 2");
    if (!(noise >= 0.0)) throw std::invalid_argument("synth.noise must be >= 0");
    if (min_tokens > max_tokens) throw std::invalid_argument("synth.min_tokens exceeds synth.max_tokens");
    if (feature_dim < vocab_size)
      throw std::invalid_argument("synth.feature_dim (" + std::to_string(feature_dim) +
                                  ") cannot hold " + std::to_string(vocab_size) +
                                  " orthogonal token patterns");
  }
};

struct Utterance {
  std::string id;
  std::size_t num_frames = 0;
  std::size_t feature_dim = 0;
  std::vector<float> features;  // num_frames * feature_dim, row-major
  std::vector<int> transcript;
  std::size_t end_of_speech_frame = 0;  // 1-based index of the last content frame

  Tensor feature_tensor() const {
    return Tensor::from({num_frames, feature_dim},
                        std::vector<double>(features.begin(), features.end()));
  }
};

// Token v occupies d frames of the one-hot pattern e_{v-1}, scaled 2 over the
// first half of the segment and 1 over the rest so that repeated tokens stay
// separable. Trailing silence is the zero pattern. Every frame gets
// N(0, sigma^2) noise per channel.
inline Utterance synthesize_utterance(const SynthTaskConfig& cfg, std::size_t index) {
  Rng rng(mix_seed(cfg.seed, index));
  Utterance u;
  std::ostringstream id;
  id << "utt" << std::setw(5) << std::setfill('0') << index;
  u.id = id.str();
  const std::size_t count = cfg.min_tokens + rng.below(cfg.max_tokens - cfg.min_tokens + 1);
  for (std::size_t i = 0; i < count; ++i)
    u.transcript.push_back(1 + static_cast<int>(rng.below(cfg.vocab_size)));
  u.feature_dim = cfg.feature_dim;
  u.num_frames = std::max<std::size_t>(1, count * cfg.segment_frames + cfg.trailing_silence);
  u.end_of_speech_frame = std::max<std::size_t>(1, count * cfg.segment_frames);
  u.features.assign(u.num_frames * u.feature_dim, 0.0f);
  for (std::size_t t = 0; t < u.num_frames; ++t) {
    const std::size_t seg = t / cfg.segment_frames;
    for (std::size_t c = 0; c < cfg.feature_dim; ++c) {
      double v = cfg.noise * rng.normal();
      if (seg < count && c == static_cast<std::size_t>(u.transcript[seg] - 1))
        v += 2 * (t % cfg.segment_frames) < cfg.segment_frames ? 2.0 : 1.0;
      u.features[t * u.feature_dim + c] = static_cast<float>(v);
    }
  }
  return u;
}

inline std::vector<Utterance> synthesize(const SynthTaskConfig& cfg, std::size_t count,
                                         std::size_t first_index = 0) {
  cfg.validate();
  std::vector<Utterance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(synthesize_utterance(cfg, first_index + i));
  return out;
}

// ---------------------------------------------------------------------------
// Feature files.

inline void write_feature_file(const std::filesystem::path& path, std::size_t frames,
                               std::size_t dim, std::span<const float> values) {
  if (values.size() != frames * dim)
    throw DataError("feature values do not match " + std::to_string(frames) + "x" +
                        std::to_string(dim),
                    path.string());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open feature file for writing", path.string());
  const std::uint32_t header[2] = {static_cast<std::uint32_t>(frames), static_cast<std::uint32_t>(dim)};
  os.write(kFeatureMagic, 4);
  os.write(reinterpret_cast<const char*>(header), sizeof(header));
  os.write(reinterpret_cast<const char*>(values.data()),
           static_cast<std::streamsize>(values.size() * sizeof(float)));
  if (!os) throw DataError("failed writing feature file", path.string());
}

struct FeatureFile {
  std::size_t frames = 0;
  std::size_t dim = 0;
  std::vector<float> values;
};

inline FeatureFile read_feature_file(const std::filesystem::path& path, const std::string& id = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing feature file", path.string(), id);
  char magic[4];
  std::uint32_t header[2];
  if (!is.read(magic, 4) || std::memcmp(magic, kFeatureMagic, 4) != 0)
    throw DataError("bad feature file magic", path.string(), id);
  if (!is.read(reinterpret_cast<char*>(header), sizeof(header)))
    throw DataError("truncated feature file header", path.string(), id);
  FeatureFile f{header[0], header[1], {}};
  f.values.resize(f.frames * f.dim);
  if (!is.read(reinterpret_cast<char*>(f.values.data()),
               static_cast<std::streamsize>(f.values.size() * sizeof(float))))
    throw DataError("truncated feature file payload", path.string(), id);
  if (is.peek() != std::ifstream::traits_type::eof())
    throw DataError("trailing bytes after feature payload", path.string(), id);
  return f;
}

// ---------------------------------------------------------------------------
// Manifests.

inline nlohmann::json manifest_entry(const Utterance& u, const std::string& feature_file) {
  return {{"id", u.id},
          {"feature_file", feature_file},
          {"num_frames", u.num_frames},
          {"feature_dim", u.feature_dim},
          {"transcript", u.transcript},
          {"end_of_speech_frame", u.end_of_speech_frame}};
}

// Writes <dir>/manifest.jsonl and <dir>/feats/<id>.dmf. Returns the manifest path.
inline std::filesystem::path write_dataset(const std::filesystem::path& dir,
                                           std::span<const Utterance> utterances) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "feats", ec);
  if (ec) throw DataError("cannot create dataset directory: " + ec.message(), dir.string());
  const fs::path manifest = dir / "manifest.jsonl";
  std::ofstream os(manifest, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open manifest for writing", manifest.string());
  for (const auto& u : utterances) {
    const std::string rel = "feats/" + u.id + ".dmf";
    write_feature_file(dir / rel, u.num_frames, u.feature_dim, u.features);
    os << manifest_entry(u, rel).dump() << '\n';
  }
  if (!os) throw DataError("failed writing manifest", manifest.string());
  return manifest;
}

inline std::filesystem::path generate_dataset(const SynthTaskConfig& cfg, std::size_t count,
                                              const std::filesystem::path& dir) {
  const auto utts = synthesize(cfg, count);
  return write_dataset(dir, utts);
}

// Reads every utterance in manifest order. vocab_size > 0 additionally checks
// transcript tokens against 1..vocab_size.
inline std::vector<Utterance> load_manifest(const std::filesystem::path& manifest,
                                            std::size_t vocab_size = 0) {
  std::ifstream is(manifest);
  if (!is) throw DataError("missing manifest", manifest.string());
  const auto base = manifest.parent_path();
  std::vector<Utterance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("manifest line " + std::to_string(line_no) + " is not JSON: " + e.what(),
                      manifest.string());
    }
    Utterance u;
    std::string feature_file;
    try {
      u.id = j.at("id").get<std::string>();
      feature_file = j.at("feature_file").get<std::string>();
      u.num_frames = j.at("num_frames").get<std::size_t>();
      u.feature_dim = j.at("feature_dim").get<std::size_t>();
      u.transcript = j.at("transcript").get<std::vector<int>>();
      u.end_of_speech_frame = j.at("end_of_speech_frame").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("manifest line " + std::to_string(line_no) + ": " + e.what(),
                      manifest.string(), u.id);
    }
    for (int tok : u.transcript)
      if (tok < 1 || (vocab_size > 0 && static_cast<std::size_t>(tok) > vocab_size))
        throw DataError("token " + std::to_string(tok) + " outside vocabulary", manifest.string(), u.id);
    const auto path = base / feature_file;
    FeatureFile f = read_feature_file(path, u.id);
    if (f.frames != u.num_frames || f.dim != u.feature_dim)
      throw DataError("feature shape " + std::to_string(f.frames) + "x" + std::to_string(f.dim) +
                          " does not match manifest " + std::to_string(u.num_frames) + "x" +
                          std::to_string(u.feature_dim),
                      path.string(), u.id);
    if (u.num_frames == 0 || u.end_of_speech_frame > u.num_frames ||
        (!u.transcript.empty() && u.end_of_speech_frame < 1))
      throw DataError("end_of_speech_frame out of range", manifest.string(), u.id);
    u.features = std::move(f.values);
    out.push_back(std::move(u));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching.

struct PaddedBatch {
  std::vector<std::string> ids;
  Tensor features;                               // [B, T_max, D], zero padded
  std::vector<std::vector<std::uint8_t>> frame_mask;  // [B][T_max]
  std::vector<std::vector<int>> targets;              // [B][U_max], zero padded
  std::vector<std::vector<std::uint8_t>> token_mask;  // [B][U_max]
  std::vector<std::size_t> num_frames;
  std::vector<std::size_t> num_tokens;

  std::size_t size() const { return ids.size(); }
  std::size_t max_frames() const { return features.dim(1); }

  // Valid region of row b as [T_b, D].
  Tensor features_of(std::size_t b) const {
    const std::size_t Tm = features.dim(1), D = features.dim(2);
    const auto v = features.data();
    const auto begin = v.begin() + static_cast<std::ptrdiff_t>(b * Tm * D);
    return Tensor::from({num_frames[b], D},
                        std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(num_frames[b] * D)));
  }
  std::vector<int> targets_of(std::size_t b) const {
    return {targets[b].begin(), targets[b].begin() + static_cast<std::ptrdiff_t>(num_tokens[b])};
  }
};

inline PaddedBatch pad_batch(std::span<const Utterance> utts) {
  if (utts.empty()) throw std::invalid_argument("pad_batch: no utterances");
  PaddedBatch b;
  std::size_t Tm = 0, Um = 0;
  const std::size_t D = utts[0].feature_dim;
  for (const auto& u : utts) {
    if (u.feature_dim != D) throw DataError("mixed feature dims in one batch", "", u.id);
    Tm = std::max(Tm, u.num_frames);
    Um = std::max(Um, u.transcript.size());
  }
  std::vector<double> feats(utts.size() * Tm * D, 0.0);
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const auto& u = utts[i];
    b.ids.push_back(u.id);
    std::copy(u.features.begin(), u.features.end(), feats.begin() + static_cast<std::ptrdiff_t>(i * Tm * D));
    std::vector<std::uint8_t> fm(Tm, 0);
    std::fill_n(fm.begin(), u.num_frames, 1);
    b.frame_mask.push_back(std::move(fm));
    std::vector<int> tg(Um, 0);
    std::copy(u.transcript.begin(), u.transcript.end(), tg.begin());
    b.targets.push_back(std::move(tg));
    std::vector<std::uint8_t> tm(Um, 0);
    std::fill_n(tm.begin(), u.transcript.size(), 1);
    b.token_mask.push_back(std::move(tm));
    b.num_frames.push_back(u.num_frames);
    b.num_tokens.push_back(u.transcript.size());
  }
  b.features = Tensor::from({utts.size(), Tm, D}, std::move(feats));
  return b;
}

inline std::vector<PaddedBatch> make_batches(std::span<const Utterance> utts, std::size_t batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<PaddedBatch> out;
  for (std::size_t i = 0; i < utts.size(); i += batch_size)
    out.push_back(pad_batch(utts.subspan(i, std::min(batch_size, utts.size() - i))));
  return out;
}

}  // namespace dualmode
