#pragma once

// Token error rate, emission latency, and emission-lattice export.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualmode/data.hpp"
#include "dualmode/transducer.hpp"

namespace dualmode {

struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t total() const { return substitutions + deletions + insertions; }
};

// Minimal unit-cost alignment. Among alignments of equal cost the backtrace
// prefers substitution/match, then deletion, then insertion.
inline EditCounts align(std::span<const int> ref, std::span<const int> hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto D = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) D(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) D(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      D(i, j) = std::min({D(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]), D(i - 1, j) + 1, D(i, j - 1) + 1});
  EditCounts c;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && D(i, j) == D(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1])) {
      c.substitutions += ref[i - 1] != hyp[j - 1];
      --i, --j;
    } else if (i > 0 && D(i, j) == D(i - 1, j) + 1) {
      ++c.deletions, --i;
    } else {
      ++c.insertions, --j;
    }
  }
  return c;
}

struct WerReport {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t reference_tokens = 0;
  double wer = 0.0;  // percent
};

inline WerReport wer(std::span<const std::vector<int>> hyps, std::span<const std::vector<int>> refs) {
  if (hyps.size() != refs.size())
    throw std::invalid_argument("wer: " + std::to_string(hyps.size()) + " hypotheses for " +
                                std::to_string(refs.size()) + " references");
  WerReport r;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const EditCounts c = align(refs[i], hyps[i]);
    r.substitutions += c.substitutions;
    r.deletions += c.deletions;
    r.insertions += c.insertions;
    r.reference_tokens += refs[i].size();
  }
  if (r.reference_tokens == 0) throw std::invalid_argument("wer: references contain no tokens");
  r.wer = 100.0 * static_cast<double>(r.substitutions + r.deletions + r.insertions) /
          static_cast<double>(r.reference_tokens);
  return r;
}

// Nearest-rank percentile: the ceil(q*n)-th smallest value (1-based), q in (0, 1].
inline double percentile_nearest_rank(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty sample");
  if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("percentile rank must lie in (0, 1]");
  std::sort(values.begin(), values.end());
  const double exact = q * static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(exact - 1e-9 * exact));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

struct LatencyReport {
  std::vector<std::string> ids;            // utterances with a non-empty hypothesis
  std::vector<double> per_utterance_ms;    // aligned with ids
  std::optional<double> p50;
  std::optional<double> p90;
  std::size_t count = 0;
  std::size_t skipped = 0;
};

inline double emission_latency_ms(const EmissionRecord& rec, const Utterance& utt) {
  if (rec.tokens.empty()) throw std::invalid_argument("emission latency of an empty hypothesis");
  const double last = static_cast<double>(rec.source_frame(rec.tokens.size() - 1));
  return (last - static_cast<double>(utt.end_of_speech_frame)) * rec.frame_ms;
}

inline LatencyReport latency(std::span<const EmissionRecord> records, std::span<const Utterance> utts) {
  if (records.size() != utts.size())
    throw std::invalid_argument("latency: " + std::to_string(records.size()) + " records for " +
                                std::to_string(utts.size()) + " utterances");
  LatencyReport r;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].id != utts[i].id)
      throw std::invalid_argument("latency: record id '" + records[i].id + "' does not match utterance '" +
                                  utts[i].id + "'");
    if (records[i].tokens.empty()) {
      ++r.skipped;
      continue;
    }
    r.ids.push_back(records[i].id);
    r.per_utterance_ms.push_back(emission_latency_ms(records[i], utts[i]));
  }
  r.count = r.per_utterance_ms.size();
  if (r.count > 0) {
    r.p50 = percentile_nearest_rank(r.per_utterance_ms, 0.5);
    r.p90 = percentile_nearest_rank(r.per_utterance_ms, 0.9);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Decoding a corpus.

struct EvalReport {
  Mode mode = Mode::Streaming;
  WerReport wer;
  std::optional<LatencyReport> latency;
  std::size_t n = 0;
  std::vector<EmissionRecord> records;
};

// Appends `frames` zero frames, the look-ahead baseline's input padding.
inline Tensor pad_frames(const Tensor& features, std::size_t frames) {
  if (frames == 0) return features;
  return concat({features, Tensor::zeros({frames, features.dim(1)})}, 0);
}

inline EmissionRecord decode_utterance(const TransducerModel& model, const Utterance& utt, Mode mode,
                                       std::size_t lookahead_frames = 0, std::size_t max_symbols = 4) {
  EmissionRecord rec = greedy_decode(model, pad_frames(utt.feature_tensor(), lookahead_frames), mode, max_symbols);
  rec.id = utt.id;
  rec.delay_frames = lookahead_frames;
  return rec;
}

inline EvalReport evaluate(const TransducerModel& model, std::span<const Utterance> utts, Mode mode,
                           std::size_t lookahead_frames = 0, std::size_t max_symbols = 4) {
  if (!model.encoder().supports(mode))
    throw std::invalid_argument("model cannot run in " + std::string(to_string(mode)) + " mode");
  if (lookahead_frames > 0 && mode != Mode::Streaming)
    throw std::invalid_argument("look-ahead padding applies to streaming decoding only");
  EvalReport r;
  r.mode = mode;
  r.n = utts.size();
  std::vector<std::vector<int>> hyps, refs;
  for (const auto& u : utts) {
    r.records.push_back(decode_utterance(model, u, mode, lookahead_frames, max_symbols));
    hyps.push_back(r.records.back().tokens);
    refs.push_back(u.transcript);
  }
  r.wer = wer(hyps, refs);
  if (mode == Mode::Streaming) r.latency = latency(r.records, utts);
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json lat = {{"p50", nullptr}, {"p90", nullptr}};
  std::size_t skipped = 0;
  if (r.latency) {
    if (r.latency->p50) lat["p50"] = *r.latency->p50;
    if (r.latency->p90) lat["p90"] = *r.latency->p90;
    skipped = r.latency->skipped;
  }
  return {{"mode", std::string(to_string(r.mode))},
          {"wer", r.wer.wer},
          {"substitutions", r.wer.substitutions},
          {"deletions", r.wer.deletions},
          {"insertions", r.wer.insertions},
          {"reference_tokens", r.wer.reference_tokens},
          {"latency_ms", r.latency ? lat : nlohmann::json(nullptr)},
          {"n", r.n},
          {"skipped", skipped}};
}

// ---------------------------------------------------------------------------
// Emission lattices.

inline std::string lattice_csv(const EmissionRecord& rec) {
  std::ostringstream os;
  os << "u,token_id,source_frame\n";
  for (std::size_t i = 0; i < rec.tokens.size(); ++i)
    os << i + 1 << ',' << rec.tokens[i] << ',' << rec.source_frame(i) << '\n';
  return os.str();
}

// Step plot: source frames on X, tokens emitted so far on Y; the dashed line
// marks the end of speech.
inline std::string lattice_svg(const EmissionRecord& rec, const Utterance& utt) {
  const double cell_x = 8.0, cell_y = 24.0, margin = 40.0;
  const std::size_t frames = std::max<std::size_t>(
      utt.num_frames, rec.tokens.empty() ? 0 : rec.source_frame(rec.tokens.size() - 1));
  const std::size_t rows = std::max<std::size_t>(utt.transcript.size(), rec.tokens.size());
  const double w = 2 * margin + cell_x * static_cast<double>(frames);
  const double h = 2 * margin + cell_y * static_cast<double>(rows);
  auto px = [&](double f) { return margin + cell_x * f; };
  auto py = [&](double k) { return h - margin - cell_y * k; };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<text x=\"" << margin << "\" y=\"20\" font-family=\"monospace\" font-size=\"12\">" << utt.id
     << "</text>\n";
  os << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(frames) << "\" y2=\"" << py(0)
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(0) << "\" y2=\"" << py(rows)
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << px(utt.end_of_speech_frame) << "\" y1=\"" << py(0) << "\" x2=\""
     << px(utt.end_of_speech_frame) << "\" y2=\"" << py(rows)
     << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  os << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"" << px(0) << ',' << py(0);
  for (std::size_t i = 0; i < rec.tokens.size(); ++i) {
    const double f = static_cast<double>(rec.source_frame(i));
    os << ' ' << px(f) << ',' << py(static_cast<double>(i)) << ' ' << px(f) << ','
       << py(static_cast<double>(i + 1));
  }
  os << ' ' << px(frames) << ',' << py(static_cast<double>(rec.tokens.size())) << "\"/>\n";
  for (std::size_t i = 0; i < rec.tokens.size(); ++i)
    os << "<text x=\"" << px(static_cast<double>(rec.source_frame(i))) + 3 << "\" y=\""
       << py(static_cast<double>(i + 1)) + 14 << "\" font-family=\"monospace\" font-size=\"11\">"
       << rec.tokens[i] << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

// Writes the CSV at `out` (or next to it when `out` ends in .svg, in which case
// the step plot is written as well). Returns the paths written.
inline std::vector<std::filesystem::path> export_lattice(const EmissionRecord& rec, const Utterance& utt,
                                                         const std::filesystem::path& out) {
  std::vector<std::filesystem::path> written;
  if (out.extension() == ".svg") {
    auto csv = out;
    csv.replace_extension(".csv");
    write_text_file(csv, lattice_csv(rec));
    write_text_file(out, lattice_svg(rec, utt));
    written = {csv, out};
  } else {
    write_text_file(out, lattice_csv(rec));
    written = {out};
  }
  return written;
}

}  // namespace dualmode
