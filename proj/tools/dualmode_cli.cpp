// dualmode: gen-data | train | evaluate | ablate | export-lattice
//
// Exit codes: 0 success, 1 usage error, 2 runtime or numeric failure.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "dualmode/dualmode.hpp"

namespace fs = std::filesystem;
using namespace dualmode;

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

ExperimentConfig config_from(const std::string& path, const std::optional<std::uint64_t>& seed_override) {
  ExperimentConfig c = load_experiment_config(path);
  if (seed_override) override_seed(c, *seed_override);
  return c;
}

void emit_json(const json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
    return;
  }
  write_text_file(out, j.dump(2) + "\n");
}

const Utterance& find_utterance(const std::vector<Utterance>& utts, const std::string& id) {
  for (const auto& u : utts)
    if (u.id == id) return u;
  throw UsageError("utterance id '" + id + "' not found in the data manifest");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-mode transducer experiments on a synthetic streaming task"};
  app.require_subcommand(1);

  std::string config, out, checkpoint, data, mode_name = "streaming", utterance_id;
  std::size_t count = 0, lookahead = 0;
  std::optional<std::uint64_t> seed_override;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset (manifest + feature files)");
  gen->add_option("--config", config, "experiment config (JSON)")->required();
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--count", count, "number of utterances")->required();
  gen->add_option("--seed-override", seed_override, "replace synth.seed");

  auto* train = app.add_subcommand("train", "train a model; writes model.ckpt and metrics.jsonl");
  train->add_option("--config", config, "experiment config (JSON)")->required();
  train->add_option("--out", out, "output directory (defaults to output_dir in the config)");
  train->add_option("--seed-override", seed_override, "replace the experiment seed");

  auto* evaluate_cmd = app.add_subcommand("evaluate", "decode a manifest and report WER and latency");
  evaluate_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  evaluate_cmd->add_option("--data", data, "manifest to decode")->required();
  evaluate_cmd->add_option("--mode", mode_name, "streaming | fullcontext")
      ->check(CLI::IsMember({"streaming", "fullcontext"}));
  evaluate_cmd->add_option("--lookahead-frames", lookahead, "zero frames appended before streaming decode");
  evaluate_cmd->add_option("--out", out, "report path (stdout when omitted)");

  auto* ablate = app.add_subcommand("ablate", "train and compare the four ablation configurations");
  ablate->add_option("--config", config, "experiment config (JSON)")->required();
  ablate->add_option("--out", out, "output directory for ablation.json and ablation.txt")->required();
  ablate->add_option("--seed-override", seed_override, "replace the experiment seed");

  auto* export_cmd = app.add_subcommand("export-lattice", "write the streaming emission lattice of one utterance");
  export_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  export_cmd->add_option("--data", data, "manifest holding the utterance")->required();
  export_cmd->add_option("--utterance-id", utterance_id, "utterance to decode")->required();
  export_cmd->add_option("--out", out, "CSV path, or .svg path for CSV + step plot")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      ExperimentConfig c = load_experiment_config(config);
      if (seed_override) c.synth.seed = *seed_override;
      const fs::path manifest = generate_dataset(c.synth, count, out);
      std::cout << "wrote " << count << " utterances to " << manifest.string() << '\n';
    } else if (train->parsed()) {
      const ExperimentConfig c = config_from(config, seed_override);
      const fs::path dir = out.empty() ? fs::path(c.output_dir) : fs::path(out);
      if (dir.empty()) throw UsageError("no output directory: pass --out or set output_dir");
      const auto utts = training_utterances(c);
      const TrainingRun run = run_training(c, utts, dir);
      const auto& last = run.history.empty() ? StepResult{} : run.history.back();
      std::cout << "trained " << run.history.size() << " steps, final loss_total " << last.loss_total << "; wrote "
                << (dir / "model.ckpt").string() << '\n';
    } else if (evaluate_cmd->parsed()) {
      const LoadedModel m = load_model(checkpoint);
      const auto utts = load_manifest(data, m.config.model.decoder.vocab_size);
      const EvalReport r = evaluate_model(*m.model, utts, parse_mode(mode_name), lookahead,
                                          m.config.max_symbols_per_frame);
      emit_json(to_json(r), out);
    } else if (ablate->parsed()) {
      const ExperimentConfig c = config_from(config, seed_override);
      const auto train_utts = training_utterances(c);
      const auto eval_utts = evaluation_utterances(c);
      const auto rows = run_ablation(c, train_utts, eval_utts, [](const AblationRow& r) {
        std::cerr << "finished " << r.name << '\n';
      });
      fs::create_directories(out);
      write_text_file(fs::path(out) / "ablation.json", to_json(rows).dump(2) + "\n");
      const std::string table = ablation_table(rows);
      write_text_file(fs::path(out) / "ablation.txt", table);
      std::cout << table;
    } else if (export_cmd->parsed()) {
      const LoadedModel m = load_model(checkpoint);
      const auto utts = load_manifest(data, m.config.model.decoder.vocab_size);
      const Utterance& u = find_utterance(utts, utterance_id);
      const EmissionRecord rec = decode_utterance(m.model->stack(Mode::Streaming), u, Mode::Streaming, 0,
                                                  m.config.max_symbols_per_frame);
      for (const auto& p : export_lattice(rec, u, out)) std::cout << "wrote " << p.string() << '\n';
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
