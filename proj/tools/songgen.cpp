// Command-line front end: corpus preparation, per-stage training, generation, evaluation.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "songgen/corpus.hpp"
#include "songgen/error.hpp"
#include "songgen/midi_io.hpp"
#include "songgen/pipeline.hpp"

using namespace songgen;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string run;
  std::string config;
  std::string manifest;
};

PipelineConfig resolve_config(const Common& c) {
  if (!c.config.empty()) return PipelineConfig::load(c.config);
  if (!c.run.empty() && fs::exists(RunPaths{c.run}.config())) return PipelineConfig::load(RunPaths{c.run}.config());
  return PipelineConfig::from_preset("smoke");
}

void log_line(const std::string& s) { fmt::print(stderr, "{}\n", s); }

void add_run(CLI::App* sub, Common& c, bool manifest) {
  sub->add_option("--run", c.run, "Run directory")->required();
  sub->add_option("--config", c.config, "Config JSON (defaults to the run's config.json, then the smoke preset)");
  if (manifest) sub->add_option("--manifest", c.manifest, "Clip manifest (manifest.jsonl)")->required();
}

int train_command(Stage stage, const Common& c, const TrainOptions& base) {
  const auto cfg = resolve_config(c);
  const RunPaths paths{c.run};
  RunLock lock(paths.root);
  init_run(paths, cfg);
  const auto manifest = read_manifest(c.manifest);
  TrainOptions o = base;
  o.log = log_line;
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = train_stage(stage, cfg, manifest, paths, o);
  auto j = r.to_json();
  j["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  fmt::print("{}\n", j.dump());
  return 0;
}

MatrixRM mel_or_wav(const std::string& path) {
  if (fs::path(path).extension() == ".wav") return log_mel_from_audio(read_wav(path).samples);
  return load_mel(path);
}

std::optional<std::string> opt_str(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lyrics-to-song toolkit: synthetic corpus, three-stage training and generation"};
  app.require_subcommand(1);

  Common c;
  std::uint64_t seed = 0;
  std::string out, lyrics, prompt, accomp_prompt, midi_path, ref, vocal_path, accomp_path, json_out;
  int clips = 0, stop_after = 0, max_clips = 0;
  bool resume = false, gt_vs_gt = false, rounded = false, no_ffe = false;
  std::string mode;
  double margin = 0.25;
  double gain_db = -3.0;

  auto* prep = app.add_subcommand("prepare-synth", "Write a synthetic corpus and its manifest");
  prep->add_option("--out", out, "Output directory")->required();
  prep->add_option("--config", c.config, "Config JSON (corpus section)");
  prep->add_option("--clips", clips, "Override the clip count");

  struct TrainCmd {
    const char* name;
    Stage stage;
    const char* help;
  };
  const TrainCmd train_cmds[] = {{"fit-rvq", Stage::rvq, "Fit the residual codec and tokenise every vocal"},
                                 {"train-vae", Stage::vae, "Train the accompaniment mel VAE"},
                                 {"train-midi-lm", Stage::midi, "Train the lyrics-to-melody model"},
                                 {"train-vocal-lm", Stage::vocal, "Train the melody-to-vocal-token model"},
                                 {"train-ldm", Stage::ldm, "Train the accompaniment diffusion model"}};
  std::vector<std::pair<CLI::App*, Stage>> trainers;
  for (const auto& t : train_cmds) {
    auto* sub = app.add_subcommand(t.name, t.help);
    add_run(sub, c, true);
    if (t.stage != Stage::rvq) {
      sub->add_flag("--resume", resume, "Continue from the existing checkpoint");
      sub->add_option("--stop-after", stop_after, "Stop and checkpoint after this many steps");
    }
    if (t.stage == Stage::vocal)
      sub->add_option("--mode", mode, "expanded, unexpand, e2e_with_midi or e2e_without_midi");
    trainers.emplace_back(sub, t.stage);
  }

  auto* gmidi = app.add_subcommand("generate-midi", "Stage 0: lyrics (+ prompt) to a melody");
  add_run(gmidi, c, false);
  gmidi->add_option("--lyrics", lyrics)->required();
  gmidi->add_option("--prompt", prompt, "Melody prompt text");
  gmidi->add_option("--out", out, "Output .json, .mid or records file")->required();
  gmidi->add_option("--seed", seed);

  auto* gvocal = app.add_subcommand("generate-vocal", "Stage 1: lyrics + melody + reference to vocal tokens");
  add_run(gvocal, c, false);
  gvocal->add_option("--lyrics", lyrics)->required();
  gvocal->add_option("--midi", midi_path)->required();
  gvocal->add_option("--ref", ref, "Reference clip id or token file")->required();
  gvocal->add_option("--out", out, "Output token file")->required();
  gvocal->add_option("--mel", vocal_path, "Also write the rendered vocal mel here");
  gvocal->add_option("--seed", seed);

  auto* gacc = app.add_subcommand("generate-accomp", "Stage 2: vocal tokens (+ prompts) to an accompaniment mel");
  add_run(gacc, c, false);
  gacc->add_option("--vocal", vocal_path, "Vocal token file")->required();
  gacc->add_option("--melody-prompt", prompt);
  gacc->add_option("--accomp-prompt", accomp_prompt);
  gacc->add_option("--out", out, "Output mel file")->required();
  gacc->add_option("--seed", seed);

  auto* sing_cmd = app.add_subcommand("sing", "Lyrics and a reference vocal to a mixed song");
  add_run(sing_cmd, c, false);
  sing_cmd->add_option("--lyrics", lyrics)->required();
  sing_cmd->add_option("--ref", ref, "Reference clip id or token file")->required();
  sing_cmd->add_option("--melody-prompt", prompt);
  sing_cmd->add_option("--accomp-prompt", accomp_prompt);
  sing_cmd->add_option("--midi", midi_path, "Use this melody and skip stage 0");
  sing_cmd->add_option("--out", out, "Output directory")->required();
  sing_cmd->add_option("--seed", seed);

  auto* remix_cmd = app.add_subcommand("remix", "Mix a vocal and an accompaniment (.wav or .mel)");
  remix_cmd->add_option("--vocal", vocal_path)->required();
  remix_cmd->add_option("--accomp", accomp_path)->required();
  remix_cmd->add_option("--out", out)->required();
  remix_cmd->add_option("--gain-db", gain_db, "Per-stem gain before peak normalisation");
  remix_cmd->add_option("--config", c.config);
  remix_cmd->add_option("--seed", seed);

  auto* eval_cmd = app.add_subcommand("evaluate", "Score generated melodies and F0 on the held-out split");
  add_run(eval_cmd, c, true);
  eval_cmd->add_flag("--gt-vs-gt", gt_vs_gt, "Score the ground truth against itself");
  eval_cmd->add_flag("--rounded", rounded, "Snap durations to 1/16 notes before PD, DD and MD");
  eval_cmd->add_flag("--no-ffe", no_ffe, "Skip vocal generation and FFE");
  eval_cmd->add_option("--max-clips", max_clips);
  eval_cmd->add_option("--json", json_out, "Write the full report here");
  eval_cmd->add_option("--seed", seed);

  auto* abl = app.add_subcommand("ablate", "Train and compare the four vocal conditioning layouts");
  add_run(abl, c, true);
  abl->add_option("--margin", margin, "Non-inferiority margin for melody distance (semitones)");
  abl->add_option("--max-clips", max_clips);
  abl->add_option("--json", json_out);
  abl->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*prep) {
      auto cfg = c.config.empty() ? PipelineConfig::from_preset("smoke") : PipelineConfig::load(c.config);
      if (clips > 0) cfg.corpus.n_clips = clips;
      cfg.validate();
      const auto rows = make_synth_corpus(cfg.corpus, out);
      fmt::print("{}\n", nlohmann::json{{"clips", rows.size()}, {"manifest", (fs::path(out) / "manifest.jsonl").string()}}.dump());
      return 0;
    }
    for (const auto& [sub, stage] : trainers) {
      if (!*sub) continue;
      TrainOptions o;
      o.resume = resume;
      o.stop_after = stop_after;
      if (!mode.empty()) o.vocal_mode = vocal_mode_from_string(mode);
      return train_command(stage, c, o);
    }
    if (*remix_cmd) {
      const auto cfg = c.config.empty() ? PipelineConfig::from_preset("smoke") : PipelineConfig::load(c.config);
      auto to_wav = [&](const std::string& p, std::uint64_t salt) {
        if (fs::path(p).extension() == ".wav") return read_wav(p);
        Wav w;
        w.samples = griffin_lim(mel_or_wav(p), cfg.sampling.griffin_lim_iterations, mix_seed(seed, salt));
        return w;
      };
      write_wav(out, remix(to_wav(vocal_path, 1), to_wav(accomp_path, 2), gain_db));
      return 0;
    }

    const auto cfg = resolve_config(c);
    const RunPaths paths{c.run};
    RunLock lock(paths.root);
    if (*gmidi) {
      nlohmann::json log;
      const auto m = run_midi_stage(cfg, paths, lyrics, opt_str(prompt), seed, &log);
      const auto ext = fs::path(out).extension().string();
      if (ext == ".mid" || ext == ".midi") {
        const auto bytes = midi_to_smf(m);
        std::ofstream(out, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                   static_cast<std::streamsize>(bytes.size()));
      } else if (ext == ".json") {
        save_midi_json(out, m);
      } else {
        std::ofstream(out) << midi_to_records(m);
      }
      fmt::print("{}\n", log.dump());
      return 0;
    }
    if (*gvocal) {
      nlohmann::json log;
      const auto v = run_vocal_stage(cfg, paths, lyrics, load_midi_file(midi_path), load_reference(paths, ref), seed, &log);
      save_vocal_tokens(out, v);
      if (!vocal_path.empty()) save_mel(vocal_path, render_vocal_mel(paths, v));
      fmt::print("{}\n", log.dump());
      return 0;
    }
    if (*gacc) {
      nlohmann::json log;
      const auto mel = run_accomp_stage(cfg, paths, load_vocal_tokens(vocal_path), opt_str(prompt),
                                        opt_str(accomp_prompt), seed, &log);
      save_mel(out, mel);
      fmt::print("{}\n", log.dump());
      return 0;
    }
    if (*sing_cmd) {
      SingRequest req;
      req.lyrics = lyrics;
      req.reference = ref;
      req.melody_prompt = opt_str(prompt);
      req.accomp_prompt = opt_str(accomp_prompt);
      if (!midi_path.empty()) req.midi_override = midi_path;
      req.seed = seed;
      const auto o = sing(cfg, paths, req, out);
      fmt::print("{}\n", nlohmann::json{{"notes", o.midi.size()},
                                        {"frames", o.midi.total_frames()},
                                        {"stage0", o.midi_generated},
                                        {"mix", o.mix_path.string()}}
                             .dump());
      return 0;
    }
    if (*eval_cmd) {
      const auto manifest = read_manifest(c.manifest);
      EvaluateOptions eo;
      eo.gt_vs_gt = gt_vs_gt;
      eo.rounded = rounded;
      eo.with_ffe = !no_ffe;
      eo.max_clips = max_clips;
      eo.seed = seed;
      const auto rep = evaluate_run(cfg, paths, manifest, eo);
      const std::pair<std::string, MetricReport> rows[] = {{gt_vs_gt ? "GT" : "model", rep}};
      fmt::print("{}", MetricReport::table(rows));
      fmt::print("clips {}  KA excluded {}  FFE clips {}\n", rep.samples.size(), rep.ka_excluded, rep.ffe_count);
      if (!json_out.empty()) std::ofstream(json_out) << rep.to_json().dump(2) << "\n";
      return 0;
    }
    if (*abl) {
      const auto manifest = read_manifest(c.manifest);
      init_run(paths, cfg);
      AblationOptions ao;
      ao.md_margin = margin;
      ao.max_clips = max_clips;
      ao.seed = seed;
      ao.log = log_line;
      const auto rep = run_ablation(cfg, paths, manifest, ao);
      fmt::print("{}", rep.table());
      if (const auto ok = rep.expanded_non_inferior())
        fmt::print("expanded MD within {} of unexpand: {}\n", margin, *ok ? "yes" : "no");
      if (!json_out.empty()) std::ofstream(json_out) << rep.to_json().dump(2) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return exit_code_for(e);
  }
  return 0;
}
