/**
 * @file pipeline.hpp
 * @brief Run directories, stage training, the lyrics-to-song chain, evaluation and the
 *        vocal-conditioning ablation.
 *
 * A run directory holds config.json, ckpt/, logs/ and tokens/. Each stage trains on its own
 * and checks its prerequisites first. Training is resumable: the batch drawn at step k depends
 * only on (seed, stage, k), and checkpoints carry the optimiser state.
 */
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "songgen/accomp_diffusion.hpp"
#include "songgen/audio.hpp"
#include "songgen/config.hpp"
#include "songgen/corpus.hpp"
#include "songgen/eval_metrics.hpp"
#include "songgen/vocal_stage.hpp"

namespace songgen {

enum class Stage { rvq, vae, midi, vocal, ldm };
std::string to_string(Stage s);
/// Throws ConfigError on unknown names.
Stage stage_from_string(const std::string& s);

struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path codec() const { return root / "ckpt" / "codec.rvq"; }
  std::filesystem::path codec_info() const { return root / "ckpt" / "codec.json"; }
  std::filesystem::path vae() const { return root / "ckpt" / "vae.ckpt"; }
  std::filesystem::path midi_lm() const { return root / "ckpt" / "midi_lm.ckpt"; }
  std::filesystem::path vocal_lm(VocalMode m = VocalMode::expanded) const;
  std::filesystem::path ldm() const { return root / "ckpt" / "ldm.ckpt"; }
  std::filesystem::path log(Stage s) const { return root / "logs" / (to_string(s) + ".jsonl"); }
  std::filesystem::path tokens_dir() const { return root / "tokens"; }
  std::filesystem::path vocal_tokens(const std::string& clip_id) const { return tokens_dir() / (clip_id + ".tok"); }
};

/// Exclusive ownership of a run directory through a `.lock` file. Throws ConfigError when the
/// directory is already locked.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& root);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Writes the config into the run directory, or checks that an existing one is identical.
void init_run(const RunPaths& paths, const PipelineConfig& cfg);

struct Codec {
  Codebooks books;
  FeatureProjection projection;
};
/// Throws DependencyError when the codec has not been fitted.
Codec load_codec(const RunPaths& paths);

struct TrainOptions {
  int stop_after = 0;   // > 0 stops (and checkpoints) once this many steps are done
  bool resume = false;  // continue from an existing checkpoint
  std::optional<VocalMode> vocal_mode;  // vocal stage only; defaults to the config mode
  std::function<void(const std::string&)> log;
};

struct TrainReport {
  Stage stage = Stage::rvq;
  long start_step = 0;
  long end_step = 0;
  std::vector<double> losses;  // this invocation only
  double initial_loss = 0.0;   // mean over the first window of the full log
  double final_loss = 0.0;     // mean over the last window of the full log
  std::filesystem::path checkpoint;

  nlohmann::json to_json() const;
};

/// Trains one stage on the manifest's "train" split. Throws DependencyError when a
/// prerequisite is missing: vocal needs rvq, ldm needs vae and rvq.
TrainReport train_stage(Stage stage, const PipelineConfig& cfg, const Manifest& manifest, const RunPaths& paths,
                        const TrainOptions& opts = {});

// --- generation -------------------------------------------------------------------

/// Longest melody the trained stages can carry through to the accompaniment (0 = unknown).
int generation_budget_frames(const RunPaths& paths);

MidiSequence run_midi_stage(const PipelineConfig& cfg, const RunPaths& paths, const std::string& lyrics,
                            const std::optional<std::string>& melody_prompt, std::uint64_t seed,
                            nlohmann::json* log = nullptr);

/// A clip id with tokens in the run, or a path to a token file.
VocalSequence load_reference(const RunPaths& paths, const std::string& ref);

VocalSequence run_vocal_stage(const PipelineConfig& cfg, const RunPaths& paths, const std::string& lyrics,
                              const MidiSequence& midi, const VocalSequence& reference, std::uint64_t seed,
                              nlohmann::json* log = nullptr, std::optional<VocalMode> mode = std::nullopt);

/// Accompaniment mel with the same frame count as the rendered vocal, ceil(1.5 N).
MatrixRM run_accomp_stage(const PipelineConfig& cfg, const RunPaths& paths, const VocalSequence& vocal,
                          const std::optional<std::string>& melody_prompt,
                          const std::optional<std::string>& accomp_prompt, std::uint64_t seed,
                          nlohmann::json* log = nullptr);

MatrixRM render_vocal_mel(const RunPaths& paths, const VocalSequence& vocal);

/// Reads .json note lists, .mid/.midi files or "pitch duration" records.
MidiSequence load_midi_file(const std::filesystem::path& path);

struct SingRequest {
  std::string lyrics;
  std::string reference;
  std::optional<std::string> melody_prompt;
  std::optional<std::string> accomp_prompt;
  std::optional<std::filesystem::path> midi_override;
  std::uint64_t seed = 0;
};

struct SingOutput {
  MidiSequence midi;
  VocalSequence vocal;
  MatrixRM vocal_mel;
  MatrixRM accomp_mel;
  bool midi_generated = false;
  std::filesystem::path midi_path, vocal_tokens_path, vocal_mel_path, accomp_mel_path;
  std::filesystem::path vocal_wav_path, accomp_wav_path, mix_path;
};

/// Lyrics (+ prompts) and a reference vocal to midi.json, vocal.tok, vocal.mel, accomp.mel,
/// vocal.wav, accomp.wav and mix.wav in `out_dir`, plus one stageN.json log per stage run.
/// A MIDI override skips stage 0. Errors are rethrown with the failing stage in the message.
SingOutput sing(const PipelineConfig& cfg, const RunPaths& paths, const SingRequest& req,
                const std::filesystem::path& out_dir);

/// Griffin-Lim on both stems, then the gain-matched mix. Returns {vocal, accomp, mix}.
std::array<Wav, 3> render_audio(const PipelineConfig& cfg, const MatrixRM& vocal_mel, const MatrixRM& accomp_mel,
                                std::uint64_t seed);

// --- evaluation -------------------------------------------------------------------

struct EvaluateOptions {
  std::string split = "test";
  bool gt_vs_gt = false;  // score the ground truth against itself
  bool rounded = false;
  bool with_ffe = true;   // needs the vocal model and the codec
  int max_clips = 0;      // 0 = every clip of the split
  std::uint64_t seed = 0;
};

/// Predicts a melody for every clip of the split (lyrics + a prompt built from the clip's
/// attributes) and a vocal from the ground-truth melody, then scores both.
MetricReport evaluate_run(const PipelineConfig& cfg, const RunPaths& paths, const Manifest& manifest,
                          const EvaluateOptions& opts = {});

// --- ablation ---------------------------------------------------------------------

struct AblationOptions {
  std::vector<VocalMode> modes = {VocalMode::expanded, VocalMode::unexpand, VocalMode::e2e_with_midi,
                                  VocalMode::e2e_without_midi};
  double md_margin = 0.25;  // semitones
  int max_clips = 0;
  std::uint64_t seed = 0;
  std::function<void(const std::string&)> log;
};

struct AblationRow {
  VocalMode mode = VocalMode::expanded;
  double ffe = 0.0;
  double md = 0.0;
  int clips = 0;
  double final_loss = 0.0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  double md_margin = 0.25;

  const AblationRow* find(VocalMode m) const;
  /// MD(expanded) <= MD(unexpand) + margin; nullopt when either row is missing.
  std::optional<bool> expanded_non_inferior() const;
  std::string table() const;
  nlohmann::json to_json() const;
};

std::string ablation_label(VocalMode m);

/// Trains (or resumes) one vocal model per mode and scores F0 tokens generated from the
/// ground-truth melody against that melody (MD) and the ground-truth F0 (FFE).
AblationReport run_ablation(const PipelineConfig& cfg, const RunPaths& paths, const Manifest& manifest,
                            const AblationOptions& opts = {});

// --- CLI support ------------------------------------------------------------------

/// 2 for configuration errors, 3 for missing prerequisites, 4 for generation failures, 1 otherwise.
int exit_code_for(const std::exception& e);

}  // namespace songgen
