/**
 * @file corpus.hpp
 * @brief Synthetic singing corpus and newline-delimited JSON clip manifests.
 *
 * Each clip is an in-key random-walk melody with one toy syllable per note. The vocal is a
 * harmonic rendering of the melody at the token rate; the accompaniment is a bass line an
 * octave below plus a sustained tonic triad at the mel rate. Three re-segmentations of the
 * melody stand in for transcriptions at different note-boundary thresholds.
 */
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "songgen/audio.hpp"
#include "songgen/config.hpp"
#include "songgen/eval_metrics.hpp"
#include "songgen/key_prompt.hpp"
#include "songgen/melody.hpp"

namespace songgen {

inline constexpr std::array<double, 3> kBoundaryThresholds = {0.8, 0.85, 0.9};
inline constexpr double kMinClipSeconds = 1.0;
inline constexpr double kMaxClipSeconds = 30.0;

/// One manifest line. Paths are relative to the manifest's directory.
struct ClipManifest {
  std::string id;
  std::string lyrics;
  std::vector<int> pinyin;
  std::string midi;
  std::vector<std::string> midi_variants;
  std::string vocal;   // log-mel at the token rate (N x 80)
  std::string accomp;  // log-mel at the mel rate (ceil(1.5 N) x 80)
  std::string f0;      // {"f0_hz": [...], "voiced": [...]} at the token rate
  int singer = 0;
  double tempo_bpm = 120.0;
  double tempo_confidence = 1.0;
  std::vector<std::string> emotion;
  std::string accomp_caption;
  int key_tonic = 0;
  Mode key_mode = Mode::major;
  std::string split = "train";
  int frames = 0;

  double seconds() const { return frames / kTokenRateHz; }
  nlohmann::json to_json() const;
  static ClipManifest from_json(const nlohmann::json& j);
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ClipManifest> clips;

  std::filesystem::path resolve(const std::string& rel) const { return root / rel; }
  const ClipManifest& find(const std::string& id) const;
  std::vector<const ClipManifest*> split(const std::string& tag) const;
};

void write_manifest(const std::filesystem::path& path, const std::vector<ClipManifest>& clips);
/// Parses every line. Throws FormatError on malformed lines or duplicate ids.
Manifest read_manifest(const std::filesystem::path& path);
/// Throws FormatError when a referenced file is missing or does not parse, ClipTooLong or
/// InvalidInput when the duration leaves [1 s, 30 s] or lengths disagree.
void validate_clip(const Manifest& m, const ClipManifest& c);

void save_f0(const std::filesystem::path& path, const F0Track& f0);
F0Track load_f0(const std::filesystem::path& path);

/// Everything the generator produces for one clip, before it is written out.
struct SynthClip {
  ClipManifest meta;  // paths left empty
  MidiSequence midi;
  std::array<MidiSequence, kBoundaryThresholds.size()> variants;
  F0Track f0;
  MatrixRM vocal_mel;   // N x 80
  MatrixRM accomp_mel;  // ceil(1.5 N) x 80
};

/// Deterministic in (cfg.seed, index).
SynthClip synth_clip(const CorpusConfig& cfg, int index);

/// Scale degree offsets from the tonic.
const std::array<int, 7>& scale_steps(Mode mode);

/// Writes clips/<id>.* files and manifest.jsonl under `out_dir`; returns the manifest rows.
std::vector<ClipManifest> make_synth_corpus(const CorpusConfig& cfg, const std::filesystem::path& out_dir);

/// "warm pop with piano" style caption words drawn for a clip.
std::string accomp_caption(int instrument, int style, int quality);

}  // namespace songgen
