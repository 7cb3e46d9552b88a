/**
 * @file vocal_stage.hpp
 * @brief Stage 1: pinyin + melody + reference tokens to per-frame acoustic codes and F0 bins.
 *
 * A vocal frame holds four tokens: the first three RVQ codes and a quantised F0 bin.
 */
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "songgen/midi_stage.hpp"
#include "songgen/rvq.hpp"

namespace songgen {

inline constexpr int kF0Bins = kPitchCount;        // one bin per semitone, MIDI 32..80
inline constexpr int kF0Unvoiced = kF0Bins;        // token of an unvoiced frame
inline constexpr int kF0Vocab = kF0Bins + 1 + 3;   // + unvoiced + specials
inline constexpr int kVocalSlots = kLmCodebooks + 1;
inline constexpr int kReferenceFrames = 100;       // 2 s at 50 Hz
inline constexpr double kMelFrameRateHz = 75.0;    // 24 kHz / hop 320

double midi_to_hz(double midi);
double hz_to_midi(double hz);
/// Centre frequency of F0 bin b (MIDI 32 + b).
double f0_bin_hz(int bin);

struct F0Tokens {
  std::vector<int> tokens;
  int clamped = 0;  // voiced frames outside the bin range, snapped to the edge bins
};

/// Voiced frames go to the nearest semitone bin; unvoiced frames to kF0Unvoiced.
F0Tokens quantize_f0(std::span<const double> f0_hz, std::span<const std::uint8_t> voiced);
/// Bin centres back to Hz (0 on unvoiced frames).
void dequantize_f0(std::span<const int> tokens, std::vector<double>& f0_hz, std::vector<std::uint8_t>& voiced);

std::vector<int> vocal_vocab(int book_size);

struct VocalSequence {
  FrameTokens tokens;            // N x 4
  std::uint64_t codec_hash = 0;  // hash of the codebooks that produced slots 1-3

  int frames() const { return tokens.steps(); }
  std::vector<int> f0_tokens() const;
  AcousticFrameCodes codes() const;
  /// First `n` frames (all if shorter).
  VocalSequence head(int n) const;
  friend bool operator==(const VocalSequence&, const VocalSequence&) = default;
};

/// Pairs truncated codes with F0 tokens. `codes` must hold at least three codes per frame.
VocalSequence make_vocal_sequence(const AcousticFrameCodes& codes, std::span<const int> f0_tokens, const Codebooks& cb);

void save_vocal_tokens(const std::filesystem::path& path, const VocalSequence& v);
VocalSequence load_vocal_tokens(const std::filesystem::path& path);

/// Conditioning layouts: the main expanded-melody model and the three ablations.
enum class VocalMode { expanded, unexpand, e2e_with_midi, e2e_without_midi };
std::string to_string(VocalMode m);
VocalMode vocal_mode_from_string(const std::string& s);

/// expanded:          [pinyin, expanded_midi, reference, BOS, vocal...]
/// unexpand:          [pinyin, midi_notes (pitch, offset), reference, BOS, vocal...]
/// e2e_with_midi:     [pinyin, reference, BOS, midi steps..., separator, vocal..., EOS]
/// e2e_without_midi:  [pinyin, reference, BOS, vocal..., EOS]
/// Throws AlignmentError when the target length differs from the melody length.
AssembledSequence build_stage1_sequence(VocalMode mode, std::span<const int> pinyin, const MidiSequence& midi,
                                        const VocalSequence& ref, const VocalSequence* target,
                                        int book_size, int max_frames = kMaxFrames);

MultiScaleConfig vocal_model_config(MultiScaleConfig sizes, VocalMode mode, int book_size, int pinyin_vocab,
                                    int max_target_frames, int max_notes = 64, int max_frames = kMaxFrames);

struct VocalGenerateOptions {
  Sampler sampler;
  int max_free_frames = 200;  // cap for the mode without melody conditioning
  int max_frames = kMaxFrames;
};

/// Expanded, unexpand and e2e_with_midi decode exactly total_frames(midi) frames;
/// e2e_without_midi decodes until EOS.
VocalSequence generate_vocal(const MultiScaleLM& model, VocalMode mode, std::span<const int> pinyin,
                             const MidiSequence& midi, const VocalSequence& ref, std::uint64_t codec_hash, Rng& rng,
                             const VocalGenerateOptions& opts = {});

/// Decodes slots 1-3, maps features back to log-mel and repeats frames up to the mel rate.
/// Output has ceil(N * 1.5) frames. Throws CodecMismatch if the hashes differ.
MatrixRM render_toy_vocal(const VocalSequence& v, const Codebooks& cb, const FeatureProjection& proj);

/// Nearest-neighbour resampling of rows to a target count.
MatrixRM resample_rows(const MatrixRM& m, int rows);

}  // namespace songgen
