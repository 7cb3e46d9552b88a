/**
 * @file midi_stage.hpp
 * @brief Stage 0: lyrics (+ optional melody prompt) to note events with a two-slot token model.
 *
 * Slot 1 carries the pitch, slot 2 the cumulative end frame of the note. Offsets are
 * strictly increasing, so durations are recovered by first differences.
 */
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "songgen/melody.hpp"
#include "songgen/multiscale_lm.hpp"

namespace songgen {

inline constexpr int kMaxFrames = 1500;  // 30 s at 50 Hz
inline constexpr int kMaxLyricsTokens = 80;
inline constexpr int kMaxPromptTokens = 50;         // melody prompt
inline constexpr int kMaxAccompPromptTokens = 80;
inline constexpr int kMaxPinyinTokens = 2 * kMaxLyricsTokens;

inline int midi_pitch_vocab() { return kPitchCount + 3; }
inline int midi_offset_vocab(int max_frames = kMaxFrames) { return max_frames + 3; }

/// Pitch token = pitch - 32; offset token = end frame - 1.
FrameTokens encode_midi_tokens(const MidiSequence& m, int max_frames = kMaxFrames);
MidiSequence decode_midi_tokens(const FrameTokens& t, double frame_rate_hz = kTokenRateHz);

struct AssembledSequence {
  std::vector<ConditionSegment> segments;
  int truncated_tokens = 0;  // condition tokens dropped by the length limits
};

/// [melody_prompt?, text_semantic, BOS, target...]. Lyrics are cut to 80 tokens, the prompt to 50.
AssembledSequence build_stage0_sequence(std::span<const int> lyrics, std::optional<std::span<const int>> prompt,
                                        const FrameTokens* target, bool terminated = true);

/// Fills the vocabularies of a stage-0 model on top of the given sizes.
MultiScaleConfig midi_model_config(MultiScaleConfig sizes, int lyrics_vocab, int prompt_vocab,
                                   int max_frames = kMaxFrames, int max_notes = 256);

/// Masks offsets that would not strictly increase or pass the budget, masks BOS/PAD, and forces
/// EOS once the frame budget is spent.
LogitMask midi_offset_mask(int max_frames);

struct MidiGenerateOptions {
  Sampler sampler;
  int max_notes = 256;
  int retries = 3;
  int max_frames = kMaxFrames;
  int budget_frames = 0;  // > 0 ends the melody earlier than max_frames
};

struct MidiGeneration {
  MidiSequence midi;
  bool truncated = false;
  int attempts = 1;
};

/// Samples a melody. Throws EmptyGeneration if every attempt emits EOS first.
MidiGeneration generate_midi(const MultiScaleLM& model, std::span<const int> lyrics,
                             std::optional<std::span<const int>> prompt, Rng& rng, const MidiGenerateOptions& opts = {});

}  // namespace songgen
