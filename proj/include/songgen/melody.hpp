/**
 * @file melody.hpp
 * @brief Symbolic melody model: note events, time-axis expansion and grid rounding.
 */
#pragma once

#include <compare>
#include <cstddef>
#include <vector>

namespace songgen {

constexpr int kMinPitch = 32;  // G#1
constexpr int kMaxPitch = 80;  // G#5
constexpr int kPitchCount = kMaxPitch - kMinPitch + 1;
constexpr double kTokenRateHz = 50.0;

inline bool pitch_in_range(int pitch) { return pitch >= kMinPitch && pitch <= kMaxPitch; }

/// One monophonic note. Duration is counted in token frames (20 ms at 50 Hz).
struct NoteEvent {
  int pitch = 60;
  int duration = 1;
  friend auto operator<=>(const NoteEvent&, const NoteEvent&) = default;
};

/// Ordered, contiguous note list. Construction validates pitch range and durations.
class MidiSequence {
 public:
  MidiSequence() = default;
  explicit MidiSequence(std::vector<NoteEvent> notes, double frame_rate_hz = kTokenRateHz);

  const std::vector<NoteEvent>& notes() const { return notes_; }
  double frame_rate_hz() const { return frame_rate_hz_; }
  bool empty() const { return notes_.empty(); }
  std::size_t size() const { return notes_.size(); }
  const NoteEvent& operator[](std::size_t i) const { return notes_[i]; }

  int total_frames() const;
  double total_seconds() const { return total_frames() / frame_rate_hz_; }

  friend bool operator==(const MidiSequence&, const MidiSequence&) = default;

 private:
  std::vector<NoteEvent> notes_;
  double frame_rate_hz_ = kTokenRateHz;
};

/// Per-frame pitch track. Every element lies in [kMinPitch, kMaxPitch].
class ExpandedMelody {
 public:
  ExpandedMelody() = default;
  explicit ExpandedMelody(std::vector<int> pitches);

  const std::vector<int>& pitches() const { return pitches_; }
  std::size_t size() const { return pitches_.size(); }
  bool empty() const { return pitches_.empty(); }
  int operator[](std::size_t i) const { return pitches_[i]; }

  friend bool operator==(const ExpandedMelody&, const ExpandedMelody&) = default;

 private:
  std::vector<int> pitches_;
};

/// Repeats each note's pitch for its duration. Throws InvalidInput on an empty sequence.
ExpandedMelody expand(const MidiSequence& m);

/// Collapses maximal runs of equal pitch into notes; inverse of expand().
MidiSequence compress(const ExpandedMelody& e, double frame_rate_hz = kTokenRateHz);

/// Shifts every pitch by k semitones. Throws RangeError if any result leaves [32, 80].
MidiSequence transpose(const MidiSequence& m, int semitones);

/// Frames per sixteenth note at the given tempo.
double sixteenth_grid_frames(double frame_rate_hz, double tempo_bpm);

/// Snaps durations to the nearest positive multiple of a 1/16 note (at least one unit).
/// When a grid unit is shorter than one frame the sequence is returned unchanged.
MidiSequence round_to_grid(const MidiSequence& m, double tempo_bpm);

/// Duration-weighted mean pitch in semitones.
double average_pitch(const MidiSequence& m);

}  // namespace songgen
