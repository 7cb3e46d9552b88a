#include "songgen/melody.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "songgen/error.hpp"

namespace songgen {

MidiSequence::MidiSequence(std::vector<NoteEvent> notes, double frame_rate_hz)
    : notes_(std::move(notes)), frame_rate_hz_(frame_rate_hz) {
  if (!(frame_rate_hz_ > 0.0)) throw InvalidInput("frame rate must be positive");
  for (const auto& n : notes_) {
    if (!pitch_in_range(n.pitch))
      throw RangeError("pitch " + std::to_string(n.pitch) + " outside [32, 80]");
    if (n.duration < 1) throw InvalidInput("note duration must be >= 1 frame");
  }
}

int MidiSequence::total_frames() const {
  return std::accumulate(notes_.begin(), notes_.end(), 0,
                         [](int acc, const NoteEvent& n) { return acc + n.duration; });
}

ExpandedMelody::ExpandedMelody(std::vector<int> pitches) : pitches_(std::move(pitches)) {
  for (int p : pitches_)
    if (!pitch_in_range(p)) throw RangeError("expanded pitch " + std::to_string(p) + " outside [32, 80]");
}

ExpandedMelody expand(const MidiSequence& m) {
  if (m.empty()) throw InvalidInput("cannot expand an empty MIDI sequence");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(m.total_frames()));
  for (const auto& n : m.notes()) out.insert(out.end(), static_cast<std::size_t>(n.duration), n.pitch);
  return ExpandedMelody(std::move(out));
}

MidiSequence compress(const ExpandedMelody& e, double frame_rate_hz) {
  if (e.empty()) throw InvalidInput("cannot compress an empty melody");
  std::vector<NoteEvent> notes;
  for (int p : e.pitches()) {
    if (!notes.empty() && notes.back().pitch == p)
      ++notes.back().duration;
    else
      notes.push_back({p, 1});
  }
  return MidiSequence(std::move(notes), frame_rate_hz);
}

MidiSequence transpose(const MidiSequence& m, int semitones) {
  std::vector<NoteEvent> notes = m.notes();
  for (auto& n : notes) {
    n.pitch += semitones;
    if (!pitch_in_range(n.pitch))
      throw RangeError("transposed pitch " + std::to_string(n.pitch) + " outside [32, 80]");
  }
  return MidiSequence(std::move(notes), m.frame_rate_hz());
}

double sixteenth_grid_frames(double frame_rate_hz, double tempo_bpm) {
  if (!(tempo_bpm > 0.0)) throw InvalidInput("tempo must be positive");
  return frame_rate_hz * 60.0 / tempo_bpm / 4.0;
}

MidiSequence round_to_grid(const MidiSequence& m, double tempo_bpm) {
  const double grid = sixteenth_grid_frames(m.frame_rate_hz(), tempo_bpm);
  if (grid < 1.0) return m;
  std::vector<NoteEvent> notes = m.notes();
  for (auto& n : notes) {
    const double units = std::max(1.0, std::round(n.duration / grid));
    n.duration = std::max(1, static_cast<int>(std::lround(units * grid)));
  }
  return MidiSequence(std::move(notes), m.frame_rate_hz());
}

double average_pitch(const MidiSequence& m) {
  if (m.empty()) throw InvalidInput("average pitch of an empty sequence");
  double weighted = 0.0;
  for (const auto& n : m.notes()) weighted += static_cast<double>(n.pitch) * n.duration;
  return weighted / m.total_frames();
}

}  // namespace songgen
