/**
 * @file midi_io.hpp
 * @brief MIDI interchange: JSON note lists, newline records and Standard MIDI Files.
 */
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "songgen/melody.hpp"

namespace songgen {

/// {"frame_rate": 50, "notes": [[pitch, duration], ...]}
nlohmann::json midi_to_json(const MidiSequence& m);
MidiSequence midi_from_json(const nlohmann::json& j);

/// One "pitch duration" pair per line; blank lines and '#' comments are skipped.
std::string midi_to_records(const MidiSequence& m);
MidiSequence midi_from_records(const std::string& text, double frame_rate_hz = kTokenRateHz);

/// Single-track format-0 SMF with a tempo meta event. Tick length is one millisecond,
/// so 20 ms frames round-trip exactly.
std::vector<std::uint8_t> midi_to_smf(const MidiSequence& m, double tempo_bpm = 120.0);
MidiSequence midi_from_smf(const std::vector<std::uint8_t>& bytes, double frame_rate_hz = kTokenRateHz);

void save_midi_json(const std::filesystem::path& path, const MidiSequence& m);
MidiSequence load_midi_json(const std::filesystem::path& path);

}  // namespace songgen
