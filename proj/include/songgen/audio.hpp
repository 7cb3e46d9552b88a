/**
 * @file audio.hpp
 * @brief Log-mel conventions, harmonic mel synthesis, phase reconstruction, WAV files and mixing.
 *
 * A mel spectrogram is a T x 80 matrix of natural-log mel power at 24 kHz with hop 320.
 */
#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "songgen/rvq.hpp"

namespace songgen {

inline constexpr int kSampleRate = 24000;
inline constexpr int kHopSize = 320;
inline constexpr int kFftSize = 1024;
inline constexpr int kMelBins = 80;
inline constexpr double kMelPowerFloor = 1e-5;
inline constexpr double kLogMelFloor = -11.512925464970229;  // log(1e-5)

double hz_to_mel_scale(double hz);
double mel_scale_to_hz(double mel);

/// Triangular HTK filters, kMelBins x (kFftSize / 2 + 1), spanning 0 Hz to Nyquist.
const MatrixRM& mel_filterbank();
/// Response of mel filter `bin` to a pure tone at `hz`.
double mel_filter_response(int bin, double hz);

/// Throws InvalidInput unless the matrix is T x 80 with T >= 2 and finite entries.
void check_mel(const MatrixRM& mel);

/// Adds the power of a harmonic tone (partials falling off as 1/h) to one frame of a
/// linear-power mel matrix.
void add_harmonic_tone(MatrixRM& power_mel, int frame, double f0_hz, double gain, int harmonics = 10);
/// log(max(p, floor)) elementwise.
MatrixRM power_to_log_mel(const MatrixRM& power_mel);

/// Centred STFT power projected on the filterbank, as log-mel.
MatrixRM log_mel_from_audio(std::span<const float> audio);
/// Iterative phase estimation from a log-mel spectrogram. Returns T * hop samples, peak 0.9.
std::vector<float> griffin_lim(const MatrixRM& log_mel, int iterations = 32, std::uint64_t seed = 0);

struct Wav {
  int sample_rate = kSampleRate;
  std::vector<float> samples;  // mono, [-1, 1]
};
/// 16-bit PCM mono RIFF.
void write_wav(const std::filesystem::path& path, const Wav& wav);
Wav read_wav(const std::filesystem::path& path);

/// Sums two stems at the given per-stem gain and peak-normalises the mix to 0.99.
/// The shorter stem is zero-padded. Throws InvalidInput on differing sample rates.
Wav remix(const Wav& vocal, const Wav& accomp, double stem_gain_db = -3.0);

/// "SGMEL001", uint32 frames, uint32 bins, float32 row-major data.
void save_mel(const std::filesystem::path& path, const MatrixRM& mel);
MatrixRM load_mel(const std::filesystem::path& path);

}  // namespace songgen
