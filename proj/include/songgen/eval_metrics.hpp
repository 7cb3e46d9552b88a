/**
 * @file eval_metrics.hpp
 * @brief Objective melody and F0 metrics, plus corpus aggregation into a report.
 */
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "songgen/key_prompt.hpp"
#include "songgen/melody.hpp"

namespace songgen {

/// |average_pitch(gt) - average_pitch(pred)| in semitones.
double apd(const MidiSequence& gt, const MidiSequence& pred);
/// |total_seconds(gt) - total_seconds(pred)|.
double td(const MidiSequence& gt, const MidiSequence& pred);

enum class DistributionAttr { pitch, duration };

inline constexpr int kExactDurationBins = 32;
inline constexpr int kDurationBinsPerOctave = 4;
/// Durations 1..32 map to bins 0..31; longer ones to log-spaced bins up to kMaxFrames.
int duration_bin(int frames);
int duration_bin_count();

/// Note-count histogram normalised to sum 1 (pitch: 49 semitone bins from 32).
std::vector<double> note_histogram(const MidiSequence& m, DistributionAttr attr);
/// 100 * sum_b min(a_b, b_b). Throws InvalidInput on a size mismatch.
double histogram_intersection(std::span<const double> a, std::span<const double> b);
double distribution_similarity(const MidiSequence& gt, const MidiSequence& pred, DistributionAttr attr);

struct DtwResult {
  double cost = 0.0;
  std::vector<std::pair<int, int>> path;  // 0-based (i, j) cells from (0, 0) to the end
  double normalized() const { return path.empty() ? 0.0 : cost / static_cast<double>(path.size()); }
};

/// Steps (1,0), (0,1), (1,1) with cost |a_i - b_j|. Among equal-cost paths the shortest wins.
DtwResult dtw(std::span<const int> a, std::span<const int> b);
/// DTW on expanded pitch tracks, normalised by warping-path length.
double melody_distance(const MidiSequence& gt, const MidiSequence& pred);
double melody_distance(std::span<const int> gt_pitches, std::span<const int> pred_pitches);

inline constexpr double kFfeTolerance = 0.2;

/// Fraction of frames with a voicing mismatch or a voiced pitch off by more than 20%.
/// Throws InvalidInput on length mismatches.
double ffe(std::span<const double> gt_f0, std::span<const std::uint8_t> gt_voiced, std::span<const double> pred_f0,
           std::span<const std::uint8_t> pred_voiced);

struct F0Track {
  std::vector<double> f0_hz;
  std::vector<std::uint8_t> voiced;
};

struct EvalPair {
  std::string id;
  MidiSequence gt;
  MidiSequence pred;
  int gt_tonic = 0;
  Mode gt_mode = Mode::major;
  double tempo_bpm = 120.0;
  std::optional<F0Track> gt_f0;
  std::optional<F0Track> pred_f0;
};

struct EvalOptions {
  bool rounded = false;  // snap durations to 1/16 notes before PD, DD and MD
};

struct SampleMetrics {
  std::string id;
  std::optional<double> ka;
  double apd = 0.0;
  double td = 0.0;
  double pd = 0.0;
  double dd = 0.0;
  double md = 0.0;
  std::optional<double> ffe;
};

struct MetricReport {
  std::vector<SampleMetrics> samples;
  std::optional<double> ka, ffe;  // means over defined samples
  double apd = 0.0, td = 0.0, pd = 0.0, dd = 0.0, md = 0.0;
  int ka_excluded = 0;
  int ffe_count = 0;
  bool rounded = false;

  nlohmann::json to_json() const;
  /// One header line and one row per named report, columns KA(%) APD TD PD(%) DD(%) MD FFE.
  static std::string table(std::span<const std::pair<std::string, MetricReport>> rows);
};

/// Throws InvalidInput on an empty pair list.
MetricReport evaluate_corpus(std::span<const EvalPair> pairs, const EvalOptions& opts = {});

/// Scorer interface for audio metrics that need pretrained models (FAD and similar).
class AudioScorer {
 public:
  virtual ~AudioScorer() = default;
  virtual std::string name() const = 0;
  /// std::nullopt when the scorer is unavailable.
  virtual std::optional<double> score(const std::vector<std::string>& reference_wavs,
                                      const std::vector<std::string>& generated_wavs) const = 0;
};

/// Always unavailable; stands in for FAD.
class NullFadScorer final : public AudioScorer {
 public:
  std::string name() const override { return "FAD"; }
  std::optional<double> score(const std::vector<std::string>&, const std::vector<std::string>&) const override {
    return std::nullopt;
  }
};

}  // namespace songgen
