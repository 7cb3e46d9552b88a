/**
 * @file key_prompt.hpp
 * @brief Musical attribute extraction (key, pitch, tempo, duration), melody prompt
 *        templates and conditioning dropout.
 */
#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "songgen/melody.hpp"
#include "songgen/random.hpp"

namespace songgen {

using PitchClassProfile = std::array<double, 12>;

enum class Mode { major, minor };

struct KeyEstimate {
  int tonic = 0;  // pitch class, C = 0
  Mode mode = Mode::major;
  double r = 0.0;  // Pearson correlation of the winning key
};

/// Krumhansl-Kessler probe-tone ratings (Krumhansl, "Cognitive Foundations of Musical
/// Pitch", 1990), indexed from the tonic.
inline constexpr std::array<double, 12> kMajorKeyProfile = {6.35, 2.23, 3.48, 2.33, 4.38, 4.09,
                                                            2.52, 5.19, 2.39, 3.66, 2.29, 2.88};
inline constexpr std::array<double, 12> kMinorKeyProfile = {6.33, 2.68, 3.52, 5.38, 2.60, 3.53,
                                                            2.54, 4.75, 3.98, 2.69, 3.34, 3.17};

/// Frames per pitch class.
PitchClassProfile pitch_class_profile(const ExpandedMelody& e);
PitchClassProfile pitch_class_profile(const MidiSequence& m);

/// Pearson correlation between a profile and the key template of (tonic, mode).
/// Throws DegenerateProfile if the profile has zero variance.
double key_correlation(const PitchClassProfile& profile, int tonic, Mode mode);

/// Krumhansl-Schmuckler: argmax over the 24 rotated templates. Ties go to the lower
/// (mode, tonic) index with major before minor.
KeyEstimate estimate_key(const PitchClassProfile& profile);

/// r_hat / r, where both are correlations against the ground-truth key template.
/// std::nullopt when r is zero or undefined; such samples are excluded from averages.
std::optional<double> key_accuracy(const MidiSequence& gt, const MidiSequence& pred, int gt_tonic,
                                   Mode gt_mode);

std::string key_name(int tonic, Mode mode);
/// C major <-> A minor.
KeyEstimate relative_key(const KeyEstimate& k);

// --- attribute binning ---------------------------------------------------------

inline constexpr std::array<std::string_view, 5> kPitchLabels = {"very low", "low", "medium", "high",
                                                                 "very high"};
inline constexpr std::array<std::string_view, 5> kTempoLabels = {"very slow", "slow", "moderate",
                                                                 "fast", "very fast"};
inline constexpr std::array<std::string_view, 4> kDurationLabels = {"very short", "short", "medium",
                                                                    "long"};

/// Equal-width bins over each attribute's range. Values within margin_fraction of the
/// range around an interior edge are dropped.
struct BinningConfig {
  double pitch_lo = kMinPitch, pitch_hi = kMaxPitch;
  double tempo_lo = 60.0, tempo_hi = 180.0;
  double duration_lo = 1.0, duration_hi = 30.0;  // seconds
  double margin_fraction = 0.02;
  double min_tempo_confidence = 0.3;
  double min_key_correlation = 0.5;
};

struct AttributeSet {
  std::optional<KeyEstimate> key;
  std::optional<int> pitch_category;     // index into kPitchLabels
  std::optional<int> tempo_category;     // index into kTempoLabels
  std::optional<int> duration_category;  // index into kDurationLabels
  std::vector<std::string> emotion_keywords;
};

/// Bin index of `value` among `bins` equal bins over [lo, hi], or nullopt when the value
/// sits inside the boundary margin of an interior edge. Out-of-range values clamp.
std::optional<int> bin_with_margin(double value, double lo, double hi, int bins, double margin_fraction);

AttributeSet bin_attributes(const MidiSequence& m, std::optional<double> tempo_bpm,
                            std::optional<double> tempo_confidence,
                            const std::vector<std::string>& emotion_keywords = {},
                            const BinningConfig& cfg = {});

// --- templates -----------------------------------------------------------------

/// Melody prompt templates: one per line, clauses separated by '|', placeholders
/// {key} {pitch_cat} {tempo_cat} {dur_cat} {emotion}. A clause is omitted when any
/// placeholder it mentions is absent.
class TemplateSet {
 public:
  explicit TemplateSet(std::vector<std::string> lines);
  static TemplateSet builtin();
  static TemplateSet load(const std::filesystem::path& path);

  std::size_t size() const { return lines_.size(); }
  const std::string& line(std::size_t i) const { return lines_.at(i); }

 private:
  std::vector<std::string> lines_;
};

inline constexpr int kDefaultMelodyTemplates = 8;

/// Fills template `template_id`. With probability relative_switch_p the key is replaced by
/// its relative major/minor first. Throws InvalidInput on an unknown template id.
std::string render_prompt(const AttributeSet& a, int template_id, Rng& rng,
                          const TemplateSet& templates = TemplateSet::builtin(),
                          double relative_switch_p = 0.5);

// --- conditioning dropout ------------------------------------------------------

struct PromptBundle {
  std::string lyrics_text;
  std::optional<std::string> melody_prompt;
  std::optional<std::string> accomp_prompt;
};

struct DropDecision {
  bool drop_first = false;
  bool drop_second = false;
};

/// Joint drop with p_joint, otherwise independent drops with p_each. Always consumes three
/// uniforms. Marginal drop rate per condition is p_joint + (1 - p_joint) * p_each.
DropDecision draw_condition_dropout(Rng& rng, double p_each = 0.1, double p_joint = 0.1);

/// Lyrics are never dropped.
PromptBundle apply_condition_dropout(const PromptBundle& b, Rng& rng, double p_each = 0.1,
                                     double p_joint = 0.1);

// --- prompt encoding -----------------------------------------------------------

/// Maps prompt text to token ids for a learned embedding table. Implementations are
/// interchangeable so different prompt encoders can be compared.
class PromptEncoder {
 public:
  virtual ~PromptEncoder() = default;
  virtual std::vector<int> encode(std::string_view text) const = 0;
  virtual int vocab_size() const = 0;
  virtual std::string name() const = 0;
};

/// Closed word vocabulary covering the templates, attribute labels, key names, emotion
/// words and accompaniment captions. Id 0 is the unknown word.
class WordPromptEncoder final : public PromptEncoder {
 public:
  WordPromptEncoder();
  std::vector<int> encode(std::string_view text) const override;
  int vocab_size() const override { return static_cast<int>(words_.size()); }
  std::string name() const override { return "word"; }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
};

/// Lower-cased alphanumeric words ('#' kept for key names).
std::vector<std::string> split_words(std::string_view text);

inline constexpr std::array<std::string_view, 8> kEmotionWords = {
    "happy", "sad", "calm", "energetic", "romantic", "melancholic", "hopeful", "dreamy"};
inline constexpr std::array<std::string_view, 4> kInstruments = {"piano", "strings", "synth", "guitar"};
inline constexpr std::array<std::string_view, 4> kStyles = {"pop", "ballad", "folk", "electronic"};
inline constexpr std::array<std::string_view, 4> kQualities = {"warm", "bright", "soft", "lively"};

}  // namespace songgen
