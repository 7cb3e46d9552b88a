#include "songgen/key_prompt.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "songgen/error.hpp"

namespace songgen {

PitchClassProfile pitch_class_profile(const ExpandedMelody& e) {
  PitchClassProfile p{};
  for (int pitch : e.pitches()) p[static_cast<std::size_t>(pitch % 12)] += 1.0;
  return p;
}

PitchClassProfile pitch_class_profile(const MidiSequence& m) {
  PitchClassProfile p{};
  for (const auto& n : m.notes()) p[static_cast<std::size_t>(n.pitch % 12)] += n.duration;
  return p;
}

double key_correlation(const PitchClassProfile& profile, int tonic, Mode mode) {
  const auto& tpl = mode == Mode::major ? kMajorKeyProfile : kMinorKeyProfile;
  // Summation runs in tonic-relative order so rotating the input permutes results exactly.
  double mx = 0.0, my = 0.0;
  for (int j = 0; j < 12; ++j) {
    mx += profile[static_cast<std::size_t>((tonic + j) % 12)];
    my += tpl[static_cast<std::size_t>(j)];
  }
  mx /= 12.0;
  my /= 12.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (int j = 0; j < 12; ++j) {
    const double dx = profile[static_cast<std::size_t>((tonic + j) % 12)] - mx;
    const double dy = tpl[static_cast<std::size_t>(j)] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0) throw DegenerateProfile("pitch-class profile has zero variance");
  return sxy / std::sqrt(sxx * syy);
}

KeyEstimate estimate_key(const PitchClassProfile& profile) {
  for (double v : profile)
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidInput("profile entries must be finite and nonnegative");
  KeyEstimate best{0, Mode::major, -2.0};
  for (Mode mode : {Mode::major, Mode::minor}) {
    for (int tonic = 0; tonic < 12; ++tonic) {
      const double r = key_correlation(profile, tonic, mode);
      if (r > best.r) best = {tonic, mode, r};
    }
  }
  return best;
}

std::optional<double> key_accuracy(const MidiSequence& gt, const MidiSequence& pred, int gt_tonic,
                                   Mode gt_mode) {
  double r = 0.0;
  try {
    r = key_correlation(pitch_class_profile(gt), gt_tonic, gt_mode);
  } catch (const DegenerateProfile&) {
    return std::nullopt;
  }
  if (r == 0.0) return std::nullopt;
  double r_hat = 0.0;
  try {
    r_hat = key_correlation(pitch_class_profile(pred), gt_tonic, gt_mode);
  } catch (const DegenerateProfile&) {
    r_hat = 0.0;  // a single pitch class carries no key evidence
  }
  return r_hat / r;
}

std::string key_name(int tonic, Mode mode) {
  static constexpr std::array<const char*, 12> names = {"C",  "C#", "D",  "D#", "E",  "F",
                                                        "F#", "G",  "G#", "A",  "A#", "B"};
  return std::string(names[static_cast<std::size_t>(((tonic % 12) + 12) % 12)]) +
         (mode == Mode::major ? " major" : " minor");
}

KeyEstimate relative_key(const KeyEstimate& k) {
  if (k.mode == Mode::major) return {(k.tonic + 9) % 12, Mode::minor, k.r};
  return {(k.tonic + 3) % 12, Mode::major, k.r};
}

std::optional<int> bin_with_margin(double value, double lo, double hi, int bins, double margin_fraction) {
  if (!(hi > lo) || bins < 1) throw InvalidInput("bad bin range");
  const double width = (hi - lo) / bins;
  const double margin = margin_fraction * (hi - lo);
  for (int i = 1; i < bins; ++i) {
    if (std::abs(value - (lo + i * width)) <= margin) return std::nullopt;
  }
  const int idx = static_cast<int>(std::floor((value - lo) / width));
  return std::clamp(idx, 0, bins - 1);
}

AttributeSet bin_attributes(const MidiSequence& m, std::optional<double> tempo_bpm,
                            std::optional<double> tempo_confidence,
                            const std::vector<std::string>& emotion_keywords, const BinningConfig& cfg) {
  AttributeSet a;
  a.emotion_keywords = emotion_keywords;
  if (m.empty()) return a;
  try {
    const KeyEstimate k = estimate_key(pitch_class_profile(m));
    if (k.r >= cfg.min_key_correlation) a.key = k;
  } catch (const DegenerateProfile&) {
  }
  a.pitch_category = bin_with_margin(average_pitch(m), cfg.pitch_lo, cfg.pitch_hi,
                                     static_cast<int>(kPitchLabels.size()), cfg.margin_fraction);
  if (tempo_bpm && (!tempo_confidence || *tempo_confidence >= cfg.min_tempo_confidence)) {
    a.tempo_category = bin_with_margin(*tempo_bpm, cfg.tempo_lo, cfg.tempo_hi,
                                       static_cast<int>(kTempoLabels.size()), cfg.margin_fraction);
  }
  a.duration_category = bin_with_margin(m.total_seconds(), cfg.duration_lo, cfg.duration_hi,
                                        static_cast<int>(kDurationLabels.size()), cfg.margin_fraction);
  return a;
}

// --- templates -----------------------------------------------------------------

TemplateSet::TemplateSet(std::vector<std::string> lines) : lines_(std::move(lines)) {
  if (lines_.empty()) throw InvalidInput("template set is empty");
}

TemplateSet TemplateSet::builtin() {
  // Mirrors data/melody_templates.txt.
  return TemplateSet({
      "A melody | in {key} | with a {pitch_cat} pitch range | at a {tempo_cat} tempo | with a {dur_cat} "
      "duration | that sounds {emotion}",
      "Compose a tune | in the key of {key} | sung in a {pitch_cat} register | moving at a {tempo_cat} pace | "
      "{dur_cat} in length | with a {emotion} feeling",
      "Generate a vocal line | set in {key} | with {pitch_cat} notes | {tempo_cat} in tempo | and {dur_cat} "
      "overall | evoking a {emotion} mood",
      "Write a song melody | in {key} | whose average pitch is {pitch_cat} | taken at a {tempo_cat} speed | of "
      "{dur_cat} length | expressing {emotion} emotions",
      "Sing a phrase | in {key} | keeping the pitch {pitch_cat} | at {tempo_cat} tempo | for a {dur_cat} time | "
      "feeling {emotion}",
      "Create a melody for these lyrics | using the key {key} | with a {pitch_cat} average pitch | in a "
      "{tempo_cat} rhythm | that is {dur_cat} | and {emotion}",
      "A vocal melody | the key is {key} | the pitch is {pitch_cat} | the tempo is {tempo_cat} | the duration "
      "is {dur_cat} | the emotion is {emotion}",
      "Melody request | key {key} | pitch {pitch_cat} | tempo {tempo_cat} | duration {dur_cat} | mood {emotion}",
  });
}

TemplateSet TemplateSet::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read template file " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return TemplateSet(std::move(lines));
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

std::string render_prompt(const AttributeSet& a, int template_id, Rng& rng, const TemplateSet& templates,
                          double relative_switch_p) {
  if (template_id < 0 || static_cast<std::size_t>(template_id) >= templates.size())
    throw InvalidInput("unknown template id " + std::to_string(template_id));

  std::optional<KeyEstimate> key = a.key;
  const bool switch_key = bernoulli(rng, relative_switch_p);
  if (key && switch_key) key = relative_key(*key);

  std::map<std::string, std::optional<std::string>> values;
  values["{key}"] = key ? std::optional(key_name(key->tonic, key->mode)) : std::nullopt;
  values["{pitch_cat}"] =
      a.pitch_category ? std::optional(std::string(kPitchLabels.at(static_cast<std::size_t>(*a.pitch_category))))
                       : std::nullopt;
  values["{tempo_cat}"] =
      a.tempo_category ? std::optional(std::string(kTempoLabels.at(static_cast<std::size_t>(*a.tempo_category))))
                       : std::nullopt;
  values["{dur_cat}"] = a.duration_category ? std::optional(std::string(kDurationLabels.at(
                                                  static_cast<std::size_t>(*a.duration_category))))
                                            : std::nullopt;
  if (!a.emotion_keywords.empty()) {
    std::string joined;
    for (std::size_t i = 0; i < a.emotion_keywords.size(); ++i) {
      if (i > 0) joined += i + 1 == a.emotion_keywords.size() ? " and " : ", ";
      joined += a.emotion_keywords[i];
    }
    values["{emotion}"] = joined;
  } else {
    values["{emotion}"] = std::nullopt;
  }

  const std::string& tpl = templates.line(static_cast<std::size_t>(template_id));
  std::string out;
  std::size_t start = 0;
  while (start <= tpl.size()) {
    const auto bar = tpl.find('|', start);
    std::string clause = trim(std::string_view(tpl).substr(start, bar == std::string::npos ? std::string::npos : bar - start));
    bool keep = !clause.empty();
    for (const auto& [ph, value] : values) {
      for (auto pos = clause.find(ph); keep && pos != std::string::npos; pos = clause.find(ph)) {
        if (!value) {
          keep = false;
        } else {
          clause.replace(pos, ph.size(), *value);
        }
      }
    }
    if (keep) {
      if (!out.empty()) out += ' ';
      out += clause;
    }
    if (bar == std::string::npos) break;
    start = bar + 1;
  }
  return out;
}

// --- conditioning dropout ------------------------------------------------------

DropDecision draw_condition_dropout(Rng& rng, double p_each, double p_joint) {
  if (p_each < 0.0 || p_each > 1.0 || p_joint < 0.0 || p_joint > 1.0)
    throw InvalidInput("dropout probabilities must lie in [0, 1]");
  const double u_joint = uniform01(rng);
  const double u_first = uniform01(rng);
  const double u_second = uniform01(rng);
  if (u_joint < p_joint) return {true, true};
  return {u_first < p_each, u_second < p_each};
}

PromptBundle apply_condition_dropout(const PromptBundle& b, Rng& rng, double p_each, double p_joint) {
  const DropDecision d = draw_condition_dropout(rng, p_each, p_joint);
  PromptBundle out = b;
  if (d.drop_first) out.melody_prompt.reset();
  if (d.drop_second) out.accomp_prompt.reset();
  return out;
}

// --- prompt encoding -----------------------------------------------------------

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    const auto uc = static_cast<unsigned char>(c);
    if (std::isalnum(uc) || c == '#') {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

WordPromptEncoder::WordPromptEncoder() {
  std::set<std::string> vocab;
  auto add_text = [&](std::string_view t) {
    for (auto& w : split_words(t)) vocab.insert(std::move(w));
  };
  const TemplateSet tpl = TemplateSet::builtin();
  for (std::size_t i = 0; i < tpl.size(); ++i) add_text(tpl.line(i));
  for (auto l : kPitchLabels) add_text(l);
  for (auto l : kTempoLabels) add_text(l);
  for (auto l : kDurationLabels) add_text(l);
  for (int t = 0; t < 12; ++t) add_text(key_name(t, Mode::major) + " " + key_name(t, Mode::minor));
  for (auto l : kEmotionWords) add_text(l);
  for (auto l : kInstruments) add_text(l);
  for (auto l : kStyles) add_text(l);
  for (auto l : kQualities) add_text(l);
  add_text("a track with accompaniment and mood");
  words_.push_back("<unk>");
  words_.insert(words_.end(), vocab.begin(), vocab.end());
}

std::vector<int> WordPromptEncoder::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) {
    const auto it = std::lower_bound(words_.begin() + 1, words_.end(), w);
    ids.push_back(it != words_.end() && *it == w ? static_cast<int>(it - words_.begin()) : 0);
  }
  return ids;
}

}  // namespace songgen
