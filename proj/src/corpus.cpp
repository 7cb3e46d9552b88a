#include "songgen/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "songgen/error.hpp"
#include "songgen/lyrics.hpp"
#include "songgen/midi_io.hpp"
#include "songgen/vocal_stage.hpp"

namespace songgen {

namespace {

using nlohmann::json;

constexpr std::array<int, 7> kMajorSteps = {0, 2, 4, 5, 7, 9, 11};
constexpr std::array<int, 7> kMinorSteps = {0, 2, 3, 5, 7, 8, 10};

// duration in sixteenth units and its weight
constexpr std::array<std::pair<int, double>, 6> kUnits = {{{1, 0.08}, {2, 0.40}, {3, 0.07}, {4, 0.30}, {6, 0.08}, {8, 0.07}}};
constexpr std::array<double, 7> kStepWeights = {0.04, 0.12, 0.22, 0.12, 0.22, 0.12, 0.04};  // delta -3..3
constexpr int kLowDegree = -4, kHighDegree = 9;

int pick(Rng& rng, std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = uniform01(rng) * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return static_cast<int>(i);
    u -= weights[i];
  }
  return static_cast<int>(weights.size()) - 1;
}

int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

int degree_pitch(int tonic_base, Mode mode, int degree) {
  const int oct = floor_div(degree, 7);
  return tonic_base + 12 * oct + scale_steps(mode)[static_cast<std::size_t>(degree - 7 * oct)];
}

bool chord_tone(int degree) {
  const int d = ((degree % 7) + 7) % 7;
  return d == 0 || d == 2 || d == 4;
}

std::vector<NoteEvent> merge_weak_boundaries(const std::vector<NoteEvent>& notes, const std::vector<double>& strength,
                                             double threshold) {
  std::vector<NoteEvent> out;
  for (std::size_t k = 0; k < notes.size(); ++k) {
    if (!out.empty() && out.back().pitch == notes[k].pitch && strength[k] < threshold)
      out.back().duration += notes[k].duration;
    else
      out.push_back(notes[k]);
  }
  return out;
}

// Gaussian formant bump tied to the syllable final.
void apply_formant(MatrixRM& power, int row, int final_token) {
  const double centre = 18.0 + 5.0 * (final_token % 10);
  for (int b = 0; b < kMelBins; ++b) {
    const double z = (b - centre) / 7.0;
    power(row, b) *= 1.0 + 3.0 * std::exp(-0.5 * z * z);
  }
}

json f0_json(const F0Track& f) {
  std::vector<int> v(f.voiced.begin(), f.voiced.end());
  return {{"f0_hz", f.f0_hz}, {"voiced", v}};
}

}  // namespace

const std::array<int, 7>& scale_steps(Mode mode) { return mode == Mode::major ? kMajorSteps : kMinorSteps; }

std::string accomp_caption(int instrument, int style, int quality) {
  return std::string(kQualities[static_cast<std::size_t>(quality)]) + " " +
         std::string(kStyles[static_cast<std::size_t>(style)]) + " with " +
         std::string(kInstruments[static_cast<std::size_t>(instrument)]);
}

// --- manifest -------------------------------------------------------------------------

json ClipManifest::to_json() const {
  return {{"id", id},
          {"lyrics", lyrics},
          {"pinyin", pinyin},
          {"midi", midi},
          {"midi_variants", midi_variants},
          {"vocal", vocal},
          {"accomp", accomp},
          {"f0", f0},
          {"singer", singer},
          {"tempo_bpm", tempo_bpm},
          {"tempo_confidence", tempo_confidence},
          {"emotion", emotion},
          {"accomp_caption", accomp_caption},
          {"key", {{"tonic", key_tonic}, {"mode", key_mode == Mode::major ? "major" : "minor"}}},
          {"split", split},
          {"frames", frames}};
}

ClipManifest ClipManifest::from_json(const json& j) {
  ClipManifest c;
  try {
    c.id = j.at("id").get<std::string>();
    c.lyrics = j.at("lyrics").get<std::string>();
    c.pinyin = j.at("pinyin").get<std::vector<int>>();
    c.midi = j.at("midi").get<std::string>();
    c.midi_variants = j.at("midi_variants").get<std::vector<std::string>>();
    c.vocal = j.at("vocal").get<std::string>();
    c.accomp = j.at("accomp").get<std::string>();
    c.f0 = j.at("f0").get<std::string>();
    c.singer = j.at("singer").get<int>();
    c.tempo_bpm = j.at("tempo_bpm").get<double>();
    c.tempo_confidence = j.at("tempo_confidence").get<double>();
    c.emotion = j.at("emotion").get<std::vector<std::string>>();
    c.accomp_caption = j.at("accomp_caption").get<std::string>();
    c.key_tonic = j.at("key").at("tonic").get<int>();
    const auto mode = j.at("key").at("mode").get<std::string>();
    if (mode != "major" && mode != "minor") throw FormatError("unknown key mode '" + mode + "'");
    c.key_mode = mode == "major" ? Mode::major : Mode::minor;
    c.split = j.at("split").get<std::string>();
    c.frames = j.at("frames").get<int>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest record: ") + e.what());
  }
  if (c.id.empty()) throw FormatError("manifest record without id");
  if (c.key_tonic < 0 || c.key_tonic > 11) throw FormatError("key tonic out of range in " + c.id);
  return c;
}

const ClipManifest& Manifest::find(const std::string& id) const {
  for (const auto& c : clips)
    if (c.id == id) return c;
  throw InvalidInput("no clip '" + id + "' in the manifest");
}

std::vector<const ClipManifest*> Manifest::split(const std::string& tag) const {
  std::vector<const ClipManifest*> out;
  for (const auto& c : clips)
    if (c.split == tag) out.push_back(&c);
  return out;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ClipManifest>& clips) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp);
    if (!out) throw FormatError("cannot write " + tmp.string());
    for (const auto& c : clips) out << c.to_json().dump() << '\n';
  }
  std::filesystem::rename(tmp, path);
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  std::set<std::string> ids;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    auto c = ClipManifest::from_json(j);
    if (!ids.insert(c.id).second) throw FormatError("duplicate clip id '" + c.id + "'");
    m.clips.push_back(std::move(c));
  }
  return m;
}

void save_f0(const std::filesystem::path& path, const F0Track& f0) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << f0_json(f0).dump();
}

F0Track load_f0(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  F0Track f;
  try {
    const json j = json::parse(in);
    f.f0_hz = j.at("f0_hz").get<std::vector<double>>();
    for (int v : j.at("voiced").get<std::vector<int>>()) f.voiced.push_back(static_cast<std::uint8_t>(v != 0));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (f.f0_hz.size() != f.voiced.size()) throw FormatError(path.string() + ": f0 and voicing lengths differ");
  return f;
}

void validate_clip(const Manifest& m, const ClipManifest& c) {
  const double s = c.seconds();
  if (s > kMaxClipSeconds) throw ClipTooLong(c.id + " lasts " + std::to_string(s) + " s");
  if (s < kMinClipSeconds) throw InvalidInput(c.id + " is shorter than 1 s");
  for (const auto* rel : {&c.midi, &c.vocal, &c.accomp, &c.f0})
    if (!std::filesystem::exists(m.resolve(*rel))) throw FormatError(c.id + ": missing file " + *rel);
  const MidiSequence midi = load_midi_json(m.resolve(c.midi));
  if (midi.total_frames() != c.frames) throw InvalidInput(c.id + ": MIDI length differs from the manifest");
  const auto e = expand(midi);
  for (const auto& v : c.midi_variants)
    if (expand(load_midi_json(m.resolve(v))) != e) throw InvalidInput(c.id + ": variant " + v + " changes the melody");
  if (load_mel(m.resolve(c.vocal)).rows() != c.frames) throw InvalidInput(c.id + ": vocal length mismatch");
  const auto mel_rows = static_cast<Eigen::Index>(std::ceil(1.5 * c.frames));
  if (load_mel(m.resolve(c.accomp)).rows() != mel_rows) throw InvalidInput(c.id + ": accompaniment length mismatch");
  if (load_f0(m.resolve(c.f0)).f0_hz.size() != static_cast<std::size_t>(c.frames))
    throw InvalidInput(c.id + ": f0 length mismatch");
}

// --- generator ------------------------------------------------------------------------

SynthClip synth_clip(const CorpusConfig& cfg, int index) {
  Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(index)));
  const auto& inv = SyllableInventory::builtin();
  SynthClip clip;
  auto& meta = clip.meta;
  char id[32];
  std::snprintf(id, sizeof id, "clip%05d", index);
  meta.id = id;
  meta.singer = uniform_int(rng, cfg.n_singers);
  meta.key_tonic = uniform_int(rng, 12);
  meta.key_mode = uniform01(rng) < cfg.major_fraction ? Mode::major : Mode::minor;
  meta.tempo_bpm = std::round(cfg.tempo_lo + (cfg.tempo_hi - cfg.tempo_lo) * uniform01(rng));
  meta.tempo_confidence = 0.5 + 0.5 * uniform01(rng);

  const int centre = 52 + 4 * (meta.singer % 4);
  int tonic_base = centre - 2;
  while (((tonic_base % 12) + 12) % 12 != meta.key_tonic) --tonic_base;

  const double grid = sixteenth_grid_frames(kTokenRateHz, meta.tempo_bpm);
  auto unit_frames = [&](int units) { return std::max(1, static_cast<int>(std::lround(units * grid))); };
  const double seconds = cfg.min_seconds + (cfg.max_seconds - cfg.min_seconds) * uniform01(rng);
  const int target = std::clamp(static_cast<int>(std::lround(seconds * kTokenRateHz)),
                                static_cast<int>(kMinClipSeconds * kTokenRateHz),
                                static_cast<int>(kMaxClipSeconds * kTokenRateHz));

  std::vector<NoteEvent> notes;
  std::vector<double> strength;
  std::array<double, kUnits.size()> unit_w{};
  for (std::size_t i = 0; i < kUnits.size(); ++i) unit_w[i] = kUnits[i].second;
  int degree = 0;
  int total = 0;
  const int closing = unit_frames(2) + unit_frames(4);
  while (total + closing < target) {
    // passing tones stay short so the tonic triad dominates the pitch-class profile
    int units = kUnits[static_cast<std::size_t>(pick(rng, unit_w))].first;
    if (!chord_tone(degree)) units = std::min(units, 2);
    const int dur = unit_frames(units);
    notes.push_back({degree_pitch(tonic_base, meta.key_mode, degree), std::min(dur, target - closing - total)});
    strength.push_back(0.75 + 0.25 * uniform01(rng));
    total += notes.back().duration;
    std::array<double, kStepWeights.size()> w{};
    for (int k = 0; k < 7; ++k) {
      const int next = degree + k - 3;
      if (next < kLowDegree || next > kHighDegree) continue;
      w[static_cast<std::size_t>(k)] = kStepWeights[static_cast<std::size_t>(k)] * (chord_tone(next) ? 3.0 : 1.0);
    }
    degree += pick(rng, w) - 3;
  }
  // cadence: the third (which carries the mode), then the tonic nearest the last degree
  const int home = std::clamp(7 * static_cast<int>(std::lround(degree / 7.0)), 0, 7);
  const int third_len = unit_frames(2);
  notes.push_back({degree_pitch(tonic_base, meta.key_mode, home + 2), third_len});
  notes.push_back({degree_pitch(tonic_base, meta.key_mode, home), std::max(1, target - total - third_len)});
  strength.push_back(0.75 + 0.25 * uniform01(rng));
  strength.push_back(0.75 + 0.25 * uniform01(rng));
  for (auto& n : notes) n.pitch = std::clamp(n.pitch, kMinPitch, kMaxPitch);
  clip.midi = MidiSequence(notes);
  for (std::size_t v = 0; v < kBoundaryThresholds.size(); ++v)
    clip.variants[v] = MidiSequence(merge_weak_boundaries(notes, strength, kBoundaryThresholds[v]));
  const int n_frames = clip.midi.total_frames();
  meta.frames = n_frames;

  // lyrics: one syllable per note
  std::vector<int> finals;
  std::vector<bool> has_initial;
  for (std::size_t k = 0; k < notes.size(); ++k) {
    const std::string& syl = inv.syllable(uniform_int(rng, inv.syllable_count()));
    meta.lyrics += (k ? " " : "") + syl;
    const auto tokens = inv.encode_pinyin(syl);
    finals.push_back(tokens.back());
    has_initial.push_back(tokens.size() > 1);
  }
  meta.pinyin = inv.encode_pinyin(meta.lyrics);
  const int n_emotion = 1 + uniform_int(rng, 2);
  std::vector<int> pool(kEmotionWords.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<int>(i);
  for (int k = 0; k < n_emotion; ++k) {
    const int j = k + uniform_int(rng, static_cast<int>(pool.size()) - k);
    std::swap(pool[static_cast<std::size_t>(k)], pool[static_cast<std::size_t>(j)]);
    meta.emotion.emplace_back(kEmotionWords[static_cast<std::size_t>(pool[static_cast<std::size_t>(k)])]);
  }
  const int instrument = uniform_int(rng, static_cast<int>(kInstruments.size()));
  meta.accomp_caption = accomp_caption(instrument, uniform_int(rng, static_cast<int>(kStyles.size())),
                                       uniform_int(rng, static_cast<int>(kQualities.size())));

  // vocal at the token rate
  const int harmonics = 6 + 2 * (meta.singer % 4);
  const double gain = 1.0 + 0.25 * (meta.singer % 3);
  const double vib_phase = 2.0 * std::numbers::pi * uniform01(rng);
  MatrixRM power = MatrixRM::Zero(n_frames, kMelBins);
  clip.f0.f0_hz.assign(static_cast<std::size_t>(n_frames), 0.0);
  clip.f0.voiced.assign(static_cast<std::size_t>(n_frames), 0);
  int frame = 0;
  for (std::size_t k = 0; k < notes.size(); ++k) {
    for (int i = 0; i < notes[k].duration; ++i, ++frame) {
      if (i == 0 && has_initial[k] && notes[k].duration >= 3) {
        for (int b = kMelBins / 2; b < kMelBins; ++b) power(frame, b) = 0.02 * gain;
        continue;
      }
      const double t = frame / kTokenRateHz;
      const double semis = 0.2 * std::sin(2.0 * std::numbers::pi * 5.0 * t + vib_phase);
      const double hz = midi_to_hz(notes[k].pitch + semis);
      add_harmonic_tone(power, frame, hz, gain * (i == 0 ? 0.6 : 1.0), harmonics);
      apply_formant(power, frame, finals[k]);
      clip.f0.f0_hz[static_cast<std::size_t>(frame)] = hz;
      clip.f0.voiced[static_cast<std::size_t>(frame)] = 1;
    }
  }
  for (Eigen::Index i = 0; i < power.size(); ++i) power.data()[i] += 2e-5 * uniform01(rng);
  clip.vocal_mel = power_to_log_mel(power);

  // accompaniment at the mel rate: bass an octave below the melody plus a tonic triad pad
  const auto expanded = expand(clip.midi);
  const int mel_rows = static_cast<int>(std::ceil(1.5 * n_frames));
  const int third = meta.key_mode == Mode::major ? 4 : 3;
  const int root = 48 + meta.key_tonic;
  const int bass_harmonics = 3 + 2 * instrument;
  MatrixRM acc = MatrixRM::Zero(mel_rows, kMelBins);
  for (int t = 0; t < mel_rows; ++t) {
    const int i = std::min(n_frames - 1, static_cast<int>(t / 1.5));
    const int p = expanded[static_cast<std::size_t>(i)];
    add_harmonic_tone(acc, t, midi_to_hz(p - 12 >= 36 ? p - 12 : p), 1.0, bass_harmonics);
    for (int iv : {0, third, 7}) add_harmonic_tone(acc, t, midi_to_hz(root + iv), 0.12, 3);
  }
  for (Eigen::Index i = 0; i < acc.size(); ++i) acc.data()[i] += 2e-5 * uniform01(rng);
  clip.accomp_mel = power_to_log_mel(acc);
  return clip;
}

std::vector<ClipManifest> make_synth_corpus(const CorpusConfig& cfg, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "clips");
  const int n_test = cfg.holdout_fraction > 0.0
                         ? std::max(1, static_cast<int>(std::lround(cfg.holdout_fraction * cfg.n_clips)))
                         : 0;
  std::vector<ClipManifest> rows;
  rows.reserve(static_cast<std::size_t>(cfg.n_clips));
  for (int i = 0; i < cfg.n_clips; ++i) {
    SynthClip c = synth_clip(cfg, i);
    auto& m = c.meta;
    const std::string base = "clips/" + m.id;
    m.midi = base + ".midi.json";
    save_midi_json(out_dir / m.midi, c.midi);
    for (std::size_t v = 0; v < c.variants.size(); ++v) {
      m.midi_variants.push_back(base + ".seg" + std::to_string(v) + ".midi.json");
      save_midi_json(out_dir / m.midi_variants.back(), c.variants[v]);
    }
    m.vocal = base + ".vocal.mel";
    save_mel(out_dir / m.vocal, c.vocal_mel);
    m.accomp = base + ".accomp.mel";
    save_mel(out_dir / m.accomp, c.accomp_mel);
    m.f0 = base + ".f0.json";
    save_f0(out_dir / m.f0, c.f0);
    m.split = i >= cfg.n_clips - n_test ? "test" : "train";
    rows.push_back(m);
  }
  write_manifest(out_dir / "manifest.jsonl", rows);
  return rows;
}

}  // namespace songgen
