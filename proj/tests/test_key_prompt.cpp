#include "doctest.h"

#include <cmath>
#include <fstream>

#include "songgen/error.hpp"
#include "songgen/key_prompt.hpp"

using namespace songgen;

namespace {

// Two-pass Pearson over the natural pitch-class order; independent of key_correlation().
double pearson_oracle(const PitchClassProfile& x, int tonic, Mode mode) {
  const auto& base = mode == Mode::major ? kMajorKeyProfile : kMinorKeyProfile;
  std::array<double, 12> y{};
  for (int c = 0; c < 12; ++c) y[static_cast<std::size_t>(c)] = base[static_cast<std::size_t>((c - tonic + 12) % 12)];
  double mx = 0, my = 0;
  for (int c = 0; c < 12; ++c) mx += x[static_cast<std::size_t>(c)], my += y[static_cast<std::size_t>(c)];
  mx /= 12, my /= 12;
  double num = 0, dx = 0, dy = 0;
  for (int c = 0; c < 12; ++c) {
    const double a = x[static_cast<std::size_t>(c)] - mx, b = y[static_cast<std::size_t>(c)] - my;
    num += a * b, dx += a * a, dy += b * b;
  }
  return num / std::sqrt(dx * dy);
}

PitchClassProfile rotate(const PitchClassProfile& p, int k) {
  PitchClassProfile out{};
  for (int c = 0; c < 12; ++c) out[static_cast<std::size_t>((c + k) % 12)] = p[static_cast<std::size_t>(c)];
  return out;
}

}  // namespace

TEST_CASE("pitch class profile counts frames") {
  const auto p = pitch_class_profile(ExpandedMelody({60, 60, 62}));
  CHECK(p[0] == 2.0);
  CHECK(p[2] == 1.0);
  double rest = 0;
  for (int c = 0; c < 12; ++c)
    if (c != 0 && c != 2) rest += p[static_cast<std::size_t>(c)];
  CHECK(rest == 0.0);

  std::vector<int> chromatic;
  for (int k = 0; k < 12; ++k) chromatic.push_back(60 + k);
  for (double v : pitch_class_profile(ExpandedMelody(chromatic))) CHECK(v == 1.0);

  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    std::vector<int> frames;
    for (int i = 0; i < 40; ++i) frames.push_back(kMinPitch + uniform_int(rng, kPitchCount));
    const auto prof = pitch_class_profile(ExpandedMelody(frames));
    for (int c = 0; c < 12; ++c) {
      int count = 0;
      for (int f : frames) count += (f % 12 == c);
      CHECK(prof[static_cast<std::size_t>(c)] == count);
    }
  }
}

TEST_CASE("Krumhansl-Schmuckler finds C major for the C major scale") {
  // Brute force over all 24 keys with the oracle picks the same winner.
  PitchClassProfile scale{};
  for (int pc : {0, 2, 4, 5, 7, 9, 11}) scale[static_cast<std::size_t>(pc)] = 1.0;
  int best_t = -1;
  Mode best_m = Mode::major;
  double best_r = -2;
  for (Mode m : {Mode::major, Mode::minor})
    for (int t = 0; t < 12; ++t)
      if (const double r = pearson_oracle(scale, t, m); r > best_r) best_r = r, best_t = t, best_m = m;
  CHECK(best_t == 0);
  CHECK(best_m == Mode::major);

  const auto k = estimate_key(scale);
  CHECK(k.tonic == 0);
  CHECK(k.mode == Mode::major);
  CHECK(k.r == doctest::Approx(best_r).epsilon(1e-12));
}

TEST_CASE("key estimation is rotation equivariant") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    PitchClassProfile p{};
    for (auto& v : p) v = std::floor(10 * uniform01(rng));
    p[0] += 1;  // never constant
    const auto base = estimate_key(p);
    for (int k = 0; k < 12; ++k) {
      const auto rk = estimate_key(rotate(p, k));
      CHECK(rk.tonic == (base.tonic + k) % 12);
      CHECK(rk.mode == base.mode);
      CHECK(rk.r == base.r);
    }
  }
  PitchClassProfile flat{};
  flat.fill(3.0);
  CHECK_THROWS_AS(estimate_key(flat), DegenerateProfile);
}

TEST_CASE("key accuracy") {
  const MidiSequence gt({{60, 4}, {64, 2}, {67, 2}, {62, 1}, {65, 1}, {71, 1}, {72, 3}});
  CHECK(key_accuracy(gt, gt, 0, Mode::major).value() == doctest::Approx(1.0));

  const auto pred = transpose(gt, 6);
  const double expected =
      pearson_oracle(pitch_class_profile(pred), 0, Mode::major) / pearson_oracle(pitch_class_profile(gt), 0, Mode::major);
  CHECK(key_accuracy(gt, pred, 0, Mode::major).value() == doctest::Approx(expected).epsilon(1e-12));

  // uniform chromatic ground truth: zero variance, r undefined, sample excluded
  std::vector<NoteEvent> chromatic;
  for (int k = 0; k < 12; ++k) chromatic.push_back({60 + k, 2});
  CHECK_FALSE(key_accuracy(MidiSequence(chromatic), gt, 0, Mode::major).has_value());
}

TEST_CASE("attribute binning with boundary drop") {
  const BinningConfig cfg;
  const MidiSequence center({{56, 100}});
  auto a = bin_attributes(center, 120.0, 0.9, {}, cfg);
  REQUIRE(a.pitch_category.has_value());
  CHECK(kPitchLabels[static_cast<std::size_t>(*a.pitch_category)] == "medium");

  a = bin_attributes(center, 120.0, 0.2, {}, cfg);
  CHECK_FALSE(a.tempo_category.has_value());

  // 32 + 48 * 2/5 = 51.2 is a bin edge
  CHECK_FALSE(bin_with_margin(51.2, 32, 80, 5, 0.02).has_value());
  CHECK(bin_with_margin(51.2 + 1.0, 32, 80, 5, 0.02) == 2);
  CHECK(bin_with_margin(20.0, 32, 80, 5, 0.02) == 0);
  CHECK(bin_with_margin(99.0, 32, 80, 5, 0.02) == 4);

  std::vector<NoteEvent> chromatic;
  for (int k = 0; k < 12; ++k) chromatic.push_back({50 + k, 2});
  CHECK_FALSE(bin_attributes(MidiSequence(chromatic), std::nullopt, std::nullopt).key.has_value());
  const MidiSequence scale({{60, 4}, {62, 2}, {64, 2}, {65, 2}, {67, 3}, {69, 2}, {71, 1}, {72, 4}});
  CHECK(bin_attributes(scale, std::nullopt, std::nullopt).key.has_value());
}

TEST_CASE("render_prompt fills and omits clauses") {
  AttributeSet a;
  a.key = KeyEstimate{0, Mode::major, 0.9};
  a.pitch_category = 2;
  a.tempo_category = 3;
  a.duration_category = 0;
  a.emotion_keywords = {"happy"};

  Rng no_switch(1);
  const auto s = render_prompt(a, 0, no_switch, TemplateSet::builtin(), 0.0);
  CHECK(s.find("C major") != std::string::npos);
  CHECK(s.find("medium") != std::string::npos);
  CHECK(s.find("fast") != std::string::npos);
  CHECK(s.find("very short") != std::string::npos);
  CHECK(s.find("happy") != std::string::npos);

  Rng always(1);
  CHECK(render_prompt(a, 0, always, TemplateSet::builtin(), 1.0).find("A minor") != std::string::npos);

  Rng r1(99), r2(99);
  CHECK(render_prompt(a, 5, r1) == render_prompt(a, 5, r2));

  Rng rng(3);
  const AttributeSet none;
  for (int t = 0; t < kDefaultMelodyTemplates; ++t) {
    const auto minimal = render_prompt(none, t, rng);
    CHECK(minimal.find('{') == std::string::npos);
  }
  CHECK(render_prompt(none, 0, rng) == "A melody");
  CHECK_THROWS_AS(render_prompt(a, 8, rng), InvalidInput);
  CHECK_THROWS_AS(render_prompt(a, -1, rng), InvalidInput);
}

TEST_CASE("shipped template file matches the built-in set") {
  const auto file = TemplateSet::load(std::string(SONGGEN_DATA_DIR) + "/melody_templates.txt");
  const auto builtin = TemplateSet::builtin();
  REQUIRE(file.size() == builtin.size());
  CHECK(file.size() == static_cast<std::size_t>(kDefaultMelodyTemplates));
  for (std::size_t i = 0; i < file.size(); ++i) CHECK(file.line(i) == builtin.line(i));
}

TEST_CASE("conditioning dropout") {
  const PromptBundle b{"la la", "A melody in C major", "a warm pop track"};
  Rng rng(8);
  for (int i = 0; i < 100; ++i) {
    const auto out = apply_condition_dropout(b, rng, 0.0, 0.0);
    CHECK(out.melody_prompt == b.melody_prompt);
    CHECK(out.accomp_prompt == b.accomp_prompt);
  }
  for (int i = 0; i < 100; ++i) {
    const auto out = apply_condition_dropout(b, rng, 0.1, 1.0);
    CHECK_FALSE(out.melody_prompt.has_value());
    CHECK_FALSE(out.accomp_prompt.has_value());
    CHECK(out.lyrics_text == b.lyrics_text);
  }
  int dropped_melody = 0, dropped_accomp = 0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    const auto out = apply_condition_dropout(b, rng);
    dropped_melody += !out.melody_prompt.has_value();
    dropped_accomp += !out.accomp_prompt.has_value();
    REQUIRE(out.lyrics_text == b.lyrics_text);
  }
  CHECK(std::abs(dropped_melody / double(draws) - 0.19) <= 0.01);
  CHECK(std::abs(dropped_accomp / double(draws) - 0.19) <= 0.01);
  CHECK_THROWS_AS(apply_condition_dropout(b, rng, 1.5, 0.0), InvalidInput);
}

TEST_CASE("word prompt encoder covers rendered prompts") {
  const WordPromptEncoder enc;
  Rng rng(6);
  AttributeSet a;
  a.key = KeyEstimate{7, Mode::minor, 0.8};
  a.pitch_category = 4;
  a.tempo_category = 0;
  a.duration_category = 3;
  a.emotion_keywords = {"dreamy", "calm"};
  for (int t = 0; t < kDefaultMelodyTemplates; ++t)
    for (int id : enc.encode(render_prompt(a, t, rng))) CHECK(id > 0);
  CHECK(enc.encode("zzzz")[0] == 0);
  CHECK(split_words("F# Minor, piano!") == std::vector<std::string>{"f#", "minor", "piano"});
}
