#include "doctest.h"

#include "songgen/error.hpp"
#include "songgen/lyrics.hpp"
#include "songgen/midi_stage.hpp"

using namespace songgen;

namespace {

MidiSequence random_melody(Rng& rng, int max_notes = 30) {
  std::vector<NoteEvent> notes;
  const int n = 1 + uniform_int(rng, max_notes);
  for (int i = 0; i < n; ++i) notes.push_back({kMinPitch + uniform_int(rng, kPitchCount), 1 + uniform_int(rng, 40)});
  return MidiSequence(std::move(notes));
}

int sum_mask(const std::vector<ConditionSegment>& segs) {
  int s = 0;
  for (const auto& seg : segs)
    for (auto m : seg.loss_mask) s += m;
  return s;
}

int total_steps(const std::vector<ConditionSegment>& segs) {
  int s = 0;
  for (const auto& seg : segs) s += seg.steps();
  return s;
}

}  // namespace

TEST_CASE("syllable inventory") {
  const auto& inv = SyllableInventory::builtin();
  CHECK(inv.syllable_count() == 14 + 21 * 14);
  const auto ids = inv.encode_lyrics("zhang a  xyz");
  REQUIRE(ids.size() == 3);
  CHECK(ids[0] > 0);
  CHECK(ids[1] > 0);
  CHECK(ids[2] == 0);
  CHECK(inv.syllable(ids[0] - 1) == "zhang");
  const auto py = inv.encode_pinyin("zhang a");
  REQUIRE(py.size() == 3);
  CHECK(inv.pinyin_token(py[0]) == "zh");
  CHECK(inv.pinyin_token(py[1]) == "ang");
  CHECK(inv.pinyin_token(py[2]) == "a");
  for (int i = 0; i < inv.syllable_count(); ++i) {
    const auto p = inv.encode_pinyin(inv.syllable(i));
    CHECK(!p.empty());
    for (int t : p) CHECK(t > 0);
  }
}

TEST_CASE("MIDI tokens: cumulative offsets") {
  const MidiSequence m({{60, 3}, {62, 2}});
  const auto t = encode_midi_tokens(m);
  REQUIRE(t.steps() == 2);
  CHECK(t.at(0, 0) + kMinPitch == 60);
  CHECK(t.at(1, 0) + kMinPitch == 62);
  CHECK(t.at(0, 1) + 1 == 3);
  CHECK(t.at(1, 1) + 1 == 5);
  const auto single = encode_midi_tokens(MidiSequence({{45, 17}}));
  CHECK(single.at(0, 1) + 1 == 17);
  CHECK(decode_midi_tokens(t) == m);
  CHECK(decode_midi_tokens(single) == MidiSequence({{45, 17}}));
}

TEST_CASE("MIDI token round trip over 1000 random melodies") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto m = random_melody(rng);
    REQUIRE(decode_midi_tokens(encode_midi_tokens(m)) == m);
  }
}

TEST_CASE("MIDI token errors") {
  CHECK_THROWS_AS(encode_midi_tokens(MidiSequence({{60, 1000}, {60, 501}})), ClipTooLong);
  CHECK_NOTHROW(encode_midi_tokens(MidiSequence({{60, 1000}, {60, 500}})));
  const FrameTokens bad({midi_pitch_vocab(), midi_offset_vocab()}, {0, 5, 1, 5});
  CHECK_THROWS_AS(decode_midi_tokens(bad), MalformedSequence);
  const FrameTokens special({midi_pitch_vocab(), midi_offset_vocab()}, {bos_id(midi_pitch_vocab()), 5});
  CHECK_THROWS_AS(decode_midi_tokens(special), MalformedSequence);
}

TEST_CASE("stage 0 sequence assembly") {
  const std::vector<int> lyrics{3, 4, 5, 6};
  const std::vector<int> prompt{1, 2};
  const auto target = encode_midi_tokens(MidiSequence({{60, 3}, {62, 2}, {64, 4}}));
  SUBCASE("without prompt the sequence starts at the lyrics") {
    const auto s = build_stage0_sequence(lyrics, std::nullopt, &target).segments;
    REQUIRE(s.size() == 2);
    CHECK(s[0].kind == SegmentKind::text_semantic);
    CHECK(s[1].kind == SegmentKind::target);
  }
  SUBCASE("mask and length contracts") {
    const auto s = build_stage0_sequence(lyrics, std::span<const int>(prompt), &target).segments;
    REQUIRE(s.size() == 3);
    CHECK(s[0].kind == SegmentKind::melody_prompt);
    CHECK(sum_mask(s) == target.steps());
    CHECK(total_steps(s) == 2 + 4 + 1 + 3);
    CHECK(s[2].ids[0] == bos_id(midi_pitch_vocab()));
  }
  SUBCASE("overlong lyrics are truncated and counted") {
    std::vector<int> longer(95, 1);
    const auto a = build_stage0_sequence(longer, std::nullopt, &target);
    CHECK(a.truncated_tokens == 15);
    CHECK(a.segments[0].steps() == kMaxLyricsTokens);
  }
  CHECK_THROWS_AS(build_stage0_sequence({}, std::nullopt, &target), InvalidInput);
}

TEST_CASE("offset mask keeps decoding monotone and inside the frame budget") {
  MultiScaleConfig sizes;
  sizes.d_global = 16;
  sizes.layers_global = 1;
  sizes.heads_global = 2;
  sizes.d_local = 8;
  sizes.layers_local = 1;
  sizes.heads_local = 2;
  sizes.text_encoder_layers = 1;
  const int max_frames = 40;
  MultiScaleLM m(midi_model_config(sizes, 10, 6, max_frames, 64), 3);
  Rng jit(4);
  for (const auto& p : m.params().all())
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += 0.5 * standard_normal(jit);
  const std::vector<int> lyrics{1, 2, 3};
  for (int seed = 0; seed < 30; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed));
    try {
      const auto g = generate_midi(m, lyrics, std::nullopt, rng,
                                   {.sampler = {.temperature = 1.5, .top_k = 0}, .max_notes = 64, .max_frames = max_frames});
      CHECK(g.midi.total_frames() <= max_frames);
      for (const auto& n : g.midi.notes()) CHECK(pitch_in_range(n.pitch));
      Rng again(static_cast<std::uint64_t>(seed));
      const auto b = generate_midi(m, lyrics, std::nullopt, again,
                                   {.sampler = {.temperature = 1.5, .top_k = 0}, .max_notes = 64,
                                    .max_frames = max_frames, .budget_frames = 12});
      CHECK(b.midi.total_frames() <= 12);
    } catch (const EmptyGeneration&) {
    }
  }
}

TEST_CASE("stage 0 overfit: greedy generation reproduces the melody") {
  MultiScaleConfig sizes;
  sizes.d_global = 64;
  sizes.layers_global = 2;
  sizes.heads_global = 4;
  sizes.d_local = 32;
  sizes.layers_local = 1;
  sizes.heads_local = 4;
  sizes.text_encoder_layers = 1;
  const auto& inv = SyllableInventory::builtin();
  MultiScaleLM m(midi_model_config(sizes, inv.lyrics_vocab_size(), 40, kMaxFrames, 64), 5);
  const auto lyrics = inv.encode_lyrics("ma li shan zhong ai");
  const std::vector<int> prompt{3, 7, 9};
  const MidiSequence melody({{60, 12}, {62, 6}, {64, 6}, {65, 25}, {67, 12}});
  const auto target = encode_midi_tokens(melody);
  const std::vector<std::vector<ConditionSegment>> batch{build_stage0_sequence(lyrics, std::span<const int>(prompt), &target).segments};
  nn::Adam opt({.lr = 3e-3});
  double loss = 1e9;
  for (int i = 0; i < 400 && loss > 0.02; ++i) loss = train_step(m, opt, batch);
  CHECK(loss < 0.05);
  Rng rng(1);
  const auto g = generate_midi(m, lyrics, std::span<const int>(prompt), rng, {.sampler = {.temperature = 0.0}});
  CHECK(g.midi == melody);
  CHECK_FALSE(g.truncated);
  Rng a(7), b(7);
  const auto s1 = generate_midi(m, lyrics, std::span<const int>(prompt), a);
  const auto s2 = generate_midi(m, lyrics, std::span<const int>(prompt), b);
  CHECK(s1.midi == s2.midi);
}
