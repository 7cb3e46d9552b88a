#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "songgen/error.hpp"
#include "songgen/vocal_stage.hpp"

using namespace songgen;

namespace {

constexpr int kBook = 16;

Codebooks tiny_codebooks(std::uint64_t seed) {
  Rng rng(seed);
  MatrixRM x(400, 6);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = standard_normal(rng);
  return fit_rvq(x, {.num_books = 4, .book_size = kBook, .iterations = 3, .seed = seed}).codebooks;
}

VocalSequence random_vocal(Rng& rng, int frames, const Codebooks& cb) {
  std::vector<std::uint16_t> codes;
  std::vector<int> f0;
  for (int i = 0; i < frames; ++i) {
    for (int q = 0; q < 3; ++q) codes.push_back(static_cast<std::uint16_t>(uniform_int(rng, kBook)));
    f0.push_back(uniform_int(rng, kF0Bins + 1));
  }
  return make_vocal_sequence(AcousticFrameCodes(3, codes), f0, cb);
}

MultiScaleConfig tiny_sizes() {
  MultiScaleConfig s;
  s.d_global = 32;
  s.layers_global = 2;
  s.heads_global = 4;
  s.d_local = 16;
  s.layers_local = 1;
  s.heads_local = 2;
  return s;
}

}  // namespace

TEST_CASE("f0 quantisation") {
  const std::vector<double> f0{440.0, 0.0, 261.63, 20.0, 5000.0};
  const std::vector<std::uint8_t> voiced{1, 0, 1, 1, 1};
  const auto q = quantize_f0(f0, voiced);
  CHECK(q.tokens[0] == 69 - kMinPitch);
  CHECK(q.tokens[1] == kF0Unvoiced);
  CHECK(q.tokens[2] == 60 - kMinPitch);
  CHECK(q.tokens[3] == 0);
  CHECK(q.tokens[4] == kF0Bins - 1);
  CHECK(q.clamped == 2);
  CHECK(69.0 + 12.0 * std::log2(261.63 / 440.0) == doctest::Approx(60.0).epsilon(1e-4));
  CHECK_THROWS_AS(quantize_f0(std::vector<double>{0.0}, std::vector<std::uint8_t>{1}), InvalidInput);
  CHECK_THROWS_AS(quantize_f0(std::vector<double>{1.0, 2.0}, std::vector<std::uint8_t>{1}), InvalidInput);
}

TEST_CASE("f0 bin centres reconstruct within half a semitone") {
  Rng rng(1);
  std::vector<double> f0;
  std::vector<std::uint8_t> voiced;
  for (int i = 0; i < 5000; ++i) {
    f0.push_back(midi_to_hz(kMinPitch - 0.49 + uniform01(rng) * (kMaxPitch - kMinPitch + 0.98)));
    voiced.push_back(1);
  }
  const auto q = quantize_f0(f0, voiced);
  CHECK(q.clamped == 0);
  std::vector<double> back;
  std::vector<std::uint8_t> v;
  dequantize_f0(q.tokens, back, v);
  for (std::size_t i = 0; i < f0.size(); ++i) {
    REQUIRE(v[i] == 1);
    REQUIRE(std::abs(hz_to_midi(back[i]) - hz_to_midi(f0[i])) <= 0.5 + 1e-9);
  }
}

TEST_CASE("vocal token files round trip and detect corruption") {
  const auto cb = tiny_codebooks(2);
  Rng rng(3);
  const auto v = random_vocal(rng, 37, cb);
  const auto path = std::filesystem::temp_directory_path() / "songgen_vocal.tok";
  save_vocal_tokens(path, v);
  CHECK(load_vocal_tokens(path) == v);
  {
    std::ofstream f(path, std::ios::binary | std::ios::app);
    f.put('x');
  }
  CHECK_THROWS_AS(load_vocal_tokens(path), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("stage 1 sequence layout") {
  const auto cb = tiny_codebooks(4);
  Rng rng(5);
  const MidiSequence midi({{60, 2}, {62, 3}});
  const auto ref = random_vocal(rng, 4, cb);
  const auto target = random_vocal(rng, 5, cb);
  const std::vector<int> pinyin{7, 8, 9};

  SUBCASE("expanded layout matches a golden record") {
    const auto s = build_stage1_sequence(VocalMode::expanded, pinyin, midi, ref, &target, kBook).segments;
    REQUIRE(s.size() == 4);
    CHECK(s[0].kind == SegmentKind::pinyin);
    CHECK(s[0].ids == pinyin);
    CHECK(s[1].kind == SegmentKind::expanded_midi);
    CHECK(s[1].ids == std::vector<int>{28, 28, 30, 30, 30});
    CHECK(s[2].kind == SegmentKind::reference_acoustic);
    CHECK(s[2].ids == ref.tokens.tokens());
    CHECK(s[3].kind == SegmentKind::target);
    std::vector<int> golden{kBook, kBook, kBook, kF0Vocab - 3};
    golden.insert(golden.end(), target.tokens.tokens().begin(), target.tokens.tokens().end());
    CHECK(s[3].ids == golden);
    CHECK(s[3].loss_mask == std::vector<std::uint8_t>{0, 1, 1, 1, 1, 1});
    int masked_tokens = 0;
    for (const auto& seg : s)
      for (auto m : seg.loss_mask) masked_tokens += m * seg.channels;
    CHECK(masked_tokens == 4 * target.frames());
    CHECK_FALSE(s[3].terminated);
  }
  SUBCASE("length mismatch is an alignment error") {
    const auto shorter = random_vocal(rng, 4, cb);
    CHECK_THROWS_AS(build_stage1_sequence(VocalMode::expanded, pinyin, midi, ref, &shorter, kBook), AlignmentError);
    CHECK_THROWS_AS(build_stage1_sequence(VocalMode::unexpand, pinyin, midi, ref, &shorter, kBook), AlignmentError);
    CHECK_NOTHROW(build_stage1_sequence(VocalMode::e2e_without_midi, pinyin, midi, ref, &shorter, kBook));
  }
  SUBCASE("unexpand carries (pitch, offset) pairs") {
    const auto s = build_stage1_sequence(VocalMode::unexpand, pinyin, midi, ref, &target, kBook).segments;
    CHECK(s[1].kind == SegmentKind::midi_notes);
    CHECK(s[1].channels == 2);
    CHECK(s[1].ids == std::vector<int>{28, 1, 30, 4});
  }
  SUBCASE("e2e with MIDI puts notes and a separator before the vocal") {
    const auto s = build_stage1_sequence(VocalMode::e2e_with_midi, pinyin, midi, ref, &target, kBook).segments;
    REQUIRE(s.size() == 3);
    const auto& t = s[2];
    CHECK(t.steps() == 1 + 2 + 1 + 5);
    CHECK(t.ids[4] == kBook + 28);
    CHECK(t.ids[5] == kBook + 1);
    CHECK(t.terminated);
    CHECK(t.loss_mask.front() == 0);
    CHECK(std::count(t.loss_mask.begin(), t.loss_mask.end(), 1) == 8);
  }
  SUBCASE("codec mismatch") {
    auto other = target;
    other.codec_hash ^= 1;
    CHECK_THROWS_AS(build_stage1_sequence(VocalMode::expanded, pinyin, midi, ref, &other, kBook), CodecMismatch);
  }
}

TEST_CASE("length forcing holds in every melody-conditioned mode") {
  const auto cb = tiny_codebooks(6);
  Rng rng(7);
  const auto ref = random_vocal(rng, 10, cb);
  const std::vector<int> pinyin{1, 2, 3};
  for (auto mode : {VocalMode::expanded, VocalMode::unexpand, VocalMode::e2e_with_midi, VocalMode::e2e_without_midi}) {
    CAPTURE(to_string(mode));
    MultiScaleLM m(vocal_model_config(tiny_sizes(), mode, kBook, 40, 60, 16), 8);
    Rng jit(9);
    for (const auto& p : m.params().all())
      for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += 0.3 * standard_normal(jit);
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<NoteEvent> notes;
      for (int i = 0; i < 1 + uniform_int(rng, 4); ++i) notes.push_back({50 + uniform_int(rng, 20), 1 + uniform_int(rng, 12)});
      const MidiSequence midi(notes);
      Rng g(static_cast<std::uint64_t>(trial));
      try {
        const auto v = generate_vocal(m, mode, pinyin, midi, ref, cb.hash(), g, {.max_free_frames = 30});
        if (mode != VocalMode::e2e_without_midi) CHECK(v.frames() == midi.total_frames());
        CHECK(v.tokens.vocab_sizes() == vocal_vocab(kBook));
        for (int i = 0; i < v.frames(); ++i) {
          for (int q = 0; q < 3; ++q) CHECK(v.tokens.at(i, q) < kBook);
          CHECK(v.tokens.at(i, 3) <= kF0Unvoiced);
        }
      } catch (const EmptyGeneration&) {
        CHECK(mode == VocalMode::e2e_without_midi);
      }
    }
  }
}

TEST_CASE("vocal overfit: greedy decoding reproduces a memorised clip") {
  const auto cb = tiny_codebooks(10);
  Rng rng(11);
  const MidiSequence midi({{60, 6}, {64, 5}, {67, 7}});
  const auto ref = random_vocal(rng, 8, cb);
  std::vector<std::uint16_t> codes;
  std::vector<int> f0;
  const auto expanded = expand(midi);
  for (const int p : expanded.pitches()) {
    for (int q = 0; q < 3; ++q) codes.push_back(static_cast<std::uint16_t>(uniform_int(rng, kBook)));
    f0.push_back(p - kMinPitch);
  }
  const auto target = make_vocal_sequence(AcousticFrameCodes(3, codes), f0, cb);
  const std::vector<int> pinyin{4, 5, 6};
  MultiScaleLM m(vocal_model_config(tiny_sizes(), VocalMode::expanded, kBook, 40, 40, 8), 12);
  const std::vector<std::vector<ConditionSegment>> batch{
      build_stage1_sequence(VocalMode::expanded, pinyin, midi, ref, &target, kBook).segments};
  nn::Adam opt({.lr = 3e-3});
  double loss = 1e9;
  for (int i = 0; i < 600 && loss > 0.02; ++i) loss = train_step(m, opt, batch);
  CHECK(loss < 0.05);
  Rng g(1);
  const auto v = generate_vocal(m, VocalMode::expanded, pinyin, midi, ref, cb.hash(), g, {.sampler = {.temperature = 0.0}});
  CHECK(v == target);
}

TEST_CASE("toy vocal rendering") {
  Rng rng(13);
  const int mel_bins = 80, dim = 32;
  const FeatureProjection proj(mel_bins, dim, std::log(1e-5), 14);
  MatrixRM mel(600, mel_bins);
  for (Eigen::Index r = 0; r < mel.rows(); ++r) {
    if (r % 40 == 0) {
      mel.row(r).setConstant(std::log(1e-5));
      continue;
    }
    const double level = -4.0 + 2.0 * standard_normal(rng);
    for (int b = 0; b < mel_bins; ++b) mel(r, b) = level - 0.05 * b + 0.5 * standard_normal(rng);
  }
  const MatrixRM feats = proj.to_features(mel);
  const auto fit = fit_rvq(feats, {.num_books = 8, .book_size = 64, .iterations = 6, .seed = 15});
  const auto& cb = fit.codebooks;
  const auto codes = rvq_encode_frames(feats, cb);
  std::vector<int> f0(static_cast<std::size_t>(codes.frames()), kF0Unvoiced);
  const auto v = make_vocal_sequence(codes, f0, cb);

  SUBCASE("output frame count is ceil(N * 1.5)") {
    for (int n : {1, 2, 3, 7, 100}) CHECK(render_toy_vocal(v.head(n), cb, proj).rows() == static_cast<int>(std::ceil(n * 1.5)));
  }
  SUBCASE("round trip error stays under the fit-time depth-3 residual") {
    const MatrixRM rendered = render_toy_vocal(v, cb, proj);
    const MatrixRM reference = resample_rows(proj.to_log_mel(feats), static_cast<int>(rendered.rows()));
    const double mae = (rendered - reference).cwiseAbs().mean();
    // Per-bin mean |P r| <= ||r|| / sqrt(bins) for orthonormal P; averaged over the fitted frames.
    const double bound = fit.mean_residual_norm[2] / std::sqrt(double(mel_bins));
    MESSAGE("render MAE " << mae << " bound " << bound);
    CHECK(mae <= bound);
  }
  SUBCASE("silence codes render near-silent mel") {
    const MatrixRM silence = MatrixRM::Constant(4, mel_bins, std::log(1e-5));
    const auto sc = rvq_encode_frames(proj.to_features(silence), cb);
    const auto sv = make_vocal_sequence(sc, std::vector<int>(4, kF0Unvoiced), cb);
    const MatrixRM out = render_toy_vocal(sv, cb, proj);
    CHECK(out.maxCoeff() < std::log(1e-5) + 2.0);
  }
  SUBCASE("codec mismatch") {
    auto bad = v;
    bad.codec_hash += 1;
    CHECK_THROWS_AS(render_toy_vocal(bad, cb, proj), CodecMismatch);
  }
}
