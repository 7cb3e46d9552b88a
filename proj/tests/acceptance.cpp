// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
// Usage: acceptance [criterion numbers...]   (all ten when none are given)

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "gradcheck.hpp"
#include "songgen/accomp_diffusion.hpp"
#include "songgen/audio.hpp"
#include "songgen/corpus.hpp"
#include "songgen/error.hpp"
#include "songgen/eval_metrics.hpp"
#include "songgen/key_prompt.hpp"
#include "songgen/midi_io.hpp"
#include "songgen/midi_stage.hpp"
#include "songgen/pipeline.hpp"
#include "songgen/rvq.hpp"
#include "songgen/vocal_stage.hpp"

using namespace songgen;
namespace fs = std::filesystem;
using nn::Graph;
using nn::Mat;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  std::vector<std::string> failures;
  std::vector<std::string> notes;

  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void note(const std::string& s) { notes.push_back(s); }
};

fs::path work_root() { return fs::temp_directory_path() / "songgen_acceptance"; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// --- random objects ---------------------------------------------------------------

MidiSequence random_melody(Rng& rng, int max_notes, int max_dur, bool distinct_neighbours) {
  std::vector<NoteEvent> notes;
  const int n = 1 + uniform_int(rng, max_notes);
  for (int i = 0; i < n; ++i) {
    int p = kMinPitch + uniform_int(rng, kPitchCount);
    while (distinct_neighbours && !notes.empty() && p == notes.back().pitch) p = kMinPitch + uniform_int(rng, kPitchCount);
    notes.push_back({p, 1 + uniform_int(rng, max_dur)});
  }
  return MidiSequence(std::move(notes));
}

std::string random_text(Rng& rng) {
  static const std::vector<std::string> pieces{"zhang", "a", "ni", "hao", " ", "\"", "\\", "你好", "\t", "x"};
  std::string s;
  for (int i = uniform_int(rng, 8); i > 0; --i) s += pieces[static_cast<std::size_t>(uniform_int(rng, 10))];
  return s;
}

ClipManifest random_clip(Rng& rng, int index) {
  ClipManifest c;
  c.id = fmt::format("c{:05d}", index);
  c.lyrics = random_text(rng);
  for (int i = uniform_int(rng, 12); i > 0; --i) c.pinyin.push_back(uniform_int(rng, 60));
  c.midi = "clips/" + c.id + ".midi.json";
  for (int i = uniform_int(rng, 4); i > 0; --i) c.midi_variants.push_back(fmt::format("clips/{}.v{}.json", c.id, i));
  c.vocal = "clips/" + c.id + ".vocal.mel";
  c.accomp = "clips/" + c.id + ".accomp.mel";
  c.f0 = "clips/" + c.id + ".f0.json";
  c.singer = uniform_int(rng, 8);
  c.tempo_bpm = 60.0 + 120.0 * uniform01(rng);
  c.tempo_confidence = uniform01(rng);
  for (int i = uniform_int(rng, 3); i > 0; --i) c.emotion.emplace_back(kEmotionWords[static_cast<std::size_t>(uniform_int(rng, 8))]);
  c.accomp_caption = random_text(rng);
  c.key_tonic = uniform_int(rng, 12);
  c.key_mode = bernoulli(rng, 0.5) ? Mode::major : Mode::minor;
  c.split = bernoulli(rng, 0.8) ? "train" : "test";
  c.frames = 50 + uniform_int(rng, 1451);
  return c;
}

bool same_clip(const ClipManifest& a, const ClipManifest& b) {
  return a.id == b.id && a.lyrics == b.lyrics && a.pinyin == b.pinyin && a.midi == b.midi &&
         a.midi_variants == b.midi_variants && a.vocal == b.vocal && a.accomp == b.accomp && a.f0 == b.f0 &&
         a.singer == b.singer && a.tempo_bpm == b.tempo_bpm && a.tempo_confidence == b.tempo_confidence &&
         a.emotion == b.emotion && a.accomp_caption == b.accomp_caption && a.key_tonic == b.key_tonic &&
         a.key_mode == b.key_mode && a.split == b.split && a.frames == b.frames;
}

Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
  return m;
}

void jitter(nn::ParameterStore& ps, double amount, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& p : ps.all())
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += amount * standard_normal(rng);
}

std::vector<int> random_tokens(Rng& rng, const std::vector<int>& vocab, int steps) {
  std::vector<int> t;
  for (int i = 0; i < steps; ++i)
    for (int v : vocab) t.push_back(uniform_int(rng, v - 3));
  return t;
}

// Average ranks for ties, then Pearson on the ranks.
double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double num = 0, dx = 0, dy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    num += (rx[i] - mx) * (ry[i] - my);
    dx += (rx[i] - mx) * (rx[i] - mx);
    dy += (ry[i] - my) * (ry[i] - my);
  }
  return num / std::sqrt(dx * dy);
}

// --- 1. symbolic round trips -----------------------------------------------------

void criterion1(Outcome& out) {
  const auto t0 = Clock::now();
  const auto dir = work_root() / "roundtrip";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Rng rng(101);
  constexpr int kCases = 1000;
  std::map<std::string, int> bad;

  for (int i = 0; i < kCases; ++i) {
    const auto m = random_melody(rng, 30, 40, true);
    bad["expand/compress"] += !(compress(expand(m)) == m);
    std::vector<int> frames(1 + static_cast<std::size_t>(uniform_int(rng, 80)));
    for (auto& f : frames) f = kMinPitch + uniform_int(rng, 4);
    const ExpandedMelody e(frames);
    bad["expand/compress"] += !(expand(compress(e)) == e);

    const auto toks = encode_midi_tokens(m);
    bad["midi tokens"] += !(decode_midi_tokens(toks) == m);
    bad["midi tokens"] += !(encode_midi_tokens(decode_midi_tokens(toks)).tokens() == toks.tokens());

    bad["midi json"] += !(midi_from_json(nlohmann::json::parse(midi_to_json(m).dump())) == m);
    bad["midi records"] += !(midi_from_records(midi_to_records(m)) == m);
    bad["midi smf"] += !(midi_from_smf(midi_to_smf(m, 60.0 + uniform_int(rng, 120))) == m);
  }

  std::vector<ClipManifest> clips;
  for (int i = 0; i < kCases; ++i) {
    clips.push_back(random_clip(rng, i));
    bad["manifest record"] += !same_clip(ClipManifest::from_json(nlohmann::json::parse(clips.back().to_json().dump())), clips.back());
  }
  write_manifest(dir / "manifest.jsonl", clips);
  const auto back = read_manifest(dir / "manifest.jsonl");
  out.expect(back.clips.size() == clips.size(), "manifest file lost records");
  for (std::size_t i = 0; i < std::min(back.clips.size(), clips.size()); ++i) bad["manifest file"] += !same_clip(back.clips[i], clips[i]);

  const int book = 1 + uniform_int(rng, 1024);
  const auto vocab = vocal_vocab(book);
  for (int i = 0; i < kCases; ++i) {
    const int n = 1 + uniform_int(rng, 60);
    std::vector<int> t;
    for (int f = 0; f < n; ++f) {
      for (int q = 0; q < kLmCodebooks; ++q) t.push_back(uniform_int(rng, book));
      t.push_back(uniform_int(rng, kF0Bins + 1));
    }
    const VocalSequence v{FrameTokens(vocab, t), rng()};
    const auto p = dir / fmt::format("v{}.tok", i % 16);
    save_vocal_tokens(p, v);
    bad["vocal tokens"] += !(load_vocal_tokens(p) == v);

    std::vector<int> f0_tokens;
    for (int f = 0; f < n; ++f) f0_tokens.push_back(uniform_int(rng, kF0Bins + 1));
    std::vector<double> hz;
    std::vector<std::uint8_t> voiced;
    dequantize_f0(f0_tokens, hz, voiced);
    bad["f0 tokens"] += !(quantize_f0(hz, voiced).tokens == f0_tokens);

    F0Track track;
    for (int f = 0; f < n; ++f) {
      const bool on = bernoulli(rng, 0.7);
      track.voiced.push_back(on);
      track.f0_hz.push_back(on ? 50.0 + 800.0 * uniform01(rng) : 0.0);
    }
    save_f0(dir / "f0.json", track);
    const auto tb = load_f0(dir / "f0.json");
    bad["f0 file"] += !(tb.f0_hz == track.f0_hz && tb.voiced == track.voiced);

    const MatrixRM mel = random_mat(2 + uniform_int(rng, 40), kMelBins, rng).cast<float>().cast<double>();
    save_mel(dir / "m.mel", mel);
    bad["mel file"] += !(load_mel(dir / "m.mel") == mel);
  }

  for (const auto& [what, n] : bad) out.expect(n == 0, fmt::format("{}: {} of {} cases differ", what, n, kCases));
  const double secs = seconds_since(t0);
  out.expect(secs < 10.0, fmt::format("took {:.1f} s", secs));
  out.note(fmt::format("{} families x {} cases in {:.2f} s", bad.size(), kCases, secs));
  fs::remove_all(dir);
}

// --- 2. metric oracles ------------------------------------------------------------

void criterion2(Outcome& out) {
  const auto seq = [](std::vector<NoteEvent> n) { return MidiSequence(std::move(n)); };
  const auto a = seq({{60, 10}, {64, 10}});
  out.expect(apd(a, a) == 0.0, "apd identical");
  out.expect(apd(seq({{60, 5}}), seq({{62, 5}, {63, 5}})) == 2.5, "apd 60 vs 62.5");
  out.expect(apd(a, transpose(a, 3)) == 3.0, "apd transpose 3");
  out.expect(td(a, a) == 0.0, "td identical");
  const auto five = seq({{60, 500}}), six = seq({{60, 300}, {62, 310}});
  out.expect(std::abs(td(five, six) - 2.2) < 1e-12, "td 500 vs 610 frames");
  out.expect(td(five, six) == td(six, five), "td symmetric");

  out.expect(std::abs(distribution_similarity(a, a, DistributionAttr::pitch) - 100.0) < 1e-12, "PD identical");
  out.expect(std::abs(distribution_similarity(a, a, DistributionAttr::duration) - 100.0) < 1e-12, "DD identical");
  out.expect(distribution_similarity(seq({{60, 4}}), seq({{70, 9}}), DistributionAttr::pitch) == 0.0, "PD disjoint");
  out.expect(distribution_similarity(seq({{60, 4}}), seq({{70, 9}}), DistributionAttr::duration) == 0.0, "DD disjoint");
  const std::vector<double> h1{0.5, 0.5, 0.0}, h2{0.5, 0.0, 0.5};
  out.expect(histogram_intersection(h1, h2) == 50.0, "half-overlapping histograms");
  out.expect(distribution_similarity(seq({{60, 1}, {62, 1}}), seq({{60, 1}, {64, 1}}), DistributionAttr::pitch) == 50.0,
             "PD half overlap");

  out.expect(melody_distance(a, a) == 0.0, "MD identical");
  out.expect(melody_distance(std::vector<int>{60}, std::vector<int>{61}) == 1.0, "MD [60] vs [61]");
  const std::vector<int> x{60, 60, 62}, y{60, 62, 62};
  const auto r = dtw(x, y);
  const std::vector<std::pair<int, int>> path{{0, 0}, {1, 0}, {2, 1}, {2, 2}};
  out.expect(r.cost == 0.0 && r.normalized() == 0.0, "DTW [60,60,62] vs [60,62,62] cost");
  out.expect(r.path == path, "DTW path (1,1)(2,1)(3,2)(3,3)");

  const std::vector<double> f0{100, 200, 300, 400, 500, 0, 0, 150, 250, 350};
  const std::vector<std::uint8_t> v{1, 1, 1, 1, 1, 0, 0, 1, 1, 1};
  std::vector<std::uint8_t> flipped;
  for (auto b : v) flipped.push_back(!b);
  auto off = f0;
  off[2] = 300 * 1.25;
  out.expect(ffe(f0, v, f0, v) == 0.0, "FFE identical");
  out.expect(ffe(f0, v, f0, flipped) == 1.0, "FFE flipped voicing");
  out.expect(ffe(f0, v, off, v) == 0.1, "FFE one bad frame of ten");
  bool threw = false;
  try {
    ffe(f0, v, std::vector<double>(3), v);
  } catch (const InvalidInput&) {
    threw = true;
  }
  out.expect(threw, "FFE length mismatch is InvalidInput");

  // ground truth against itself on synthetic clips
  CorpusConfig cc;
  cc.n_clips = 40;
  std::vector<EvalPair> pairs;
  for (int i = 0; i < cc.n_clips; ++i) {
    const auto c = synth_clip(cc, i);
    pairs.push_back({c.meta.id, c.midi, c.midi, c.meta.key_tonic, c.meta.key_mode, c.meta.tempo_bpm, c.f0, c.f0});
  }
  for (bool rounded : {false, true}) {
    const auto rep = evaluate_corpus(pairs, {.rounded = rounded});
    const std::string tag = rounded ? " (rounded)" : "";
    out.expect(rep.ka && *rep.ka == 1.0, "GT KA" + tag);
    out.expect(rep.apd == 0.0 && rep.td == 0.0 && rep.md == 0.0, "GT APD/TD/MD" + tag);
    out.expect(std::abs(rep.pd - 100.0) < 1e-9 && std::abs(rep.dd - 100.0) < 1e-9, "GT PD/DD" + tag);
    out.expect(rep.ffe && *rep.ffe == 0.0, "GT FFE" + tag);
    if (!rounded)
      out.note(fmt::format("GT-vs-GT on {} clips: KA {} APD {} TD {} PD {} DD {} MD {} FFE {}", pairs.size(), rep.ka.value_or(-1),
                           rep.apd, rep.td, rep.pd, rep.dd, rep.md, rep.ffe.value_or(-1)));
  }
}

// --- 3. key estimation --------------------------------------------------------------

void criterion3(Outcome& out) {
  CorpusConfig cc;
  cc.n_clips = 200;
  int match = 0;
  std::vector<MidiSequence> melodies;
  for (int i = 0; i < cc.n_clips; ++i) {
    const auto c = synth_clip(cc, i);
    const auto k = estimate_key(pitch_class_profile(c.midi));
    match += k.tonic == c.meta.key_tonic && k.mode == c.meta.key_mode;
    if (melodies.size() < 50) melodies.push_back(c.midi);
  }
  out.expect(match >= 180, fmt::format("key match {} / 200", match));

  int exact = 0, total = 0;
  for (const auto& m : melodies) {
    const auto base = estimate_key(pitch_class_profile(m));
    int lo = kMaxPitch, hi = kMinPitch;
    for (const auto& n : m.notes()) lo = std::min(lo, n.pitch), hi = std::max(hi, n.pitch);
    for (int k = 0; k < 12; ++k) {
      const int shift = hi + k <= kMaxPitch ? k : k - 12;
      if (lo + shift < kMinPitch) {
        out.expect(false, "melody too wide to transpose");
        continue;
      }
      const auto rk = estimate_key(pitch_class_profile(transpose(m, shift)));
      ++total;
      exact += rk.tonic == (base.tonic + k) % 12 && rk.mode == base.mode && rk.r == base.r;
    }
  }
  out.expect(exact == total && total == 600, fmt::format("rotation equivariance {} / {}", exact, total));
  out.note(fmt::format("key match {}/200, rotations exact {}/{}", match, exact, total));
}

// --- 4. conditioning dropout ----------------------------------------------------------

void criterion4(Outcome& out) {
  Rng rng(404);
  const int draws = 100000;
  int first = 0, second = 0;
  for (int i = 0; i < draws; ++i) {
    const auto d = draw_condition_dropout(rng);
    first += d.drop_first;
    second += d.drop_second;
  }
  const double r1 = first / double(draws), r2 = second / double(draws);
  out.expect(std::abs(r1 - 0.19) <= 0.01, fmt::format("first prompt drop rate {:.4f}", r1));
  out.expect(std::abs(r2 - 0.19) <= 0.01, fmt::format("second prompt drop rate {:.4f}", r2));
  out.note(fmt::format("drop rates {:.4f} / {:.4f} over {} draws", r1, r2, draws));
}

// --- 5. multi-scale LM ----------------------------------------------------------------

MultiScaleConfig lm_miniature(std::vector<int> vocab) {
  MultiScaleConfig c;
  c.vocab_sizes = std::move(vocab);
  c.d_global = 16;
  c.layers_global = 2;
  c.heads_global = 2;
  c.d_local = 8;
  c.layers_local = 2;
  c.heads_local = 2;
  c.max_positions = 64;
  c.condition_vocab[SegmentKind::pinyin] = {11};
  c.condition_vocab[SegmentKind::midi_notes] = {5, 7};
  return c;
}

void criterion5(Outcome& out) {
  {
    MultiScaleLM m(lm_miniature({9, 9}), 5);
    jitter(m.params(), 0.1, 6);
    Rng rng(1);
    int broken = 0;
    for (int trial = 0; trial < 20; ++trial) {
      const Mat h = random_mat(7, 16, rng);
      const int at = uniform_int(rng, 7);
      Mat h2 = h;
      h2.row(at) = random_mat(1, 16, rng);
      Graph g(false);
      const Mat o = m.global_forward(g, g.constant(h)).value();
      const Mat o2 = m.global_forward(g, g.constant(h2)).value();
      broken += (o.topRows(at) - o2.topRows(at)).norm() != 0.0;
      broken += (o.row(at) - o2.row(at)).norm() == 0.0;
    }
    out.expect(broken == 0, fmt::format("global causality: {} violations", broken));
  }
  {
    MultiScaleLM m(lm_miniature({9, 12, 7}), 7);
    jitter(m.params(), 0.1, 8);
    Rng rng(9);
    int broken = 0;
    for (int trial = 0; trial < 20; ++trial) {
      const Mat o = random_mat(4, 16, rng);
      const auto toks = random_tokens(rng, {9, 12, 7}, 4);
      Graph g(false);
      const auto logits = m.local_forward(g, g.constant(o), toks);
      for (int t = 0; t < 3; ++t) {
        auto changed = toks;
        for (int i = 0; i < 4; ++i)
          for (int u = t; u < 3; ++u) {
            auto& tok = changed[static_cast<std::size_t>(i * 3 + u)];
            tok = (tok + 1) % 4;
          }
        const auto l2 = m.local_forward(g, g.constant(o), changed);
        broken += (l2[static_cast<std::size_t>(t)].value() - logits[static_cast<std::size_t>(t)].value()).norm() != 0.0;
      }
    }
    out.expect(broken == 0, fmt::format("local causality: {} violations", broken));
  }
  for (int v : {16, 200, 1027}) {
    MultiScaleConfig cfg = lm_miniature({v, v});
    cfg.d_global = 64;
    cfg.d_local = 32;
    MultiScaleLM m(cfg, 10);
    Rng rng(11);
    const FrameTokens target(cfg.vocab_sizes, random_tokens(rng, cfg.vocab_sizes, 30));
    const std::vector<ConditionSegment> seq{condition_segment(SegmentKind::pinyin, {1, 2, 3}), target_segment(target, false)};
    const double rel = std::abs(m.nll(seq) - std::log(double(v))) / std::log(double(v));
    out.expect(rel < 0.02, fmt::format("init loss off ln {} by {:.3f}%", v, 100 * rel));
    out.note(fmt::format("init loss vs ln {}: {:.2f}%", v, 100 * rel));
  }
  {
    MultiScaleConfig cfg = lm_miniature({7, 6, 5});
    cfg.max_positions = 12;
    MultiScaleLM m(cfg, 15);
    jitter(m.params(), 0.3, 16);
    Rng rng(17);
    const FrameTokens ref(cfg.vocab_sizes, random_tokens(rng, cfg.vocab_sizes, 3));
    const FrameTokens target(cfg.vocab_sizes, random_tokens(rng, cfg.vocab_sizes, 4));
    ConditionSegment notes;
    notes.kind = SegmentKind::midi_notes;
    notes.channels = 2;
    notes.ids = {1, 2, 4, 6, 0, 3};
    notes.loss_mask.assign(3, 0);
    const std::vector<ConditionSegment> seq{notes, condition_segment(SegmentKind::pinyin, {3, 10}), reference_segment(ref),
                                            target_segment(target, true)};
    const auto r = gradcheck::check(m.params(), [&](Graph& g) { return m.nll_loss(g, seq); }, 1e-6, 12);
    out.expect(r.worst_relative < 1e-4, fmt::format("gradient check {:.2e} in {}", r.worst_relative, r.worst_param));
    out.note(fmt::format("gradcheck worst {:.2e}", r.worst_relative));
  }
  {
    MultiScaleConfig cfg;
    cfg.vocab_sizes = {40, 40};
    cfg.d_global = 64;
    cfg.layers_global = 2;
    cfg.heads_global = 4;
    cfg.d_local = 32;
    cfg.layers_local = 2;
    cfg.heads_local = 4;
    cfg.max_positions = 64;
    cfg.condition_vocab[SegmentKind::pinyin] = {20};
    MultiScaleLM m(cfg, 18);
    Rng rng(19);
    const FrameTokens target(cfg.vocab_sizes, random_tokens(rng, cfg.vocab_sizes, 20));
    const std::vector<std::vector<ConditionSegment>> batch{
        {condition_segment(SegmentKind::pinyin, {1, 5, 7}), target_segment(target, true)}};
    nn::Adam opt({.lr = 3e-3});
    const auto t0 = Clock::now();
    double loss = 0.0;
    int steps = 0;
    while (steps < 500) {
      loss = train_step(m, opt, batch);
      ++steps;
      if (loss < 0.05) break;
    }
    const double secs = seconds_since(t0);
    out.expect(loss < 0.05, fmt::format("overfit loss {:.4f} after {} steps", loss, steps));
    out.expect(secs < 300.0, fmt::format("overfit took {:.0f} s", secs));
    const std::vector<ConditionSegment> prefix{batch[0][0], target_segment(FrameTokens(cfg.vocab_sizes, {}), false)};
    Rng gen(1);
    const auto res = m.generate(prefix, {.max_steps = 40, .sampler = {.temperature = 0.0}}, gen);
    out.expect(res.stopped_on_eos && res.tokens == target, "greedy decode differs from the memorised sequence");
    out.note(fmt::format("overfit {:.4f} in {} steps, {:.1f} s", loss, steps, secs));
  }
}

// --- 6. stage-1 alignment ---------------------------------------------------------------

MultiScaleConfig vocal_sizes() {
  MultiScaleConfig s;
  s.d_global = 32;
  s.layers_global = 2;
  s.heads_global = 4;
  s.d_local = 16;
  s.layers_local = 1;
  s.heads_local = 2;
  return s;
}

void criterion6(Outcome& out) {
  constexpr int kBook = 16;
  Rng rng(606);
  MatrixRM feats(400, 6);
  for (Eigen::Index i = 0; i < feats.size(); ++i) feats.data()[i] = standard_normal(rng);
  const auto cb = fit_rvq(feats, {.num_books = 4, .book_size = kBook, .iterations = 3, .seed = 6}).codebooks;
  auto random_vocal = [&](int frames, const std::vector<int>* f0) {
    std::vector<std::uint16_t> codes;
    std::vector<int> f;
    for (int i = 0; i < frames; ++i) {
      for (int q = 0; q < 3; ++q) codes.push_back(static_cast<std::uint16_t>(uniform_int(rng, kBook)));
      f.push_back(f0 ? (*f0)[static_cast<std::size_t>(i)] : uniform_int(rng, kF0Bins + 1));
    }
    return make_vocal_sequence(AcousticFrameCodes(3, codes), f, cb);
  };

  {
    MultiScaleLM m(vocal_model_config(vocal_sizes(), VocalMode::expanded, kBook, 40, 100, 16), 8);
    jitter(m.params(), 0.3, 9);
    const auto ref = random_vocal(10, nullptr);
    int ok = 0;
    const int n = 500;
    for (int trial = 0; trial < n; ++trial) {
      std::vector<int> pinyin;
      for (int i = 1 + uniform_int(rng, 6); i > 0; --i) pinyin.push_back(1 + uniform_int(rng, 39));
      const auto midi = random_melody(rng, 6, 12, false);
      Rng g(static_cast<std::uint64_t>(trial));
      const auto v = generate_vocal(m, VocalMode::expanded, pinyin, midi, ref, cb.hash(), g);
      ok += v.frames() == static_cast<int>(expand(midi).size());
    }
    out.expect(ok == n, fmt::format("length matches expanded MIDI on {} / {}", ok, n));
    out.note(fmt::format("length {}/{}", ok, n));
  }

  struct Toy {
    std::vector<int> pinyin;
    MidiSequence midi;
    VocalSequence target;
  };
  std::vector<Toy> toys;
  for (int c = 0; c < 20; ++c) {
    Toy t;
    for (int i = 0; i < 3; ++i) t.pinyin.push_back(1 + uniform_int(rng, 39));
    std::vector<NoteEvent> notes;
    for (int i = 3 + uniform_int(rng, 3); i > 0; --i) {
      int p = 48 + uniform_int(rng, 24);
      while (!notes.empty() && p == notes.back().pitch) p = 48 + uniform_int(rng, 24);
      notes.push_back({p, 3 + uniform_int(rng, 6)});
    }
    t.midi = MidiSequence(notes);
    std::vector<int> f0 = expand(t.midi).pitches();
    for (int& p : f0) p -= kMinPitch;
    t.target = random_vocal(static_cast<int>(f0.size()), &f0);
    toys.push_back(std::move(t));
  }
  const auto ref = random_vocal(8, nullptr);
  MultiScaleLM m(vocal_model_config(vocal_sizes(), VocalMode::expanded, kBook, 40, 60, 8), 12);
  std::vector<std::vector<ConditionSegment>> batch;
  for (const auto& t : toys)
    batch.push_back(build_stage1_sequence(VocalMode::expanded, t.pinyin, t.midi, ref, &t.target, kBook).segments);
  nn::Adam opt({.lr = 3e-3});
  const auto t0 = Clock::now();
  const int steps = 400;
  double loss = 0.0;
  for (int i = 0; i < steps; ++i) {
    opt.options().lr = nn::cosine_lr(3e-3, i, steps);
    loss = train_step(m, opt, batch);
  }
  std::vector<double> f0s, pitches;
  int unvoiced = 0;
  for (const auto& t : toys) {
    Rng g(1);
    const auto v = generate_vocal(m, VocalMode::expanded, t.pinyin, t.midi, ref, cb.hash(), g, {.sampler = {.temperature = 0.0}});
    const auto e = expand(t.midi).pitches();
    const auto f = v.f0_tokens();
    for (std::size_t i = 0; i < f.size() && i < e.size(); ++i) {
      if (f[i] == kF0Unvoiced) {
        ++unvoiced;
        continue;
      }
      f0s.push_back(f[i]);
      pitches.push_back(e[i]);
    }
  }
  const double rho = f0s.size() > 2 ? spearman(f0s, pitches) : 0.0;
  out.expect(rho > 0.8, fmt::format("Spearman rho {:.3f}", rho));
  out.note(fmt::format("20-clip overfit loss {:.3f} in {:.0f} s, rho {:.3f} over {} voiced frames ({} unvoiced)", loss,
                       seconds_since(t0), rho, f0s.size(), unvoiced));
}

// --- 7. diffusion numerics ---------------------------------------------------------------

DenoiserConfig denoiser_miniature() {
  DenoiserConfig c;
  c.latent = 4;
  c.width = 8;
  c.layers = 1;
  c.heads = 2;
  c.book_size = 5;
  c.prompt_vocab = 3;
  c.max_prompt = 4;
  c.max_latent = 16;
  c.schedule_steps = 10;
  return c;
}

AccompCondition condition(int vocal_frames, std::vector<int> prompt, int book, Rng& rng) {
  AccompCondition c;
  for (int i = 0; i < vocal_frames * kLmCodebooks; ++i) c.codes.push_back(uniform_int(rng, book));
  c.accomp_prompt = std::move(prompt);
  return c;
}

void criterion7(Outcome& out) {
  const auto s = NoiseSchedule::scaled_linear(100);
  Rng rng(707);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Mat z0 = random_mat(6, 5, rng);
    const int t = 1 + uniform_int(rng, 100);
    Mat z = z0, acc = Mat::Zero(6, 5);
    for (int k = 1; k <= t; ++k) {
      const Mat e = random_mat(6, 5, rng);
      z = std::sqrt(1.0 - s.beta(k)) * z + std::sqrt(s.beta(k)) * e;
      acc = std::sqrt(1.0 - s.beta(k)) * acc + std::sqrt(s.beta(k)) * e;
    }
    const Mat eps = acc / std::sqrt(1.0 - s.alpha_bar(t));
    worst = std::max(worst, (forward_diffuse(z0, t, eps, s) - z).cwiseAbs().maxCoeff());
  }
  out.expect(worst < 1e-6, fmt::format("closed form vs chain {:.2e}", worst));

  const Mat z0 = Mat::Constant(1, 1, 2.5);
  double sum = 0.0, sq = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double z = forward_diffuse(z0, 100, random_mat(1, 1, rng), s)(0, 0);
    sum += z;
    sq += z * z;
  }
  const double mean = sum / n, var = sq / n - mean * mean;
  out.expect(std::abs(mean) < 0.05 && std::abs(var - 1.0) < 0.05, fmt::format("z_T mean {:.4f} variance {:.4f}", mean, var));

  {
    LatentDenoiser m(denoiser_miniature(), 3);
    int shapes = 0, bad = 0;
    for (int frames : {1, 2, 5, 6, 10}) {
      for (int plen : {0, 1, 3, 4, 7}) {
        std::vector<int> prompt;
        for (int i = 0; i < plen; ++i) prompt.push_back(uniform_int(rng, 3));
        const auto c = condition(frames, prompt, 5, rng);
        const int n_lat = latent_frames_for_vocal(frames);
        if (n_lat > 16) continue;
        Graph g(false);
        const Mat z = random_mat(n_lat, 4, rng);
        auto a = m.vocal_features(g, c.codes, n_lat);
        auto sp = m.prompt_features(g, c.prompt());
        const int kept = std::min(plen, 4);
        ++shapes;
        bad += sp.rows() != kept;
        bad += m.forward_full(g, g.constant(z), a, sp, 5).rows() != kept + n_lat;
        bad += m.predict_eps(g, g.constant(z), a, sp, 5).rows() != n_lat;
      }
    }
    out.expect(bad == 0, fmt::format("Z_t length contract broken {} times", bad));
    out.note(fmt::format("Z_t lengths checked on {} shapes", shapes));
  }
  {
    auto cfg = denoiser_miniature();
    cfg.p_drop_each = 0.0;
    cfg.p_drop_joint = 0.0;
    LatentDenoiser m(cfg, 13);
    const auto c = condition(5, {2, 0, 1}, 5, rng);
    const Mat lat = random_mat(latent_frames_for_vocal(5), 4, rng);
    const auto res = gradcheck::check(m.params(), [&](Graph& g) {
      Rng r(99);
      return diffusion_loss(m, g, lat, c, r);
    });
    out.expect(res.worst_relative < 1e-4, fmt::format("denoiser gradient check {:.2e} in {}", res.worst_relative, res.worst_param));
    out.note(fmt::format("denoiser gradcheck {:.2e}", res.worst_relative));
  }
  {
    DenoiserConfig cfg;
    cfg.latent = 4;
    cfg.width = 32;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.book_size = 8;
    cfg.prompt_vocab = 4;
    cfg.max_latent = 16;
    cfg.schedule_steps = 50;
    LatentDenoiser m(cfg, 17);
    const auto c = condition(8, {1, 3}, 8, rng);
    const int n_lat = latent_frames_for_vocal(8);
    Mat target(n_lat, 4);
    for (int i = 0; i < n_lat; ++i)
      for (int j = 0; j < 4; ++j) target(i, j) = 0.8 * std::sin(0.7 * i + 1.3 * j);
    nn::Adam opt;
    const std::vector<Mat> lat(8, target);
    const std::vector<AccompCondition> conds(8, c);
    const int steps = 3000;
    for (int step = 0; step < steps; ++step) {
      opt.options().lr = nn::cosine_lr(3e-3, step, steps);
      ldm_train_step(m, opt, lat, conds, rng);
    }
    const auto sched = m.schedule();
    const auto prep = prepare_condition(m, c, n_lat);
    double mse = 0.0;
    int count = 0;
    for (int t = 1; sched.alpha_bar(t) >= 0.5; ++t)
      for (int k = 0; k < 8; ++k) {
        const Mat zt = forward_diffuse(target, t, random_mat(n_lat, 4, rng), sched);
        mse += (predict_z0(m, zt, prep, t) - target).squaredNorm() / static_cast<double>(target.size());
        ++count;
      }
    mse /= count;
    out.expect(mse < 1e-3, fmt::format("constant-latent MSE {:.2e}", mse));
    out.note(fmt::format("constant-latent MSE {:.2e}", mse));
  }
}

// --- 8. RVQ -------------------------------------------------------------------------

void criterion8(Outcome& out) {
  Rng rng(808);
  MatrixRM train(3000, 8);
  for (Eigen::Index i = 0; i < train.size(); ++i) train.data()[i] = standard_normal(rng);
  const auto fit = fit_rvq(train, {.num_books = 8, .book_size = 64, .iterations = 8, .seed = 1});
  const auto& cb = fit.codebooks;
  const int n = 10000;
  MatrixRM frames(n, 8);
  for (Eigen::Index i = 0; i < frames.size(); ++i) frames.data()[i] = 1.5 * standard_normal(rng);
  const auto codes = rvq_encode_frames(frames, cb);
  int violations = 0, above_input = 0;
  std::vector<double> mean_norm(9, 0.0);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd x = frames.row(i).transpose();
    std::vector<std::uint16_t> c(static_cast<std::size_t>(cb.num_books()));
    for (int q = 0; q < cb.num_books(); ++q) c[static_cast<std::size_t>(q)] = codes.at(i, q);
    double prev = x.norm();
    mean_norm[0] += prev / n;
    for (int q = 1; q <= cb.num_books(); ++q) {
      const double r = (x - rvq_decode(std::span(c).first(static_cast<std::size_t>(q)), cb)).norm();
      // depths count from one book; book 1 has no zero codeword
      if (q == 1)
        above_input += r > prev;
      else
        violations += r > prev;
      mean_norm[static_cast<std::size_t>(q)] += r / n;
      prev = r;
    }
  }
  out.expect(violations == 0, fmt::format("{} residual increases over {} frames x 8 depths", violations, n));
  out.note(fmt::format("{} of {} frames lie closer to the origin than to any book-1 codeword", above_input, n));

  const auto three = truncate_codes(codes, kLmCodebooks);
  bool same = three.codes_per_frame() == 3 && three.frames() == n;
  for (int i = 0; same && i < n; ++i)
    for (int q = 0; q < 3; ++q) same = same && three.at(i, q) == codes.at(i, q);
  out.expect(same, "truncation to 3 books does not keep the leading codes");
  out.expect(truncate_codes(codes, 8) == codes, "truncation to all books is not the identity");
  bool threw = false;
  try {
    truncate_codes(codes, 0);
  } catch (const InvalidInput&) {
    threw = true;
  }
  out.expect(threw, "truncation to 0 books accepted");
  const auto dec3 = rvq_decode_frames(three, cb);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(cb.dim());
    for (int q = 0; q < 3; ++q) sum += cb.book(q).row(codes.at(i, q)).transpose();
    worst = std::max(worst, (dec3.row(i).transpose() - sum).cwiseAbs().maxCoeff());
  }
  out.expect(worst == 0.0, "decoding 3 books is not the sum of their codewords");
  out.note(fmt::format("mean residual by depth {:.3f} -> {:.3f} -> {:.3f}", mean_norm[0], mean_norm[3], mean_norm[8]));
}

// --- 9. end-to-end run through the CLI ----------------------------------------------

struct CliRun {
  fs::path dir;
  int total_failures = 0;
};

int run_cli(const std::string& args, const fs::path& log, double& secs) {
  const std::string cmd = fmt::format("\"{}\" {} > \"{}\" 2>&1", SONGGEN_CLI, args, log.string());
  const auto t0 = Clock::now();
  const int rc = std::system(cmd.c_str());
  secs = seconds_since(t0);
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

std::pair<double, double> log_window_means(const fs::path& log) {
  std::vector<double> losses;
  std::ifstream in(log);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) losses.push_back(nlohmann::json::parse(line).at("loss").get<double>());
  if (losses.empty()) return {0.0, 0.0};
  const std::size_t w = std::max<std::size_t>(1, std::min<std::size_t>(20, losses.size() / 10));
  const double first = std::accumulate(losses.begin(), losses.begin() + static_cast<long>(w), 0.0) / static_cast<double>(w);
  const double last = std::accumulate(losses.end() - static_cast<long>(w), losses.end(), 0.0) / static_cast<double>(w);
  return {first, last};
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

const std::vector<std::string> kTrainCommands{"fit-rvq", "train-vae", "train-midi-lm", "train-vocal-lm", "train-ldm"};

// Trains every stage into `run` and sings once; returns the summed wall time or -1 on failure.
double train_and_sing(Outcome& out, const fs::path& corpus, const fs::path& run, const std::string& lyrics,
                      const std::string& ref) {
  double total = 0.0, secs = 0.0;
  fs::create_directories(run.parent_path());
  for (const auto& cmd : kTrainCommands) {
    const int rc = run_cli(fmt::format("{} --run {} --manifest {}", cmd, q(run), q(corpus / "manifest.jsonl")),
                           run.parent_path() / (run.filename().string() + "." + cmd + ".log"), secs);
    total += secs;
    out.note(fmt::format("{} {}: {:.0f} s", run.filename().string(), cmd, secs));
    if (rc != 0) {
      out.expect(false, fmt::format("{} exited with {}", cmd, rc));
      return -1.0;
    }
  }
  const int rc = run_cli(fmt::format("sing --run {} --lyrics \"{}\" --ref {} --out {} --seed 7", q(run), lyrics, ref, q(run / "song")),
                         run.parent_path() / (run.filename().string() + ".sing.log"), secs);
  total += secs;
  if (rc != 0) {
    out.expect(false, fmt::format("sing exited with {}", rc));
    return -1.0;
  }
  return total;
}

void criterion9(Outcome& out) {
  const auto root = work_root() / "e2e";
  fs::remove_all(root);
  fs::create_directories(root);
  double secs = 0.0;
  const auto corpus = root / "corpus";
  if (run_cli(fmt::format("prepare-synth --out {} --clips 200", q(corpus)), root / "prepare.log", secs) != 0) {
    out.expect(false, "prepare-synth failed");
    return;
  }
  double wall = secs;
  const auto manifest = read_manifest(corpus / "manifest.jsonl");
  out.expect(manifest.clips.size() == 200, fmt::format("corpus has {} clips", manifest.clips.size()));
  const auto test = manifest.split("test");
  const auto train = manifest.split("train");
  if (test.empty() || train.empty()) {
    out.expect(false, "corpus lacks a train or test split");
    return;
  }
  const std::string lyrics = test.front()->lyrics, ref = train.front()->id;

  const double a = train_and_sing(out, corpus, root / "runA", lyrics, ref);
  if (a < 0) return;
  wall += a;
  out.expect(wall < 3600.0, fmt::format("desk run took {:.0f} s", wall));
  out.note(fmt::format("prepare + train + sing wall time {:.0f} s", wall));

  const auto song = root / "runA" / "song";
  for (const char* f : {"midi.json", "stage0.json", "stage1.json", "stage2.json", "vocal.tok", "vocal.mel", "accomp.mel",
                        "vocal.wav", "accomp.wav", "mix.wav"})
    out.expect(fs::exists(song / f) && fs::file_size(song / f) > 0, fmt::format("missing artifact {}", f));
  try {
    const auto midi = load_midi_json(song / "midi.json");
    const auto vocal = load_vocal_tokens(song / "vocal.tok");
    const auto vmel = load_mel(song / "vocal.mel"), amel = load_mel(song / "accomp.mel");
    const int n = midi.total_frames();
    const auto rows = static_cast<Eigen::Index>(std::ceil(1.5 * n));
    out.expect(vocal.frames() == n, "vocal length differs from the melody");
    out.expect(vmel.rows() == rows && amel.rows() == rows, "mel lengths differ from ceil(1.5 N)");
    for (const char* w : {"vocal.wav", "accomp.wav", "mix.wav"})
      out.expect(read_wav(song / w).samples.size() == static_cast<std::size_t>(rows * kHopSize), fmt::format("{} length", w));
    out.note(fmt::format("song: {} notes, {} frames", midi.size(), n));
  } catch (const std::exception& e) {
    out.expect(false, std::string("unreadable artifact: ") + e.what());
  }

  const RunPaths paths{root / "runA"};
  for (auto stage : {Stage::rvq, Stage::vae, Stage::midi, Stage::vocal, Stage::ldm}) {
    const auto [first, last] = log_window_means(paths.log(stage));
    out.expect(first > 0.0 && last <= 0.5 * first, fmt::format("{} loss {:.3f} -> {:.3f} did not halve", to_string(stage), first, last));
    out.note(fmt::format("{} loss {:.3f} -> {:.3f}", to_string(stage), first, last));
  }

  // same seed in the same run
  if (run_cli(fmt::format("sing --run {} --lyrics \"{}\" --ref {} --out {} --seed 7", q(root / "runA"), lyrics, ref,
                          q(root / "songA2")),
              root / "runA.sing2.log", secs) == 0)
    out.expect(tree_bytes(song) == tree_bytes(root / "songA2"), "second sing in the same run differs");
  else
    out.expect(false, "second sing failed");

  // independent retrain
  const double b = train_and_sing(out, corpus, root / "runB", lyrics, ref);
  if (b < 0) return;
  const auto ta = tree_bytes(root / "runA"), tb = tree_bytes(root / "runB");
  std::vector<std::string> differ;
  for (const auto& [k, v] : ta)
    if (!tb.contains(k) || tb.at(k) != v) differ.push_back(k);
  for (const auto& [k, v] : tb)
    if (!ta.contains(k)) differ.push_back(k);
  out.expect(differ.empty(), fmt::format("runs differ in {} files, first {}", differ.size(), differ.empty() ? "" : differ.front()));
  out.note(fmt::format("{} files byte-identical across two runs; run A {:.0f} s, run B {:.0f} s", ta.size(), a, b));
}

// --- 10. ablation ---------------------------------------------------------------------

void criterion10(Outcome& out) {
  const auto root = work_root() / "e2e";
  const RunPaths paths{root / "runA"};
  if (!fs::exists(paths.ldm())) {
    out.expect(false, "needs the trained run from criterion 9");
    return;
  }
  const auto cfg = PipelineConfig::load(paths.config());
  const auto manifest = read_manifest(root / "corpus" / "manifest.jsonl");
  const auto t0 = Clock::now();
  const auto rep = run_ablation(cfg, paths, manifest, {.md_margin = 0.25, .seed = 0});
  std::cout << rep.table();
  out.expect(rep.rows.size() == 4, fmt::format("{} rows", rep.rows.size()));
  for (const auto& r : rep.rows)
    out.expect(std::isfinite(r.ffe) && std::isfinite(r.md) && r.clips > 0, ablation_label(r.mode) + " row is not finite");
  const auto ok = rep.expanded_non_inferior();
  out.expect(ok && *ok, "expanded MD is worse than unexpand + margin");
  const auto* e = rep.find(VocalMode::expanded);
  const auto* u = rep.find(VocalMode::unexpand);
  if (e && u) out.note(fmt::format("MD expanded {:.3f} vs unexpand {:.3f} (margin 0.25), {:.0f} s", e->md, u->md, seconds_since(t0)));
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
      {"symbolic round trips", criterion1},     {"metric oracles", criterion2},
      {"key estimation", criterion3},           {"conditioning dropout", criterion4},
      {"multi-scale LM correctness", criterion5}, {"stage-1 alignment", criterion6},
      {"diffusion numerics", criterion7},       {"RVQ residuals and truncation", criterion8},
      {"end-to-end desk run", criterion9},      {"ablation parity", criterion10},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  fs::create_directories(work_root());

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.contains(id)) continue;
    Outcome out;
    const auto t0 = Clock::now();
    try {
      criteria[i].second(out);
    } catch (const std::exception& e) {
      out.failures.push_back(std::string("threw ") + e.what());
    }
    const bool pass = out.failures.empty();
    failed += !pass;
    std::cout << fmt::format("{} criterion {}: {} ({:.1f} s)\n", pass ? "PASS" : "FAIL", id, criteria[i].first, seconds_since(t0));
    for (const auto& n : out.notes) std::cout << "    " << n << "\n";
    for (const auto& f : out.failures) std::cout << "    failed: " << f << "\n";
    std::cout.flush();
  }
  if (failed == 0 && wanted.empty()) fs::remove_all(work_root());
  return failed == 0 ? 0 : 1;
}
