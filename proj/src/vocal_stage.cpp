#include "songgen/vocal_stage.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "songgen/binary_io.hpp"
#include "songgen/error.hpp"

namespace songgen {

namespace {

constexpr char kVocalMagic[8] = {'S', 'G', 'V', 'T', 'O', 'K', '0', '1'};
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool uses_e2e_vocab(VocalMode m) { return m == VocalMode::e2e_with_midi; }

std::vector<int> e2e_vocab(int k, int max_frames) {
  return {k + kPitchCount + 3, k + max_frames + 3, k + 3, kF0Vocab};
}

std::vector<int> clip_pinyin(std::span<const int> pinyin, int& dropped) {
  if (pinyin.empty()) throw InvalidInput("stage 1 needs pinyin tokens");
  if (static_cast<int>(pinyin.size()) > kMaxPinyinTokens) {
    dropped += static_cast<int>(pinyin.size()) - kMaxPinyinTokens;
    pinyin = pinyin.first(kMaxPinyinTokens);
  }
  return {pinyin.begin(), pinyin.end()};
}

}  // namespace

double midi_to_hz(double midi) { return 440.0 * std::pow(2.0, (midi - 69.0) / 12.0); }
double hz_to_midi(double hz) { return 69.0 + 12.0 * std::log2(hz / 440.0); }
double f0_bin_hz(int bin) { return midi_to_hz(kMinPitch + bin); }

F0Tokens quantize_f0(std::span<const double> f0_hz, std::span<const std::uint8_t> voiced) {
  if (f0_hz.size() != voiced.size()) throw InvalidInput("f0 and voicing tracks differ in length");
  F0Tokens out;
  out.tokens.reserve(f0_hz.size());
  for (std::size_t i = 0; i < f0_hz.size(); ++i) {
    if (!voiced[i]) {
      out.tokens.push_back(kF0Unvoiced);
      continue;
    }
    if (!(f0_hz[i] > 0.0) || !std::isfinite(f0_hz[i]))
      throw InvalidInput("voiced frame " + std::to_string(i) + " has non-positive f0");
    int bin = static_cast<int>(std::lround(hz_to_midi(f0_hz[i]))) - kMinPitch;
    if (bin < 0 || bin >= kF0Bins) {
      ++out.clamped;
      bin = std::clamp(bin, 0, kF0Bins - 1);
    }
    out.tokens.push_back(bin);
  }
  return out;
}

void dequantize_f0(std::span<const int> tokens, std::vector<double>& f0_hz, std::vector<std::uint8_t>& voiced) {
  f0_hz.assign(tokens.size(), 0.0);
  voiced.assign(tokens.size(), 0);
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] >= 0 && tokens[i] < kF0Bins) {
      f0_hz[i] = f0_bin_hz(tokens[i]);
      voiced[i] = 1;
    }
}

std::vector<int> vocal_vocab(int book_size) { return {book_size + 3, book_size + 3, book_size + 3, kF0Vocab}; }

std::vector<int> VocalSequence::f0_tokens() const {
  std::vector<int> f(static_cast<std::size_t>(frames()));
  for (int i = 0; i < frames(); ++i) f[static_cast<std::size_t>(i)] = tokens.at(i, kLmCodebooks);
  return f;
}

AcousticFrameCodes VocalSequence::codes() const {
  std::vector<std::uint16_t> c;
  c.reserve(static_cast<std::size_t>(frames() * kLmCodebooks));
  for (int i = 0; i < frames(); ++i)
    for (int q = 0; q < kLmCodebooks; ++q) c.push_back(static_cast<std::uint16_t>(tokens.at(i, q)));
  return AcousticFrameCodes(kLmCodebooks, std::move(c));
}

VocalSequence VocalSequence::head(int n) const {
  const int keep = std::min(n, frames());
  std::vector<int> t(tokens.tokens().begin(), tokens.tokens().begin() + keep * kVocalSlots);
  return {FrameTokens(tokens.vocab_sizes(), std::move(t)), codec_hash};
}

VocalSequence make_vocal_sequence(const AcousticFrameCodes& codes, std::span<const int> f0_tokens, const Codebooks& cb) {
  if (codes.codes_per_frame() < kLmCodebooks) throw InvalidInput("need at least three codes per frame");
  if (static_cast<std::size_t>(codes.frames()) != f0_tokens.size())
    throw AlignmentError("codes and f0 tokens differ in length");
  std::vector<int> t;
  t.reserve(f0_tokens.size() * kVocalSlots);
  for (int i = 0; i < codes.frames(); ++i) {
    for (int q = 0; q < kLmCodebooks; ++q) t.push_back(codes.at(i, q));
    t.push_back(f0_tokens[static_cast<std::size_t>(i)]);
  }
  return {FrameTokens(vocal_vocab(cb.book_size()), std::move(t)), cb.hash()};
}

void save_vocal_tokens(const std::filesystem::path& path, const VocalSequence& v) {
  BinaryWriter w(path);
  w.bytes(kVocalMagic, 8);
  w.pod(v.codec_hash);
  w.pod(static_cast<std::uint32_t>(v.tokens.vocab_sizes()[0] - 3));
  w.pod(static_cast<std::uint32_t>(v.frames()));
  for (int t : v.tokens.tokens()) w.pod(static_cast<std::uint16_t>(t));
  w.close();
}

VocalSequence load_vocal_tokens(const std::filesystem::path& path) {
  BinaryReader r(path);
  char magic[8];
  r.bytes(magic, 8);
  if (!std::equal(magic, magic + 8, kVocalMagic)) throw FormatError("not a vocal token file: " + path.string());
  VocalSequence v;
  v.codec_hash = r.pod<std::uint64_t>();
  const auto k = r.pod<std::uint32_t>();
  const auto n = r.pod<std::uint32_t>();
  if (k == 0 || k > 65532 || n > 1'000'000) throw FormatError("implausible header in " + path.string());
  std::vector<int> t(static_cast<std::size_t>(n) * kVocalSlots);
  for (auto& x : t) x = r.pod<std::uint16_t>();
  if (!r.at_end()) throw FormatError("trailing bytes in " + path.string());
  try {
    v.tokens = FrameTokens(vocal_vocab(static_cast<int>(k)), std::move(t));
  } catch (const InvalidInput& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return v;
}

std::string to_string(VocalMode m) {
  switch (m) {
    case VocalMode::expanded: return "expanded";
    case VocalMode::unexpand: return "unexpand";
    case VocalMode::e2e_with_midi: return "e2e_with_midi";
    case VocalMode::e2e_without_midi: return "e2e_without_midi";
  }
  return "?";
}

VocalMode vocal_mode_from_string(const std::string& s) {
  for (auto m : {VocalMode::expanded, VocalMode::unexpand, VocalMode::e2e_with_midi, VocalMode::e2e_without_midi})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown vocal mode '" + s + "'");
}

AssembledSequence build_stage1_sequence(VocalMode mode, std::span<const int> pinyin, const MidiSequence& midi,
                                        const VocalSequence& ref, const VocalSequence* target, int book_size,
                                        int max_frames) {
  if (ref.frames() == 0) throw InvalidInput("reference vocal is empty");
  if (ref.tokens.vocab_sizes() != vocal_vocab(book_size)) throw CodecMismatch("reference tokens use another codebook size");
  if (target && target->tokens.vocab_sizes() != vocal_vocab(book_size))
    throw CodecMismatch("target tokens use another codebook size");
  if (target && ref.codec_hash != target->codec_hash) throw CodecMismatch("reference and target come from different codecs");
  const bool needs_midi = mode != VocalMode::e2e_without_midi;
  if (needs_midi && midi.empty()) throw InvalidInput("this vocal mode needs a melody");
  if (target && needs_midi && target->frames() != midi.total_frames())
    throw AlignmentError("target has " + std::to_string(target->frames()) + " frames, melody has " +
                         std::to_string(midi.total_frames()));

  AssembledSequence out;
  out.segments.push_back(condition_segment(SegmentKind::pinyin, clip_pinyin(pinyin, out.truncated_tokens)));
  if (mode == VocalMode::expanded) {
    std::vector<int> ids = expand(midi).pitches();
    for (int& p : ids) p -= kMinPitch;
    out.segments.push_back(condition_segment(SegmentKind::expanded_midi, std::move(ids)));
  } else if (mode == VocalMode::unexpand) {
    const auto t = encode_midi_tokens(midi, max_frames);
    ConditionSegment s;
    s.kind = SegmentKind::midi_notes;
    s.channels = 2;
    s.ids = t.tokens();
    s.loss_mask.assign(static_cast<std::size_t>(t.steps()), 0);
    out.segments.push_back(std::move(s));
  }
  out.segments.push_back(reference_segment(ref.tokens));

  const int k = book_size;
  const auto vocab = uses_e2e_vocab(mode) ? e2e_vocab(k, max_frames) : vocal_vocab(k);
  ConditionSegment tgt;
  tgt.kind = SegmentKind::target;
  tgt.channels = kVocalSlots;
  for (int v : vocab) tgt.ids.push_back(bos_id(v));
  tgt.loss_mask.push_back(0);
  if (mode == VocalMode::e2e_with_midi) {
    const auto mt = encode_midi_tokens(midi, max_frames);
    for (int i = 0; i < mt.steps(); ++i) {
      tgt.ids.insert(tgt.ids.end(), {k + mt.at(i, 0), k + mt.at(i, 1), pad_id(vocab[2]), pad_id(vocab[3])});
      tgt.loss_mask.push_back(1);
    }
    for (int v : vocab) tgt.ids.push_back(bos_id(v));
    tgt.loss_mask.push_back(1);
  }
  if (target) {
    tgt.ids.insert(tgt.ids.end(), target->tokens.tokens().begin(), target->tokens.tokens().end());
    tgt.loss_mask.insert(tgt.loss_mask.end(), static_cast<std::size_t>(target->frames()), 1);
    tgt.terminated = mode == VocalMode::e2e_with_midi || mode == VocalMode::e2e_without_midi;
  }
  out.segments.push_back(std::move(tgt));
  return out;
}

MultiScaleConfig vocal_model_config(MultiScaleConfig sizes, VocalMode mode, int book_size, int pinyin_vocab,
                                    int max_target_frames, int max_notes, int max_frames) {
  sizes.vocab_sizes = uses_e2e_vocab(mode) ? e2e_vocab(book_size, max_frames) : vocal_vocab(book_size);
  sizes.condition_vocab.clear();
  sizes.condition_vocab[SegmentKind::pinyin] = {pinyin_vocab};
  if (mode == VocalMode::expanded) sizes.condition_vocab[SegmentKind::expanded_midi] = {kPitchCount};
  if (mode == VocalMode::unexpand) sizes.condition_vocab[SegmentKind::midi_notes] = {kPitchCount, max_frames + 3};
  int target_len = max_target_frames + 2;
  if (mode == VocalMode::e2e_with_midi) target_len += max_notes + 1;
  sizes.max_positions = std::max({target_len, kReferenceFrames, kMaxPinyinTokens, max_notes});
  sizes.text_encoder_layers = 0;
  sizes.validate();
  return sizes;
}

VocalSequence generate_vocal(const MultiScaleLM& model, VocalMode mode, std::span<const int> pinyin,
                             const MidiSequence& midi, const VocalSequence& ref, std::uint64_t codec_hash, Rng& rng,
                             const VocalGenerateOptions& opts) {
  const auto& vs = model.config().vocab_sizes;
  if (static_cast<int>(vs.size()) != kVocalSlots) throw ConfigError("vocal model must have four slots");
  const int k = vs[2] - 3;
  const auto expect = uses_e2e_vocab(mode) ? e2e_vocab(k, opts.max_frames) : vocal_vocab(k);
  if (vs != expect) throw ConfigError("model vocabularies do not match vocal mode " + to_string(mode));
  if (ref.codec_hash != codec_hash) throw CodecMismatch("reference tokens come from another codec");

  auto seq = build_stage1_sequence(mode, pinyin, midi, ref, nullptr, k, opts.max_frames);
  GenerateOptions g;
  g.sampler = opts.sampler;
  if (mode == VocalMode::e2e_without_midi) {
    g.max_steps = opts.max_free_frames;
    g.stop_on_eos = true;
  } else {
    g.max_steps = midi.total_frames();
    g.stop_on_eos = false;
  }
  if (uses_e2e_vocab(mode))
    g.mask = [k](std::span<const int>, int, int slot, std::span<double> logits) {
      if (slot < 2)
        for (std::size_t v = static_cast<std::size_t>(k); v < logits.size(); ++v) logits[v] = kNegInf;
    };
  const auto res = model.generate(seq.segments, g, rng);
  if (res.tokens.steps() == 0) throw EmptyGeneration("vocal model emitted EOS before any frame");
  if (mode != VocalMode::e2e_without_midi && res.tokens.steps() != midi.total_frames())
    throw AlignmentError("length-forced decoding produced " + std::to_string(res.tokens.steps()) + " frames");
  return {FrameTokens(vocal_vocab(k), res.tokens.tokens()), codec_hash};
}

MatrixRM resample_rows(const MatrixRM& m, int rows) {
  const auto idx = nn::nearest_resample_index(static_cast<int>(m.rows()), rows);
  MatrixRM out(rows, m.cols());
  for (int i = 0; i < rows; ++i) out.row(i) = m.row(idx[static_cast<std::size_t>(i)]);
  return out;
}

MatrixRM render_toy_vocal(const VocalSequence& v, const Codebooks& cb, const FeatureProjection& proj) {
  if (v.codec_hash != cb.hash()) throw CodecMismatch("vocal tokens were produced by another codebook set");
  if (v.frames() == 0) throw InvalidInput("nothing to render");
  const MatrixRM feats = rvq_decode_frames(v.codes(), cb);
  const MatrixRM mel50 = proj.to_log_mel(feats);
  const int out_rows = static_cast<int>(std::ceil(v.frames() * kMelFrameRateHz / kTokenRateHz - 1e-9));
  return resample_rows(mel50, out_rows);
}

}  // namespace songgen
