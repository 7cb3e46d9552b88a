#include "songgen/midi_stage.hpp"

#include <algorithm>
#include <limits>

#include "songgen/error.hpp"

namespace songgen {

FrameTokens encode_midi_tokens(const MidiSequence& m, int max_frames) {
  if (m.empty()) throw InvalidInput("cannot tokenise an empty melody");
  if (m.total_frames() > max_frames)
    throw ClipTooLong("melody of " + std::to_string(m.total_frames()) + " frames exceeds " + std::to_string(max_frames));
  std::vector<int> toks;
  toks.reserve(m.size() * 2);
  int end = 0;
  for (const auto& n : m.notes()) {
    end += n.duration;
    toks.push_back(n.pitch - kMinPitch);
    toks.push_back(end - 1);
  }
  return FrameTokens({midi_pitch_vocab(), midi_offset_vocab(max_frames)}, std::move(toks));
}

MidiSequence decode_midi_tokens(const FrameTokens& t, double frame_rate_hz) {
  if (t.slots() != 2) throw MalformedSequence("MIDI tokens need exactly two slots");
  const int offset_limit = t.vocab_sizes()[1] - 3;
  std::vector<NoteEvent> notes;
  int prev = 0;
  for (int i = 0; i < t.steps(); ++i) {
    const int p = t.at(i, 0), o = t.at(i, 1);
    if (p >= kPitchCount) throw MalformedSequence("special token in pitch slot at step " + std::to_string(i));
    if (o >= offset_limit) throw MalformedSequence("special token in offset slot at step " + std::to_string(i));
    const int end = o + 1;
    if (end <= prev)
      throw MalformedSequence("offset " + std::to_string(end) + " does not exceed " + std::to_string(prev) + " at step " +
                              std::to_string(i));
    notes.push_back({p + kMinPitch, end - prev});
    prev = end;
  }
  return MidiSequence(std::move(notes), frame_rate_hz);
}

AssembledSequence build_stage0_sequence(std::span<const int> lyrics, std::optional<std::span<const int>> prompt,
                                        const FrameTokens* target, bool terminated) {
  if (lyrics.empty()) throw InvalidInput("stage 0 needs lyrics");
  AssembledSequence out;
  auto clip = [&](std::span<const int> s, int limit) {
    if (static_cast<int>(s.size()) > limit) {
      out.truncated_tokens += static_cast<int>(s.size()) - limit;
      s = s.first(static_cast<std::size_t>(limit));
    }
    return std::vector<int>(s.begin(), s.end());
  };
  if (prompt && !prompt->empty())
    out.segments.push_back(condition_segment(SegmentKind::melody_prompt, clip(*prompt, kMaxPromptTokens)));
  out.segments.push_back(condition_segment(SegmentKind::text_semantic, clip(lyrics, kMaxLyricsTokens)));
  if (target) {
    if (target->slots() != 2) throw InvalidInput("stage 0 target must have two slots");
    out.segments.push_back(target_segment(*target, terminated));
  } else {
    out.segments.push_back(target_segment(FrameTokens({midi_pitch_vocab(), midi_offset_vocab()}, {}), false));
  }
  return out;
}

MultiScaleConfig midi_model_config(MultiScaleConfig sizes, int lyrics_vocab, int prompt_vocab, int max_frames,
                                   int max_notes) {
  sizes.vocab_sizes = {midi_pitch_vocab(), midi_offset_vocab(max_frames)};
  sizes.condition_vocab.clear();
  sizes.condition_vocab[SegmentKind::text_semantic] = {lyrics_vocab};
  sizes.condition_vocab[SegmentKind::melody_prompt] = {prompt_vocab};
  sizes.max_positions = std::max({max_notes + 2, kMaxLyricsTokens, kMaxPromptTokens});
  sizes.validate();
  return sizes;
}

LogitMask midi_offset_mask(int max_frames) {
  return [max_frames](std::span<const int> generated, int step, int slot, std::span<double> logits) {
    constexpr double ninf = -std::numeric_limits<double>::infinity();
    const int prev_end = step > 0 ? generated[static_cast<std::size_t>((step - 1) * 2 + 1)] + 1 : 0;
    const int vocab = static_cast<int>(logits.size());
    if (slot == 0) {
      logits[static_cast<std::size_t>(bos_id(vocab))] = ninf;
      logits[static_cast<std::size_t>(pad_id(vocab))] = ninf;
      if (prev_end >= max_frames) {
        const int eos = eos_id(vocab);
        for (std::size_t v = 0; v < logits.size(); ++v)
          if (static_cast<int>(v) != eos) logits[v] = ninf;
      }
      return;
    }
    const std::size_t upto = std::min<std::size_t>(static_cast<std::size_t>(prev_end), logits.size());
    for (std::size_t v = 0; v < upto; ++v) logits[v] = ninf;
    for (std::size_t v = static_cast<std::size_t>(std::max(0, max_frames)); v < logits.size(); ++v) logits[v] = ninf;
  };
}

MidiGeneration generate_midi(const MultiScaleLM& model, std::span<const int> lyrics,
                             std::optional<std::span<const int>> prompt, Rng& rng, const MidiGenerateOptions& opts) {
  const auto& vs = model.config().vocab_sizes;
  if (vs.size() != 2 || vs[0] != midi_pitch_vocab() || vs[1] != midi_offset_vocab(opts.max_frames))
    throw ConfigError("model vocabularies do not match the MIDI tokenisation");
  auto seq = build_stage0_sequence(lyrics, prompt, nullptr);
  seq.segments.back() = target_segment(FrameTokens(vs, {}), false);
  GenerateOptions g{.max_steps = opts.max_notes, .sampler = opts.sampler, .stop_on_eos = true,
                    .mask = midi_offset_mask(opts.budget_frames > 0 ? std::min(opts.budget_frames, opts.max_frames)
                                                                    : opts.max_frames)};
  for (int attempt = 1; attempt <= std::max(1, opts.retries); ++attempt) {
    const auto res = model.generate(seq.segments, g, rng);
    if (res.tokens.steps() == 0) continue;
    MidiGeneration out;
    out.midi = decode_midi_tokens(res.tokens);
    out.truncated = res.truncated;
    out.attempts = attempt;
    return out;
  }
  throw EmptyGeneration("MIDI model emitted EOS before any note in " + std::to_string(std::max(1, opts.retries)) +
                        " attempts");
}

}  // namespace songgen
