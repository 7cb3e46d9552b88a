/**
 * @file multiscale_lm.hpp
 * @brief Global/local autoregressive token model.
 *
 * A sequence is a list of steps. Each step of a token segment carries P parallel tokens
 * (one per slot); condition segments carry one or more channel ids per step. The global
 * transformer runs causally over step embeddings; for every step it produces a context
 * vector o_i from which the local transformer predicts the P tokens of step i+1, slot by slot.
 */
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "songgen/layers.hpp"
#include "songgen/random.hpp"

namespace songgen {

/// N x P token grid. Each slot has its own vocabulary; the last three ids of every slot
/// vocabulary are BOS, EOS and PAD.
class FrameTokens {
 public:
  FrameTokens() = default;
  FrameTokens(std::vector<int> vocab_sizes, std::vector<int> tokens);

  int steps() const { return slots() == 0 ? 0 : static_cast<int>(tokens_.size()) / slots(); }
  int slots() const { return static_cast<int>(vocab_sizes_.size()); }
  const std::vector<int>& vocab_sizes() const { return vocab_sizes_; }
  const std::vector<int>& tokens() const { return tokens_; }
  int at(int step, int slot) const { return tokens_[static_cast<std::size_t>(step * slots() + slot)]; }
  std::span<const int> step(int i) const {
    return std::span(tokens_).subspan(static_cast<std::size_t>(i * slots()), static_cast<std::size_t>(slots()));
  }

  friend bool operator==(const FrameTokens&, const FrameTokens&) = default;

 private:
  std::vector<int> vocab_sizes_;
  std::vector<int> tokens_;
};

inline int bos_id(int vocab) { return vocab - 3; }
inline int eos_id(int vocab) { return vocab - 2; }
inline int pad_id(int vocab) { return vocab - 1; }

enum class SegmentKind {
  text_semantic,
  melody_prompt,
  pinyin,
  expanded_midi,
  midi_notes,
  reference_acoustic,
  target,
};

std::string to_string(SegmentKind k);
SegmentKind segment_kind_from_string(const std::string& s);

/// Segments of kind `reference_acoustic` and `target` hold P slot tokens per step and are
/// embedded with the slot tables. The other kinds hold ids of per-kind condition vocabularies.
struct ConditionSegment {
  SegmentKind kind = SegmentKind::target;
  int channels = 1;
  std::vector<int> ids;                 // steps x channels, row-major
  std::vector<std::uint8_t> loss_mask;  // one flag per step
  /// Target only: after the final step the model is trained to emit EOS in slot 1.
  bool terminated = false;

  int steps() const { return channels == 0 ? 0 : static_cast<int>(ids.size()) / channels; }
};

/// Single-channel condition segment with no loss.
ConditionSegment condition_segment(SegmentKind kind, std::vector<int> ids);
/// Target segment [BOS, tokens...] with the loss mask on every token step.
ConditionSegment target_segment(const FrameTokens& target, bool terminated);
/// Token segment with no loss (reference acoustic tokens).
ConditionSegment reference_segment(const FrameTokens& ref);

struct MultiScaleConfig {
  std::vector<int> vocab_sizes;
  int d_global = 256;
  int layers_global = 4;
  int heads_global = 4;
  int d_local = 128;
  int layers_local = 2;
  int heads_local = 4;
  int max_positions = 512;
  /// Channel vocabularies of the condition kinds this model accepts.
  std::map<SegmentKind, std::vector<int>> condition_vocab;
  /// Bidirectional encoder layers applied to text_semantic segments (0 = embedding only).
  int text_encoder_layers = 0;

  int slots() const { return static_cast<int>(vocab_sizes.size()); }
  void validate() const;
  nlohmann::json to_json() const;
  static MultiScaleConfig from_json(const nlohmann::json& j);
};

struct Sampler {
  double temperature = 0.9;  // 0 selects greedy decoding
  int top_k = 32;            // 0 disables the cut
};

/// Called before each token is drawn. `generated` holds all tokens emitted so far (row-major,
/// including the partial current step); invalid choices are set to -infinity in `logits`.
using LogitMask = std::function<void(std::span<const int> generated, int step, int slot, std::span<double> logits)>;

struct GenerateOptions {
  int max_steps = 256;
  Sampler sampler;
  /// Stop when slot 1 emits EOS. When false, EOS is never sampled (length-forced decoding).
  bool stop_on_eos = true;
  LogitMask mask;
};

struct GenerationResult {
  FrameTokens tokens;
  bool stopped_on_eos = false;
  bool truncated = false;  // hit max_steps without EOS while EOS was allowed
};

class MultiScaleLM {
 public:
  MultiScaleLM(MultiScaleConfig config, std::uint64_t seed);

  const MultiScaleConfig& config() const { return cfg_; }
  nn::ParameterStore& params() { return params_; }
  const nn::ParameterStore& params() const { return params_; }

  /// h_i = W_cat (E_1[x_i^1] ⊕ ... ⊕ E_P[x_i^P]) for N steps of P tokens (row-major).
  nn::Var channel_concat(nn::Graph& g, std::span<const int> tokens) const;
  /// Causal global transformer over step embeddings (N x d_G).
  nn::Var global_forward(nn::Graph& g, nn::Var h) const;
  /// Teacher-forced local pass. For M context rows and the M x P tokens they predict,
  /// returns one logits matrix per slot (M x V_slot). Slot logits depend only on earlier slots.
  std::vector<nn::Var> local_forward(nn::Graph& g, nn::Var o, std::span<const int> tokens) const;
  /// Logits of one slot for a single step given the earlier slots of that step.
  std::vector<double> local_logits(const nn::Mat& o_row, std::span<const int> prefix) const;

  /// Global input embeddings for an assembled sequence (S x d_G).
  nn::Var embed_sequence(nn::Graph& g, std::span<const ConditionSegment> segments) const;
  /// Mean NLL over masked (step, slot) pairs. Throws InvalidInput when nothing is masked.
  nn::Var nll_loss(nn::Graph& g, std::span<const ConditionSegment> segments) const;
  double nll(std::span<const ConditionSegment> segments) const;

  /// Continues the last segment of `prefix`, which must be a target segment.
  GenerationResult generate(std::span<const ConditionSegment> prefix, const GenerateOptions& opts, Rng& rng) const;

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}, long optimizer_steps = 0) const;
  /// Rebuilds a model from a checkpoint; returns the stored optimizer step count through `steps`.
  static MultiScaleLM load(const std::filesystem::path& path, long* steps = nullptr);

 private:
  nn::Var embed_condition(nn::Graph& g, const ConditionSegment& seg) const;
  void check_tokens(std::span<const int> tokens) const;

  MultiScaleConfig cfg_;
  nn::ParameterStore params_;
  std::vector<nn::Parameter*> slot_emb_;
  std::map<SegmentKind, std::vector<nn::Parameter*>> cond_emb_;
  nn::Parameter* kind_emb_ = nullptr;
  nn::Parameter* global_pos_ = nullptr;
  nn::Parameter* text_pos_ = nullptr;
  nn::TransformerStack text_encoder_;
  nn::Linear concat_proj_;
  nn::TransformerStack global_;
  nn::Linear context_proj_;
  nn::Parameter* local_bos_ = nullptr;
  nn::Parameter* local_pos_ = nullptr;
  nn::TransformerStack local_;
  std::vector<nn::Linear> heads_;
};

/// Draws one token from logits (masked entries are -infinity). Greedy when temperature is 0.
int sample_token(std::span<const double> logits, const Sampler& s, Rng& rng);

/// One optimiser step on the mean loss of a batch of sequences; returns that mean loss.
double train_step(MultiScaleLM& model, nn::Adam& opt, std::span<const std::vector<ConditionSegment>> batch);

}  // namespace songgen
