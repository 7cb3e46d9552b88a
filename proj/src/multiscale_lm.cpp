#include "songgen/multiscale_lm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "songgen/error.hpp"

namespace songgen {

using nn::Graph;
using nn::Mat;
using nn::Var;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr int kKindCount = 7;

constexpr const char* kKindNames[kKindCount] = {"text_semantic",      "melody_prompt", "pinyin", "expanded_midi",
                                                "midi_notes",         "reference_acoustic", "target"};

bool uses_slot_tables(SegmentKind k) { return k == SegmentKind::target || k == SegmentKind::reference_acoustic; }

std::vector<int> iota_ids(int start, int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), start);
  return v;
}

}  // namespace

// --- FrameTokens and segments ------------------------------------------------------------

FrameTokens::FrameTokens(std::vector<int> vocab_sizes, std::vector<int> tokens)
    : vocab_sizes_(std::move(vocab_sizes)), tokens_(std::move(tokens)) {
  if (vocab_sizes_.empty()) throw InvalidInput("FrameTokens needs at least one slot");
  for (int v : vocab_sizes_)
    if (v < 4) throw InvalidInput("slot vocabulary must hold at least one token plus three specials");
  const std::size_t p = vocab_sizes_.size();
  if (tokens_.size() % p != 0) throw InvalidInput("token count is not a multiple of the slot count");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const int v = vocab_sizes_[i % p];
    if (tokens_[i] < 0 || tokens_[i] >= v)
      throw InvalidInput("token " + std::to_string(tokens_[i]) + " outside slot " + std::to_string(i % p) +
                         " vocabulary of " + std::to_string(v));
  }
}

std::string to_string(SegmentKind k) { return kKindNames[static_cast<int>(k)]; }

SegmentKind segment_kind_from_string(const std::string& s) {
  for (int i = 0; i < kKindCount; ++i)
    if (s == kKindNames[i]) return static_cast<SegmentKind>(i);
  throw ConfigError("unknown segment kind '" + s + "'");
}

ConditionSegment condition_segment(SegmentKind kind, std::vector<int> ids) {
  ConditionSegment s;
  s.kind = kind;
  s.channels = 1;
  s.loss_mask.assign(ids.size(), 0);
  s.ids = std::move(ids);
  return s;
}

ConditionSegment target_segment(const FrameTokens& target, bool terminated) {
  ConditionSegment s;
  s.kind = SegmentKind::target;
  s.channels = static_cast<int>(target.vocab_sizes().size());
  for (int v : target.vocab_sizes()) s.ids.push_back(bos_id(v));
  s.ids.insert(s.ids.end(), target.tokens().begin(), target.tokens().end());
  s.loss_mask.assign(static_cast<std::size_t>(target.steps() + 1), 1);
  s.loss_mask[0] = 0;
  s.terminated = terminated;
  return s;
}

ConditionSegment reference_segment(const FrameTokens& ref) {
  ConditionSegment s;
  s.kind = SegmentKind::reference_acoustic;
  s.channels = ref.slots();
  s.ids = ref.tokens();
  s.loss_mask.assign(static_cast<std::size_t>(ref.steps()), 0);
  return s;
}

// --- config ------------------------------------------------------------------------------

void MultiScaleConfig::validate() const {
  if (vocab_sizes.empty()) throw ConfigError("model needs at least one slot");
  for (int v : vocab_sizes)
    if (v < 4) throw ConfigError("slot vocabulary too small");
  if (d_global % heads_global != 0 || d_local % heads_local != 0) throw ConfigError("width not divisible by heads");
  if (layers_global < 1 || layers_local < 1) throw ConfigError("stacks need at least one layer");
  if (max_positions < 2) throw ConfigError("max_positions too small");
  for (const auto& [k, sizes] : condition_vocab) {
    if (uses_slot_tables(k)) throw ConfigError(to_string(k) + " uses the slot tables, not a condition vocabulary");
    if (sizes.empty()) throw ConfigError("condition kind " + to_string(k) + " has no channels");
    for (int v : sizes)
      if (v < 1) throw ConfigError("empty condition vocabulary for " + to_string(k));
  }
}

nlohmann::json MultiScaleConfig::to_json() const {
  nlohmann::json cond = nlohmann::json::object();
  for (const auto& [k, sizes] : condition_vocab) cond[to_string(k)] = sizes;
  return {{"vocab_sizes", vocab_sizes},     {"d_global", d_global},     {"layers_global", layers_global},
          {"heads_global", heads_global},   {"d_local", d_local},       {"layers_local", layers_local},
          {"heads_local", heads_local},     {"max_positions", max_positions},
          {"condition_vocab", cond},        {"text_encoder_layers", text_encoder_layers}};
}

MultiScaleConfig MultiScaleConfig::from_json(const nlohmann::json& j) {
  MultiScaleConfig c;
  try {
    c.vocab_sizes = j.at("vocab_sizes").get<std::vector<int>>();
    c.d_global = j.at("d_global");
    c.layers_global = j.at("layers_global");
    c.heads_global = j.at("heads_global");
    c.d_local = j.at("d_local");
    c.layers_local = j.at("layers_local");
    c.heads_local = j.at("heads_local");
    c.max_positions = j.at("max_positions");
    c.text_encoder_layers = j.value("text_encoder_layers", 0);
    for (const auto& [k, v] : j.at("condition_vocab").items())
      c.condition_vocab[segment_kind_from_string(k)] = v.get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

// --- model -------------------------------------------------------------------------------

MultiScaleLM::MultiScaleLM(MultiScaleConfig config, std::uint64_t seed) : cfg_(std::move(config)) {
  cfg_.validate();
  Rng rng(seed);
  const double sd = 0.02;
  const int p = cfg_.slots();
  for (int t = 0; t < p; ++t)
    slot_emb_.push_back(&params_.create("slot" + std::to_string(t) + ".emb", cfg_.vocab_sizes[static_cast<std::size_t>(t)],
                                        cfg_.d_local, sd, rng));
  for (const auto& [k, sizes] : cfg_.condition_vocab)
    for (std::size_t c = 0; c < sizes.size(); ++c)
      cond_emb_[k].push_back(&params_.create("cond." + to_string(k) + "." + std::to_string(c), sizes[c], cfg_.d_local, sd, rng));
  kind_emb_ = &params_.create("kind.emb", kKindCount, cfg_.d_global, sd, rng);
  global_pos_ = &params_.create("global.pos", cfg_.max_positions, cfg_.d_global, sd, rng);
  if (cfg_.text_encoder_layers > 0) {
    text_pos_ = &params_.create("text.pos", cfg_.max_positions, cfg_.d_local, sd, rng);
    text_encoder_ = nn::TransformerStack(params_, "text", cfg_.text_encoder_layers, cfg_.d_local, cfg_.heads_local, rng);
  }
  concat_proj_ = nn::Linear(params_, "concat", p * cfg_.d_local, cfg_.d_global, sd, rng);
  global_ = nn::TransformerStack(params_, "global", cfg_.layers_global, cfg_.d_global, cfg_.heads_global, rng);
  context_proj_ = nn::Linear(params_, "context", cfg_.d_global, cfg_.d_local, sd, rng);
  local_bos_ = &params_.create("local.bos", 1, cfg_.d_local, sd, rng);
  local_pos_ = &params_.create("local.pos", p, cfg_.d_local, sd, rng);
  local_ = nn::TransformerStack(params_, "local", cfg_.layers_local, cfg_.d_local, cfg_.heads_local, rng);
  for (int t = 0; t < p; ++t)
    heads_.emplace_back(params_, "head" + std::to_string(t), cfg_.d_local, cfg_.vocab_sizes[static_cast<std::size_t>(t)],
                        sd, rng);
}

void MultiScaleLM::check_tokens(std::span<const int> tokens) const {
  const std::size_t p = cfg_.vocab_sizes.size();
  if (tokens.size() % p != 0) throw InvalidInput("token count is not a multiple of the slot count");
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] < 0 || tokens[i] >= cfg_.vocab_sizes[i % p])
      throw InvalidInput("token " + std::to_string(tokens[i]) + " outside slot " + std::to_string(i % p) +
                         " vocabulary of " + std::to_string(cfg_.vocab_sizes[i % p]));
}

Var MultiScaleLM::channel_concat(Graph& g, std::span<const int> tokens) const {
  check_tokens(tokens);
  const int p = cfg_.slots();
  const int n = static_cast<int>(tokens.size()) / p;
  std::vector<Var> parts;
  std::vector<int> col(static_cast<std::size_t>(n));
  for (int t = 0; t < p; ++t) {
    for (int i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = tokens[static_cast<std::size_t>(i * p + t)];
    parts.push_back(nn::gather_rows(g.param(*slot_emb_[static_cast<std::size_t>(t)]), col));
  }
  return concat_proj_(g, nn::concat_cols(parts));
}

Var MultiScaleLM::global_forward(Graph& g, Var h) const {
  if (h.rows() < 1) throw InvalidInput("global_forward needs at least one step");
  return global_.forward(g, h, true);
}

std::vector<Var> MultiScaleLM::local_forward(Graph& g, Var o, std::span<const int> tokens) const {
  check_tokens(tokens);
  const int p = cfg_.slots();
  const int m = static_cast<int>(o.rows());
  if (static_cast<int>(tokens.size()) != m * p) throw InvalidInput("local_forward: token rows do not match context rows");
  Var ctx = context_proj_(g, o);
  std::vector<Var> parts;
  std::vector<int> ids(static_cast<std::size_t>(m));
  for (int t = 0; t < p; ++t) {
    Var tok;
    if (t == 0) {
      tok = nn::gather_rows(g.param(*local_bos_), std::vector<int>(static_cast<std::size_t>(m), 0));
    } else {
      for (int i = 0; i < m; ++i) ids[static_cast<std::size_t>(i)] = tokens[static_cast<std::size_t>(i * p + t - 1)];
      tok = nn::gather_rows(g.param(*slot_emb_[static_cast<std::size_t>(t - 1)]), ids);
    }
    Var pos = nn::gather_rows(g.param(*local_pos_), std::vector<int>(static_cast<std::size_t>(m), t));
    parts.push_back(nn::add(nn::add(ctx, tok), pos));
  }
  // Slot-major to step-major so each step is one contiguous attention block.
  std::vector<int> perm(static_cast<std::size_t>(m * p));
  for (int i = 0; i < m; ++i)
    for (int t = 0; t < p; ++t) perm[static_cast<std::size_t>(i * p + t)] = t * m + i;
  Var x = nn::gather_rows(nn::concat_rows(parts), perm);
  Var y = local_.forward(g, x, true, p);
  std::vector<Var> logits;
  for (int t = 0; t < p; ++t) {
    for (int i = 0; i < m; ++i) ids[static_cast<std::size_t>(i)] = i * p + t;
    logits.push_back(heads_[static_cast<std::size_t>(t)](g, nn::gather_rows(y, ids)));
  }
  return logits;
}

std::vector<double> MultiScaleLM::local_logits(const Mat& o_row, std::span<const int> prefix) const {
  const int p = cfg_.slots();
  const int slot = static_cast<int>(prefix.size());
  if (slot >= p) throw InvalidInput("local_logits: prefix already fills the step");
  for (int t = 0; t < slot; ++t)
    if (prefix[static_cast<std::size_t>(t)] < 0 || prefix[static_cast<std::size_t>(t)] >= cfg_.vocab_sizes[static_cast<std::size_t>(t)])
      throw InvalidInput("local_logits: prefix token out of vocabulary");
  const Mat ctx = context_proj_.apply(o_row);
  nn::KvCache cache;
  Mat out;
  for (int t = 0; t <= slot; ++t) {
    Mat row = ctx + local_pos_->value.row(t);
    row += t == 0 ? Mat(local_bos_->value) : Mat(slot_emb_[static_cast<std::size_t>(t - 1)]->value.row(prefix[static_cast<std::size_t>(t - 1)]));
    out = local_.step(cache, row);
  }
  const Mat logits = heads_[static_cast<std::size_t>(slot)].apply(out);
  return {logits.data(), logits.data() + logits.size()};
}

Var MultiScaleLM::embed_condition(Graph& g, const ConditionSegment& seg) const {
  const int p = cfg_.slots();
  const int n = seg.steps();
  if (n < 1) throw InvalidInput("empty " + to_string(seg.kind) + " segment");
  if (static_cast<int>(seg.ids.size()) != n * seg.channels) throw InvalidInput("segment ids are not steps x channels");
  if (n > cfg_.max_positions)
    throw ClipTooLong(to_string(seg.kind) + " segment of " + std::to_string(n) + " steps exceeds " +
                      std::to_string(cfg_.max_positions) + " positions");
  Var base;
  if (uses_slot_tables(seg.kind)) {
    if (seg.channels != p) throw InvalidInput(to_string(seg.kind) + " segment must carry one token per slot");
    base = channel_concat(g, seg.ids);
  } else {
    const auto it = cond_emb_.find(seg.kind);
    if (it == cond_emb_.end()) throw ConfigError("model has no embedding for " + to_string(seg.kind) + " segments");
    if (static_cast<int>(it->second.size()) != seg.channels)
      throw InvalidInput(to_string(seg.kind) + " segment has the wrong channel count");
    Var e;
    std::vector<int> col(static_cast<std::size_t>(n));
    for (int c = 0; c < seg.channels; ++c) {
      nn::Parameter* table = it->second[static_cast<std::size_t>(c)];
      for (int i = 0; i < n; ++i) {
        const int id = seg.ids[static_cast<std::size_t>(i * seg.channels + c)];
        if (id < 0 || id >= table->value.rows())
          throw InvalidInput(to_string(seg.kind) + " id " + std::to_string(id) + " outside its vocabulary");
        col[static_cast<std::size_t>(i)] = id;
      }
      Var ec = nn::gather_rows(g.param(*table), col);
      e = c == 0 ? ec : nn::add(e, ec);
    }
    if (seg.kind == SegmentKind::text_semantic && cfg_.text_encoder_layers > 0)
      e = text_encoder_.forward(g, nn::add(e, nn::gather_rows(g.param(*text_pos_), iota_ids(0, n))), false);
    std::vector<Var> reps(static_cast<std::size_t>(p), e);
    base = concat_proj_(g, nn::concat_cols(reps));
  }
  Var pos = nn::gather_rows(g.param(*global_pos_), iota_ids(0, n));
  Var kind = nn::gather_rows(g.param(*kind_emb_), std::vector<int>(static_cast<std::size_t>(n), static_cast<int>(seg.kind)));
  return nn::add(nn::add(base, pos), kind);
}

Var MultiScaleLM::embed_sequence(Graph& g, std::span<const ConditionSegment> segments) const {
  if (segments.empty()) throw InvalidInput("empty sequence");
  std::vector<Var> parts;
  for (const auto& s : segments) parts.push_back(embed_condition(g, s));
  return parts.size() == 1 ? parts.front() : nn::concat_rows(parts);
}

Var MultiScaleLM::nll_loss(Graph& g, std::span<const ConditionSegment> segments) const {
  const int p = cfg_.slots();
  std::vector<int> ctx_rows;
  std::vector<int> tokens;
  std::vector<std::uint8_t> slot_mask;
  int offset = 0;
  for (const auto& seg : segments) {
    const int n = seg.steps();
    if (static_cast<int>(seg.loss_mask.size()) != n) throw InvalidInput("loss mask length differs from segment length");
    for (int i = 0; i < n; ++i) {
      if (!seg.loss_mask[static_cast<std::size_t>(i)]) continue;
      if (!uses_slot_tables(seg.kind)) throw InvalidInput("loss mask set on a " + to_string(seg.kind) + " segment");
      if (offset + i == 0) throw InvalidInput("the first step of a sequence has no context to predict it");
      ctx_rows.push_back(offset + i - 1);
      for (int t = 0; t < p; ++t) tokens.push_back(seg.ids[static_cast<std::size_t>(i * p + t)]);
      slot_mask.insert(slot_mask.end(), static_cast<std::size_t>(p), 1);
    }
    if (seg.terminated) {
      if (seg.kind != SegmentKind::target) throw InvalidInput("only target segments can be terminated");
      ctx_rows.push_back(offset + n - 1);
      tokens.push_back(eos_id(cfg_.vocab_sizes[0]));
      for (int t = 1; t < p; ++t) tokens.push_back(pad_id(cfg_.vocab_sizes[static_cast<std::size_t>(t)]));
      slot_mask.push_back(1);
      slot_mask.insert(slot_mask.end(), static_cast<std::size_t>(p - 1), 0);
    }
    offset += n;
  }
  if (ctx_rows.empty()) throw InvalidInput("nll_loss: no target tokens under the loss mask");

  Var o = global_forward(g, embed_sequence(g, segments));
  const auto logits = local_forward(g, nn::gather_rows(o, ctx_rows), tokens);
  const int m = static_cast<int>(ctx_rows.size());
  Var total;
  double count = 0.0;
  for (int t = 0; t < p; ++t) {
    std::vector<int> rows, targets;
    for (int i = 0; i < m; ++i)
      if (slot_mask[static_cast<std::size_t>(i * p + t)]) {
        rows.push_back(i);
        targets.push_back(tokens[static_cast<std::size_t>(i * p + t)]);
      }
    if (rows.empty()) continue;
    Var ce = nn::scale(nn::cross_entropy(nn::gather_rows(logits[static_cast<std::size_t>(t)], rows), targets),
                       static_cast<double>(rows.size()));
    total = t == 0 ? ce : nn::add(total, ce);
    count += static_cast<double>(rows.size());
  }
  return nn::scale(total, 1.0 / count);
}

double MultiScaleLM::nll(std::span<const ConditionSegment> segments) const {
  Graph g(false);
  return nll_loss(g, segments).scalar();
}

int sample_token(std::span<const double> logits, const Sampler& s, Rng& rng) {
  int best = -1;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (std::isfinite(logits[i]) && (best < 0 || logits[i] > logits[static_cast<std::size_t>(best)]))
      best = static_cast<int>(i);
  if (best < 0) throw EmptyGeneration("every token is masked");
  if (s.temperature <= 0.0) return best;

  std::vector<int> cand;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (std::isfinite(logits[i])) cand.push_back(static_cast<int>(i));
  if (s.top_k > 0 && static_cast<int>(cand.size()) > s.top_k) {
    std::stable_sort(cand.begin(), cand.end(), [&](int a, int b) {
      return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
    });
    cand.resize(static_cast<std::size_t>(s.top_k));
    std::sort(cand.begin(), cand.end());
  }
  const double mx = logits[static_cast<std::size_t>(best)];
  std::vector<double> w(cand.size());
  double z = 0.0;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    w[i] = std::exp((logits[static_cast<std::size_t>(cand[i])] - mx) / s.temperature);
    z += w[i];
  }
  double u = uniform01(rng) * z;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    u -= w[i];
    if (u < 0.0) return cand[i];
  }
  return cand.back();
}

GenerationResult MultiScaleLM::generate(std::span<const ConditionSegment> prefix, const GenerateOptions& opts,
                                        Rng& rng) const {
  if (prefix.empty() || prefix.back().kind != SegmentKind::target)
    throw InvalidInput("generation prefix must end with a target segment");
  if (opts.max_steps < 1) throw InvalidInput("max_steps must be positive");
  const int p = cfg_.slots();
  const int base_pos = prefix.back().steps();
  const int max_steps = std::min(opts.max_steps, cfg_.max_positions - base_pos + 1);
  if (max_steps < 1) throw ClipTooLong("target segment already fills every position");

  Graph g(false);
  nn::KvCache cache;
  Mat o = global_.step(cache, embed_sequence(g, prefix).value()).bottomRows(1);

  GenerationResult res;
  std::vector<int> generated;
  const Mat& kind_row = kind_emb_->value;
  for (int step = 0; step < max_steps; ++step) {
    const Mat ctx = context_proj_.apply(o);
    nn::KvCache local_cache;
    for (int t = 0; t < p; ++t) {
      const int vocab = cfg_.vocab_sizes[static_cast<std::size_t>(t)];
      Mat row = ctx + local_pos_->value.row(t);
      if (t == 0)
        row += local_bos_->value;
      else
        row += slot_emb_[static_cast<std::size_t>(t - 1)]->value.row(generated.back());
      const Mat out = local_.step(local_cache, row);
      const Mat lg = heads_[static_cast<std::size_t>(t)].apply(out);
      std::vector<double> logits(lg.data(), lg.data() + lg.size());
      logits[static_cast<std::size_t>(bos_id(vocab))] = kNegInf;
      logits[static_cast<std::size_t>(pad_id(vocab))] = kNegInf;
      if (t > 0 || !opts.stop_on_eos) logits[static_cast<std::size_t>(eos_id(vocab))] = kNegInf;
      if (opts.mask) opts.mask(generated, step, t, logits);
      const int tok = sample_token(logits, opts.sampler, rng);
      if (t == 0 && opts.stop_on_eos && tok == eos_id(vocab)) {
        res.stopped_on_eos = true;
        break;
      }
      generated.push_back(tok);
    }
    if (res.stopped_on_eos) break;
    if (step + 1 == max_steps) break;
    const auto last = std::span<const int>(generated).last(static_cast<std::size_t>(p));
    Mat cat(1, p * cfg_.d_local);
    for (int t = 0; t < p; ++t)
      cat.middleCols(t * cfg_.d_local, cfg_.d_local) = slot_emb_[static_cast<std::size_t>(t)]->value.row(last[static_cast<std::size_t>(t)]);
    Mat h = concat_proj_.apply(cat);
    h += global_pos_->value.row(base_pos + step);
    h += kind_row.row(static_cast<int>(SegmentKind::target));
    o = global_.step(cache, h);
  }
  res.truncated = opts.stop_on_eos && !res.stopped_on_eos;
  res.tokens = FrameTokens(cfg_.vocab_sizes, std::move(generated));
  return res;
}

void MultiScaleLM::save(const std::filesystem::path& path, const nlohmann::json& extra, long optimizer_steps) const {
  nn::save_checkpoint(path, {{"kind", "multiscale_lm"}, {"config", cfg_.to_json()}, {"extra", extra}}, params_,
                      optimizer_steps);
}

MultiScaleLM MultiScaleLM::load(const std::filesystem::path& path, long* steps) {
  const auto header = nn::read_checkpoint_header(path);
  if (header.value("kind", "") != "multiscale_lm") throw FormatError(path.string() + " is not a token model checkpoint");
  MultiScaleLM m(MultiScaleConfig::from_json(header.at("config")), 0);
  const long s = nn::load_checkpoint(path, m.params_);
  if (steps) *steps = s;
  return m;
}

double train_step(MultiScaleLM& model, nn::Adam& opt, std::span<const std::vector<ConditionSegment>> batch) {
  if (batch.empty()) throw InvalidInput("empty training batch");
  model.params().zero_grad();
  double total = 0.0;
  const double w = 1.0 / static_cast<double>(batch.size());
  for (const auto& seq : batch) {
    Graph g;
    Var loss = model.nll_loss(g, seq);
    total += loss.scalar();
    g.backward(loss, w);
  }
  opt.step(model.params());
  return total * w;
}

}  // namespace songgen
