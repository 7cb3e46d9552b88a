#include "songgen/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "songgen/error.hpp"
#include "songgen/key_prompt.hpp"
#include "songgen/layers.hpp"
#include "songgen/lyrics.hpp"
#include "songgen/midi_io.hpp"
#include "songgen/midi_stage.hpp"

namespace songgen {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kStageSalt[] = {0x5256, 0x5641, 0x4d49, 0x564f, 0x4c44};

std::uint64_t stage_salt(Stage s, int variant = 0) {
  return kStageSalt[static_cast<int>(s)] * 16 + static_cast<std::uint64_t>(variant);
}

int round_up(int x, int multiple) { return (x + multiple - 1) / multiple * multiple; }

void say(const TrainOptions& o, const std::string& msg) {
  if (o.log) o.log(msg);
}

void require(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw DependencyError(what + " missing (" + p.string() + ")");
}

// Strips the "Name: " prefix the error classes add, so the message can be re-wrapped.
std::string bare(const std::exception& e) {
  const std::string w = e.what();
  const auto pos = w.find(": ");
  return pos == std::string::npos ? w : w.substr(pos + 2);
}

template <typename F>
auto tagged(const std::string& tag, F&& f) -> decltype(f()) {
  try {
    return f();
  }
#define SONGGEN_RETAG(Name) \
  catch (const Name& e) {   \
    throw Name(tag + ": " + bare(e)); \
  }
  SONGGEN_RETAG(InvalidInput)
  SONGGEN_RETAG(RangeError)
  SONGGEN_RETAG(DegenerateProfile)
  SONGGEN_RETAG(InsufficientData)
  SONGGEN_RETAG(ClipTooLong)
  SONGGEN_RETAG(MalformedSequence)
  SONGGEN_RETAG(EmptyGeneration)
  SONGGEN_RETAG(AlignmentError)
  SONGGEN_RETAG(CodecMismatch)
  SONGGEN_RETAG(DependencyError)
  SONGGEN_RETAG(ConfigError)
  SONGGEN_RETAG(FormatError)
#undef SONGGEN_RETAG
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw FormatError("cannot write " + p.string());
  out << j.dump(2) << "\n";
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

const WordPromptEncoder& prompt_encoder() {
  static const WordPromptEncoder enc;
  return enc;
}

std::vector<int> encode_prompt(const std::optional<std::string>& text) {
  if (!text) return {};
  return prompt_encoder().encode(*text);
}

AttributeSet clip_attributes(const ClipManifest& c, const MidiSequence& midi) {
  return bin_attributes(midi, c.tempo_bpm, c.tempo_confidence, c.emotion);
}

// Training-time melody prompt: a random template, relative-key switching on.
std::vector<int> random_melody_prompt(const AttributeSet& a, Rng& rng) {
  const auto& templates = TemplateSet::builtin();
  const int t = uniform_int(rng, static_cast<int>(templates.size()));
  return prompt_encoder().encode(render_prompt(a, t, rng, templates));
}

// Evaluation-time prompt: first template, no key switching.
std::string fixed_melody_prompt(const AttributeSet& a) {
  Rng rng(0);
  return render_prompt(a, 0, rng, TemplateSet::builtin(), 0.0);
}

std::vector<const ClipManifest*> train_clips(const Manifest& m) {
  auto clips = m.split("train");
  if (clips.empty()) throw InsufficientData("manifest has no training clips");
  return clips;
}

VocalSequence load_tokens(const RunPaths& paths, const std::string& id) {
  const auto p = paths.vocal_tokens(id);
  require(p, "vocal tokens for " + id + " (run fit-rvq first)");
  return load_vocal_tokens(p);
}

// A different clip of the same singer, preferring the training split.
const ClipManifest& reference_clip(const Manifest& m, const ClipManifest& c) {
  const ClipManifest* fallback = nullptr;
  for (const auto& o : m.clips) {
    if (o.id == c.id || o.split != "train") continue;
    if (o.singer == c.singer) return o;
    if (!fallback) fallback = &o;
  }
  if (!fallback) throw InsufficientData("no reference clip available for " + c.id);
  return *fallback;
}

// --- training loop ------------------------------------------------------------

struct LoopHooks {
  std::function<double(Rng&, double lr)> step;
  std::function<void(long)> save;
};

std::vector<double> read_log_losses(const fs::path& log, long upto) {
  std::vector<double> losses;
  std::ifstream in(log);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    if (j.at("step").get<long>() < upto) losses.push_back(j.at("loss").get<double>());
  }
  return losses;
}

void window_means(const std::vector<double>& all, TrainReport& r) {
  if (all.empty()) return;
  const std::size_t w = std::max<std::size_t>(1, std::min<std::size_t>(20, all.size() / 10));
  double a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < w; ++i) {
    a += all[i];
    b += all[all.size() - w + i];
  }
  r.initial_loss = a / static_cast<double>(w);
  r.final_loss = b / static_cast<double>(w);
}

TrainReport run_loop(Stage stage, std::uint64_t salt, const TrainSchedule& sched, long start, const fs::path& log,
                     const fs::path& ckpt, const PipelineConfig& cfg, const TrainOptions& opts,
                     const LoopHooks& hooks) {
  TrainReport r;
  r.stage = stage;
  r.start_step = start;
  r.checkpoint = ckpt;
  // Lines past the checkpoint belong to steps that will be redone.
  std::vector<std::string> kept;
  if (start > 0) {
    std::ifstream in(log);
    std::string line;
    while (std::getline(in, line))
      if (!line.empty() && json::parse(line).at("step").get<long>() < start) kept.push_back(line);
  }
  {
    std::ofstream out(log, std::ios::trunc);
    for (const auto& line : kept) out << line << "\n";
  }
  std::ofstream out(log, std::ios::app);
  long done = start;
  for (long k = start; k < sched.steps; ++k) {
    Rng rng(mix_seed(mix_seed(cfg.seed, salt), static_cast<std::uint64_t>(k)));
    const double lr = nn::cosine_lr(sched.lr, k, sched.steps, sched.lr_floor);
    const double loss = hooks.step(rng, lr);
    if (!std::isfinite(loss)) throw InvalidInput(to_string(stage) + " loss diverged at step " + std::to_string(k));
    r.losses.push_back(loss);
    out << json{{"step", k}, {"loss", loss}, {"lr", lr}}.dump() << "\n";
    out.flush();
    done = k + 1;
    const bool stop = opts.stop_after > 0 && done >= opts.stop_after;
    if ((sched.checkpoint_every > 0 && done % sched.checkpoint_every == 0) || done == sched.steps || stop) {
      hooks.save(done);
      say(opts, to_string(stage) + " step " + std::to_string(done) + "/" + std::to_string(sched.steps) +
                    " loss " + std::to_string(loss));
    }
    if (stop) break;
  }
  out.close();
  r.end_step = done;
  window_means(read_log_losses(log, done), r);
  return r;
}

nn::Adam make_adam(long steps) {
  nn::Adam opt;
  opt.set_steps(steps);
  return opt;
}

// Loads a checkpoint to resume from, or returns nothing when training starts afresh.
template <typename Model>
std::optional<Model> resume_from(const fs::path& ckpt, const TrainOptions& opts, long& start) {
  start = 0;
  if (!opts.resume || !fs::exists(ckpt)) return std::nullopt;
  return Model::load(ckpt, &start);
}

// --- per-stage data -----------------------------------------------------------

struct MidiExample {
  std::vector<int> lyrics;
  AttributeSet attrs;
  std::vector<FrameTokens> targets;  // reference segmentation and its variants
};

struct VocalExample {
  std::vector<int> pinyin;
  MidiSequence midi;
  VocalSequence tokens;
  int singer = 0;
};

int max_notes_of(const std::vector<MidiSequence>& ms) {
  std::size_t n = 1;
  for (const auto& m : ms) n = std::max(n, m.size());
  return static_cast<int>(n) + static_cast<int>(n) / 4 + 4;
}

int max_frames_of(const std::vector<MidiSequence>& ms) {
  int n = 1;
  for (const auto& m : ms) n = std::max(n, m.total_frames());
  return std::min(kMaxFrames, round_up(n + n / 4, 50));
}

std::vector<std::vector<int>> same_singer_pools(const std::vector<VocalExample>& ex) {
  std::map<int, std::vector<int>> by_singer;
  for (std::size_t i = 0; i < ex.size(); ++i) by_singer[ex[i].singer].push_back(static_cast<int>(i));
  std::vector<std::vector<int>> pools(ex.size());
  for (std::size_t i = 0; i < ex.size(); ++i) pools[i] = by_singer[ex[i].singer];
  return pools;
}

int pick_reference(const std::vector<int>& pool, int self, Rng& rng) {
  if (pool.size() < 2) return self;
  int j = pool[static_cast<std::size_t>(uniform_int(rng, static_cast<int>(pool.size()) - 1))];
  if (j == self) j = pool.back();
  return j;
}

void check_resumed_config(const MultiScaleConfig& a, const MultiScaleConfig& b) {
  if (a.to_json() != b.to_json()) throw ConfigError("checkpoint was trained with a different model config");
}

// --- stages -------------------------------------------------------------------

TrainReport train_rvq(const PipelineConfig& cfg, const Manifest& m, const RunPaths& paths, const TrainOptions& opts) {
  const auto clips = train_clips(m);
  const FeatureProjection proj(kMelBins, cfg.codec.feature_dim, kLogMelFloor, cfg.codec.projection_seed);
  std::vector<MatrixRM> feats;
  Eigen::Index rows = 0;
  for (const auto* c : clips) {
    feats.push_back(proj.to_features(load_mel(m.resolve(c->vocal))));
    rows += feats.back().rows();
  }
  MatrixRM all(rows, cfg.codec.feature_dim);
  Eigen::Index at = 0;
  for (const auto& f : feats) {
    all.middleRows(at, f.rows()) = f;
    at += f.rows();
  }
  say(opts, "rvq: fitting " + std::to_string(cfg.codec.num_books) + " x " + std::to_string(cfg.codec.book_size) +
                " codebooks on " + std::to_string(rows) + " frames");
  const auto fit = fit_rvq(all, {.num_books = cfg.codec.num_books,
                                 .book_size = cfg.codec.book_size,
                                 .iterations = cfg.codec.iterations,
                                 .seed = mix_seed(cfg.seed, stage_salt(Stage::rvq))});
  fit.codebooks.save(paths.codec());

  TrainReport r;
  r.stage = Stage::rvq;
  r.checkpoint = paths.codec();
  double norm0 = 0.0;
  for (Eigen::Index i = 0; i < all.rows(); ++i) norm0 += all.row(i).norm();
  r.losses.push_back(norm0 / static_cast<double>(all.rows()));
  for (double v : fit.mean_residual_norm) r.losses.push_back(v);
  {
    std::ofstream out(paths.log(Stage::rvq), std::ios::trunc);
    for (std::size_t q = 0; q < r.losses.size(); ++q) out << json{{"step", q}, {"loss", r.losses[q]}}.dump() << "\n";
  }
  r.end_step = static_cast<long>(fit.mean_residual_norm.size());
  r.initial_loss = r.losses.front();
  r.final_loss = r.losses.back();
  write_json(paths.codec_info(), {{"feature_dim", cfg.codec.feature_dim},
                                  {"projection_seed", cfg.codec.projection_seed},
                                  {"num_books", cfg.codec.num_books},
                                  {"book_size", cfg.codec.book_size},
                                  {"hash", fit.codebooks.hash()},
                                  {"mean_residual_norm", r.losses}});

  // Ground-truth vocal tokens for every clip, including the held-out ones.
  fs::create_directories(paths.tokens_dir());
  for (const auto& c : m.clips) {
    const auto codes = rvq_encode_frames(proj.to_features(load_mel(m.resolve(c.vocal))), fit.codebooks);
    const auto f0 = load_f0(m.resolve(c.f0));
    const auto toks = quantize_f0(f0.f0_hz, f0.voiced);
    save_vocal_tokens(paths.vocal_tokens(c.id), make_vocal_sequence(codes, toks.tokens, fit.codebooks));
  }
  say(opts, "rvq: wrote tokens for " + std::to_string(m.clips.size()) + " clips");
  return r;
}

TrainReport train_vae(const PipelineConfig& cfg, const Manifest& m, const RunPaths& paths, const TrainOptions& opts) {
  std::vector<MatrixRM> mels;
  for (const auto* c : train_clips(m)) mels.push_back(load_mel(m.resolve(c->accomp)));
  long start = 0;
  auto loaded = resume_from<MelVae>(paths.vae(), opts, start);
  MelVae vae = loaded ? std::move(*loaded) : MelVae(cfg.vae.model, mix_seed(cfg.seed, stage_salt(Stage::vae)));
  if (loaded && vae.config().to_json() != cfg.vae.model.to_json())
    throw ConfigError("checkpoint was trained with a different VAE config");
  if (!loaded) vae.fit_normalization(mels);
  nn::Adam opt = make_adam(start);
  const int batch = cfg.vae.train.batch;
  LoopHooks h;
  h.step = [&](Rng& rng, double lr) {
    std::vector<MatrixRM> b;
    for (int i = 0; i < batch; ++i) b.push_back(mels[static_cast<std::size_t>(uniform_int(rng, static_cast<int>(mels.size())))]);
    opt.options().lr = lr;
    return vae_train_step(vae, opt, b, rng);
  };
  h.save = [&](long steps) {
    if (steps == cfg.vae.train.steps) vae.calibrate_latent_scale(mels);
    vae.save(paths.vae(), steps);
  };
  return run_loop(Stage::vae, stage_salt(Stage::vae), cfg.vae.train, start, paths.log(Stage::vae), paths.vae(), cfg,
                  opts, h);
}

TrainReport train_midi(const PipelineConfig& cfg, const Manifest& m, const RunPaths& paths, const TrainOptions& opts) {
  const auto& inv = SyllableInventory::builtin();
  std::vector<MidiExample> ex;
  std::vector<MidiSequence> melodies;
  for (const auto* c : train_clips(m)) {
    auto midi = load_midi_json(m.resolve(c->midi));
    melodies.push_back(midi);
    for (const auto& v : c->midi_variants) melodies.push_back(load_midi_json(m.resolve(v)));
  }
  const int max_frames = max_frames_of(melodies);
  const int max_notes = max_notes_of(melodies);
  for (const auto* c : train_clips(m)) {
    MidiExample e;
    e.lyrics = inv.encode_lyrics(c->lyrics);
    const auto midi = load_midi_json(m.resolve(c->midi));
    e.attrs = clip_attributes(*c, midi);
    e.targets.push_back(encode_midi_tokens(midi, max_frames));
    for (const auto& v : c->midi_variants) e.targets.push_back(encode_midi_tokens(load_midi_json(m.resolve(v)), max_frames));
    ex.push_back(std::move(e));
  }
  const auto mcfg = midi_model_config(cfg.midi.sizes, inv.lyrics_vocab_size(), prompt_encoder().vocab_size(), max_frames,
                                      max_notes);
  long start = 0;
  auto loaded = resume_from<MultiScaleLM>(paths.midi_lm(), opts, start);
  MultiScaleLM lm = loaded ? std::move(*loaded) : MultiScaleLM(mcfg, mix_seed(cfg.seed, stage_salt(Stage::midi)));
  check_resumed_config(lm.config(), mcfg);
  nn::Adam opt = make_adam(start);
  const json extra = {{"max_frames", max_frames}, {"max_notes", max_notes}, {"prompt_encoder", prompt_encoder().name()}};
  LoopHooks h;
  h.step = [&](Rng& rng, double lr) {
    std::vector<std::vector<ConditionSegment>> batch;
    for (int b = 0; b < cfg.midi.train.batch; ++b) {
      const auto& e = ex[static_cast<std::size_t>(uniform_int(rng, static_cast<int>(ex.size())))];
      const auto& target = e.targets[static_cast<std::size_t>(uniform_int(rng, static_cast<int>(e.targets.size())))];
      const auto prompt = random_melody_prompt(e.attrs, rng);
      const auto drop = draw_condition_dropout(rng);
      std::optional<std::span<const int>> p;
      if (!drop.drop_first && !prompt.empty()) p = std::span<const int>(prompt);
      batch.push_back(build_stage0_sequence(e.lyrics, p, &target).segments);
    }
    opt.options().lr = lr;
    return train_step(lm, opt, batch);
  };
  h.save = [&](long steps) { lm.save(paths.midi_lm(), extra, steps); };
  return run_loop(Stage::midi, stage_salt(Stage::midi), cfg.midi.train, start, paths.log(Stage::midi), paths.midi_lm(),
                  cfg, opts, h);
}

std::vector<VocalExample> vocal_examples(const Manifest& m, const RunPaths& paths, std::uint64_t codec_hash) {
  std::vector<VocalExample> ex;
  for (const auto* c : train_clips(m)) {
    VocalExample e;
    e.pinyin = c->pinyin;
    e.midi = load_midi_json(m.resolve(c->midi));
    e.tokens = load_tokens(paths, c->id);
    if (e.tokens.codec_hash != codec_hash) throw CodecMismatch("tokens of " + c->id + " come from another codec");
    if (e.tokens.frames() != e.midi.total_frames())
      throw AlignmentError("tokens of " + c->id + " do not match its melody length");
    e.singer = c->singer;
    ex.push_back(std::move(e));
  }
  return ex;
}

fs::path vocal_log(const RunPaths& paths, VocalMode mode) {
  if (mode == VocalMode::expanded) return paths.log(Stage::vocal);
  return paths.root / "logs" / ("vocal." + to_string(mode) + ".jsonl");
}

TrainReport train_vocal(const PipelineConfig& cfg, const Manifest& m, const RunPaths& paths, const TrainOptions& opts) {
  const VocalMode mode = opts.vocal_mode.value_or(cfg.vocal.mode);
  const Codec codec = load_codec(paths);
  const int k = codec.books.book_size();
  auto ex = vocal_examples(m, paths, codec.books.hash());
  std::vector<MidiSequence> melodies;
  for (const auto& e : ex) melodies.push_back(e.midi);
  const int max_target = max_frames_of(melodies);
  const int max_notes = max_notes_of(melodies);
  const auto vcfg = vocal_model_config(cfg.vocal.sizes, mode, k, SyllableInventory::builtin().pinyin_vocab_size(),
                                       std::max(max_target, cfg.vocal.max_free_frames), max_notes);
  const auto ckpt = paths.vocal_lm(mode);
  long start = 0;
  auto loaded = resume_from<MultiScaleLM>(ckpt, opts, start);
  const std::uint64_t salt = stage_salt(Stage::vocal, static_cast<int>(mode));
  MultiScaleLM lm = loaded ? std::move(*loaded) : MultiScaleLM(vcfg, mix_seed(cfg.seed, salt));
  check_resumed_config(lm.config(), vcfg);
  nn::Adam opt = make_adam(start);
  const auto pools = same_singer_pools(ex);
  const json extra = {{"mode", to_string(mode)},
                      {"max_target_frames", max_target},
                      {"max_notes", max_notes},
                      {"ref_frames", cfg.vocal.ref_frames},
                      {"codec_hash", codec.books.hash()}};
  LoopHooks h;
  h.step = [&](Rng& rng, double lr) {
    std::vector<std::vector<ConditionSegment>> batch;
    for (int b = 0; b < cfg.vocal.train.batch; ++b) {
      const int i = uniform_int(rng, static_cast<int>(ex.size()));
      const int j = pick_reference(pools[static_cast<std::size_t>(i)], i, rng);
      const auto& e = ex[static_cast<std::size_t>(i)];
      const auto ref = ex[static_cast<std::size_t>(j)].tokens.head(cfg.vocal.ref_frames);
      batch.push_back(build_stage1_sequence(mode, e.pinyin, e.midi, ref, &e.tokens, k).segments);
    }
    opt.options().lr = lr;
    return train_step(lm, opt, batch);
  };
  h.save = [&](long steps) { lm.save(ckpt, extra, steps); };
  auto r = run_loop(Stage::vocal, salt, cfg.vocal.train, start, vocal_log(paths, mode), ckpt, cfg, opts, h);
  return r;
}

int max_vocal_frames_for_latent(int max_latent) {
  int n = 1;
  while (latent_frames_for_vocal(n + 1) <= max_latent) ++n;
  return n;
}

TrainReport train_ldm(const PipelineConfig& cfg, const Manifest& m, const RunPaths& paths, const TrainOptions& opts) {
  const Codec codec = load_codec(paths);
  require(paths.vae(), "VAE checkpoint (run train-vae first)");
  const MelVae vae = MelVae::load(paths.vae());
  const double scale = vae.latent_scale();

  struct Example {
    nn::Mat z0;
    VocalSequence vocal;
    AttributeSet attrs;
    std::vector<int> caption;
  };
  std::vector<Example> ex;
  for (const auto* c : train_clips(m)) {
    Example e;
    e.vocal = load_tokens(paths, c->id);
    if (e.vocal.codec_hash != codec.books.hash()) throw CodecMismatch("tokens of " + c->id + " come from another codec");
    e.z0 = vae.encode(load_mel(m.resolve(c->accomp))).mu * scale;
    if (e.z0.rows() != latent_frames_for_vocal(e.vocal.frames()))
      throw AlignmentError("accompaniment of " + c->id + " does not match its vocal length");
    if (e.z0.rows() > cfg.ldm.model.max_latent)
      throw ConfigError("clip " + c->id + " needs " + std::to_string(e.z0.rows()) + " latent frames; ldm.model.max_latent is " +
                        std::to_string(cfg.ldm.model.max_latent));
    e.attrs = clip_attributes(*c, load_midi_json(m.resolve(c->midi)));
    e.caption = prompt_encoder().encode(c->accomp_caption);
    ex.push_back(std::move(e));
  }
  DenoiserConfig dcfg = cfg.ldm.model;
  dcfg.book_size = codec.books.book_size();
  dcfg.prompt_vocab = prompt_encoder().vocab_size();
  long start = 0;
  auto loaded = resume_from<LatentDenoiser>(paths.ldm(), opts, start);
  LatentDenoiser model = loaded ? std::move(*loaded) : LatentDenoiser(dcfg, mix_seed(cfg.seed, stage_salt(Stage::ldm)));
  if (model.config().to_json() != dcfg.to_json()) throw ConfigError("checkpoint was trained with a different denoiser config");
  nn::Adam opt = make_adam(start);
  const json extra = {{"codec_hash", codec.books.hash()},
                      {"max_vocal_frames", max_vocal_frames_for_latent(dcfg.max_latent)}};
  LoopHooks h;
  h.step = [&](Rng& rng, double lr) {
    std::vector<nn::Mat> z;
    std::vector<AccompCondition> conds;
    for (int b = 0; b < cfg.ldm.train.batch; ++b) {
      const auto& e = ex[static_cast<std::size_t>(uniform_int(rng, static_cast<int>(ex.size())))];
      z.push_back(e.z0);
      conds.push_back(AccompCondition::from_vocal(e.vocal, random_melody_prompt(e.attrs, rng), e.caption));
    }
    opt.options().lr = lr;
    return ldm_train_step(model, opt, z, conds, rng);
  };
  h.save = [&](long steps) { model.save(paths.ldm(), extra, steps); };
  return run_loop(Stage::ldm, stage_salt(Stage::ldm), cfg.ldm.train, start, paths.log(Stage::ldm), paths.ldm(), cfg, opts,
                  h);
}

// --- generators ---------------------------------------------------------------

struct MidiGenerator {
  MultiScaleLM lm;
  int max_notes;

  static MidiGenerator load(const RunPaths& paths) {
    require(paths.midi_lm(), "MIDI model checkpoint (run train-midi-lm first)");
    const auto h = nn::read_checkpoint_header(paths.midi_lm());
    return {MultiScaleLM::load(paths.midi_lm()), h.at("extra").at("max_notes").get<int>()};
  }

  MidiSequence operator()(const PipelineConfig& cfg, const std::string& lyrics,
                          const std::optional<std::string>& prompt, int budget, std::uint64_t seed, json* log) const {
    const auto ids = SyllableInventory::builtin().encode_lyrics(lyrics);
    if (ids.empty()) throw InvalidInput("lyrics are empty");
    const auto pids = encode_prompt(prompt);
    std::optional<std::span<const int>> p;
    if (!pids.empty()) p = std::span<const int>(pids);
    MidiGenerateOptions o;
    o.sampler = cfg.sampling.midi;
    o.max_notes = max_notes;
    o.max_frames = lm.config().vocab_sizes[1] - 3;
    o.budget_frames = budget;
    Rng rng(seed);
    const auto g = generate_midi(lm, ids, p, rng, o);
    if (log) {
      const int cut = build_stage0_sequence(ids, p, nullptr).truncated_tokens;
      *log = {{"stage", 0},
              {"name", "midi"},
              {"notes", g.midi.size()},
              {"frames", g.midi.total_frames()},
              {"attempts", g.attempts},
              {"hit_note_limit", g.truncated},
              {"truncated_condition_tokens", cut},
              {"prompt", prompt ? json(*prompt) : json(nullptr)}};
    }
    return g.midi;
  }
};

struct VocalGenerator {
  MultiScaleLM lm;
  VocalMode mode;
  int ref_frames;
  int max_target_frames;
  std::uint64_t codec_hash;

  static VocalGenerator load(const RunPaths& paths, std::optional<VocalMode> want) {
    const auto ckpt = paths.vocal_lm(want.value_or(VocalMode::expanded));
    require(ckpt, "vocal model checkpoint (run train-vocal-lm first)");
    const auto x = nn::read_checkpoint_header(ckpt).at("extra");
    return {MultiScaleLM::load(ckpt), vocal_mode_from_string(x.at("mode").get<std::string>()),
            x.at("ref_frames").get<int>(), x.at("max_target_frames").get<int>(),
            x.at("codec_hash").get<std::uint64_t>()};
  }

  VocalSequence operator()(const PipelineConfig& cfg, const std::vector<int>& pinyin, const MidiSequence& midi,
                           const VocalSequence& ref, std::uint64_t seed, json* log) const {
    if (ref.codec_hash != codec_hash) throw CodecMismatch("reference tokens and vocal model use different codecs");
    if (mode != VocalMode::e2e_without_midi && midi.total_frames() > max_target_frames)
      throw InvalidInput("melody of " + std::to_string(midi.total_frames()) + " frames exceeds the vocal model's " +
                         std::to_string(max_target_frames));
    VocalGenerateOptions o;
    o.sampler = cfg.sampling.vocal;
    o.max_free_frames = std::min(cfg.vocal.max_free_frames, lm.config().max_positions - 2);
    Rng rng(seed);
    auto v = generate_vocal(lm, mode, pinyin, midi, ref.head(ref_frames), codec_hash, rng, o);
    if (log)
      *log = {{"stage", 1}, {"name", "vocal"}, {"mode", to_string(mode)}, {"frames", v.frames()},
              {"melody_frames", midi.total_frames()}, {"reference_frames", std::min(ref.frames(), ref_frames)}};
    return v;
  }
};

struct AccompGenerator {
  LatentDenoiser model;
  MelVae vae;
  std::uint64_t codec_hash;

  static AccompGenerator load(const RunPaths& paths) {
    require(paths.ldm(), "diffusion checkpoint (run train-ldm first)");
    require(paths.vae(), "VAE checkpoint (run train-vae first)");
    const auto x = nn::read_checkpoint_header(paths.ldm()).at("extra");
    return {LatentDenoiser::load(paths.ldm()), MelVae::load(paths.vae()), x.at("codec_hash").get<std::uint64_t>()};
  }

  MatrixRM operator()(const PipelineConfig& cfg, const VocalSequence& vocal, const std::optional<std::string>& mp,
                      const std::optional<std::string>& ap, std::uint64_t seed, json* log) const {
    if (vocal.codec_hash != codec_hash) throw CodecMismatch("vocal tokens and diffusion model use different codecs");
    const int n = vocal.frames();
    const int n_lat = latent_frames_for_vocal(n);
    if (n_lat > model.config().max_latent)
      throw InvalidInput("vocal of " + std::to_string(n) + " frames exceeds the accompaniment model's latent length");
    const auto c = AccompCondition::from_vocal(vocal, encode_prompt(mp), encode_prompt(ap));
    MatrixRM mel = sample_accompaniment(model, vae, c, seed, cfg.ldm.guidance);
    const int rows = static_cast<int>(std::ceil(1.5 * n));
    mel.conservativeResize(std::min<Eigen::Index>(rows, mel.rows()), Eigen::NoChange);
    if (log)
      *log = {{"stage", 2},         {"name", "accompaniment"},     {"latent_frames", n_lat},
              {"mel_frames", mel.rows()}, {"guidance", cfg.ldm.guidance}, {"diffusion_steps", model.config().schedule_steps},
              {"melody_prompt", mp ? json(*mp) : json(nullptr)}, {"accomp_prompt", ap ? json(*ap) : json(nullptr)}};
    return mel;
  }
};

std::vector<int> pitch_track(const std::vector<int>& f0_tokens) {
  std::vector<int> track(f0_tokens.size(), kMinPitch);
  int last = -1;
  for (std::size_t t = 0; t < f0_tokens.size(); ++t) {
    if (f0_tokens[t] < kF0Bins) last = f0_tokens[t] + kMinPitch;
    if (last >= 0) track[t] = last;
  }
  // Leading unvoiced frames take the first voiced pitch.
  const auto first = std::find_if(f0_tokens.begin(), f0_tokens.end(), [](int b) { return b < kF0Bins; });
  if (first != f0_tokens.end())
    for (auto it = f0_tokens.begin(); it != first; ++it) track[static_cast<std::size_t>(it - f0_tokens.begin())] = *first + kMinPitch;
  return track;
}

F0Track f0_from_tokens(const std::vector<int>& toks, std::size_t frames) {
  F0Track t;
  dequantize_f0(toks, t.f0_hz, t.voiced);
  if (t.f0_hz.size() != frames && !t.f0_hz.empty()) {
    F0Track r;
    for (std::size_t i = 0; i < frames; ++i) {
      const std::size_t j = std::min(t.f0_hz.size() - 1, i * t.f0_hz.size() / frames);
      r.f0_hz.push_back(t.f0_hz[j]);
      r.voiced.push_back(t.voiced[j]);
    }
    return r;
  }
  if (t.f0_hz.empty()) {
    t.f0_hz.assign(frames, 0.0);
    t.voiced.assign(frames, 0);
  }
  return t;
}

}  // namespace

// --- public API -----------------------------------------------------------------

std::string to_string(Stage s) {
  switch (s) {
    case Stage::rvq: return "rvq";
    case Stage::vae: return "vae";
    case Stage::midi: return "midi";
    case Stage::vocal: return "vocal";
    case Stage::ldm: return "ldm";
  }
  return "?";
}

Stage stage_from_string(const std::string& s) {
  for (Stage st : {Stage::rvq, Stage::vae, Stage::midi, Stage::vocal, Stage::ldm})
    if (to_string(st) == s) return st;
  throw ConfigError("unknown stage '" + s + "' (expected rvq, vae, midi, vocal or ldm)");
}

fs::path RunPaths::vocal_lm(VocalMode m) const {
  if (m == VocalMode::expanded) return root / "ckpt" / "vocal_lm.ckpt";
  return root / "ckpt" / ("vocal_lm." + to_string(m) + ".ckpt");
}

RunLock::RunLock(const fs::path& root) : path_(root / ".lock") {
  fs::create_directories(root);
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f) throw ConfigError("run directory " + root.string() + " is in use (remove " + path_.string() + " if stale)");
  std::fclose(f);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

void init_run(const RunPaths& paths, const PipelineConfig& cfg) {
  for (const auto& d : {paths.root / "ckpt", paths.root / "logs", paths.tokens_dir()}) fs::create_directories(d);
  if (fs::exists(paths.config())) {
    if (read_json(paths.config()) != cfg.to_json())
      throw ConfigError("run directory " + paths.root.string() + " was created with a different config");
    return;
  }
  write_json(paths.config(), cfg.to_json());
}

Codec load_codec(const RunPaths& paths) {
  require(paths.codec(), "codec (run fit-rvq first)");
  require(paths.codec_info(), "codec description (run fit-rvq first)");
  const auto info = read_json(paths.codec_info());
  Codebooks books = Codebooks::load(paths.codec());
  if (info.at("hash").get<std::uint64_t>() != books.hash()) throw CodecMismatch("codec file and description disagree");
  FeatureProjection proj(kMelBins, info.at("feature_dim").get<int>(), kLogMelFloor,
                         info.at("projection_seed").get<std::uint64_t>());
  return {std::move(books), std::move(proj)};
}

json TrainReport::to_json() const {
  return {{"stage", to_string(stage)},       {"start_step", start_step},     {"end_step", end_step},
          {"initial_loss", initial_loss},    {"final_loss", final_loss},     {"checkpoint", checkpoint.string()}};
}

TrainReport train_stage(Stage stage, const PipelineConfig& cfg, const Manifest& manifest, const RunPaths& paths,
                        const TrainOptions& opts) {
  for (const auto& d : {paths.root / "ckpt", paths.root / "logs", paths.tokens_dir()}) fs::create_directories(d);
  switch (stage) {
    case Stage::rvq: return train_rvq(cfg, manifest, paths, opts);
    case Stage::vae: return train_vae(cfg, manifest, paths, opts);
    case Stage::midi: return train_midi(cfg, manifest, paths, opts);
    case Stage::vocal: return train_vocal(cfg, manifest, paths, opts);
    case Stage::ldm: return train_ldm(cfg, manifest, paths, opts);
  }
  throw ConfigError("unknown stage");
}

int generation_budget_frames(const RunPaths& paths) {
  int budget = 0;
  auto cap = [&](int v) { budget = budget == 0 ? v : std::min(budget, v); };
  if (fs::exists(paths.vocal_lm()))
    cap(nn::read_checkpoint_header(paths.vocal_lm()).at("extra").at("max_target_frames").get<int>());
  if (fs::exists(paths.ldm())) cap(nn::read_checkpoint_header(paths.ldm()).at("extra").at("max_vocal_frames").get<int>());
  return budget;
}

MidiSequence run_midi_stage(const PipelineConfig& cfg, const RunPaths& paths, const std::string& lyrics,
                            const std::optional<std::string>& melody_prompt, std::uint64_t seed, json* log) {
  return MidiGenerator::load(paths)(cfg, lyrics, melody_prompt, generation_budget_frames(paths), seed, log);
}

VocalSequence load_reference(const RunPaths& paths, const std::string& ref) {
  if (ref.empty()) throw InvalidInput("a reference vocal is required");
  if (fs::is_regular_file(ref)) return load_vocal_tokens(ref);
  if (!fs::exists(paths.tokens_dir()) || fs::is_empty(paths.tokens_dir()))
    throw DependencyError("no vocal tokens in the run (run fit-rvq first)");
  const auto p = paths.vocal_tokens(ref);
  if (!fs::exists(p)) throw InvalidInput("unknown reference '" + ref + "': neither a token file nor a clip id");
  return load_vocal_tokens(p);
}

VocalSequence run_vocal_stage(const PipelineConfig& cfg, const RunPaths& paths, const std::string& lyrics,
                              const MidiSequence& midi, const VocalSequence& reference, std::uint64_t seed, json* log,
                              std::optional<VocalMode> mode) {
  const auto gen = VocalGenerator::load(paths, mode);
  return gen(cfg, SyllableInventory::builtin().encode_pinyin(lyrics), midi, reference, seed, log);
}

MatrixRM run_accomp_stage(const PipelineConfig& cfg, const RunPaths& paths, const VocalSequence& vocal,
                          const std::optional<std::string>& melody_prompt,
                          const std::optional<std::string>& accomp_prompt, std::uint64_t seed, json* log) {
  return AccompGenerator::load(paths)(cfg, vocal, melody_prompt, accomp_prompt, seed, log);
}

MatrixRM render_vocal_mel(const RunPaths& paths, const VocalSequence& vocal) {
  const Codec codec = load_codec(paths);
  return render_toy_vocal(vocal, codec.books, codec.projection);
}

MidiSequence load_midi_file(const fs::path& path) {
  if (!fs::exists(path)) throw InvalidInput("MIDI file not found: " + path.string());
  const auto ext = path.extension().string();
  if (ext == ".json") return load_midi_json(path);
  std::ifstream in(path, std::ios::binary);
  if (ext == ".mid" || ext == ".midi") {
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
    return midi_from_smf(bytes);
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return midi_from_records(ss.str());
}

std::array<Wav, 3> render_audio(const PipelineConfig& cfg, const MatrixRM& vocal_mel, const MatrixRM& accomp_mel,
                                std::uint64_t seed) {
  Wav v, a;
  v.samples = griffin_lim(vocal_mel, cfg.sampling.griffin_lim_iterations, mix_seed(seed, 1));
  a.samples = griffin_lim(accomp_mel, cfg.sampling.griffin_lim_iterations, mix_seed(seed, 2));
  Wav mix = remix(v, a, cfg.sampling.stem_gain_db);
  return {std::move(v), std::move(a), std::move(mix)};
}

SingOutput sing(const PipelineConfig& cfg, const RunPaths& paths, const SingRequest& req, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  for (const char* f : {"stage0.json", "stage1.json", "stage2.json"}) fs::remove(out_dir / f);
  SingOutput o;
  json log;
  if (req.midi_override) {
    o.midi = tagged("midi override", [&] { return load_midi_file(*req.midi_override); });
  } else {
    o.midi = tagged("stage 0 (midi)", [&] {
      return run_midi_stage(cfg, paths, req.lyrics, req.melody_prompt, mix_seed(req.seed, 100), &log);
    });
    write_json(out_dir / "stage0.json", log);
    o.midi_generated = true;
  }
  o.midi_path = out_dir / "midi.json";
  save_midi_json(o.midi_path, o.midi);

  o.vocal = tagged("stage 1 (vocal)", [&] {
    const auto ref = load_reference(paths, req.reference);
    return run_vocal_stage(cfg, paths, req.lyrics, o.midi, ref, mix_seed(req.seed, 101), &log);
  });
  write_json(out_dir / "stage1.json", log);
  o.vocal_tokens_path = out_dir / "vocal.tok";
  save_vocal_tokens(o.vocal_tokens_path, o.vocal);
  o.vocal_mel = tagged("stage 1 (vocal)", [&] { return render_vocal_mel(paths, o.vocal); });
  o.vocal_mel_path = out_dir / "vocal.mel";
  save_mel(o.vocal_mel_path, o.vocal_mel);

  o.accomp_mel = tagged("stage 2 (accompaniment)", [&] {
    return run_accomp_stage(cfg, paths, o.vocal, req.melody_prompt, req.accomp_prompt, mix_seed(req.seed, 102), &log);
  });
  write_json(out_dir / "stage2.json", log);
  o.accomp_mel_path = out_dir / "accomp.mel";
  save_mel(o.accomp_mel_path, o.accomp_mel);

  const auto wavs = tagged("mix", [&] { return render_audio(cfg, o.vocal_mel, o.accomp_mel, mix_seed(req.seed, 103)); });
  o.vocal_wav_path = out_dir / "vocal.wav";
  o.accomp_wav_path = out_dir / "accomp.wav";
  o.mix_path = out_dir / "mix.wav";
  write_wav(o.vocal_wav_path, wavs[0]);
  write_wav(o.accomp_wav_path, wavs[1]);
  write_wav(o.mix_path, wavs[2]);
  return o;
}

MetricReport evaluate_run(const PipelineConfig& cfg, const RunPaths& paths, const Manifest& manifest,
                          const EvaluateOptions& opts) {
  auto clips = manifest.split(opts.split);
  if (clips.empty()) throw InsufficientData("split '" + opts.split + "' is empty");
  if (opts.max_clips > 0 && static_cast<int>(clips.size()) > opts.max_clips) clips.resize(static_cast<std::size_t>(opts.max_clips));

  std::optional<MidiGenerator> midi_gen;
  std::optional<VocalGenerator> vocal_gen;
  int budget = 0;
  if (!opts.gt_vs_gt) {
    midi_gen = MidiGenerator::load(paths);
    budget = generation_budget_frames(paths);
    if (opts.with_ffe) vocal_gen = VocalGenerator::load(paths, VocalMode::expanded);
  }
  const auto& inv = SyllableInventory::builtin();
  std::vector<EvalPair> pairs;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto& c = *clips[i];
    EvalPair p;
    p.id = c.id;
    p.gt = load_midi_json(manifest.resolve(c.midi));
    p.gt_tonic = c.key_tonic;
    p.gt_mode = c.key_mode;
    p.tempo_bpm = c.tempo_bpm;
    const std::uint64_t seed = mix_seed(opts.seed, i);
    if (opts.gt_vs_gt) {
      p.pred = p.gt;
    } else {
      const auto prompt = fixed_melody_prompt(clip_attributes(c, p.gt));
      p.pred = (*midi_gen)(cfg, c.lyrics, prompt, budget, mix_seed(seed, 0), nullptr);
    }
    if (opts.with_ffe) {
      p.gt_f0 = load_f0(manifest.resolve(c.f0));
      if (opts.gt_vs_gt) {
        p.pred_f0 = p.gt_f0;
      } else {
        const auto ref = load_tokens(paths, reference_clip(manifest, c).id);
        const auto v = (*vocal_gen)(cfg, inv.encode_pinyin(c.lyrics), p.gt, ref, mix_seed(seed, 1), nullptr);
        p.pred_f0 = f0_from_tokens(v.f0_tokens(), p.gt_f0->f0_hz.size());
      }
    }
    pairs.push_back(std::move(p));
  }
  return evaluate_corpus(pairs, {.rounded = opts.rounded});
}

std::string ablation_label(VocalMode m) {
  switch (m) {
    case VocalMode::expanded: return "expanded";
    case VocalMode::unexpand: return "unexpand";
    case VocalMode::e2e_with_midi: return "e2e w/ MIDI";
    case VocalMode::e2e_without_midi: return "e2e w/o MIDI";
  }
  return "?";
}

const AblationRow* AblationReport::find(VocalMode m) const {
  for (const auto& r : rows)
    if (r.mode == m) return &r;
  return nullptr;
}

std::optional<bool> AblationReport::expanded_non_inferior() const {
  const auto* e = find(VocalMode::expanded);
  const auto* u = find(VocalMode::unexpand);
  if (!e || !u) return std::nullopt;
  return e->md <= u->md + md_margin;
}

std::string AblationReport::table() const {
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-16s %8s %8s %6s\n", "Method", "FFE", "MD", "Clips");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-16s %8.3f %8.3f %6d\n", ablation_label(r.mode).c_str(), r.ffe, r.md, r.clips);
    os << buf;
  }
  return os.str();
}

json AblationReport::to_json() const {
  json rj = json::array();
  for (const auto& r : rows)
    rj.push_back({{"mode", to_string(r.mode)},
                  {"label", ablation_label(r.mode)},
                  {"ffe", r.ffe},
                  {"md", r.md},
                  {"clips", r.clips},
                  {"final_loss", r.final_loss}});
  json j = {{"rows", rj}, {"md_margin", md_margin}};
  if (const auto ok = expanded_non_inferior()) j["expanded_non_inferior"] = *ok;
  return j;
}

AblationReport run_ablation(const PipelineConfig& cfg, const RunPaths& paths, const Manifest& manifest,
                            const AblationOptions& opts) {
  auto clips = manifest.split("test");
  if (clips.empty()) throw InsufficientData("ablation needs held-out clips");
  if (opts.max_clips > 0 && static_cast<int>(clips.size()) > opts.max_clips) clips.resize(static_cast<std::size_t>(opts.max_clips));
  const auto& inv = SyllableInventory::builtin();
  AblationReport rep;
  rep.md_margin = opts.md_margin;
  for (VocalMode mode : opts.modes) {
    TrainOptions t;
    t.resume = true;
    t.vocal_mode = mode;
    t.log = opts.log;
    const auto tr = train_stage(Stage::vocal, cfg, manifest, paths, t);
    const auto gen = VocalGenerator::load(paths, mode);
    AblationRow row;
    row.mode = mode;
    row.final_loss = tr.final_loss;
    for (std::size_t i = 0; i < clips.size(); ++i) {
      const auto& c = *clips[i];
      const auto gt = load_midi_json(manifest.resolve(c.midi));
      const auto gt_f0 = load_f0(manifest.resolve(c.f0));
      const auto ref = load_tokens(paths, reference_clip(manifest, c).id);
      const auto v = gen(cfg, inv.encode_pinyin(c.lyrics), gt, ref, mix_seed(opts.seed, i), nullptr);
      const auto toks = v.f0_tokens();
      const auto e = expand(gt);
      row.md += melody_distance(e.pitches(), pitch_track(toks));
      const auto pred = f0_from_tokens(toks, gt_f0.f0_hz.size());
      row.ffe += ffe(gt_f0.f0_hz, gt_f0.voiced, pred.f0_hz, pred.voiced);
      ++row.clips;
    }
    row.md /= row.clips;
    row.ffe /= row.clips;
    if (opts.log) opts.log(ablation_label(mode) + ": FFE " + std::to_string(row.ffe) + " MD " + std::to_string(row.md));
    rep.rows.push_back(row);
  }
  return rep;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DependencyError*>(&e)) return 3;
  if (dynamic_cast<const EmptyGeneration*>(&e) || dynamic_cast<const AlignmentError*>(&e) ||
      dynamic_cast<const MalformedSequence*>(&e) || dynamic_cast<const CodecMismatch*>(&e))
    return 4;
  return 1;
}

}  // namespace songgen
