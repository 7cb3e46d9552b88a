#include "songgen/config.hpp"

#include <fstream>

#include "songgen/error.hpp"

namespace songgen {

namespace {

using nlohmann::json;

json sizes_json(const MultiScaleConfig& s) {
  return {{"d_global", s.d_global},       {"layers_global", s.layers_global}, {"heads_global", s.heads_global},
          {"d_local", s.d_local},         {"layers_local", s.layers_local},   {"heads_local", s.heads_local},
          {"text_encoder_layers", s.text_encoder_layers}};
}

MultiScaleConfig sizes_from(const json& j) {
  MultiScaleConfig s;
  s.d_global = j.at("d_global").get<int>();
  s.layers_global = j.at("layers_global").get<int>();
  s.heads_global = j.at("heads_global").get<int>();
  s.d_local = j.at("d_local").get<int>();
  s.layers_local = j.at("layers_local").get<int>();
  s.heads_local = j.at("heads_local").get<int>();
  s.text_encoder_layers = j.at("text_encoder_layers").get<int>();
  return s;
}

json schedule_json(const TrainSchedule& t) {
  return {{"steps", t.steps}, {"batch", t.batch}, {"lr", t.lr}, {"lr_floor", t.lr_floor},
          {"checkpoint_every", t.checkpoint_every}};
}

TrainSchedule schedule_from(const json& j) {
  TrainSchedule t;
  t.steps = j.at("steps").get<int>();
  t.batch = j.at("batch").get<int>();
  t.lr = j.at("lr").get<double>();
  t.lr_floor = j.at("lr_floor").get<double>();
  t.checkpoint_every = j.at("checkpoint_every").get<int>();
  return t;
}

json sampler_json(const Sampler& s) { return {{"temperature", s.temperature}, {"top_k", s.top_k}}; }
Sampler sampler_from(const json& j) { return {j.at("temperature").get<double>(), j.at("top_k").get<int>()}; }

MultiScaleConfig lm_sizes(int d, int layers, int heads, int d_local, int layers_local, int heads_local) {
  MultiScaleConfig s;
  s.d_global = d;
  s.layers_global = layers;
  s.heads_global = heads;
  s.d_local = d_local;
  s.layers_local = layers_local;
  s.heads_local = heads_local;
  return s;
}

// Every key of `user` must exist in `schema` with the same JSON kind (numbers interchangeable).
void check_keys(const json& user, const json& schema, const std::string& where) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    if (!schema.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
    const json& ref = schema.at(it.key());
    if (ref.is_object()) {
      if (!it.value().is_object()) throw ConfigError("'" + path + "' must be an object");
      check_keys(it.value(), ref, path);
    } else if (ref.is_number() != it.value().is_number() || ref.is_string() != it.value().is_string() ||
               ref.is_boolean() != it.value().is_boolean()) {
      throw ConfigError("'" + path + "' has the wrong type");
    }
  }
}

void check_sizes(const MultiScaleConfig& s, const std::string& name) {
  if (s.d_global < 1 || s.d_local < 1 || s.layers_global < 1 || s.layers_local < 1 || s.heads_global < 1 ||
      s.heads_local < 1 || s.d_global % s.heads_global != 0 || s.d_local % s.heads_local != 0 ||
      s.text_encoder_layers < 0)
    throw ConfigError(name + ": widths must be positive and divisible by the head counts");
}

void check_schedule(const TrainSchedule& t, const std::string& name) {
  if (t.steps < 1 || t.batch < 1 || !(t.lr > 0.0) || t.lr_floor < 0.0 || t.lr_floor > 1.0 || t.checkpoint_every < 0)
    throw ConfigError(name + ": bad training schedule");
}

}  // namespace

PipelineConfig PipelineConfig::from_preset(const std::string& name) {
  PipelineConfig c;
  c.preset = name;
  if (name == "smoke") {
    c.codec = {.feature_dim = 16, .num_books = 8, .book_size = 64, .iterations = 6, .projection_seed = 7};
    c.vae.model.hidden = 32;
    c.vae.train = {.steps = 600, .batch = 4, .lr = 3e-3, .lr_floor = 0.05, .checkpoint_every = 200};
    c.midi.sizes = lm_sizes(32, 2, 4, 16, 1, 2);
    c.midi.sizes.text_encoder_layers = 1;
    c.midi.train = {.steps = 2000, .batch = 8, .lr = 3e-3, .lr_floor = 0.05, .checkpoint_every = 500};
    c.vocal.sizes = lm_sizes(32, 2, 4, 16, 1, 2);
    c.vocal.train = {.steps = 800, .batch = 8, .lr = 3e-3, .lr_floor = 0.05, .checkpoint_every = 200};
    c.vocal.ref_frames = 20;
    c.vocal.max_free_frames = 150;
    c.ldm.model.width = 32;
    c.ldm.model.layers = 1;
    c.ldm.model.heads = 2;
    c.ldm.model.schedule_steps = 50;
    c.ldm.model.max_latent = 128;
    c.ldm.train = {.steps = 1000, .batch = 4, .lr = 3e-3, .lr_floor = 0.05, .checkpoint_every = 250};
    c.sampling.griffin_lim_iterations = 16;
  } else if (name == "desk") {
    c.corpus.n_clips = 600;
    c.corpus.min_seconds = 1.5;
    c.corpus.max_seconds = 5.0;
    c.codec = {.feature_dim = 32, .num_books = 8, .book_size = 256, .iterations = 10, .projection_seed = 7};
    c.vae.train = {.steps = 2000, .batch = 8, .lr = 2e-3, .lr_floor = 0.05, .checkpoint_every = 250};
    c.midi.sizes = lm_sizes(64, 3, 4, 32, 1, 4);
    c.midi.sizes.text_encoder_layers = 1;
    c.midi.train = {.steps = 3000, .batch = 8, .lr = 2e-3, .lr_floor = 0.05, .checkpoint_every = 500};
    c.vocal.sizes = lm_sizes(64, 3, 4, 32, 1, 4);
    c.vocal.train = c.midi.train;
    c.vocal.ref_frames = 50;
    c.ldm.model.max_latent = 256;
    c.ldm.train = {.steps = 3000, .batch = 8, .lr = 2e-3, .lr_floor = 0.05, .checkpoint_every = 500};
  } else if (name == "paper") {
    // Published scale; far beyond a CPU run.
    c.corpus.n_clips = 100000;
    c.corpus.min_seconds = 1.0;
    c.corpus.max_seconds = 30.0;
    c.corpus.holdout_fraction = 0.003;
    c.codec = {.feature_dim = 32, .num_books = 8, .book_size = 1024, .iterations = 10, .projection_seed = 7};
    c.midi.sizes = lm_sizes(768, 16, 12, 768, 6, 8);
    c.midi.sizes.text_encoder_layers = 12;
    c.midi.train = {.steps = 50000, .batch = 1400, .lr = 5e-4, .lr_floor = 0.0, .checkpoint_every = 5000};
    c.vocal.sizes = lm_sizes(1152, 20, 16, 1152, 6, 8);
    c.vocal.train = {.steps = 100000, .batch = 64, .lr = 5e-4, .lr_floor = 0.0, .checkpoint_every = 5000};
    c.vocal.ref_frames = kReferenceFrames;
    c.vocal.max_free_frames = kMaxFrames;
    c.vae.model.hidden = 256;
    c.vae.train = {.steps = 50000, .batch = 64, .lr = 1e-4, .lr_floor = 0.0, .checkpoint_every = 5000};
    c.ldm.model.width = 576;
    c.ldm.model.layers = 4;
    c.ldm.model.heads = 8;
    c.ldm.model.schedule_steps = 1000;
    c.ldm.train = {.steps = 80000, .batch = 240, .lr = 3e-6, .lr_floor = 0.0, .checkpoint_every = 5000};
    c.sampling.griffin_lim_iterations = 64;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected smoke, desk or paper)");
  }
  c.validate();
  return c;
}

json PipelineConfig::to_json() const {
  json j;
  j["preset"] = preset;
  j["seed"] = seed;
  j["corpus"] = {{"n_clips", corpus.n_clips},
                 {"n_singers", corpus.n_singers},
                 {"tempo_lo", corpus.tempo_lo},
                 {"tempo_hi", corpus.tempo_hi},
                 {"min_seconds", corpus.min_seconds},
                 {"max_seconds", corpus.max_seconds},
                 {"major_fraction", corpus.major_fraction},
                 {"holdout_fraction", corpus.holdout_fraction},
                 {"seed", corpus.seed}};
  j["codec"] = {{"feature_dim", codec.feature_dim},
                {"num_books", codec.num_books},
                {"book_size", codec.book_size},
                {"iterations", codec.iterations},
                {"projection_seed", codec.projection_seed}};
  j["vae"] = {{"model", vae.model.to_json()}, {"train", schedule_json(vae.train)}};
  j["midi"] = {{"sizes", sizes_json(midi.sizes)}, {"train", schedule_json(midi.train)}};
  j["vocal"] = {{"sizes", sizes_json(vocal.sizes)},
                {"train", schedule_json(vocal.train)},
                {"mode", to_string(vocal.mode)},
                {"ref_frames", vocal.ref_frames},
                {"max_free_frames", vocal.max_free_frames}};
  json model = ldm.model.to_json();
  for (const char* k : {"book_size", "prompt_vocab"}) model.erase(k);  // taken from the codec and encoder
  j["ldm"] = {{"model", model}, {"train", schedule_json(ldm.train)}, {"guidance", ldm.guidance}};
  j["sampling"] = {{"midi", sampler_json(sampling.midi)},
                   {"vocal", sampler_json(sampling.vocal)},
                   {"griffin_lim_iterations", sampling.griffin_lim_iterations},
                   {"stem_gain_db", sampling.stem_gain_db}};
  return j;
}

PipelineConfig PipelineConfig::from_json(const json& user) {
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  const std::string name = user.contains("preset") ? user.at("preset").get<std::string>() : "smoke";
  json j = from_preset(name).to_json();
  check_keys(user, j, "");
  j.merge_patch(user);
  PipelineConfig c;
  try {
    c.preset = name;
    c.seed = j.at("seed").get<std::uint64_t>();
    const json& co = j.at("corpus");
    c.corpus.n_clips = co.at("n_clips").get<int>();
    c.corpus.n_singers = co.at("n_singers").get<int>();
    c.corpus.tempo_lo = co.at("tempo_lo").get<double>();
    c.corpus.tempo_hi = co.at("tempo_hi").get<double>();
    c.corpus.min_seconds = co.at("min_seconds").get<double>();
    c.corpus.max_seconds = co.at("max_seconds").get<double>();
    c.corpus.major_fraction = co.at("major_fraction").get<double>();
    c.corpus.holdout_fraction = co.at("holdout_fraction").get<double>();
    c.corpus.seed = co.at("seed").get<std::uint64_t>();
    const json& cd = j.at("codec");
    c.codec.feature_dim = cd.at("feature_dim").get<int>();
    c.codec.num_books = cd.at("num_books").get<int>();
    c.codec.book_size = cd.at("book_size").get<int>();
    c.codec.iterations = cd.at("iterations").get<int>();
    c.codec.projection_seed = cd.at("projection_seed").get<std::uint64_t>();
    c.vae.model = VaeConfig::from_json(j.at("vae").at("model"));
    c.vae.train = schedule_from(j.at("vae").at("train"));
    c.midi.sizes = sizes_from(j.at("midi").at("sizes"));
    c.midi.train = schedule_from(j.at("midi").at("train"));
    const json& vo = j.at("vocal");
    c.vocal.sizes = sizes_from(vo.at("sizes"));
    c.vocal.train = schedule_from(vo.at("train"));
    c.vocal.mode = vocal_mode_from_string(vo.at("mode").get<std::string>());
    c.vocal.ref_frames = vo.at("ref_frames").get<int>();
    c.vocal.max_free_frames = vo.at("max_free_frames").get<int>();
    c.ldm.model = DenoiserConfig::from_json(j.at("ldm").at("model"));
    c.ldm.train = schedule_from(j.at("ldm").at("train"));
    c.ldm.guidance = j.at("ldm").at("guidance").get<double>();
    const json& sa = j.at("sampling");
    c.sampling.midi = sampler_from(sa.at("midi"));
    c.sampling.vocal = sampler_from(sa.at("vocal"));
    c.sampling.griffin_lim_iterations = sa.at("griffin_lim_iterations").get<int>();
    c.sampling.stem_gain_db = sa.at("stem_gain_db").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void PipelineConfig::validate() const {
  if (corpus.n_clips < 2 || corpus.n_singers < 1) throw ConfigError("corpus needs at least 2 clips and 1 singer");
  if (!(corpus.min_seconds >= 1.0 && corpus.min_seconds <= corpus.max_seconds && corpus.max_seconds <= 30.0))
    throw ConfigError("clip durations must satisfy 1 <= min_seconds <= max_seconds <= 30");
  if (!(corpus.tempo_lo > 0.0 && corpus.tempo_lo <= corpus.tempo_hi)) throw ConfigError("bad tempo range");
  if (corpus.major_fraction < 0.0 || corpus.major_fraction > 1.0) throw ConfigError("major_fraction must lie in [0, 1]");
  if (corpus.holdout_fraction < 0.0 || corpus.holdout_fraction >= 1.0)
    throw ConfigError("holdout_fraction must lie in [0, 1)");
  if (codec.feature_dim < 1 || codec.feature_dim > kMelBins || codec.num_books < kLmCodebooks || codec.book_size < 2 ||
      codec.book_size > 65536 || codec.iterations < 1)
    throw ConfigError("codec: feature_dim in [1, 80], at least 3 books, 2..65536 codewords");
  vae.model.validate();
  if (vae.model.mel_bins != kMelBins) throw ConfigError("vae.model.mel_bins must be 80");
  check_schedule(vae.train, "vae");
  check_sizes(midi.sizes, "midi");
  check_schedule(midi.train, "midi");
  check_sizes(vocal.sizes, "vocal");
  check_schedule(vocal.train, "vocal");
  if (vocal.ref_frames < 1 || vocal.max_free_frames < 1) throw ConfigError("vocal: ref_frames and max_free_frames must be positive");
  ldm.model.validate();
  check_schedule(ldm.train, "ldm");
  if (ldm.guidance < 0.0) throw ConfigError("ldm.guidance must be non-negative");
  for (const Sampler* s : {&sampling.midi, &sampling.vocal})
    if (s->temperature < 0.0 || s->top_k < 0) throw ConfigError("sampler temperature and top_k must be non-negative");
  if (sampling.griffin_lim_iterations < 1) throw ConfigError("griffin_lim_iterations must be positive");
}

}  // namespace songgen
