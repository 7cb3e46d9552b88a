/**
 * @file config.hpp
 * @brief Run configuration: one JSON document with a preset name and per-stage sections.
 *
 * Loading starts from the named preset and merge-patches the document on top, so a config
 * file only needs the fields it changes.
 */
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "songgen/accomp_diffusion.hpp"
#include "songgen/multiscale_lm.hpp"
#include "songgen/vocal_stage.hpp"

namespace songgen {

struct CorpusConfig {
  int n_clips = 200;
  int n_singers = 4;
  double tempo_lo = 90.0, tempo_hi = 150.0;
  double min_seconds = 1.2, max_seconds = 2.4;
  double major_fraction = 0.6;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 1;
};

struct CodecConfig {
  int feature_dim = kDefaultFeatureDim;
  int num_books = kDefaultCodebooks;
  int book_size = kDefaultCodebookSize;
  int iterations = 10;
  std::uint64_t projection_seed = 7;
};

struct TrainSchedule {
  int steps = 300;
  int batch = 4;
  double lr = 3e-3;
  double lr_floor = 0.05;       // cosine decay to lr * lr_floor
  int checkpoint_every = 100;   // 0 saves only at the end
};

struct LmStageConfig {
  MultiScaleConfig sizes;  // only the size fields are used; vocabularies come from the data
  TrainSchedule train;
};

struct VocalStageConfig {
  MultiScaleConfig sizes;
  TrainSchedule train;
  VocalMode mode = VocalMode::expanded;
  int ref_frames = kReferenceFrames;
  int max_free_frames = 200;
};

struct VaeStageConfig {
  VaeConfig model;
  TrainSchedule train;
};

struct LdmStageConfig {
  DenoiserConfig model;
  TrainSchedule train;
  double guidance = 1.0;
};

struct SamplingConfig {
  Sampler midi;
  Sampler vocal;
  int griffin_lim_iterations = 32;
  double stem_gain_db = -3.0;
};

struct PipelineConfig {
  std::string preset = "smoke";
  std::uint64_t seed = 1234;
  CorpusConfig corpus;
  CodecConfig codec;
  VaeStageConfig vae;
  LmStageConfig midi;
  VocalStageConfig vocal;
  LdmStageConfig ldm;
  SamplingConfig sampling;

  /// "smoke", "desk" or "paper". Throws ConfigError on unknown names.
  static PipelineConfig from_preset(const std::string& name);
  /// Preset named by j["preset"] (default "smoke") merge-patched with j. Throws ConfigError
  /// on unknown keys, wrong types or invalid values.
  static PipelineConfig from_json(const nlohmann::json& j);
  static PipelineConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  void validate() const;
};

}  // namespace songgen
