/**
 * @file accomp_diffusion.hpp
 * @brief Stage 2: mel VAE, noise schedule and a latent denoiser with hybrid conditioning.
 *
 * The denoiser sees Z_t = [s ; (a ⊕ z_t) W]: prompt rows s ride along un-noised in front of
 * the noisy latent rows, and the vocal features a are fused with z_t channel-wise. Only the
 * latent rows are predicted, scored and returned.
 */
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "songgen/audio.hpp"
#include "songgen/layers.hpp"
#include "songgen/vocal_stage.hpp"

namespace songgen {

inline constexpr int kLatentDim = 20;
inline constexpr int kVaeRatio = 2;
inline constexpr double kLatentRateHz = kMelFrameRateHz / kVaeRatio;

// --- VAE -----------------------------------------------------------------------------

struct VaeConfig {
  int mel_bins = kMelBins;
  int hidden = 64;
  int latent = kLatentDim;
  double kl_weight = 1e-3;

  void validate() const;
  nlohmann::json to_json() const;
  static VaeConfig from_json(const nlohmann::json& j);
};

struct VaeEncoding {
  nn::Mat mu;
  nn::Mat log_sigma;
  nn::Mat sample;
  bool padded = false;  // an odd input was extended by repeating its last frame
  double kl = 0.0;      // mean KL per latent frame
};

/// 1-D convolutional VAE that halves the frame rate: T x 80 mel <-> T/2 x 20 latent.
class MelVae {
 public:
  MelVae(VaeConfig cfg, std::uint64_t seed);

  const VaeConfig& config() const { return cfg_; }
  nn::ParameterStore& params() { return params_; }

  /// Per-bin statistics used to standardise mels before encoding.
  void fit_normalization(std::span<const MatrixRM> mels);
  /// Multiplier that brings encoder means to unit scale for the diffusion model.
  double latent_scale() const { return latent_scale_; }
  void calibrate_latent_scale(std::span<const MatrixRM> mels);

  /// `rng` == nullptr forces sigma to zero so sample == mu. Throws InvalidInput on non-finite input.
  VaeEncoding encode(const MatrixRM& mel, Rng* rng = nullptr) const;
  MatrixRM decode(const nn::Mat& z) const;

  /// Reconstruction MSE in standardised units plus the weighted KL term.
  nn::Var loss(nn::Graph& g, const MatrixRM& mel, Rng& rng) const;

  void save(const std::filesystem::path& path, long optimizer_steps = 0) const;
  static MelVae load(const std::filesystem::path& path, long* steps = nullptr);

 private:
  struct Encoded {
    nn::Var mu, log_sigma;
  };
  nn::Mat standardise(const MatrixRM& mel) const;
  Encoded encode_graph(nn::Graph& g, const nn::Mat& x) const;
  nn::Var decode_graph(nn::Graph& g, nn::Var z) const;

  VaeConfig cfg_;
  nn::ParameterStore params_;
  Eigen::RowVectorXd mean_, std_;
  double latent_scale_ = 1.0;
  nn::Conv1d enc1_, enc2_;
  nn::Linear enc_head_;
  nn::Linear dec_in_;
  nn::Conv1d dec1_, dec2_;
};

/// Repeats the last frame of an odd-length mel.
MatrixRM pad_to_even(const MatrixRM& mel, bool* padded = nullptr);

double vae_train_step(MelVae& vae, nn::Adam& opt, std::span<const MatrixRM> batch, Rng& rng);

// --- schedule ------------------------------------------------------------------------

class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  /// Linear betas from beta_start to beta_end over `steps` steps.
  static NoiseSchedule linear(int steps, double beta_start, double beta_end);
  /// Linear 1e-4..0.02 at 1000 steps; shorter schedules scale both ends by 1000/steps so
  /// the total noise stays comparable.
  static NoiseSchedule scaled_linear(int steps);

  int steps() const { return static_cast<int>(betas_.size()); }
  /// 1-based accessors.
  double beta(int t) const { return betas_.at(static_cast<std::size_t>(t - 1)); }
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const { return alpha_bars_.at(static_cast<std::size_t>(t - 1)); }
  double sigma(int t) const { return std::sqrt(beta(t)); }

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. Throws InvalidInput unless 1 <= t <= T.
nn::Mat forward_diffuse(const nn::Mat& z0, int t, const nn::Mat& eps, const NoiseSchedule& schedule);

// --- hybrid conditioning -------------------------------------------------------------

/// Z_t = concat_rows(s, concat_cols(a, z_t) W). `s` may have zero rows.
/// Throws AlignmentError when a and z_t differ in length, InvalidInput on width mismatches.
nn::Var hybrid_condition(nn::Var z_t, nn::Var a, nn::Var s, nn::Var w);
nn::Mat hybrid_condition(const nn::Mat& z_t, const nn::Mat& a, const nn::Mat& s, const nn::Mat& w);

/// Nearest-neighbour map from N vocal frames to n_lat latent frames through the 1.5x mel rate.
std::vector<int> vocal_to_latent_index(int vocal_frames, int n_lat);
/// Latent frames for a vocal of N frames: ceil(ceil(1.5 N) / 2).
int latent_frames_for_vocal(int vocal_frames);

struct DenoiserConfig {
  int latent = kLatentDim;
  int width = 64;
  int layers = 2;
  int heads = 4;
  int book_size = kDefaultCodebookSize;
  int prompt_vocab = 1;
  int max_prompt = kMaxPromptTokens + kMaxAccompPromptTokens;  // melody prompt + accompaniment prompt
  int max_latent = 1125;  // 30 s at 37.5 Hz
  int schedule_steps = 100;
  double p_drop_each = 0.1;  // per prompt; marginal drop rate 1 - 0.9 * 0.9 = 0.19
  double p_drop_joint = 0.1;
  bool drop_vocal = false;  // also drop the vocal whenever both prompts are dropped

  void validate() const;
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

/// Conditioning inputs of one clip: vocal codes (N x 3, row-major) and the melody and
/// accompaniment prompt ids, which are concatenated into s.
struct AccompCondition {
  std::vector<int> codes;
  std::vector<int> melody_prompt;
  std::vector<int> accomp_prompt;

  int vocal_frames() const { return static_cast<int>(codes.size()) / kLmCodebooks; }
  std::vector<int> prompt(bool drop_melody = false, bool drop_accomp = false) const;
  static AccompCondition from_vocal(const VocalSequence& v, std::vector<int> melody_prompt,
                                    std::vector<int> accomp_prompt);
};

class LatentDenoiser {
 public:
  LatentDenoiser(DenoiserConfig cfg, std::uint64_t seed);

  const DenoiserConfig& config() const { return cfg_; }
  nn::ParameterStore& params() { return params_; }
  const nn::ParameterStore& params() const { return params_; }
  NoiseSchedule schedule() const { return NoiseSchedule::scaled_linear(cfg_.schedule_steps); }

  /// Summed code embeddings resampled to n_lat rows (a); zeros when `codes` is empty.
  nn::Var vocal_features(nn::Graph& g, std::span<const int> codes, int n_lat) const;
  /// Prompt rows s (n x width); n = min(len, max_prompt), possibly 0.
  nn::Var prompt_features(nn::Graph& g, std::span<const int> prompt) const;
  /// Full-length output (n + N) x latent; rows of the prompt region carry no meaning.
  nn::Var forward_full(nn::Graph& g, nn::Var z_t, nn::Var a, nn::Var s, int t) const;
  /// Latent rows only: N x latent noise prediction.
  nn::Var predict_eps(nn::Graph& g, nn::Var z_t, nn::Var a, nn::Var s, int t) const;

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}, long optimizer_steps = 0) const;
  static LatentDenoiser load(const std::filesystem::path& path, long* steps = nullptr);

 private:
  DenoiserConfig cfg_;
  nn::ParameterStore params_;
  std::vector<nn::Parameter*> code_emb_;
  nn::Parameter* prompt_emb_ = nullptr;
  nn::Parameter* prompt_pos_ = nullptr;
  nn::Parameter* latent_pos_ = nullptr;
  nn::Parameter* fuse_w_ = nullptr;
  nn::Linear in_proj_;
  nn::Linear time1_, time2_;
  nn::TransformerStack body_;
  nn::Linear out_proj_;
};

/// Sinusoidal embedding of a diffusion step (1 x width).
nn::Mat timestep_embedding(int t, int width);

/// Per-frame squared error summed over channels and averaged over the latent rows (rows >= n).
nn::Var latent_region_loss(nn::Var full_pred, const nn::Mat& full_target, int n);

/// Samples t and eps, applies conditioning dropout and returns the latent-region loss.
nn::Var diffusion_loss(const LatentDenoiser& model, nn::Graph& g, const nn::Mat& z0, const AccompCondition& c,
                       Rng& rng);
double ldm_train_step(LatentDenoiser& model, nn::Adam& opt, std::span<const nn::Mat> latents,
                      std::span<const AccompCondition> conds, Rng& rng);

/// Precomputed conditioning for repeated denoiser calls.
struct PreparedCondition {
  nn::Mat a;
  nn::Mat s;
};
PreparedCondition prepare_condition(const LatentDenoiser& model, const AccompCondition& c, int n_lat);

/// Guided noise prediction: eps_u + guidance (eps_c - eps_u), where eps_u drops both prompts.
nn::Mat guided_eps(const LatentDenoiser& model, const nn::Mat& z_t, const PreparedCondition& c, int t,
                   double guidance);
/// One-shot estimate of z_0 from z_t: (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t).
nn::Mat predict_z0(const LatentDenoiser& model, const nn::Mat& z_t, const PreparedCondition& c, int t,
                   double guidance = 1.0);
/// One ancestral step z_t -> z_{t-1} with sigma_t^2 = beta_t (no noise at t = 1).
nn::Mat denoise_step(const LatentDenoiser& model, const nn::Mat& z_t, const PreparedCondition& c, int t,
                     double guidance, Rng& rng);
/// Full reverse chain from z_T ~ N(0, I); returns z_0 in diffusion units.
nn::Mat sample_latent(const LatentDenoiser& model, const AccompCondition& c, int n_lat, std::uint64_t seed,
                      double guidance = 1.0);
/// Latents -> mel of 2 * n_lat frames for a vocal of N frames.
MatrixRM sample_accompaniment(const LatentDenoiser& model, const MelVae& vae, const AccompCondition& c,
                              std::uint64_t seed, double guidance = 1.0);

}  // namespace songgen
