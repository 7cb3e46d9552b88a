#include "songgen/accomp_diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "songgen/error.hpp"
#include "songgen/key_prompt.hpp"

namespace songgen {

using nn::Graph;
using nn::Mat;
using nn::Var;

namespace {

Mat normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
  return m;
}

std::vector<double> to_vector(const Eigen::RowVectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::RowVectorXd from_vector(const std::vector<double>& v) {
  Eigen::RowVectorXd r(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) r(static_cast<Eigen::Index>(i)) = v[i];
  return r;
}

}  // namespace

// --- VAE -----------------------------------------------------------------------------

void VaeConfig::validate() const {
  if (mel_bins < 1 || hidden < 1 || latent < 1) throw ConfigError("VAE sizes must be positive");
  if (kl_weight < 0.0) throw ConfigError("KL weight must be non-negative");
}

nlohmann::json VaeConfig::to_json() const {
  return {{"mel_bins", mel_bins}, {"hidden", hidden}, {"latent", latent}, {"kl_weight", kl_weight}};
}

VaeConfig VaeConfig::from_json(const nlohmann::json& j) {
  VaeConfig c;
  c.mel_bins = j.value("mel_bins", c.mel_bins);
  c.hidden = j.value("hidden", c.hidden);
  c.latent = j.value("latent", c.latent);
  c.kl_weight = j.value("kl_weight", c.kl_weight);
  c.validate();
  return c;
}

MatrixRM pad_to_even(const MatrixRM& mel, bool* padded) {
  const bool odd = mel.rows() % 2 == 1;
  if (padded) *padded = odd;
  if (!odd) return mel;
  MatrixRM out(mel.rows() + 1, mel.cols());
  out.topRows(mel.rows()) = mel;
  out.row(mel.rows()) = mel.row(mel.rows() - 1);
  return out;
}

MelVae::MelVae(VaeConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(mix_seed(seed, 0x564145));
  const int h = cfg_.hidden;
  enc1_ = nn::Conv1d(params_, "enc1", cfg_.mel_bins, h, 3, 1, rng);
  enc2_ = nn::Conv1d(params_, "enc2", h, h, 4, kVaeRatio, rng);
  enc_head_ = nn::Linear(params_, "enc_head", h, 2 * cfg_.latent, 1.0 / std::sqrt(double(h)), rng);
  dec_in_ = nn::Linear(params_, "dec_in", cfg_.latent, h, 1.0 / std::sqrt(double(cfg_.latent)), rng);
  dec1_ = nn::Conv1d(params_, "dec1", h, h, 3, 1, rng);
  dec2_ = nn::Conv1d(params_, "dec2", h, cfg_.mel_bins, 3, 1, rng);
  mean_ = Eigen::RowVectorXd::Zero(cfg_.mel_bins);
  std_ = Eigen::RowVectorXd::Ones(cfg_.mel_bins);
}

void MelVae::fit_normalization(std::span<const MatrixRM> mels) {
  if (mels.empty()) throw InsufficientData("no mels to fit normalisation on");
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(cfg_.mel_bins), sq = sum;
  double n = 0.0;
  for (const auto& m : mels) {
    if (m.cols() != cfg_.mel_bins) throw InvalidInput("mel width does not match the VAE");
    sum += m.colwise().sum();
    sq += m.array().square().matrix().colwise().sum();
    n += static_cast<double>(m.rows());
  }
  mean_ = sum / n;
  // Floor of 1 nat: bins that only carry the dither below the signal stay small.
  std_ = ((sq / n).array() - mean_.array().square()).max(0.0).sqrt().max(1.0).matrix();
}

void MelVae::calibrate_latent_scale(std::span<const MatrixRM> mels) {
  double sq = 0.0, n = 0.0;
  for (const auto& m : mels) {
    const auto e = encode(m);
    sq += e.mu.squaredNorm();
    n += static_cast<double>(e.mu.size());
  }
  if (n == 0.0 || sq == 0.0) throw InsufficientData("no latents to calibrate on");
  latent_scale_ = 1.0 / std::sqrt(sq / n);
}

Mat MelVae::standardise(const MatrixRM& mel) const {
  return ((mel.rowwise() - mean_).array().rowwise() / std_.array()).matrix();
}

MelVae::Encoded MelVae::encode_graph(Graph& g, const Mat& x) const {
  Var h = nn::gelu(enc1_(g, g.constant(x)));
  h = nn::gelu(enc2_(g, h));
  Var stats = enc_head_(g, h);
  return {nn::slice_cols(stats, 0, cfg_.latent), nn::slice_cols(stats, cfg_.latent, cfg_.latent)};
}

Var MelVae::decode_graph(Graph& g, Var z) const {
  Var h = nn::gelu(dec_in_(g, z));
  std::vector<int> up(static_cast<std::size_t>(z.rows() * kVaeRatio));
  for (std::size_t i = 0; i < up.size(); ++i) up[i] = static_cast<int>(i) / kVaeRatio;
  h = nn::gather_rows(h, up);
  h = nn::gelu(dec1_(g, h));
  return dec2_(g, h);
}

VaeEncoding MelVae::encode(const MatrixRM& mel, Rng* rng) const {
  if (!mel.allFinite()) throw InvalidInput("mel spectrogram has non-finite entries");
  if (mel.cols() != cfg_.mel_bins || mel.rows() < 2) throw InvalidInput("mel shape does not fit the VAE");
  VaeEncoding out;
  const MatrixRM even = pad_to_even(mel, &out.padded);
  Graph g(false);
  const Encoded e = encode_graph(g, standardise(even));
  out.mu = e.mu.value();
  out.log_sigma = e.log_sigma.value();
  if (rng) {
    out.sample = out.mu + (out.log_sigma.array().exp() * normal_matrix(out.mu.rows(), out.mu.cols(), *rng).array()).matrix();
  } else {
    out.sample = out.mu;
  }
  const auto ls = out.log_sigma.array();
  out.kl = 0.5 * (out.mu.array().square() + (2.0 * ls).exp() - 1.0 - 2.0 * ls).sum() / static_cast<double>(out.mu.rows());
  return out;
}

MatrixRM MelVae::decode(const Mat& z) const {
  if (z.cols() != cfg_.latent || z.rows() < 1) throw InvalidInput("latent shape does not fit the VAE");
  Graph g(false);
  const Mat y = decode_graph(g, g.constant(z)).value();
  return ((y.array().rowwise() * std_.array()).rowwise() + mean_.array()).matrix();
}

Var MelVae::loss(Graph& g, const MatrixRM& mel, Rng& rng) const {
  if (!mel.allFinite()) throw InvalidInput("mel spectrogram has non-finite entries");
  const Mat x = standardise(pad_to_even(mel));
  const Encoded e = encode_graph(g, x);
  const Mat eps = normal_matrix(e.mu.rows(), e.mu.cols(), rng);
  Var z = nn::add(e.mu, nn::mul(nn::exp(e.log_sigma), g.constant(eps)));
  Var recon = nn::mse(decode_graph(g, z), x);
  Var two_ls = nn::scale(e.log_sigma, 2.0);
  Var kl_terms = nn::sub(nn::add(nn::mul(e.mu, e.mu), nn::exp(two_ls)), two_ls);
  const double count = static_cast<double>(e.mu.value().size());
  Var kl = nn::scale(nn::add(nn::sum_all(kl_terms), g.constant(Mat::Constant(1, 1, -count))),
                     0.5 / static_cast<double>(e.mu.rows()));
  return nn::add(recon, nn::scale(kl, cfg_.kl_weight));
}

void MelVae::save(const std::filesystem::path& path, long optimizer_steps) const {
  nlohmann::json h = {{"kind", "mel_vae"},
                      {"config", cfg_.to_json()},
                      {"mean", to_vector(mean_)},
                      {"std", to_vector(std_)},
                      {"latent_scale", latent_scale_}};
  nn::save_checkpoint(path, h, params_, optimizer_steps);
}

MelVae MelVae::load(const std::filesystem::path& path, long* steps) {
  const auto h = nn::read_checkpoint_header(path);
  if (h.value("kind", "") != "mel_vae") throw FormatError(path.string() + " is not a VAE checkpoint");
  MelVae v(VaeConfig::from_json(h.at("config")), 0);
  v.mean_ = from_vector(h.at("mean").get<std::vector<double>>());
  v.std_ = from_vector(h.at("std").get<std::vector<double>>());
  v.latent_scale_ = h.at("latent_scale").get<double>();
  if (v.mean_.size() != v.cfg_.mel_bins || v.std_.size() != v.cfg_.mel_bins)
    throw FormatError("normalisation size mismatch in " + path.string());
  const long s = nn::load_checkpoint(path, v.params_);
  if (steps) *steps = s;
  return v;
}

double vae_train_step(MelVae& vae, nn::Adam& opt, std::span<const MatrixRM> batch, Rng& rng) {
  if (batch.empty()) throw InvalidInput("empty training batch");
  vae.params().zero_grad();
  double total = 0.0;
  const double w = 1.0 / static_cast<double>(batch.size());
  for (const auto& m : batch) {
    Graph g;
    Var l = vae.loss(g, m, rng);
    total += l.scalar();
    g.backward(l, w);
  }
  opt.step(vae.params());
  return total * w;
}

// --- schedule ------------------------------------------------------------------------

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw InvalidInput("schedule needs at least one step");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
    throw InvalidInput("betas must satisfy 0 < start <= end < 1");
  NoiseSchedule s;
  double abar = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double b = steps == 1 ? beta_end : beta_start + (beta_end - beta_start) * i / (steps - 1);
    s.betas_.push_back(b);
    abar *= 1.0 - b;
    s.alpha_bars_.push_back(abar);
  }
  return s;
}

NoiseSchedule NoiseSchedule::scaled_linear(int steps) {
  if (steps < 1) throw InvalidInput("schedule needs at least one step");
  const double k = 1000.0 / steps;
  return linear(steps, 1e-4 * k, std::min(0.02 * k, 0.999));
}

Mat forward_diffuse(const Mat& z0, int t, const Mat& eps, const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.steps())
    throw InvalidInput("diffusion step " + std::to_string(t) + " outside 1.." + std::to_string(schedule.steps()));
  if (z0.rows() != eps.rows() || z0.cols() != eps.cols()) throw InvalidInput("noise shape differs from latent shape");
  const double ab = schedule.alpha_bar(t);
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

// --- hybrid conditioning -------------------------------------------------------------

Var hybrid_condition(Var z_t, Var a, Var s, Var w) {
  if (a.rows() != z_t.rows())
    throw AlignmentError("vocal condition has " + std::to_string(a.rows()) + " rows, latent has " +
                         std::to_string(z_t.rows()));
  const Eigen::Index d = z_t.cols();
  if (a.cols() != d || w.rows() != 2 * d || w.cols() != d || (s.rows() > 0 && s.cols() != d))
    throw InvalidInput("hybrid conditioning widths disagree");
  const Var parts[] = {a, z_t};
  Var fused = nn::matmul(nn::concat_cols(parts), w);
  if (s.rows() == 0) return fused;
  const Var rows[] = {s, fused};
  return nn::concat_rows(rows);
}

Mat hybrid_condition(const Mat& z_t, const Mat& a, const Mat& s, const Mat& w) {
  Graph g(false);
  return hybrid_condition(g.constant(z_t), g.constant(a), g.constant(s), g.constant(w)).value();
}

int latent_frames_for_vocal(int vocal_frames) {
  const int mel = static_cast<int>(std::ceil(vocal_frames * kMelFrameRateHz / kTokenRateHz - 1e-9));
  return (mel + kVaeRatio - 1) / kVaeRatio;
}

std::vector<int> vocal_to_latent_index(int vocal_frames, int n_lat) {
  const int mel = static_cast<int>(std::ceil(vocal_frames * kMelFrameRateHz / kTokenRateHz - 1e-9));
  const auto up = nn::nearest_resample_index(vocal_frames, mel);
  const auto down = nn::nearest_resample_index(mel, n_lat);
  std::vector<int> idx(down.size());
  for (std::size_t i = 0; i < down.size(); ++i) idx[i] = up[static_cast<std::size_t>(down[i])];
  return idx;
}

void DenoiserConfig::validate() const {
  if (latent < 1 || width < 1 || layers < 1 || heads < 1 || width % heads != 0)
    throw ConfigError("denoiser sizes must be positive and width divisible by heads");
  if (book_size < 1 || prompt_vocab < 1 || max_prompt < 0 || max_latent < 1) throw ConfigError("bad denoiser vocabularies");
  if (schedule_steps < 1) throw ConfigError("schedule needs at least one step");
  if (p_drop_each < 0.0 || p_drop_each > 1.0 || p_drop_joint < 0.0 || p_drop_joint > 1.0)
    throw ConfigError("dropout probabilities must lie in [0, 1]");
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"latent", latent},         {"width", width},
          {"layers", layers},         {"heads", heads},
          {"book_size", book_size},   {"prompt_vocab", prompt_vocab},
          {"max_prompt", max_prompt}, {"max_latent", max_latent},
          {"schedule_steps", schedule_steps}, {"p_drop_each", p_drop_each},
          {"p_drop_joint", p_drop_joint},     {"drop_vocal", drop_vocal}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.latent = j.value("latent", c.latent);
  c.width = j.value("width", c.width);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.book_size = j.value("book_size", c.book_size);
  c.prompt_vocab = j.value("prompt_vocab", c.prompt_vocab);
  c.max_prompt = j.value("max_prompt", c.max_prompt);
  c.max_latent = j.value("max_latent", c.max_latent);
  c.schedule_steps = j.value("schedule_steps", c.schedule_steps);
  c.p_drop_each = j.value("p_drop_each", c.p_drop_each);
  c.p_drop_joint = j.value("p_drop_joint", c.p_drop_joint);
  c.drop_vocal = j.value("drop_vocal", c.drop_vocal);
  c.validate();
  return c;
}

std::vector<int> AccompCondition::prompt(bool drop_melody, bool drop_accomp) const {
  std::vector<int> ids;
  if (!drop_melody) ids.insert(ids.end(), melody_prompt.begin(), melody_prompt.end());
  if (!drop_accomp) ids.insert(ids.end(), accomp_prompt.begin(), accomp_prompt.end());
  return ids;
}

AccompCondition AccompCondition::from_vocal(const VocalSequence& v, std::vector<int> melody_prompt,
                                            std::vector<int> accomp_prompt) {
  AccompCondition c;
  const auto codes = v.codes();
  c.codes.assign(codes.data().begin(), codes.data().end());
  c.melody_prompt = std::move(melody_prompt);
  c.accomp_prompt = std::move(accomp_prompt);
  return c;
}

LatentDenoiser::LatentDenoiser(DenoiserConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(mix_seed(seed, 0x4c444d));
  const int d = cfg_.width;
  for (int q = 0; q < kLmCodebooks; ++q)
    code_emb_.push_back(&params_.create("code" + std::to_string(q) + ".emb", cfg_.book_size, d, 0.02, rng));
  prompt_emb_ = &params_.create("prompt.emb", cfg_.prompt_vocab, d, 0.02, rng);
  prompt_pos_ = &params_.create("prompt.pos", std::max(cfg_.max_prompt, 1), d, 0.02, rng);
  latent_pos_ = &params_.create("latent.pos", cfg_.max_latent, d, 0.02, rng);
  in_proj_ = nn::Linear(params_, "in_proj", cfg_.latent, d, 1.0 / std::sqrt(double(cfg_.latent)), rng);
  fuse_w_ = &params_.create("fuse.w", 2 * d, d, 1.0 / std::sqrt(2.0 * d), rng);
  time1_ = nn::Linear(params_, "time1", d, d, 1.0 / std::sqrt(double(d)), rng);
  time2_ = nn::Linear(params_, "time2", d, d, 1.0 / std::sqrt(double(d)), rng);
  body_ = nn::TransformerStack(params_, "body", cfg_.layers, d, cfg_.heads, rng);
  out_proj_ = nn::Linear(params_, "out_proj", d, cfg_.latent, 0.02, rng);
}

Var LatentDenoiser::vocal_features(Graph& g, std::span<const int> codes, int n_lat) const {
  if (codes.empty()) return g.constant(Mat::Zero(n_lat, cfg_.width));
  if (codes.size() % kLmCodebooks != 0) throw InvalidInput("vocal codes must come in groups of three");
  const int frames = static_cast<int>(codes.size()) / kLmCodebooks;
  const auto idx = vocal_to_latent_index(frames, n_lat);
  Var sum;
  for (int q = 0; q < kLmCodebooks; ++q) {
    std::vector<int> ids(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const int c = codes[static_cast<std::size_t>(idx[i] * kLmCodebooks + q)];
      if (c < 0 || c >= cfg_.book_size) throw InvalidInput("vocal code " + std::to_string(c) + " outside the codebook");
      ids[i] = c;
    }
    Var e = nn::gather_rows(g.param(*code_emb_[static_cast<std::size_t>(q)]), ids);
    sum = q == 0 ? e : nn::add(sum, e);
  }
  return sum;
}

Var LatentDenoiser::prompt_features(Graph& g, std::span<const int> prompt) const {
  const auto n = std::min<std::size_t>(prompt.size(), static_cast<std::size_t>(cfg_.max_prompt));
  if (n == 0) return g.constant(Mat::Zero(0, cfg_.width));
  std::vector<int> ids(prompt.begin(), prompt.begin() + static_cast<std::ptrdiff_t>(n));
  for (int id : ids)
    if (id < 0 || id >= cfg_.prompt_vocab) throw InvalidInput("prompt id " + std::to_string(id) + " outside its vocabulary");
  std::vector<int> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = static_cast<int>(i);
  return nn::add(nn::gather_rows(g.param(*prompt_emb_), ids), nn::gather_rows(g.param(*prompt_pos_), pos));
}

Var LatentDenoiser::forward_full(Graph& g, Var z_t, Var a, Var s, int t) const {
  const int n_lat = static_cast<int>(z_t.rows());
  if (n_lat > cfg_.max_latent) throw InvalidInput("latent longer than the positional table");
  std::vector<int> pos(static_cast<std::size_t>(n_lat));
  for (int i = 0; i < n_lat; ++i) pos[static_cast<std::size_t>(i)] = i;
  Var z_in = nn::add(in_proj_(g, z_t), nn::gather_rows(g.param(*latent_pos_), pos));
  Var h = hybrid_condition(z_in, a, s, g.param(*fuse_w_));
  Var temb = time2_(g, nn::silu(time1_(g, g.constant(timestep_embedding(t, cfg_.width)))));
  h = nn::add_row(h, temb);
  return out_proj_(g, body_.forward(g, h, false));
}

Var LatentDenoiser::predict_eps(Graph& g, Var z_t, Var a, Var s, int t) const {
  return nn::slice_rows(forward_full(g, z_t, a, s, t), s.rows(), z_t.rows());
}

void LatentDenoiser::save(const std::filesystem::path& path, const nlohmann::json& extra, long optimizer_steps) const {
  nn::save_checkpoint(path, {{"kind", "latent_denoiser"}, {"config", cfg_.to_json()}, {"extra", extra}}, params_,
                      optimizer_steps);
}

LatentDenoiser LatentDenoiser::load(const std::filesystem::path& path, long* steps) {
  const auto h = nn::read_checkpoint_header(path);
  if (h.value("kind", "") != "latent_denoiser") throw FormatError(path.string() + " is not a denoiser checkpoint");
  LatentDenoiser m(DenoiserConfig::from_json(h.at("config")), 0);
  const long s = nn::load_checkpoint(path, m.params_);
  if (steps) *steps = s;
  return m;
}

Mat timestep_embedding(int t, int width) {
  Mat e(1, width);
  const int half = width / 2;
  for (int i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(10000.0) * i / std::max(half, 1));
    e(0, i) = std::sin(t * f);
    e(0, half + i) = std::cos(t * f);
  }
  if (width % 2 == 1) e(0, width - 1) = 0.0;
  return e;
}

Var latent_region_loss(Var full_pred, const Mat& full_target, int n) {
  if (full_pred.rows() != full_target.rows() || full_pred.cols() != full_target.cols())
    throw InvalidInput("loss target shape differs from the prediction");
  const Eigen::Index rows = full_pred.rows() - n;
  if (n < 0 || rows < 1) throw InvalidInput("no latent rows to score");
  Var pred = nn::slice_rows(full_pred, n, rows);
  // mse averages over rows * cols; rescale to a per-frame sum over channels
  return nn::scale(nn::mse(pred, full_target.bottomRows(rows)), static_cast<double>(full_pred.cols()));
}

Var diffusion_loss(const LatentDenoiser& model, Graph& g, const Mat& z0, const AccompCondition& c, Rng& rng) {
  const auto& cfg = model.config();
  if (z0.cols() != cfg.latent) throw InvalidInput("latent width does not fit the denoiser");
  const NoiseSchedule sched = model.schedule();
  const int t = 1 + uniform_int(rng, sched.steps());
  const Mat eps = normal_matrix(z0.rows(), z0.cols(), rng);
  const DropDecision drop = draw_condition_dropout(rng, cfg.p_drop_each, cfg.p_drop_joint);
  const std::vector<int> prompt = c.prompt(drop.drop_first, drop.drop_second);
  const bool no_vocal = cfg.drop_vocal && drop.drop_first && drop.drop_second;
  const std::span<const int> codes = no_vocal ? std::span<const int>{} : std::span<const int>(c.codes);
  const int n_lat = static_cast<int>(z0.rows());
  Var a = model.vocal_features(g, codes, n_lat);
  Var s = model.prompt_features(g, prompt);
  Var full = model.forward_full(g, g.constant(forward_diffuse(z0, t, eps, sched)), a, s, t);
  const int n = static_cast<int>(s.rows());
  Mat target = Mat::Zero(n + n_lat, cfg.latent);
  target.bottomRows(n_lat) = eps;
  return latent_region_loss(full, target, n);
}

double ldm_train_step(LatentDenoiser& model, nn::Adam& opt, std::span<const Mat> latents,
                      std::span<const AccompCondition> conds, Rng& rng) {
  if (latents.empty() || latents.size() != conds.size()) throw InvalidInput("batch latents and conditions disagree");
  model.params().zero_grad();
  double total = 0.0;
  const double w = 1.0 / static_cast<double>(latents.size());
  for (std::size_t i = 0; i < latents.size(); ++i) {
    Graph g;
    Var l = diffusion_loss(model, g, latents[i], conds[i], rng);
    total += l.scalar();
    g.backward(l, w);
  }
  opt.step(model.params());
  return total * w;
}

PreparedCondition prepare_condition(const LatentDenoiser& model, const AccompCondition& c, int n_lat) {
  Graph g(false);
  return {model.vocal_features(g, c.codes, n_lat).value(), model.prompt_features(g, c.prompt()).value()};
}

Mat guided_eps(const LatentDenoiser& model, const Mat& z_t, const PreparedCondition& c, int t, double guidance) {
  Graph g(false);
  Var z = g.constant(z_t);
  Var a = g.constant(c.a);
  const Mat cond = model.predict_eps(g, z, a, g.constant(c.s), t).value();
  if (guidance == 1.0 || c.s.rows() == 0) return cond;
  const Mat uncond = model.predict_eps(g, z, a, g.constant(Mat::Zero(0, c.a.cols())), t).value();
  return uncond + guidance * (cond - uncond);
}

Mat predict_z0(const LatentDenoiser& model, const Mat& z_t, const PreparedCondition& c, int t, double guidance) {
  const NoiseSchedule sched = model.schedule();
  if (t < 1 || t > sched.steps()) throw InvalidInput("diffusion step out of range");
  const double ab = sched.alpha_bar(t);
  return (z_t - std::sqrt(1.0 - ab) * guided_eps(model, z_t, c, t, guidance)) / std::sqrt(ab);
}

Mat denoise_step(const LatentDenoiser& model, const Mat& z_t, const PreparedCondition& c, int t, double guidance,
                 Rng& rng) {
  const NoiseSchedule sched = model.schedule();
  if (t < 1 || t > sched.steps()) throw InvalidInput("diffusion step out of range");
  const Mat eps = guided_eps(model, z_t, c, t, guidance);
  const double b = sched.beta(t);
  Mat mean = (z_t - b / std::sqrt(1.0 - sched.alpha_bar(t)) * eps) / std::sqrt(sched.alpha(t));
  if (t > 1) mean += sched.sigma(t) * normal_matrix(z_t.rows(), z_t.cols(), rng);
  return mean;
}

Mat sample_latent(const LatentDenoiser& model, const AccompCondition& c, int n_lat, std::uint64_t seed,
                  double guidance) {
  if (n_lat < 1) throw InvalidInput("need at least one latent frame");
  Rng rng(mix_seed(seed, 0x534d504c));
  const PreparedCondition prep = prepare_condition(model, c, n_lat);
  Mat z = normal_matrix(n_lat, model.config().latent, rng);
  for (int t = model.config().schedule_steps; t >= 1; --t) z = denoise_step(model, z, prep, t, guidance, rng);
  return z;
}

MatrixRM sample_accompaniment(const LatentDenoiser& model, const MelVae& vae, const AccompCondition& c,
                              std::uint64_t seed, double guidance) {
  if (c.vocal_frames() < 1) throw InvalidInput("accompaniment needs a vocal condition");
  const int n_lat = latent_frames_for_vocal(c.vocal_frames());
  const Mat z = sample_latent(model, c, n_lat, seed, guidance);
  return vae.decode(z / vae.latent_scale());
}

}  // namespace songgen
