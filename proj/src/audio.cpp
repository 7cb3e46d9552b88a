#include "songgen/audio.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>

#include <fftw3.h>

#include "songgen/binary_io.hpp"
#include "songgen/error.hpp"
#include "songgen/random.hpp"

namespace songgen {

namespace {

constexpr int kSpecBins = kFftSize / 2 + 1;
constexpr char kMelMagic[8] = {'S', 'G', 'M', 'E', 'L', '0', '0', '1'};

double filter_edge_hz(int i) {
  const double top = hz_to_mel_scale(kSampleRate / 2.0);
  return mel_scale_to_hz(top * i / (kMelBins + 1));
}

const std::vector<double>& hann() {
  static const std::vector<double> w = [] {
    std::vector<double> v(kFftSize);
    for (int n = 0; n < kFftSize; ++n) v[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / kFftSize);
    return v;
  }();
  return w;
}

class Fft {
 public:
  Fft() {
    time_ = static_cast<double*>(fftw_malloc(sizeof(double) * kFftSize));
    freq_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * kSpecBins));
    fwd_ = fftw_plan_dft_r2c_1d(kFftSize, time_, freq_, FFTW_ESTIMATE);
    inv_ = fftw_plan_dft_c2r_1d(kFftSize, freq_, time_, FFTW_ESTIMATE);
  }
  ~Fft() {
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
    fftw_free(time_);
    fftw_free(freq_);
  }
  Fft(const Fft&) = delete;
  Fft& operator=(const Fft&) = delete;

  using Spectrum = std::vector<std::complex<double>>;  // frames x kSpecBins

  Spectrum stft(std::span<const double> x, int frames) {
    Spectrum out(static_cast<std::size_t>(frames) * kSpecBins);
    const auto& w = hann();
    for (int t = 0; t < frames; ++t) {
      const long start = static_cast<long>(t) * kHopSize - kFftSize / 2;
      for (int n = 0; n < kFftSize; ++n) {
        const long i = start + n;
        time_[n] = (i >= 0 && i < static_cast<long>(x.size())) ? x[static_cast<std::size_t>(i)] * w[n] : 0.0;
      }
      fftw_execute(fwd_);
      for (int k = 0; k < kSpecBins; ++k) out[static_cast<std::size_t>(t) * kSpecBins + k] = {freq_[k][0], freq_[k][1]};
    }
    return out;
  }

  std::vector<double> istft(const Spectrum& spec, int frames, std::size_t length) {
    std::vector<double> y(length, 0.0), norm(length, 0.0);
    const auto& w = hann();
    for (int t = 0; t < frames; ++t) {
      for (int k = 0; k < kSpecBins; ++k) {
        freq_[k][0] = spec[static_cast<std::size_t>(t) * kSpecBins + k].real();
        freq_[k][1] = spec[static_cast<std::size_t>(t) * kSpecBins + k].imag();
      }
      fftw_execute(inv_);
      const long start = static_cast<long>(t) * kHopSize - kFftSize / 2;
      for (int n = 0; n < kFftSize; ++n) {
        const long i = start + n;
        if (i < 0 || i >= static_cast<long>(length)) continue;
        y[static_cast<std::size_t>(i)] += time_[n] / kFftSize * w[n];
        norm[static_cast<std::size_t>(i)] += w[n] * w[n];
      }
    }
    for (std::size_t i = 0; i < length; ++i)
      if (norm[i] > 1e-8) y[i] /= norm[i];
    return y;
  }

 private:
  double* time_;
  fftw_complex* freq_;
  fftw_plan fwd_;
  fftw_plan inv_;
};

}  // namespace

double hz_to_mel_scale(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_scale_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

double mel_filter_response(int bin, double hz) {
  const double lo = filter_edge_hz(bin), mid = filter_edge_hz(bin + 1), hi = filter_edge_hz(bin + 2);
  if (hz <= lo || hz >= hi) return 0.0;
  return hz < mid ? (hz - lo) / (mid - lo) : (hi - hz) / (hi - mid);
}

const MatrixRM& mel_filterbank() {
  static const MatrixRM fb = [] {
    MatrixRM m(kMelBins, kSpecBins);
    for (int b = 0; b < kMelBins; ++b)
      for (int k = 0; k < kSpecBins; ++k) m(b, k) = mel_filter_response(b, k * double(kSampleRate) / kFftSize);
    return m;
  }();
  return fb;
}

void check_mel(const MatrixRM& mel) {
  if (mel.cols() != kMelBins) throw InvalidInput("mel spectrogram needs 80 bins, got " + std::to_string(mel.cols()));
  if (mel.rows() < 2) throw InvalidInput("mel spectrogram needs at least 2 frames");
  if (!mel.allFinite()) throw InvalidInput("mel spectrogram has non-finite entries");
}

void add_harmonic_tone(MatrixRM& power_mel, int frame, double f0_hz, double gain, int harmonics) {
  if (frame < 0 || frame >= power_mel.rows()) throw InvalidInput("tone frame out of range");
  if (!(f0_hz > 0.0)) return;
  for (int h = 1; h <= harmonics; ++h) {
    const double f = h * f0_hz;
    if (f >= kSampleRate / 2.0) break;
    const double p = gain * gain / (h * h);
    // Each partial lands in at most two adjacent filters.
    const double m = hz_to_mel_scale(f) / hz_to_mel_scale(kSampleRate / 2.0) * (kMelBins + 1);
    const int first = std::max(0, static_cast<int>(std::floor(m)) - 2);
    for (int b = first; b < std::min(kMelBins, first + 4); ++b) power_mel(frame, b) += p * mel_filter_response(b, f);
  }
}

MatrixRM power_to_log_mel(const MatrixRM& power_mel) {
  return power_mel.array().max(kMelPowerFloor).log().matrix();
}

MatrixRM log_mel_from_audio(std::span<const float> audio) {
  if (audio.empty()) throw InvalidInput("empty audio");
  const int frames = static_cast<int>((audio.size() + kHopSize - 1) / kHopSize);
  std::vector<double> x(audio.begin(), audio.end());
  Fft fft;
  const auto spec = fft.stft(x, frames);
  MatrixRM power(frames, kSpecBins);
  for (int t = 0; t < frames; ++t)
    for (int k = 0; k < kSpecBins; ++k) power(t, k) = std::norm(spec[static_cast<std::size_t>(t) * kSpecBins + k]);
  return power_to_log_mel(power * mel_filterbank().transpose());
}

std::vector<float> griffin_lim(const MatrixRM& log_mel, int iterations, std::uint64_t seed) {
  check_mel(log_mel);
  const MatrixRM& fb = mel_filterbank();
  const int frames = static_cast<int>(log_mel.rows());
  // Spread each filter's power evenly over the FFT bins it covers.
  const Eigen::RowVectorXd width = fb.rowwise().sum().transpose();
  const Eigen::RowVectorXd cover = fb.colwise().sum();
  MatrixRM mel_power = log_mel.array().exp().matrix();
  for (int b = 0; b < kMelBins; ++b) mel_power.col(b) /= std::max(width(b), 1e-12);
  MatrixRM power = mel_power * fb;
  for (int k = 0; k < kSpecBins; ++k) power.col(k) /= std::max(cover(k), 1e-12);
  // non-negative least-squares refinement of fb * power = target (multiplicative updates)
  const MatrixRM target = log_mel.array().exp().matrix();
  const MatrixRM numer = target * fb;
  const MatrixRM gram = fb.transpose() * fb;
  for (int it = 0; it < 30; ++it) {
    const MatrixRM denom = power * gram;
    power = (power.array() * numer.array() / (denom.array() + 1e-30)).matrix();
  }
  const MatrixRM mag = power.array().max(0.0).sqrt().matrix();

  Rng rng(mix_seed(seed, 0x474c));
  Fft fft;
  Fft::Spectrum spec(static_cast<std::size_t>(frames) * kSpecBins);
  for (int t = 0; t < frames; ++t)
    for (int k = 0; k < kSpecBins; ++k)
      spec[static_cast<std::size_t>(t) * kSpecBins + k] =
          std::polar(mag(t, k), 2.0 * std::numbers::pi * uniform01(rng));
  const std::size_t length = static_cast<std::size_t>(frames) * kHopSize;
  std::vector<double> y = fft.istft(spec, frames, length);
  for (int it = 0; it < iterations; ++it) {
    const auto est = fft.stft(y, frames);
    for (std::size_t i = 0; i < spec.size(); ++i) {
      const double a = std::abs(est[i]);
      const double m = mag(static_cast<Eigen::Index>(i / kSpecBins), static_cast<Eigen::Index>(i % kSpecBins));
      spec[i] = a > 1e-12 ? est[i] * (m / a) : std::complex<double>(m, 0.0);
    }
    y = fft.istft(spec, frames, length);
  }
  double peak = 0.0;
  for (double v : y) peak = std::max(peak, std::abs(v));
  std::vector<float> out(length);
  const double g = peak > 0.0 ? 0.9 / peak : 0.0;
  for (std::size_t i = 0; i < length; ++i) out[i] = static_cast<float>(y[i] * g);
  return out;
}

void write_wav(const std::filesystem::path& path, const Wav& wav) {
  if (wav.sample_rate <= 0) throw InvalidInput("sample rate must be positive");
  const auto n = static_cast<std::uint32_t>(wav.samples.size());
  BinaryWriter w(path);
  w.bytes("RIFF", 4);
  w.pod(static_cast<std::uint32_t>(36 + 2 * n));
  w.bytes("WAVEfmt ", 8);
  w.pod(std::uint32_t{16});
  w.pod(std::uint16_t{1});
  w.pod(std::uint16_t{1});
  w.pod(static_cast<std::uint32_t>(wav.sample_rate));
  w.pod(static_cast<std::uint32_t>(wav.sample_rate * 2));
  w.pod(std::uint16_t{2});
  w.pod(std::uint16_t{16});
  w.bytes("data", 4);
  w.pod(2 * n);
  for (float s : wav.samples) {
    const double c = std::clamp(static_cast<double>(s), -1.0, 1.0);
    w.pod(static_cast<std::int16_t>(std::lround(c * 32767.0)));
  }
  w.close();
}

Wav read_wav(const std::filesystem::path& path) {
  BinaryReader r(path);
  char tag[4];
  r.bytes(tag, 4);
  if (std::string(tag, 4) != "RIFF") throw FormatError("not a RIFF file: " + path.string());
  r.pod<std::uint32_t>();
  r.bytes(tag, 4);
  if (std::string(tag, 4) != "WAVE") throw FormatError("not a WAVE file: " + path.string());
  Wav wav;
  bool have_fmt = false;
  while (true) {
    r.bytes(tag, 4);
    const auto size = r.pod<std::uint32_t>();
    const std::string id(tag, 4);
    if (id == "fmt ") {
      if (size < 16) throw FormatError("short fmt chunk in " + path.string());
      const auto format = r.pod<std::uint16_t>();
      const auto channels = r.pod<std::uint16_t>();
      wav.sample_rate = static_cast<int>(r.pod<std::uint32_t>());
      r.pod<std::uint32_t>();
      r.pod<std::uint16_t>();
      const auto bits = r.pod<std::uint16_t>();
      if (format != 1 || channels != 1 || bits != 16)
        throw FormatError("only 16-bit PCM mono is supported: " + path.string());
      std::vector<char> rest(size - 16);
      if (!rest.empty()) r.bytes(rest.data(), rest.size());
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError("data before fmt in " + path.string());
      wav.samples.resize(size / 2);
      for (auto& s : wav.samples) s = static_cast<float>(r.pod<std::int16_t>() / 32767.0);
      return wav;
    } else {
      std::vector<char> skip(size + (size & 1));
      if (!skip.empty()) r.bytes(skip.data(), skip.size());
    }
  }
}

Wav remix(const Wav& vocal, const Wav& accomp, double stem_gain_db) {
  if (vocal.sample_rate != accomp.sample_rate) throw InvalidInput("stems have different sample rates");
  const double g = std::pow(10.0, stem_gain_db / 20.0);
  Wav mix;
  mix.sample_rate = vocal.sample_rate;
  std::vector<double> sum(std::max(vocal.samples.size(), accomp.samples.size()), 0.0);
  for (std::size_t i = 0; i < vocal.samples.size(); ++i) sum[i] += g * vocal.samples[i];
  for (std::size_t i = 0; i < accomp.samples.size(); ++i) sum[i] += g * accomp.samples[i];
  double peak = 0.0;
  for (double v : sum) peak = std::max(peak, std::abs(v));
  const double norm = peak > 0.0 ? 0.99 / peak : 0.0;
  mix.samples.resize(sum.size());
  for (std::size_t i = 0; i < sum.size(); ++i) mix.samples[i] = static_cast<float>(sum[i] * norm);
  return mix;
}

void save_mel(const std::filesystem::path& path, const MatrixRM& mel) {
  check_mel(mel);
  BinaryWriter w(path);
  w.bytes(kMelMagic, 8);
  w.pod(static_cast<std::uint32_t>(mel.rows()));
  w.pod(static_cast<std::uint32_t>(mel.cols()));
  for (Eigen::Index i = 0; i < mel.size(); ++i) w.pod(static_cast<float>(mel.data()[i]));
  w.close();
}

MatrixRM load_mel(const std::filesystem::path& path) {
  BinaryReader r(path);
  char magic[8];
  r.bytes(magic, 8);
  if (!std::equal(magic, magic + 8, kMelMagic)) throw FormatError("not a mel file: " + path.string());
  const auto rows = r.pod<std::uint32_t>();
  const auto cols = r.pod<std::uint32_t>();
  if (cols != kMelBins || rows < 2 || rows > 1'000'000) throw FormatError("implausible mel header in " + path.string());
  MatrixRM mel(rows, cols);
  for (Eigen::Index i = 0; i < mel.size(); ++i) mel.data()[i] = r.pod<float>();
  if (!r.at_end()) throw FormatError("trailing bytes in " + path.string());
  if (!mel.allFinite()) throw FormatError("non-finite values in " + path.string());
  return mel;
}

}  // namespace songgen
