#pragma once

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <memory>
#include <mutex>
#include <numbers>
#include <vector>

#include "coughvit/audio.hpp"
#include "coughvit/error.hpp"
#include "coughvit/tensor.hpp"

namespace coughvit {

/// Framing and filterbank parameters of the log-mel front end. Defaults: 25 ms
/// Hann frames every 10 ms at 16 kHz, 512-point FFT, 128 HTK-scale triangles
/// over 0-8 kHz.
struct MelConfig {
  int target_rate = 16000;
  int n_mels = 128;
  double frame_length = 0.025;  // seconds
  double frame_hop = 0.010;     // seconds
  int fft_size = 512;
  double mel_fmin = 0.0;
  double mel_fmax = 8000.0;
  double log_floor = 1e-10;

  [[nodiscard]] std::size_t frame_samples() const {
    return static_cast<std::size_t>(std::lround(frame_length * target_rate));
  }
  [[nodiscard]] std::size_t hop_samples() const {
    return static_cast<std::size_t>(std::lround(frame_hop * target_rate));
  }
  /// Value of a silent cell: ln(log_floor).
  [[nodiscard]] double silence_value() const { return std::log(log_floor); }

  void validate() const {
    require(target_rate > 0, "mel: target_rate must be positive");
    require(n_mels > 0, "mel: n_mels must be positive");
    require(frame_hop > 0.0 && frame_length > frame_hop, "mel: need frame_length > frame_hop > 0");
    require(hop_samples() >= 1, "mel: frame hop shorter than one sample");
    require(static_cast<std::size_t>(fft_size) >= frame_samples(), "mel: fft_size smaller than a frame");
    require(mel_fmin >= 0.0 && mel_fmin < mel_fmax && mel_fmax <= target_rate / 2.0,
            "mel: need 0 <= mel_fmin < mel_fmax <= target_rate/2");
    require(log_floor > 0.0, "mel: log_floor must be positive");
  }
};

/// Log-mel energies, one row per frame: values has shape [w, h].
struct MelSpectrogram {
  Tensor values;
  bool normalized = false;

  [[nodiscard]] std::size_t frames() const { return values.rank() == 2 ? values.shape()[0] : 0; }
  [[nodiscard]] std::size_t bins() const { return values.rank() == 2 ? values.shape()[1] : 0; }
};

/// Number of whole frames that fit in n_samples.
inline std::size_t frame_count(std::size_t n_samples, const MelConfig& cfg) {
  const std::size_t len = cfg.frame_samples();
  const std::size_t hop = cfg.hop_samples();
  if (n_samples < len)
    throw InputError("audio shorter than one frame (" + std::to_string(n_samples) + " < " + std::to_string(len) +
                     " samples)");
  return (n_samples - len) / hop + 1;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Center frequency (Hz) of each triangular filter.
inline std::vector<double> mel_filter_centers(const MelConfig& cfg) {
  const double lo = hz_to_mel(cfg.mel_fmin), hi = hz_to_mel(cfg.mel_fmax);
  std::vector<double> c(static_cast<std::size_t>(cfg.n_mels));
  for (int m = 0; m < cfg.n_mels; ++m) c[static_cast<std::size_t>(m)] = mel_to_hz(lo + (hi - lo) * (m + 1) / (cfg.n_mels + 1));
  return c;
}

/// Triangular filterbank of shape [n_mels, fft_size/2 + 1], peak weight 1.
inline Tensor mel_filterbank(const MelConfig& cfg) {
  const std::size_t n_bins = static_cast<std::size_t>(cfg.fft_size) / 2 + 1;
  const double lo = hz_to_mel(cfg.mel_fmin), hi = hz_to_mel(cfg.mel_fmax);
  std::vector<double> edges(static_cast<std::size_t>(cfg.n_mels) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
  Tensor fb = Tensor::matrix(static_cast<std::size_t>(cfg.n_mels), n_bins);
  for (std::size_t m = 0; m < static_cast<std::size_t>(cfg.n_mels); ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * cfg.target_rate / cfg.fft_size;
      double w = 0.0;
      if (f > left && f <= center) w = (f - left) / (center - left);
      else if (f > center && f < right) w = (right - f) / (right - center);
      fb.at(m, k) = w;
    }
  }
  return fb;
}

namespace detail {

/// Cached real-to-complex FFTW plan. Plan creation is serialized because the
/// FFTW planner is not thread-safe; execution on private buffers is.
class RealFft {
 public:
  explicit RealFft(int n) : n_(n) {
    in_ = fftw_alloc_real(static_cast<std::size_t>(n));
    out_ = fftw_alloc_complex(static_cast<std::size_t>(n / 2 + 1));
    static std::mutex planner;
    std::lock_guard lock(planner);
    plan_ = fftw_plan_dft_r2c_1d(n, in_, out_, FFTW_ESTIMATE);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;
  ~RealFft() {
    fftw_destroy_plan(plan_);
    fftw_free(in_);
    fftw_free(out_);
  }

  [[nodiscard]] int size() const { return n_; }
  double* input() { return in_; }

  /// |X_k|^2 for k = 0..n/2 of the current input buffer.
  void power(std::vector<double>& out) {
    fftw_execute(plan_);
    out.resize(static_cast<std::size_t>(n_ / 2 + 1));
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1];
  }

 private:
  int n_;
  double* in_;
  fftw_complex* out_;
  fftw_plan plan_;
};

inline RealFft& fft_for(int n) {
  thread_local std::unique_ptr<RealFft> fft;
  if (!fft || fft->size() != n) fft = std::make_unique<RealFft>(n);
  return *fft;
}

}  // namespace detail

/// Periodic Hann window.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return w;
}

/// Power spectrum of Hann-windowed frames, projected on the mel filterbank,
/// then ln(energy + log_floor).
inline MelSpectrogram log_mel_spectrogram(const Waveform& wave, const MelConfig& cfg) {
  cfg.validate();
  wave.validate();
  if (wave.sample_rate != cfg.target_rate)
    throw InputError("log_mel_spectrogram: waveform rate " + std::to_string(wave.sample_rate) + " Hz, expected " +
                     std::to_string(cfg.target_rate) + " Hz");
  const std::size_t w = frame_count(wave.samples.size(), cfg);
  const std::size_t len = cfg.frame_samples(), hop = cfg.hop_samples();
  const std::size_t h = static_cast<std::size_t>(cfg.n_mels);
  const Tensor fb = mel_filterbank(cfg);
  const auto win = hann_window(len);
  auto& fft = detail::fft_for(cfg.fft_size);
  std::vector<double> pw;

  MelSpectrogram spec{Tensor::matrix(w, h), false};
  for (std::size_t t = 0; t < w; ++t) {
    double* in = fft.input();
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.fft_size); ++i)
      in[i] = i < len ? wave.samples[t * hop + i] * win[i] : 0.0;
    fft.power(pw);
    for (std::size_t m = 0; m < h; ++m) {
      double e = 0.0;
      const auto f = fb.row(m);
      for (std::size_t k = 0; k < pw.size(); ++k) e += f[k] * pw[k];
      spec.values.at(t, m) = std::log(e + cfg.log_floor);
    }
  }
  if (!spec.values.all_finite()) throw NumericError("log_mel_spectrogram: non-finite output");
  return spec;
}

/// Truncate to, or pad up to, exactly target_frames frames. Padding frames
/// hold the silence value (ln(log_floor)) before normalization and 0 after.
inline MelSpectrogram fit_length(const MelSpectrogram& spec, std::size_t target_frames, double log_floor = 1e-10) {
  require(target_frames >= 1, "fit_length: target_frames must be >= 1");
  const std::size_t w = spec.frames(), h = spec.bins();
  if (w == target_frames) return spec;
  const double pad = spec.normalized ? 0.0 : std::log(log_floor);
  MelSpectrogram out{Tensor::matrix(target_frames, h, pad), spec.normalized};
  const std::size_t keep = std::min(w, target_frames);
  std::copy_n(spec.values.data().begin(), keep * h, out.values.data().begin());
  return out;
}

inline MelSpectrogram normalize(const MelSpectrogram& spec, double mean, double std) {
  require(std > 0.0, "normalize: std must be positive");
  require(!spec.normalized, "normalize: spectrogram is already normalized");
  MelSpectrogram out = spec;
  for (double& v : out.values.data()) v = (v - mean) / std;
  out.normalized = true;
  return out;
}

inline MelSpectrogram denormalize(const MelSpectrogram& spec, double mean, double std) {
  require(spec.normalized, "denormalize: spectrogram is not normalized");
  MelSpectrogram out = spec;
  for (double& v : out.values.data()) v = v * std + mean;
  out.normalized = false;
  return out;
}

/// load -> resample -> log-mel, the path every file in a manifest takes.
inline MelSpectrogram spectrogram_from_file(const std::filesystem::path& path, const MelConfig& cfg) {
  return log_mel_spectrogram(resample(load_wav(path), cfg.target_rate), cfg);
}

}  // namespace coughvit
