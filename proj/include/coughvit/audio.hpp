#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "coughvit/error.hpp"

namespace coughvit {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;

  [[nodiscard]] double duration() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }

  void validate() const {
    require(!samples.empty(), "waveform has no samples");
    require(sample_rate > 0, "waveform sample rate must be positive");
    for (double s : samples)
      if (!std::isfinite(s)) throw InputError("waveform contains non-finite samples");
  }
};

namespace detail {

inline std::uint32_t read_le(const unsigned char* p, int n) {
  std::uint32_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

inline void write_le(std::ostream& os, std::uint32_t v, int n) {
  for (int i = 0; i < n; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

}  // namespace detail

/// Reads a RIFF/WAVE file: integer PCM (8/16/24/32-bit) or 32-bit float,
/// any channel count. Channels are averaged to mono and integer samples are
/// scaled to [-1, 1] by their full-scale magnitude.
inline Waveform load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open audio file " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = " in " + path.string();
  if (buf.empty()) throw InputError("zero-length audio" + where);
  if (buf.size() < 12 || std::string(buf.begin(), buf.begin() + 4) != "RIFF" ||
      std::string(buf.begin() + 8, buf.begin() + 12) != "WAVE")
    throw InputError("not a RIFF/WAVE file" + where);

  int format = -1, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const std::string id(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.begin() + static_cast<std::ptrdiff_t>(pos) + 4);
    std::size_t len = detail::read_le(&buf[pos + 4], 4);
    const std::size_t body = pos + 8;
    len = std::min(len, buf.size() - body);
    if (id == "fmt ") {
      if (len < 16) throw InputError("truncated fmt chunk" + where);
      format = static_cast<int>(detail::read_le(&buf[body], 2));
      channels = static_cast<int>(detail::read_le(&buf[body + 2], 2));
      rate = detail::read_le(&buf[body + 4], 4);
      bits = static_cast<int>(detail::read_le(&buf[body + 14], 2));
      if (format == 0xFFFE && len >= 26) format = static_cast<int>(detail::read_le(&buf[body + 24], 2));
    } else if (id == "data") {
      data = &buf[body];
      data_len = len;
    }
    pos = body + len + (len & 1);
  }
  if (format < 0) throw InputError("missing fmt chunk" + where);
  if (!data) throw InputError("missing data chunk" + where);
  if (channels <= 0 || rate == 0) throw InputError("invalid channel count or sample rate" + where);
  const bool is_float = format == 3;
  if (!((format == 1 && (bits == 8 || bits == 16 || bits == 24 || bits == 32)) || (is_float && bits == 32)))
    throw InputError("unsupported WAV encoding (format " + std::to_string(format) + ", " + std::to_string(bits) +
                     " bits)" + where);
  const std::size_t bytes = static_cast<std::size_t>(bits / 8);
  const std::size_t frame = bytes * static_cast<std::size_t>(channels);
  const std::size_t n = data_len / frame;
  if (n == 0) throw InputError("zero-length audio" + where);

  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int c = 0; c < channels; ++c) {
      const unsigned char* p = data + i * frame + static_cast<std::size_t>(c) * bytes;
      const std::uint32_t raw = detail::read_le(p, static_cast<int>(bytes));
      double v;
      if (is_float) {
        v = static_cast<double>(std::bit_cast<float>(raw));
      } else if (bits == 8) {
        v = (static_cast<double>(raw) - 128.0) / 128.0;
      } else {
        // sign-extend to 32 bits, then scale by full-scale magnitude
        const int shift = 32 - bits;
        const auto s = static_cast<std::int32_t>(raw << shift) >> shift;
        v = static_cast<double>(s) / std::ldexp(1.0, bits - 1);
      }
      acc += v;
    }
    w.samples[i] = acc / static_cast<double>(channels);
  }
  w.validate();
  return w;
}

/// 16-bit PCM mono writer. Samples are clipped to [-1, 1].
inline void write_wav(const std::filesystem::path& path, const Waveform& w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write audio file " + path.string());
  const auto n = static_cast<std::uint32_t>(w.samples.size());
  out.write("RIFF", 4);
  detail::write_le(out, 36 + 2 * n, 4);
  out.write("WAVEfmt ", 8);
  detail::write_le(out, 16, 4);
  detail::write_le(out, 1, 2);
  detail::write_le(out, 1, 2);
  detail::write_le(out, static_cast<std::uint32_t>(w.sample_rate), 4);
  detail::write_le(out, static_cast<std::uint32_t>(w.sample_rate) * 2, 4);
  detail::write_le(out, 2, 2);
  detail::write_le(out, 16, 2);
  out.write("data", 4);
  detail::write_le(out, 2 * n, 4);
  for (double s : w.samples) {
    const double c = std::clamp(s, -1.0, 1.0);
    const auto q = static_cast<std::int16_t>(std::lround(c * 32767.0));
    detail::write_le(out, static_cast<std::uint16_t>(q), 2);
  }
  if (!out) throw InputError("failed writing " + path.string());
}

// ---- resampling -------------------------------------------------------------

struct ResamplerConfig {
  double kaiser_beta = 12.9;
  int zero_crossings = 64;  // per side of the sinc kernel
};

namespace detail {

inline double sinc(double x) {
  if (x == 0.0) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

inline double kaiser(double u, double beta) {
  if (std::abs(u) >= 1.0) return 0.0;
  return std::cyl_bessel_i(0.0, beta * std::sqrt(1.0 - u * u)) / std::cyl_bessel_i(0.0, beta);
}

}  // namespace detail

/// Band-limited rational resampling with a Kaiser-windowed sinc kernel. The
/// kernel is tabulated once per output phase (polyphase form).
inline Waveform resample(const Waveform& wave, int target_rate, const ResamplerConfig& cfg = {}) {
  require(target_rate > 0, "resample: target rate must be positive");
  wave.validate();
  if (wave.sample_rate == target_rate) return wave;

  const long src = wave.sample_rate;
  const long dst = target_rate;
  const long g = std::gcd(src, dst);
  const long up = dst / g;    // number of output phases
  const long down = src / g;  // input advance per `up` outputs
  const double cutoff = std::min(1.0, static_cast<double>(dst) / static_cast<double>(src));
  const double half_width = static_cast<double>(cfg.zero_crossings) / cutoff;  // in input samples
  const long taps = static_cast<long>(std::ceil(half_width));

  const auto n_in = static_cast<long>(wave.samples.size());
  const long n_out = std::max(1L, (n_in * dst + src / 2) / src);

  // phase p: output position has fractional input offset p/up
  // Tables are cached only when the phase count is modest; co-prime rate
  // pairs recompute the kernel per output sample instead.
  const bool cache = up <= 4096;
  std::map<long, std::vector<double>> table;
  std::vector<double> scratch;
  auto kernel = [&](long phase) -> const std::vector<double>& {
    auto it = table.find(phase);
    if (it != table.end()) return it->second;
    std::vector<double> k(static_cast<std::size_t>(2 * taps + 1));
    const double frac = static_cast<double>(phase) / static_cast<double>(up);
    for (long j = -taps; j <= taps; ++j) {
      const double d = static_cast<double>(j) - frac;  // input index minus exact position
      k[static_cast<std::size_t>(j + taps)] = cutoff * detail::sinc(cutoff * d) * detail::kaiser(d / half_width, cfg.kaiser_beta);
    }
    if (!cache) {
      scratch = std::move(k);
      return scratch;
    }
    return table.emplace(phase, std::move(k)).first->second;
  };

  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(static_cast<std::size_t>(n_out));
  for (long i = 0; i < n_out; ++i) {
    const long num = i * down;  // exact position = num / up
    const long base = num / up;
    const long phase = num % up;
    const auto& k = kernel(phase);
    double acc = 0.0;
    for (long j = -taps; j <= taps; ++j) {
      const long idx = base + j;
      if (idx < 0 || idx >= n_in) continue;
      acc += wave.samples[static_cast<std::size_t>(idx)] * k[static_cast<std::size_t>(j + taps)];
    }
    out.samples[static_cast<std::size_t>(i)] = acc;
  }
  return out;
}

}  // namespace coughvit
