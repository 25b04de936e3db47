#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coughvit/audio.hpp"
#include "coughvit/mel.hpp"
#include "coughvit/rng.hpp"

namespace coughvit {

struct DatasetStats {
  double mean = 0.0;
  double std = 0.0;
  bool degenerate = false;  // every cell had the same value
};

struct ManifestEntry {
  std::string path;  // as written in the manifest
  std::optional<int> label;
  std::string split;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::vector<int> label_set{0, 1};
  std::optional<DatasetStats> stats;
  std::filesystem::path base_dir;  // relative paths resolve against this

  [[nodiscard]] std::filesystem::path resolve(const ManifestEntry& e) const {
    std::filesystem::path p(e.path);
    return p.is_absolute() ? p : base_dir / p;
  }

  [[nodiscard]] bool fully_labeled() const {
    return std::all_of(entries.begin(), entries.end(), [](const ManifestEntry& e) { return e.label.has_value(); });
  }

  [[nodiscard]] std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(entries.size());
    for (const auto& e : entries) {
      if (!e.label) throw InputError("manifest entry " + e.path + " has no label");
      out.push_back(*e.label);
    }
    return out;
  }

  void validate() const {
    std::set<std::string> seen;
    for (const auto& e : entries) {
      if (!seen.insert(e.path).second) throw InputError("duplicate manifest path " + e.path);
      if (e.label && std::find(label_set.begin(), label_set.end(), *e.label) == label_set.end())
        throw InputError("label " + std::to_string(*e.label) + " of " + e.path + " is outside the label set");
    }
  }
};

inline std::filesystem::path stats_sidecar(const std::filesystem::path& manifest_path) {
  return std::filesystem::path(manifest_path.string() + ".stats.json");
}

/// Parses `path,label,split` CSV. A sidecar `<manifest>.stats.json` is picked
/// up as cached statistics when present.
inline DatasetManifest read_manifest(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw InputError("cannot open manifest " + csv.string());
  DatasetManifest m;
  m.base_dir = csv.parent_path();
  std::string line;
  if (!std::getline(in, line)) throw InputError("manifest " + csv.string() + " is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "path,label,split") throw InputError(csv.string() + ":1: expected header 'path,label,split'");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 3 || f[0].empty())
      throw InputError(csv.string() + ":" + std::to_string(lineno) + ": expected 3 fields path,label,split");
    ManifestEntry e{f[0], std::nullopt, f[2]};
    if (!f[1].empty()) {
      try {
        std::size_t used = 0;
        e.label = std::stoi(f[1], &used);
        if (used != f[1].size()) throw std::invalid_argument(f[1]);
      } catch (const std::exception&) {
        throw InputError(csv.string() + ":" + std::to_string(lineno) + ": bad label '" + f[1] + "'");
      }
    }
    m.entries.push_back(std::move(e));
  }
  m.validate();
  if (const auto side = stats_sidecar(csv); std::filesystem::exists(side)) {
    std::ifstream s(side);
    try {
      const auto j = nlohmann::json::parse(s);
      m.stats = DatasetStats{j.at("mean").get<double>(), j.at("std").get<double>(), j.value("degenerate", false)};
    } catch (const nlohmann::json::exception& e) {
      throw InputError("malformed stats sidecar " + side.string() + ": " + e.what());
    }
  }
  return m;
}

inline void write_manifest(const std::filesystem::path& csv, const DatasetManifest& m) {
  std::ofstream out(csv);
  if (!out) throw InputError("cannot write manifest " + csv.string());
  out << "path,label,split\n";
  for (const auto& e : m.entries) out << e.path << ',' << (e.label ? std::to_string(*e.label) : "") << ',' << e.split << '\n';
}

inline void write_stats_sidecar(const std::filesystem::path& manifest_path, const DatasetStats& s) {
  std::ofstream out(stats_sidecar(manifest_path));
  if (!out) throw InputError("cannot write stats sidecar for " + manifest_path.string());
  out << nlohmann::json{{"mean", s.mean}, {"std", s.std}, {"degenerate", s.degenerate}}.dump(2) << '\n';
}

/// Population mean and standard deviation over every cell of every
/// spectrogram. Per-spectrogram partial sums are combined in sorted order, so
/// the result does not depend on the order of the inputs.
inline DatasetStats dataset_stats(const std::vector<MelSpectrogram>& specs) {
  require(!specs.empty(), "dataset_stats: no spectrograms");
  auto ordered_sum = [](std::vector<double> parts) {
    std::sort(parts.begin(), parts.end());
    double s = 0.0;
    for (double p : parts) s += p;
    return s;
  };
  std::vector<double> sums;
  double count = 0.0;
  for (const auto& s : specs) {
    double acc = 0.0;
    for (double v : s.values.data()) acc += v;
    sums.push_back(acc);
    count += static_cast<double>(s.values.size());
  }
  require(count > 0, "dataset_stats: spectrograms are empty");
  const double mean = ordered_sum(std::move(sums)) / count;
  std::vector<double> sq;
  bool all_equal = true;
  const double first = specs.front().values[0];
  for (const auto& s : specs) {
    double acc = 0.0;
    for (double v : s.values.data()) {
      acc += (v - mean) * (v - mean);
      all_equal = all_equal && v == first;
    }
    sq.push_back(acc);
  }
  const double std = all_equal ? 0.0 : std::sqrt(ordered_sum(std::move(sq)) / count);
  return DatasetStats{mean, std, all_equal};
}

inline std::vector<MelSpectrogram> load_spectrograms(const DatasetManifest& m, const MelConfig& cfg) {
  std::vector<MelSpectrogram> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) out.push_back(spectrogram_from_file(m.resolve(e), cfg));
  return out;
}

inline DatasetStats dataset_stats(const DatasetManifest& m, const MelConfig& cfg) {
  require(!m.entries.empty(), "dataset_stats: manifest is empty");
  return dataset_stats(load_spectrograms(m, cfg));
}

// ---- synthetic corpus -------------------------------------------------------

/// Parameters of the synthetic cough-like corpus. Each clip holds a few
/// decaying bursts of resonant noise over a weak noise floor. Both classes
/// share a low resonance; they differ in how much energy a second, high-band
/// resonance carries relative to it.
struct SynthSpec {
  double duration = 1.0;  // seconds per clip
  int sample_rate = 16000;
  double noise_floor = 0.002;
  int min_bursts = 1;
  int max_bursts = 3;
  double low_band_lo = 300.0, low_band_hi = 1200.0;    // Hz, shared resonance
  double high_band_lo = 2500.0, high_band_hi = 5000.0;  // Hz, class-dependent resonance
  double high_gain_class0 = 0.15;  // high/low amplitude ratio, class 0
  double high_gain_class1 = 0.6;   // high/low amplitude ratio, class 1
  double gain_jitter = 0.5;        // multiplicative spread of the ratio, in log units
};

namespace detail {

struct Biquad {
  double b0, b1, b2, a1, a2;
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;

  static Biquad bandpass(double f0, double q, double rate) {
    const double w0 = 2.0 * std::numbers::pi * f0 / rate;
    const double alpha = std::sin(w0) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    return Biquad{alpha / a0, 0.0, -alpha / a0, -2.0 * std::cos(w0) / a0, (1.0 - alpha) / a0};
  }

  double operator()(double x) {
    const double y = b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
    x2 = x1;
    x1 = x;
    y2 = y1;
    y1 = y;
    return y;
  }
};

}  // namespace detail

/// One synthetic clip of the given class, fully determined by rng.
inline Waveform synth_clip(int label, const SynthSpec& spec, Rng& rng) {
  const auto n = static_cast<std::size_t>(std::lround(spec.duration * spec.sample_rate));
  Waveform w;
  w.sample_rate = spec.sample_rate;
  w.samples.resize(n);
  for (double& s : w.samples) s = spec.noise_floor * (2.0 * rng.uniform() - 1.0);

  const int bursts = spec.min_bursts + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_bursts - spec.min_bursts + 1)));
  const double base_ratio = label == 1 ? spec.high_gain_class1 : spec.high_gain_class0;
  for (int b = 0; b < bursts; ++b) {
    const double len_s = rng.uniform(0.12, 0.3);
    const double start_s = rng.uniform(0.0, std::max(0.0, spec.duration - len_s));
    const double amp = rng.uniform(0.15, 0.4);
    const double tau = rng.uniform(0.03, 0.08);
    const double ratio = base_ratio * std::exp(spec.gain_jitter * (2.0 * rng.uniform() - 1.0));
    auto low = detail::Biquad::bandpass(rng.uniform(spec.low_band_lo, spec.low_band_hi), rng.uniform(2.0, 5.0), spec.sample_rate);
    auto high = detail::Biquad::bandpass(rng.uniform(spec.high_band_lo, spec.high_band_hi), rng.uniform(2.0, 5.0), spec.sample_rate);
    const auto i0 = static_cast<std::size_t>(start_s * spec.sample_rate);
    const auto len = static_cast<std::size_t>(len_s * spec.sample_rate);
    for (std::size_t i = 0; i < len && i0 + i < n; ++i) {
      const double t = static_cast<double>(i) / spec.sample_rate;
      const double env = std::min(1.0, t / 0.01) * std::exp(-t / tau);
      const double e = 2.0 * rng.uniform() - 1.0;
      w.samples[i0 + i] += amp * env * (low(e) + ratio * high(e));
    }
  }
  for (double& s : w.samples) s = std::clamp(s, -1.0, 1.0);
  return w;
}

/// Writes n_samples clips (balanced labels: even index -> class 0, odd ->
/// class 1) plus manifest.csv into out_dir. Output depends only on the seed.
inline DatasetManifest synth_dataset(const std::filesystem::path& out_dir, std::uint64_t seed, std::size_t n_samples,
                                     const SynthSpec& spec = {}, const std::string& split = "") {
  require(n_samples >= 2, "synth_dataset: need at least 2 samples");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir))
    throw InputError("cannot create output directory " + out_dir.string());
  DatasetManifest m;
  m.base_dir = out_dir;
  const Rng root = seeded_rng(seed, "synth");
  for (std::size_t i = 0; i < n_samples; ++i) {
    const int label = static_cast<int>(i % 2);
    Rng rng = root.fork("clip/" + std::to_string(i));
    const Waveform w = synth_clip(label, spec, rng);
    char name[32];
    std::snprintf(name, sizeof name, "clip_%04zu.wav", i);
    write_wav(out_dir / name, w);
    m.entries.push_back(ManifestEntry{name, label, split});
  }
  write_manifest(out_dir / "manifest.csv", m);
  return m;
}

}  // namespace coughvit
