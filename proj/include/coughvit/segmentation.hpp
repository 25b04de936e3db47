#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "coughvit/audio.hpp"
#include "coughvit/error.hpp"

namespace coughvit {

struct Event {
  double start = 0.0;  // seconds
  double end = 0.0;    // seconds
  friend bool operator==(const Event&, const Event&) = default;
};

struct SegmentationConfig {
  double window = 0.4;
  double step = 0.01;
  double threshold = 0.5;
  double overlap_criterion = 0.5;  // IoU needed for an event match
  double sample_interval = 0.1;    // bin width of sample-based scoring

  void validate() const {
    require(step > 0.0 && step <= window, "segment: need 0 < step <= window");
    require(threshold > 0.0 && threshold < 1.0, "segment: threshold must lie in (0, 1)");
    require(overlap_criterion > 0.0 && overlap_criterion <= 1.0, "segment: overlap_criterion must lie in (0, 1]");
    require(sample_interval > 0.0, "segment: sample_interval must be positive");
  }
};

/// Positive-class probability of one analysis window.
using WindowClassifier = std::function<double(const Waveform&)>;

/// Window probabilities at offsets 0, step, 2*step, ... (offsets in samples).
struct WindowScores {
  std::vector<std::size_t> offsets;
  std::vector<double> probs;
  std::size_t window_samples = 0;
  int sample_rate = 0;
};

inline WindowScores score_windows(const Waveform& wave, const WindowClassifier& classify, const SegmentationConfig& cfg) {
  cfg.validate();
  wave.validate();
  const auto win = static_cast<std::size_t>(std::lround(cfg.window * wave.sample_rate));
  const auto hop = static_cast<std::size_t>(std::lround(cfg.step * wave.sample_rate));
  require(hop >= 1, "segment: step shorter than one sample");
  if (wave.samples.size() < win)
    throw InputError("segment: audio (" + std::to_string(wave.duration()) + " s) is shorter than one window");
  WindowScores ws{{}, {}, win, wave.sample_rate};
  Waveform piece;
  piece.sample_rate = wave.sample_rate;
  for (std::size_t off = 0; off + win <= wave.samples.size(); off += hop) {
    piece.samples.assign(wave.samples.begin() + static_cast<std::ptrdiff_t>(off),
                         wave.samples.begin() + static_cast<std::ptrdiff_t>(off + win));
    ws.offsets.push_back(off);
    ws.probs.push_back(classify(piece));
  }
  return ws;
}

/// Positive windows become events spanning the window edges; a positive
/// window that overlaps or touches the current event extends it to its own end.
inline std::vector<Event> merge_detections(const WindowScores& ws, double threshold) {
  std::vector<Event> events;
  bool open = false;
  std::size_t start = 0, end = 0;
  const auto rate = static_cast<double>(ws.sample_rate);
  for (std::size_t i = 0; i < ws.offsets.size(); ++i) {
    if (ws.probs[i] < threshold) continue;
    const std::size_t s = ws.offsets[i], e = s + ws.window_samples;
    if (open && s <= end) {
      end = std::max(end, e);
      continue;
    }
    if (open) events.push_back(Event{static_cast<double>(start) / rate, static_cast<double>(end) / rate});
    open = true;
    start = s;
    end = e;
  }
  if (open) events.push_back(Event{static_cast<double>(start) / rate, static_cast<double>(end) / rate});
  return events;
}

inline std::vector<Event> slide(const Waveform& wave, const WindowClassifier& classify, const SegmentationConfig& cfg) {
  return merge_detections(score_windows(wave, classify, cfg), cfg.threshold);
}

struct Scores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

namespace detail {

// Both-empty counts as a perfect match; one side empty scores 0.
inline Scores prf(std::size_t tp, std::size_t n_pred, std::size_t n_truth) {
  if (n_pred == 0 && n_truth == 0) return {1.0, 1.0, 1.0};
  Scores s;
  s.precision = n_pred ? static_cast<double>(tp) / static_cast<double>(n_pred) : 0.0;
  s.recall = n_truth ? static_cast<double>(tp) / static_cast<double>(n_truth) : 0.0;
  s.f1 = (s.precision + s.recall) > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

}  // namespace detail

inline double iou(const Event& a, const Event& b) {
  const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = std::max(a.end, b.end) - std::min(a.start, b.start);
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Event-based scores: greedy one-to-one matching in descending IoU order,
/// pairs below the overlap criterion never match.
inline Scores event_f1(const std::vector<Event>& pred, const std::vector<Event>& truth, const SegmentationConfig& cfg) {
  struct Pair {
    double iou;
    std::size_t p, t;
  };
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t j = 0; j < truth.size(); ++j)
      if (const double v = iou(pred[i], truth[j]); v >= cfg.overlap_criterion) pairs.push_back({v, i, j});
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });
  std::vector<bool> used_p(pred.size()), used_t(truth.size());
  std::size_t tp = 0;
  for (const auto& pr : pairs) {
    if (used_p[pr.p] || used_t[pr.t]) continue;
    used_p[pr.p] = used_t[pr.t] = true;
    ++tp;
  }
  return detail::prf(tp, pred.size(), truth.size());
}

/// Sample-based scores: the duration is tiled into bins of sample_interval; a
/// bin is positive when any event overlaps it by a positive amount.
inline Scores sample_f1(const std::vector<Event>& pred, const std::vector<Event>& truth, const SegmentationConfig& cfg,
                        double audio_duration) {
  require(cfg.sample_interval > 0.0, "sample_f1: sample_interval must be positive");
  constexpr double kEps = 1e-9;
  const auto n_bins = static_cast<std::size_t>(std::ceil(audio_duration / cfg.sample_interval - kEps));
  auto label = [&](const std::vector<Event>& ev) {
    std::vector<bool> on(n_bins, false);
    for (const auto& e : ev) {
      require(e.end <= audio_duration + kEps, "sample_f1: event beyond the audio duration");
      for (std::size_t b = 0; b < n_bins; ++b) {
        const double lo = static_cast<double>(b) * cfg.sample_interval;
        const double hi = lo + cfg.sample_interval;
        if (std::min(hi, e.end) - std::max(lo, e.start) > kEps) on[b] = true;
      }
    }
    return on;
  };
  const auto p = label(pred), t = label(truth);
  std::size_t tp = 0, np = 0, nt = 0;
  for (std::size_t b = 0; b < n_bins; ++b) {
    tp += p[b] && t[b];
    np += p[b];
    nt += t[b];
  }
  return detail::prf(tp, np, nt);
}

// ---- CSV ---------------------------------------------------------------------

inline std::string events_csv(const std::vector<Event>& events) {
  std::string out = "start_s,end_s\n";
  char buf[64];
  for (const auto& e : events) {
    std::snprintf(buf, sizeof buf, "%.3f,%.3f\n", e.start, e.end);
    out += buf;
  }
  return out;
}

/// Parses `start_s,end_s` CSV; errors carry the offending line number.
inline std::vector<Event> read_events_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open events file " + path.string());
  std::string line;
  std::size_t lineno = 0;
  std::vector<Event> out;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (line != "start_s,end_s") throw InputError(path.string() + ":1: expected header 'start_s,end_s'");
      continue;
    }
    if (line.empty()) continue;
    const auto comma = line.find(',');
    Event e;
    try {
      if (comma == std::string::npos) throw std::invalid_argument("missing comma");
      std::size_t u1 = 0, u2 = 0;
      const std::string a = line.substr(0, comma), b = line.substr(comma + 1);
      e.start = std::stod(a, &u1);
      e.end = std::stod(b, &u2);
      if (u1 != a.size() || u2 != b.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": malformed event line '" + line + "'");
    }
    if (!(e.start >= 0.0 && e.start < e.end))
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": need 0 <= start < end");
    out.push_back(e);
  }
  if (lineno == 0) throw InputError(path.string() + ":1: empty events file");
  std::sort(out.begin(), out.end(), [](const Event& a, const Event& b) { return a.start < b.start; });
  return out;
}

}  // namespace coughvit
