#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <numbers>

#include "coughvit/audio.hpp"
#include "coughvit/dataset.hpp"
#include "coughvit/mel.hpp"
#include "test_util.hpp"

namespace cv = coughvit;
namespace fs = std::filesystem;

namespace {

// Minimal RIFF writer used as an independent source of test files.
void put(std::string& s, std::uint64_t v, int n) {
  for (int i = 0; i < n; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

fs::path raw_wav(const std::string& name, int format, int channels, int bits, int rate, const std::string& payload,
                 bool extensible = false) {
  std::string fmt;
  put(fmt, extensible ? 0xFFFE : format, 2);
  put(fmt, channels, 2);
  put(fmt, rate, 4);
  put(fmt, rate * channels * bits / 8, 4);
  put(fmt, channels * bits / 8, 2);
  put(fmt, bits, 2);
  if (extensible) {
    put(fmt, 22, 2);
    put(fmt, bits, 2);
    put(fmt, 0, 4);
    put(fmt, format, 2);
    fmt.append(14, '\0');
  }
  std::string f = "RIFF";
  put(f, 4 + 8 + fmt.size() + 8 + payload.size(), 4);
  f += "WAVEfmt ";
  put(f, fmt.size(), 4);
  f += fmt;
  f += "data";
  put(f, payload.size(), 4);
  f += payload;
  const fs::path p = cv::testing::scratch_dir("wav_" + name) / "a.wav";
  std::ofstream(p, std::ios::binary) << f;
  return p;
}

cv::MelConfig default_mel() { return cv::MelConfig{}; }

}  // namespace

// ---- load_wav -------------------------------------------------------------------

TEST(LoadWav, Pcm16FullScale) {
  std::string d;
  for (int v : {0, 32767, -32768}) put(d, static_cast<std::uint16_t>(v), 2);
  const auto w = cv::load_wav(raw_wav("pcm16", 1, 1, 16, 16000, d));
  ASSERT_EQ(w.samples.size(), 3u);
  EXPECT_EQ(w.samples[0], 0.0);
  EXPECT_NEAR(w.samples[1], 0.99997, 1e-5);
  EXPECT_EQ(w.samples[2], -1.0);
  EXPECT_EQ(w.sample_rate, 16000);
}

TEST(LoadWav, StereoAveragedToMono) {
  std::string d;
  const float one = 1.0f, zero = 0.0f;
  put(d, std::bit_cast<std::uint32_t>(one), 4);
  put(d, std::bit_cast<std::uint32_t>(zero), 4);
  const auto w = cv::load_wav(raw_wav("stereo", 3, 2, 32, 8000, d));
  ASSERT_EQ(w.samples.size(), 1u);
  EXPECT_EQ(w.samples[0], 0.5);
}

TEST(LoadWav, EightAndTwentyFourBitAndExtensible) {
  std::string d8;
  for (int v : {0, 128, 255}) put(d8, v, 1);
  const auto w8 = cv::load_wav(raw_wav("pcm8", 1, 1, 8, 8000, d8));
  EXPECT_EQ(w8.samples, (std::vector<double>{-1.0, 0.0, 127.0 / 128.0}));

  std::string d24;
  for (int v : {-8388608, 4194304}) put(d24, static_cast<std::uint32_t>(v) & 0xFFFFFF, 3);
  const auto w24 = cv::load_wav(raw_wav("pcm24", 1, 1, 24, 8000, d24, true));
  EXPECT_EQ(w24.samples, (std::vector<double>{-1.0, 0.5}));
}

TEST(LoadWav, Errors) {
  const fs::path empty = cv::testing::scratch_dir("wav_empty") / "e.wav";
  std::ofstream(empty).close();
  EXPECT_THROW(cv::load_wav(empty), cv::InputError);
  EXPECT_THROW(cv::load_wav(raw_wav("nodata", 1, 1, 16, 16000, "")), cv::InputError);
  EXPECT_THROW(cv::load_wav(raw_wav("alaw", 6, 1, 8, 8000, "ab")), cv::InputError);
  EXPECT_THROW(cv::load_wav("/nonexistent/file.wav"), cv::InputError);
}

// Writer scales by 32767, reader by 32768: error is one scale step plus rounding.
TEST(LoadWav, WriterRoundTripsAtSixteenBitPrecision) {
  cv::Waveform w;
  w.sample_rate = 16000;
  for (int i = 0; i < 100; ++i) w.samples.push_back(std::sin(0.1 * i) * 0.9);
  const fs::path p = cv::testing::scratch_dir("wav_rt") / "rt.wav";
  cv::write_wav(p, w);
  const auto r = cv::load_wav(p);
  ASSERT_EQ(r.samples.size(), w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i) EXPECT_NEAR(r.samples[i], w.samples[i], 2.0 / 32768.0);
}

// ---- resample -------------------------------------------------------------------

TEST(Resample, IdentityWhenRatesMatch) {
  cv::Waveform w{{0.1, -0.2, 0.3, 0.0}, 16000};
  EXPECT_EQ(cv::resample(w, 16000).samples, w.samples);
}

TEST(Resample, DurationPreserved) {
  cv::Waveform w{std::vector<double>(48000, 0.1), 48000};
  const auto r = cv::resample(w, 16000);
  EXPECT_EQ(r.sample_rate, 16000);
  EXPECT_NEAR(static_cast<double>(r.samples.size()), 16000.0, 1.0);
  for (int src : {44100, 22050, 8000, 11025}) {
    cv::Waveform v{std::vector<double>(static_cast<std::size_t>(src) * 3 / 2, 0.0), src};
    EXPECT_LE(std::abs(cv::resample(v, 16000).duration() - v.duration()), 1.0 / 16000.0) << src;
  }
}

TEST(Resample, SineKeepsDominantBinAndLowSidelobes) {
  cv::Waveform w;
  w.sample_rate = 44100;
  for (int i = 0; i < 44100; ++i) w.samples.push_back(0.5 * std::sin(2.0 * std::numbers::pi * 440.0 * i / 44100.0));
  const auto r = cv::resample(w, 16000);
  ASSERT_EQ(r.samples.size(), 16000u);
  // Direct DFT of the 1 s output: bin k sits at k Hz.
  std::vector<double> power(8001);
  for (std::size_t k = 0; k < power.size(); ++k) {
    std::complex<double> acc = 0.0;
    const double step = -2.0 * std::numbers::pi * static_cast<double>(k) / 16000.0;
    for (std::size_t n = 0; n < 16000; ++n) acc += r.samples[n] * std::polar(1.0, step * static_cast<double>(n));
    power[k] = std::norm(acc);
  }
  const auto peak = static_cast<std::size_t>(std::max_element(power.begin(), power.end()) - power.begin());
  EXPECT_EQ(peak, 440u);
  double side = 0.0;
  for (std::size_t k = 0; k < power.size(); ++k)
    if (k + 3 < 440 || k > 443) side += power[k];
  EXPECT_LT(side, 0.01 * power[peak]);
}

TEST(Resample, UpsamplingPreservesLowFrequencySine) {
  cv::Waveform w;
  w.sample_rate = 8000;
  for (int i = 0; i < 8000; ++i) w.samples.push_back(std::sin(2.0 * std::numbers::pi * 250.0 * i / 8000.0));
  const auto r = cv::resample(w, 16000);
  double err = 0.0;
  for (std::size_t i = 200; i + 200 < r.samples.size(); ++i)
    err = std::max(err, std::abs(r.samples[i] - std::sin(2.0 * std::numbers::pi * 250.0 * static_cast<double>(i) / 16000.0)));
  EXPECT_LT(err, 1e-3);
}

// ---- framing -----------------------------------------------------------------

TEST(FrameCount, OneSecondAtDefaults) {
  EXPECT_EQ(cv::frame_count(16000, default_mel()), 98u);
  EXPECT_EQ(cv::frame_count(400, default_mel()), 1u);
  EXPECT_THROW(cv::frame_count(399, default_mel()), cv::InputError);
}

TEST(FrameCount, MatchesOffsetEnumeration) {
  cv::Rng rng = cv::seeded_rng(21, "frames");
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t hop = 1 + rng.below(300);
    const std::size_t len = hop + 1 + rng.below(600);
    const std::size_t n = len + rng.below(20000);
    cv::MelConfig cfg;
    cfg.target_rate = 16000;
    cfg.frame_length = static_cast<double>(len) / 16000.0;
    cfg.frame_hop = static_cast<double>(hop) / 16000.0;
    ASSERT_EQ(cfg.frame_samples(), len);
    ASSERT_EQ(cfg.hop_samples(), hop);
    std::size_t count = 0;
    for (std::size_t off = 0; off + len <= n; off += hop) ++count;
    ASSERT_EQ(cv::frame_count(n, cfg), count) << "n=" << n << " L=" << len << " H=" << hop;
  }
}

// ---- log-mel ---------------------------------------------------------------------

TEST(LogMel, SilenceIsLogFloorEverywhere) {
  const cv::Waveform w{std::vector<double>(16000, 0.0), 16000};
  const auto s = cv::log_mel_spectrogram(w, default_mel());
  ASSERT_EQ(s.frames(), 98u);
  ASSERT_EQ(s.bins(), 128u);
  EXPECT_FALSE(s.normalized);
  for (double v : s.values.storage()) EXPECT_EQ(v, std::log(1e-10));
}

TEST(LogMel, FilterCentersFollowHtkScale) {
  const auto c = cv::mel_filter_centers(default_mel());
  const double top = 2595.0 * std::log10(1.0 + 8000.0 / 700.0);
  for (std::size_t m : {0u, 50u, 127u}) {
    const double mel = top * static_cast<double>(m + 1) / 129.0;
    EXPECT_NEAR(c[m], 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0), 1e-9);
  }
}

TEST(LogMel, ToneAtFilterCenterPeaksInThatFilter) {
  const cv::MelConfig cfg = default_mel();
  const double top = 2595.0 * std::log10(1.0 + 8000.0 / 700.0);
  for (std::size_t m : {60u, 80u, 100u, 120u}) {
    const double f = 700.0 * (std::pow(10.0, top * static_cast<double>(m + 1) / 129.0 / 2595.0) - 1.0);
    cv::Waveform w;
    for (int i = 0; i < 16000; ++i) w.samples.push_back(0.5 * std::sin(2.0 * std::numbers::pi * f * i / 16000.0));
    const auto s = cv::log_mel_spectrogram(w, cfg);
    std::vector<double> avg(128, 0.0);
    for (std::size_t t = 0; t < s.frames(); ++t)
      for (std::size_t b = 0; b < 128; ++b) avg[b] += s.values.at(t, b);
    EXPECT_EQ(static_cast<std::size_t>(std::max_element(avg.begin(), avg.end()) - avg.begin()), m) << f << " Hz";
  }
}

TEST(LogMel, FiniteOnRandomInput) {
  cv::Rng rng = cv::seeded_rng(22, "noise");
  cv::Waveform w;
  for (int i = 0; i < 7777; ++i) w.samples.push_back(rng.uniform(-1.0, 1.0));
  EXPECT_TRUE(cv::log_mel_spectrogram(w, default_mel()).values.all_finite());
}

TEST(LogMel, DelayByWholeHopsShiftsFrames) {
  cv::Rng rng = cv::seeded_rng(23, "shift");
  cv::Waveform w;
  for (int i = 0; i < 8000; ++i) w.samples.push_back(rng.uniform(-0.5, 0.5));
  const auto a = cv::log_mel_spectrogram(w, default_mel());
  for (std::size_t k : {1u, 3u, 7u}) {
    cv::Waveform d = w;
    d.samples.insert(d.samples.begin(), k * 160, 0.0);
    const auto b = cv::log_mel_spectrogram(d, default_mel());
    ASSERT_EQ(b.frames(), a.frames() + k);
    for (std::size_t t = 0; t < a.frames(); ++t)
      for (std::size_t m = 0; m < 128; ++m) ASSERT_EQ(b.values.at(t + k, m), a.values.at(t, m));
  }
}

TEST(LogMel, RateMismatchRejected) {
  const cv::Waveform w{std::vector<double>(8000, 0.0), 8000};
  EXPECT_THROW(cv::log_mel_spectrogram(w, default_mel()), cv::InputError);
}

// ---- fit_length / normalize ------------------------------------------------------------

TEST(FitLength, TruncatesAndPads) {
  cv::Rng rng = cv::seeded_rng(24, "fit");
  cv::MelSpectrogram s{cv::testing::random_tensor({98, 128}, rng), false};
  EXPECT_EQ(cv::fit_length(s, 98).values, s.values);
  const auto cut = cv::fit_length(s, 48);
  ASSERT_EQ(cut.frames(), 48u);
  EXPECT_TRUE(std::equal(cut.values.storage().begin(), cut.values.storage().end(), s.values.storage().begin()));
  const auto pad = cv::fit_length(s, 112);
  ASSERT_EQ(pad.frames(), 112u);
  for (std::size_t t = 98; t < 112; ++t)
    for (std::size_t m = 0; m < 128; ++m) EXPECT_EQ(pad.values.at(t, m), std::log(1e-10));
  const auto npad = cv::fit_length(cv::normalize(s, 0.0, 1.0), 100);
  EXPECT_EQ(npad.values.at(99, 5), 0.0);
}

TEST(Normalize, ArithmeticAndFlag) {
  cv::MelSpectrogram a{cv::Tensor({1, 2}, std::vector<double>{0, 1}), false};
  EXPECT_EQ(cv::normalize(a, 0.0, 1.0).values.storage(), (std::vector<double>{0, 1}));
  cv::MelSpectrogram b{cv::Tensor({1, 2}, std::vector<double>{2, 4}), false};
  const auto nb = cv::normalize(b, 3.0, 1.0);
  EXPECT_EQ(nb.values.storage(), (std::vector<double>{-1, 1}));
  EXPECT_TRUE(nb.normalized);
  EXPECT_THROW(cv::normalize(nb, 3.0, 1.0), cv::InputError);
  EXPECT_THROW(cv::normalize(b, 3.0, 0.0), cv::InputError);
}

TEST(Normalize, RoundTripWithinRelativeTolerance) {
  cv::Rng rng = cv::seeded_rng(25, "norm");
  cv::MelSpectrogram s{cv::testing::random_tensor({30, 128}, rng, -23.0, 5.0), false};
  const auto back = cv::denormalize(cv::normalize(s, -7.3, 4.1), -7.3, 4.1);
  for (std::size_t i = 0; i < s.values.size(); ++i)
    EXPECT_LE(std::abs(back.values[i] - s.values[i]), 1e-9 * std::max(1.0, std::abs(s.values[i])));
}

// ---- dataset statistics ---------------------------------------------------------

TEST(DatasetStats, ConstantInputIsDegenerate) {
  const auto st = cv::dataset_stats({cv::MelSpectrogram{cv::Tensor({4, 3}, 2.0), false}});
  EXPECT_EQ(st.mean, 2.0);
  EXPECT_EQ(st.std, 0.0);
  EXPECT_TRUE(st.degenerate);
}

TEST(DatasetStats, PopulationMoments) {
  const auto st = cv::dataset_stats({cv::MelSpectrogram{cv::Tensor({2, 2}, std::vector<double>{1, 2, 3, 4}), false}});
  EXPECT_DOUBLE_EQ(st.mean, 2.5);
  EXPECT_NEAR(st.std, std::sqrt(1.25), 1e-15);
  EXPECT_FALSE(st.degenerate);
}

TEST(DatasetStats, OrderAndDuplicationInvariant) {
  cv::Rng rng = cv::seeded_rng(26, "stats");
  std::vector<cv::MelSpectrogram> specs;
  for (int i = 0; i < 9; ++i) specs.push_back({cv::testing::random_tensor({10 + static_cast<std::size_t>(i), 16}, rng, -20, 3), false});
  const auto base = cv::dataset_stats(specs);
  auto shuffled = specs;
  for (int r = 0; r < 5; ++r) {
    rng.shuffle(shuffled);
    const auto s = cv::dataset_stats(shuffled);
    EXPECT_EQ(s.mean, base.mean);
    EXPECT_EQ(s.std, base.std);
  }
  auto doubled = specs;
  doubled.insert(doubled.end(), specs.begin(), specs.end());
  const auto d = cv::dataset_stats(doubled);
  EXPECT_NEAR(d.mean, base.mean, 1e-12 * std::abs(base.mean));
  EXPECT_NEAR(d.std, base.std, 1e-12 * base.std);
}

// ---- manifests and the synthetic corpus -------------------------------------------

TEST(Manifest, ParsesAndRejectsBadRows) {
  const fs::path dir = cv::testing::scratch_dir("manifest");
  std::ofstream(dir / "m.csv") << "path,label,split\na.wav,1,train\nb.wav,,\n";
  const auto m = cv::read_manifest(dir / "m.csv");
  ASSERT_EQ(m.entries.size(), 2u);
  EXPECT_EQ(*m.entries[0].label, 1);
  EXPECT_FALSE(m.entries[1].label.has_value());
  EXPECT_FALSE(m.fully_labeled());
  EXPECT_EQ(m.resolve(m.entries[0]), dir / "a.wav");

  std::ofstream(dir / "dup.csv") << "path,label,split\na.wav,1,\na.wav,0,\n";
  EXPECT_THROW(cv::read_manifest(dir / "dup.csv"), cv::InputError);
  std::ofstream(dir / "lab.csv") << "path,label,split\na.wav,3,\n";
  EXPECT_THROW(cv::read_manifest(dir / "lab.csv"), cv::InputError);
  std::ofstream(dir / "bad.csv") << "path,label,split\na.wav,x,\n";
  try {
    cv::read_manifest(dir / "bad.csv");
    FAIL() << "expected an error";
  } catch (const cv::InputError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(Synth, BalancedAndDeterministic) {
  const fs::path a = cv::testing::scratch_dir("synth_a"), b = cv::testing::scratch_dir("synth_b");
  const auto m = cv::synth_dataset(a, 7, 8);
  cv::synth_dataset(b, 7, 8);
  ASSERT_EQ(m.entries.size(), 8u);
  int ones = 0;
  for (const auto& e : m.entries) {
    ones += *e.label;
    std::ifstream fa(a / e.path, std::ios::binary), fb(b / e.path, std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
    EXPECT_FALSE(sa.empty());
    EXPECT_EQ(sa, sb) << e.path;
  }
  EXPECT_EQ(ones, 4);
  EXPECT_EQ(cv::read_manifest(a / "manifest.csv").entries.size(), 8u);
}

TEST(Synth, ClassesDifferInBandEnergyRatio) {
  const fs::path dir = cv::testing::scratch_dir("synth_ratio");
  const auto m = cv::read_manifest((cv::synth_dataset(dir, 3, 40), dir / "manifest.csv"));
  const auto centers = cv::mel_filter_centers(default_mel());
  double mean_ratio[2] = {0, 0};
  for (const auto& e : m.entries) {
    const auto s = cv::spectrogram_from_file(m.resolve(e), default_mel());
    double lo = 0.0, hi = 0.0;
    for (std::size_t t = 0; t < s.frames(); ++t)
      for (std::size_t b = 0; b < 128; ++b) {
        if (centers[b] >= 300 && centers[b] <= 1200) lo += std::exp(s.values.at(t, b));
        if (centers[b] >= 2500 && centers[b] <= 5000) hi += std::exp(s.values.at(t, b));
      }
    mean_ratio[*e.label] += std::log(hi / lo) / 20.0;
  }
  // Declared margin: class 1 carries at least 1 nat more high-band energy.
  EXPECT_GT(mean_ratio[1] - mean_ratio[0], 1.0);
}
