#include <gtest/gtest.h>

#include <fstream>

#include "coughvit/checkpoint.hpp"
#include "coughvit/config.hpp"
#include "coughvit/finetune.hpp"
#include "coughvit/mae.hpp"
#include "test_util.hpp"

namespace cv = coughvit;
namespace fs = std::filesystem;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const cv::InputError& e) {
    return e.what();
  }
  return "no error";
}

cv::PatchSequence sample_input(std::uint64_t seed) {
  cv::Rng rng = cv::seeded_rng(seed, "clip");
  const auto spec = cv::log_mel_spectrogram(cv::synth_clip(1, {}, rng), {});
  return cv::prepare_input(spec, cv::dataset_stats({spec}), 98, cv::ModelConfig{});
}

}  // namespace

// ---- checkpoints ----------------------------------------------------------------

TEST(Checkpoint, ClassifierRoundTripIsBitExact) {
  const fs::path dir = cv::testing::scratch_dir("ckpt_roundtrip");
  const cv::ModelConfig mc;
  cv::Classifier model = cv::make_classifier(mc, cv::Pooling::mean, 3, nullptr, cv::DatasetStats{-12.5, 4.25, false});
  cv::perturb_parameters(cv::parameters_of(model), 0.1, cv::seeded_rng(3, "jitter"));
  cv::save_checkpoint(dir / "c.ckpt", model, "classifier", mc, cv::MelConfig{}, model.stats, 7, "mean");

  const cv::Checkpoint ck = cv::load_checkpoint(dir / "c.ckpt");
  EXPECT_EQ(ck.kind, "classifier");
  EXPECT_EQ(ck.epoch, 7u);
  EXPECT_EQ(ck.pooling, "mean");
  ASSERT_TRUE(ck.stats);
  EXPECT_EQ(ck.stats->mean, -12.5);
  EXPECT_EQ(ck.stats->std, 4.25);

  cv::Classifier back = cv::make_classifier(ck.model, cv::pooling_from(ck.pooling), 99, nullptr, ck.stats);
  cv::assign_parameters(back, ck);
  const auto x = sample_input(4);
  EXPECT_EQ(cv::positive_probability(back, x), cv::positive_probability(model, x));
  cv::Tape t1(false), t2(false);
  EXPECT_EQ(cv::classifier_logits(t1, back, x).value(), cv::classifier_logits(t2, model, x).value());
}

TEST(Checkpoint, EncodingIsDeterministic) {
  const cv::ModelConfig mc;
  auto a = cv::MaeModel::init(mc, 5), b = cv::MaeModel::init(mc, 5);
  EXPECT_EQ(cv::encode_checkpoint(a, "mae", mc, {}, std::nullopt, 0),
            cv::encode_checkpoint(b, "mae", mc, {}, std::nullopt, 0));
}

TEST(Checkpoint, TruncationIsAChecksumError) {
  const cv::ModelConfig mc;
  auto m = cv::MaeModel::init(mc, 6);
  const std::string bytes = cv::encode_checkpoint(m, "mae", mc, {}, std::nullopt, 1);
  for (std::size_t keep : {bytes.size() - 1, bytes.size() - 8000, bytes.size() / 2, std::size_t{40}}) {
    const std::string msg = error_of([&] { cv::decode_checkpoint(bytes.substr(0, keep)); });
    EXPECT_NE(msg.find("checksum"), std::string::npos) << keep << ": " << msg;
  }
  std::string flipped = bytes;
  flipped[bytes.size() - 3] ^= 0x10;
  EXPECT_NE(error_of([&] { cv::decode_checkpoint(flipped); }).find("checksum mismatch"), std::string::npos);
}

TEST(Checkpoint, VersionAndMagicChecked) {
  const cv::ModelConfig mc;
  auto m = cv::MaeModel::init(mc, 7);
  std::string bytes = cv::encode_checkpoint(m, "mae", mc, {}, std::nullopt, 1);
  std::string v2 = bytes;
  v2[8] = 2;
  EXPECT_NE(error_of([&] { cv::decode_checkpoint(v2); }).find("version 2"), std::string::npos);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_NE(error_of([&] { cv::decode_checkpoint(bad); }).find("bad magic"), std::string::npos);
  EXPECT_NE(error_of([] { cv::load_checkpoint("/nonexistent/x.ckpt"); }).find("/nonexistent/x.ckpt"),
            std::string::npos);
}

TEST(Checkpoint, WidthMismatchIsAShapeError) {
  const cv::ModelConfig small;
  auto m = cv::MaeModel::init(small, 8);
  const auto ck = cv::decode_checkpoint(cv::encode_checkpoint(m, "mae", small, {}, std::nullopt, 0));
  cv::ModelConfig wide = small;
  wide.d_model = 128;
  const std::string msg = error_of([&] { cv::encoder_from_checkpoint(ck, wide); });
  EXPECT_NE(msg.find("d_model=64"), std::string::npos) << msg;
  EXPECT_NE(msg.find("d_model=128"), std::string::npos) << msg;
  EXPECT_NE(msg.find("shape mismatch"), std::string::npos) << msg;

  // Same width, different depth: the missing block is reported by name.
  cv::ModelConfig deeper = small;
  deeper.n_blocks = 3;
  EXPECT_NE(error_of([&] { cv::encoder_from_checkpoint(ck, deeper); }).find("encoder.block2"), std::string::npos);
}

TEST(Checkpoint, EncoderTransfersIntoClassifier) {
  const cv::ModelConfig mc;
  auto mae = cv::MaeModel::init(mc, 9);
  const auto ck = cv::decode_checkpoint(cv::encode_checkpoint(mae, "mae", mc, {}, cv::DatasetStats{1.0, 2.0, false}, 3));
  const auto enc = cv::encoder_from_checkpoint(ck, mc);
  EXPECT_EQ(enc.blocks[1].fc2_w.value, mae.encoder.blocks[1].fc2_w.value);
  EXPECT_EQ(enc.cls.value, mae.encoder.cls.value);
}

// ---- config ---------------------------------------------------------------------

TEST(Config, DefaultsRoundTrip) {
  const cv::RunConfig c;
  const std::string text = cv::serialize_run_config(c);
  EXPECT_EQ(cv::serialize_run_config(cv::parse_run_config(text)), text);
}

TEST(Config, EditedValuesRoundTrip) {
  cv::RunConfig c;
  c.seed = 17;
  c.model.d_model = 32;
  c.model.n_heads = 2;
  c.pretrain.attention = cv::DecoderAttention::windowed;
  c.pretrain.mask_ratio = 0.6;
  c.finetune.pooling = cv::Pooling::mean;
  c.segment.step = 0.02;
  c.paths.manifest = "data/manifest.csv";
  const cv::RunConfig back = cv::parse_run_config(cv::serialize_run_config(c));
  EXPECT_EQ(back.seed, 17u);
  EXPECT_EQ(back.pretrain.seed, 17u);
  EXPECT_EQ(back.finetune.seed, 17u);
  EXPECT_EQ(back.model.d_model, 32u);
  EXPECT_EQ(back.pretrain.attention, cv::DecoderAttention::windowed);
  EXPECT_EQ(back.pretrain.mask_ratio, 0.6);
  EXPECT_EQ(back.finetune.pooling, cv::Pooling::mean);
  EXPECT_EQ(back.segment.step, 0.02);
  EXPECT_EQ(back.paths.manifest, "data/manifest.csv");
  EXPECT_EQ(cv::serialize_run_config(back), cv::serialize_run_config(c));
}

TEST(Config, PartialFileKeepsDefaults) {
  const cv::RunConfig c = cv::parse_run_config(R"({"pretrain": {"epochs": 3}})");
  EXPECT_EQ(c.pretrain.epochs, 3u);
  EXPECT_EQ(c.pretrain.mask_ratio, 0.75);
  EXPECT_EQ(c.model.d_model, cv::ModelConfig{}.d_model);
}

TEST(Config, UnknownKeysAndBadValuesRejected) {
  EXPECT_NE(error_of([] { cv::parse_run_config(R"({"pretrain": {"epochz": 3}})"); }).find("pretrain.epochz"),
            std::string::npos);
  EXPECT_NE(error_of([] { cv::parse_run_config(R"({"colour": 1})"); }).find("colour"), std::string::npos);
  EXPECT_THROW(cv::parse_run_config(R"({"pretrain": {"attention": "local"}})"), cv::InputError);
  EXPECT_THROW(cv::parse_run_config(R"({"pretrain": {"mask_ratio": 0}})"), cv::InputError);
  EXPECT_THROW(cv::parse_run_config(R"({"model": {"d_model": "big"}})"), cv::InputError);
  EXPECT_THROW(cv::parse_run_config("{not json"), cv::InputError);
  EXPECT_THROW(cv::load_run_config("/nonexistent/config.json"), cv::InputError);
}

TEST(Config, LoadFromFile) {
  const fs::path dir = cv::testing::scratch_dir("config_load");
  std::ofstream(dir / "c.json") << R"({"seed": 5, "finetune": {"k_folds": 3}})";
  const cv::RunConfig c = cv::load_run_config(dir / "c.json");
  EXPECT_EQ(c.finetune.k_folds, 3u);
  EXPECT_EQ(c.pretrain.seed, 5u);
}
