#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "coughvit/finetune.hpp"
#include "coughvit/mae.hpp"
#include "coughvit/mel.hpp"
#include "coughvit/segmentation.hpp"
#include "coughvit/vit.hpp"

namespace coughvit {

struct PathsConfig {
  std::string manifest;
  std::string checkpoint;
  std::string output_dir = "out";
};

/// Everything a command needs; one JSON document with one object per section.
struct RunConfig {
  MelConfig mel;
  ModelConfig model;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  SegmentationConfig segment;
  PathsConfig paths;
  std::uint64_t seed = 0;

  void validate() const {
    mel.validate();
    model.validate();
    pretrain.validate();
    finetune.validate();
    segment.validate();
  }
};

namespace detail {

/// Reads fields from one JSON object and rejects keys nobody asked for.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw InputError("config: '" + where_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw InputError("config: bad value for '" + where_ + "." + key + "'");
    }
  }

  [[nodiscard]] bool has(const char* key) const { return j_.contains(key); }
  [[nodiscard]] const nlohmann::json& sub(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw InputError("config: unknown key '" + (where_.empty() ? k : where_ + "." + k) + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json to_json(const MelConfig& m) {
  return {{"target_rate", m.target_rate}, {"n_mels", m.n_mels},     {"frame_length", m.frame_length},
          {"frame_hop", m.frame_hop},     {"fft_size", m.fft_size}, {"mel_fmin", m.mel_fmin},
          {"mel_fmax", m.mel_fmax},       {"log_floor", m.log_floor}};
}

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"patch_side", m.patch_side}, {"patch_stride", m.patch_stride}, {"d_model", m.d_model},
          {"n_heads", m.n_heads},       {"n_blocks", m.n_blocks},         {"mlp_ratio", m.mlp_ratio},
          {"dec_dim", m.dec_dim},       {"dec_heads", m.dec_heads},       {"dec_blocks", m.dec_blocks},
          {"dec_mlp_ratio", m.dec_mlp_ratio}, {"n_classes", m.n_classes}};
}

inline nlohmann::json to_json(const PretrainConfig& p) {
  return {{"mask_ratio", p.mask_ratio},
          {"epochs", p.epochs},
          {"attention", to_string(p.attention)},
          {"batch_size", p.batch_size},
          {"target_frames", p.target_frames},
          {"lr", p.optimizer.lr},
          {"beta1", p.optimizer.beta1},
          {"beta2", p.optimizer.beta2},
          {"eps", p.optimizer.eps},
          {"weight_decay", p.optimizer.weight_decay},
          {"warmup_frac", p.warmup_frac},
          {"max_steps", p.max_steps}};
}

inline nlohmann::json to_json(const FinetuneConfig& f) {
  return {{"epochs", f.epochs},         {"batch_size", f.batch_size},     {"encoder_lr", f.encoder_lr},
          {"head_lr", f.head_lr},       {"beta1", f.beta1},               {"beta2", f.beta2},
          {"weight_decay", f.weight_decay}, {"warmup_frac", f.warmup_frac}, {"pooling", to_string(f.pooling)},
          {"target_frames", f.target_frames}, {"k_folds", f.k_folds}};
}

inline nlohmann::json to_json(const SegmentationConfig& s) {
  return {{"window", s.window},
          {"step", s.step},
          {"threshold", s.threshold},
          {"overlap_criterion", s.overlap_criterion},
          {"sample_interval", s.sample_interval}};
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"mel", to_json(c.mel)},
          {"model", to_json(c.model)},
          {"pretrain", to_json(c.pretrain)},
          {"finetune", to_json(c.finetune)},
          {"segment", to_json(c.segment)},
          {"paths", {{"manifest", c.paths.manifest}, {"checkpoint", c.paths.checkpoint}, {"output_dir", c.paths.output_dir}}},
          {"seed", c.seed}};
}

inline MelConfig mel_config_from(const nlohmann::json& j) {
  MelConfig m;
  detail::StrictObject o(j, "mel");
  o.get("target_rate", m.target_rate);
  o.get("n_mels", m.n_mels);
  o.get("frame_length", m.frame_length);
  o.get("frame_hop", m.frame_hop);
  o.get("fft_size", m.fft_size);
  o.get("mel_fmin", m.mel_fmin);
  o.get("mel_fmax", m.mel_fmax);
  o.get("log_floor", m.log_floor);
  o.finish();
  return m;
}

inline ModelConfig model_config_from(const nlohmann::json& j) {
  ModelConfig m;
  detail::StrictObject o(j, "model");
  o.get("patch_side", m.patch_side);
  o.get("patch_stride", m.patch_stride);
  o.get("d_model", m.d_model);
  o.get("n_heads", m.n_heads);
  o.get("n_blocks", m.n_blocks);
  o.get("mlp_ratio", m.mlp_ratio);
  o.get("dec_mlp_ratio", m.dec_mlp_ratio);
  o.get("dec_dim", m.dec_dim);
  o.get("dec_heads", m.dec_heads);
  o.get("dec_blocks", m.dec_blocks);
  o.get("n_classes", m.n_classes);
  o.finish();
  return m;
}

inline PretrainConfig pretrain_config_from(const nlohmann::json& j) {
  PretrainConfig p;
  detail::StrictObject o(j, "pretrain");
  std::string attention = to_string(p.attention);
  o.get("mask_ratio", p.mask_ratio);
  o.get("epochs", p.epochs);
  o.get("attention", attention);
  o.get("batch_size", p.batch_size);
  o.get("target_frames", p.target_frames);
  o.get("lr", p.optimizer.lr);
  o.get("beta1", p.optimizer.beta1);
  o.get("beta2", p.optimizer.beta2);
  o.get("eps", p.optimizer.eps);
  o.get("weight_decay", p.optimizer.weight_decay);
  o.get("warmup_frac", p.warmup_frac);
  o.get("max_steps", p.max_steps);
  o.finish();
  p.attention = decoder_attention_from(attention);
  return p;
}

inline FinetuneConfig finetune_config_from(const nlohmann::json& j) {
  FinetuneConfig f;
  detail::StrictObject o(j, "finetune");
  std::string pooling = to_string(f.pooling);
  o.get("epochs", f.epochs);
  o.get("batch_size", f.batch_size);
  o.get("encoder_lr", f.encoder_lr);
  o.get("head_lr", f.head_lr);
  o.get("beta1", f.beta1);
  o.get("beta2", f.beta2);
  o.get("weight_decay", f.weight_decay);
  o.get("warmup_frac", f.warmup_frac);
  o.get("pooling", pooling);
  o.get("target_frames", f.target_frames);
  o.get("k_folds", f.k_folds);
  o.finish();
  f.pooling = pooling_from(pooling);
  return f;
}

inline SegmentationConfig segmentation_config_from(const nlohmann::json& j) {
  SegmentationConfig s;
  detail::StrictObject o(j, "segment");
  o.get("window", s.window);
  o.get("step", s.step);
  o.get("threshold", s.threshold);
  o.get("overlap_criterion", s.overlap_criterion);
  o.get("sample_interval", s.sample_interval);
  o.finish();
  return s;
}

/// Missing sections and keys take their defaults; unknown keys are errors.
inline RunConfig run_config_from(const nlohmann::json& j) {
  RunConfig c;
  detail::StrictObject o(j, "");
  if (o.has("mel")) c.mel = mel_config_from(o.sub("mel"));
  if (o.has("model")) c.model = model_config_from(o.sub("model"));
  if (o.has("pretrain")) c.pretrain = pretrain_config_from(o.sub("pretrain"));
  if (o.has("finetune")) c.finetune = finetune_config_from(o.sub("finetune"));
  if (o.has("segment")) c.segment = segmentation_config_from(o.sub("segment"));
  if (o.has("paths")) {
    detail::StrictObject p(o.sub("paths"), "paths");
    p.get("manifest", c.paths.manifest);
    p.get("checkpoint", c.paths.checkpoint);
    p.get("output_dir", c.paths.output_dir);
    p.finish();
  }
  o.get("seed", c.seed);
  o.finish();
  c.pretrain.seed = c.seed;
  c.finetune.seed = c.seed;
  c.validate();
  return c;
}

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError(std::string("config: ") + e.what());
  }
  return run_config_from(j);
}

inline std::string serialize_run_config(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace coughvit
