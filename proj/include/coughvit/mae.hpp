#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "coughvit/gradcheck.hpp"
#include "coughvit/mel.hpp"
#include "coughvit/ops.hpp"
#include "coughvit/optim.hpp"
#include "coughvit/rng.hpp"
#include "coughvit/vit.hpp"

namespace coughvit {

// ---- masking ----------------------------------------------------------------

/// Which patch indices are hidden from the encoder. Both index sets are sorted.
struct MaskPlan {
  std::size_t n_patches = 0;
  std::vector<std::size_t> masked;
  std::vector<std::size_t> visible;
  double ratio = 0.0;
};

/// Uniformly random subset of round(ratio * n) patches, drawn with a partial
/// Fisher-Yates shuffle.
inline MaskPlan sample_mask(std::size_t n_patches, double ratio, Rng& rng) {
  require(n_patches >= 1, "sample_mask: need at least one patch");
  require(ratio >= 0.0 && ratio < 1.0, "sample_mask: ratio must lie in [0, 1)");
  const auto k = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(n_patches)));
  std::vector<std::size_t> perm(n_patches);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = 0; i < k; ++i) std::swap(perm[i], perm[i + rng.below(n_patches - i)]);
  MaskPlan plan{n_patches, {perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k)},
                {perm.begin() + static_cast<std::ptrdiff_t>(k), perm.end()}, ratio};
  std::sort(plan.masked.begin(), plan.masked.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  return plan;
}

/// Keeps the CLS token (never masked) and the visible patch tokens in their
/// original relative order.
inline TokenSequence apply_mask(const TokenSequence& tokens, const MaskPlan& plan) {
  if (tokens.n_patches() != plan.n_patches)
    throw InputError("apply_mask: sequence has " + std::to_string(tokens.n_patches()) + " patch tokens, plan expects " +
                     std::to_string(plan.n_patches));
  const std::size_t off = tokens.has_cls ? 1 : 0;
  std::vector<std::size_t> rows;
  if (tokens.has_cls) rows.push_back(0);
  for (std::size_t v : plan.visible) rows.push_back(v + off);
  return TokenSequence{ops::gather_rows(tokens.tokens, rows), tokens.has_cls};
}

// ---- decoder ----------------------------------------------------------------

enum class DecoderAttention { global, windowed };

inline std::string to_string(DecoderAttention a) { return a == DecoderAttention::global ? "global" : "windowed"; }

inline DecoderAttention decoder_attention_from(const std::string& s) {
  if (s == "global") return DecoderAttention::global;
  if (s == "windowed") return DecoderAttention::windowed;
  throw InputError("unknown decoder attention mode '" + s + "' (expected global|windowed)");
}

/// Window partition of the patch grid. Blocks alternate between the plain
/// partition and one offset by `shift` patches along both axes.
struct WindowConfig {
  std::size_t extent = 4;
  std::size_t shift = 2;
};

/// Window ids for a sequence laid out as [CLS?] + raster-ordered patches. The
/// grid index space is conceptually padded up to a multiple of the window
/// extent; padding positions hold no tokens. CLS sits in a window of its own.
inline WindowMap window_map(std::size_t n_time, std::size_t n_freq, bool has_cls, bool shifted,
                            const WindowConfig& wc = {}) {
  require(n_time > 0 && n_freq > 0, "window_map: empty patch grid");
  require(wc.extent > 0 && wc.shift < wc.extent, "window_map: need 0 <= shift < extent");
  const std::size_t s = shifted ? wc.shift : 0;
  const std::size_t cols = (n_freq + s + wc.extent - 1) / wc.extent + 1;
  WindowMap map;
  if (has_cls) map.push_back(-1);
  for (std::size_t r = 0; r < n_time; ++r)
    for (std::size_t c = 0; c < n_freq; ++c)
      map.push_back(static_cast<int>(((r + s) / wc.extent) * cols + (c + s) / wc.extent));
  return map;
}

struct DecoderParams {
  Parameter mask_token;  // [1, d_model]
  Parameter in_w, in_b;  // d_model -> dec_dim
  std::vector<BlockParams> blocks;
  Parameter out_w, out_b;  // dec_dim -> s*s
  std::size_t n_heads = 4;

  static DecoderParams init(const ModelConfig& cfg, Rng rng) {
    cfg.validate();
    DecoderParams d;
    d.mask_token = detail::init_token("decoder.mask_token", cfg.d_model, rng);
    d.in_w = detail::init_weight("decoder.embed.w", cfg.d_model, cfg.dec_dim, rng);
    d.in_b = detail::init_const("decoder.embed.b", cfg.dec_dim, 0.0);
    for (std::size_t b = 0; b < cfg.dec_blocks; ++b)
      d.blocks.push_back(BlockParams::init("decoder.block" + std::to_string(b), cfg.dec_dim, cfg.dec_mlp_ratio, rng));
    d.out_w = detail::init_weight("decoder.pred.w", cfg.dec_dim, cfg.patch_dim(), rng);
    d.out_b = detail::init_const("decoder.pred.b", cfg.patch_dim(), 0.0);
    d.n_heads = cfg.dec_heads;
    return d;
  }

  template <class F>
  void for_each(F&& f) {
    f(mask_token);
    f(in_w);
    f(in_b);
    for (auto& b : blocks) b.for_each(f);
    f(out_w);
    f(out_b);
  }
};

/// Re-inserts the shared mask token at every masked slot so the sequence has
/// the full patch count in original order, then adds the sinusoidal table for
/// that length (CLS, when present, at position 0).
inline Var restore_with_mask_tokens(Tape& tape, Var features, bool has_cls, const MaskPlan& plan, DecoderParams& dec) {
  const std::size_t off = has_cls ? 1 : 0;
  if (features.value().rows() != plan.visible.size() + off)
    throw InputError("restore: got " + std::to_string(features.value().rows()) + " features, expected " +
                     std::to_string(plan.visible.size() + off));
  const std::size_t total = plan.n_patches + off;
  const std::size_t d = features.value().cols();
  std::vector<std::size_t> slots;
  if (has_cls) slots.push_back(0);
  for (std::size_t v : plan.visible) slots.push_back(v + off);
  Var seq = ops::scatter_rows(features, slots, total);
  if (!plan.masked.empty()) {
    std::vector<std::size_t> masked_slots;
    for (std::size_t m : plan.masked) masked_slots.push_back(m + off);
    Var tokens = ops::gather_rows(tape.param(dec.mask_token), std::vector<std::size_t>(plan.masked.size(), 0));
    seq = ops::add(seq, ops::scatter_rows(tokens, masked_slots, total));
  }
  return ops::add(seq, tape.constant(sinusoidal_pe(total, d)));
}

/// Decoder projection, transformer blocks (global attention, or windowed with
/// the shift alternating per block), and the per-patch reconstruction head.
/// Returns [n_patches, s*s]; the CLS row is not part of the output.
inline Var decode(Tape& tape, Var seq, bool has_cls, DecoderParams& dec, DecoderAttention mode, std::size_t n_time,
                  std::size_t n_freq, const WindowConfig& wc = {}, AttentionTrace* trace = nullptr) {
  const std::size_t off = has_cls ? 1 : 0;
  if (seq.value().rows() != n_time * n_freq + off)
    throw InputError("decode: sequence length does not match the patch grid");
  WindowMap plain, shifted;
  if (mode == DecoderAttention::windowed) {
    plain = window_map(n_time, n_freq, has_cls, false, wc);
    shifted = window_map(n_time, n_freq, has_cls, true, wc);
  }
  Var x = ops::linear(seq, tape.param(dec.in_w), tape.param(dec.in_b));
  for (std::size_t b = 0; b < dec.blocks.size(); ++b) {
    const WindowMap* wm = mode == DecoderAttention::windowed ? (b % 2 == 0 ? &plain : &shifted) : nullptr;
    x = transformer_block(tape, x, dec.blocks[b], dec.n_heads, wm, trace);
  }
  if (has_cls) {
    std::vector<std::size_t> rows(n_time * n_freq);
    std::iota(rows.begin(), rows.end(), 1);
    x = ops::gather_rows(x, rows);
  }
  return ops::linear(x, tape.param(dec.out_w), tape.param(dec.out_b));
}

// ---- loss ---------------------------------------------------------------

inline constexpr double kPatchNormEps = 1e-6;

/// Each patch standardized by its own mean and variance: (x - mean)/sqrt(var + eps).
inline Tensor patch_norm_targets(const Tensor& patches, double eps = kPatchNormEps) {
  Tensor out = patches;
  const std::size_t n = patches.cols();
  for (std::size_t r = 0; r < patches.rows(); ++r) {
    auto row = out.row(r);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (double& v : row) v = (v - mu) * inv;
  }
  return out;
}

/// Mean squared error over the masked patches only; predictions at visible
/// patches do not enter the computation.
inline Var masked_mse(Tape& tape, Var pred, const Tensor& targets, const MaskPlan& plan) {
  if (plan.masked.empty()) throw InputError("masked_mse: plan masks no patches, loss is undefined");
  if (pred.value().shape() != targets.shape() || targets.rows() != plan.n_patches)
    throw InputError("masked_mse: prediction " + shape_str(pred.value().shape()) + " vs target " +
                     shape_str(targets.shape()) + " for " + std::to_string(plan.n_patches) + " patches");
  Tensor picked = Tensor::matrix(plan.masked.size(), targets.cols());
  for (std::size_t i = 0; i < plan.masked.size(); ++i)
    std::copy_n(targets.row(plan.masked[i]).begin(), targets.cols(), picked.row(i).begin());
  Var diff = ops::sub(ops::gather_rows(pred, plan.masked), tape.constant(std::move(picked)));
  return ops::mean(ops::square(diff));
}

// ---- pre-training ------------------------------------------------------------

struct PretrainConfig {
  double mask_ratio = 0.75;
  std::size_t epochs = 100;
  DecoderAttention attention = DecoderAttention::global;
  std::size_t batch_size = 8;
  std::size_t target_frames = 98;
  AdamWConfig optimizer{1e-3, 0.9, 0.95, 1e-8, 0.05};
  double warmup_frac = 0.05;
  std::uint64_t seed = 0;
  /// Stop after this many optimizer steps (0 = run all epochs).
  std::size_t max_steps = 0;

  void validate() const {
    require(mask_ratio > 0.0 && mask_ratio < 1.0,
            "pretrain: mask_ratio must lie in (0, 1); a ratio of 0 leaves the masked loss undefined");
    require(epochs >= 1 && batch_size >= 1 && target_frames >= 1, "pretrain: epochs, batch_size, target_frames must be >= 1");
  }
};

/// Encoder plus reconstruction decoder.
struct MaeModel {
  ModelConfig config;
  EncoderParams encoder;
  DecoderParams decoder;

  static MaeModel init(const ModelConfig& cfg, std::uint64_t seed) {
    const Rng root = seeded_rng(seed, "init");
    return MaeModel{cfg, EncoderParams::init(cfg, root.fork("encoder")), DecoderParams::init(cfg, root.fork("decoder"))};
  }

  template <class F>
  void for_each(F&& f) {
    encoder.for_each(f);
    decoder.for_each(f);
  }
};

/// Full reconstruction loss of one spectrogram under a given mask.
inline Var mae_loss(Tape& tape, MaeModel& model, const PatchSequence& patches, const Tensor& targets,
                    const MaskPlan& plan, DecoderAttention mode, const WindowConfig& wc = {},
                    AttentionTrace* dec_trace = nullptr) {
  TokenSequence tokens = embed(tape, patches, model.encoder, true);
  TokenSequence visible = apply_mask(tokens, plan);
  Var features = encode(tape, visible, model.encoder);
  Var full = restore_with_mask_tokens(tape, features, true, plan, model.decoder);
  Var pred = decode(tape, full, true, model.decoder, mode, patches.n_time, patches.n_freq, wc, dec_trace);
  return masked_mse(tape, pred, targets, plan);
}

/// Finite-difference check of the full reconstruction loss. The check runs at
/// a seeded generic point: hidden weights get N(0, sigma^2) added, since at
/// initialization query/key gradients sit near 1e-9, below the resolution of a
/// double-precision central difference. The prediction layer keeps its
/// initial values so the loss stays O(1).
inline double pretrain_grad_check(const ModelConfig& mcfg, const PatchSequence& patches, DecoderAttention mode,
                                  std::uint64_t seed, double sigma = 0.2, std::size_t coords_per_param = 6) {
  MaeModel model = MaeModel::init(mcfg, seed);
  std::vector<Parameter*> hidden;
  for (Parameter* p : parameters_of(model))
    if (p->name.rfind("decoder.pred.", 0) != 0) hidden.push_back(p);
  const Rng root = seeded_rng(seed, "grad-check");
  perturb_parameters(hidden, sigma, root.fork("point"));
  Rng mask_rng = root.fork("mask");
  const MaskPlan plan = sample_mask(patches.size(), 0.75, mask_rng);
  const Tensor targets = patch_norm_targets(patches.patches);
  return grad_check_params([&](Tape& t) { return mae_loss(t, model, patches, targets, plan, mode); },
                           parameters_of(model), coords_per_param, root.fork("coords"));
}

struct PretrainResult {
  MaeModel model;
  std::vector<double> step_loss;   // mean batch loss per optimizer step
  std::vector<double> epoch_loss;  // mean over the epoch's steps
};

/// Masked-reconstruction pre-training over unnormalized spectrograms. Every
/// random choice (initialization, sample order, masks) derives from cfg.seed.
/// `on_epoch(epoch, epoch_loss, model)` runs after each epoch (checkpointing hook).
inline PretrainResult pretrain(const std::vector<MelSpectrogram>& specs, const ModelConfig& mcfg,
                               const PretrainConfig& cfg,
                               const std::function<void(std::size_t, double, MaeModel&)>& on_epoch = {},
                               const MaeModel* init = nullptr) {
  cfg.validate();
  require(!specs.empty(), "pretrain: no training spectrograms");
  std::vector<PatchSequence> patches;
  std::vector<Tensor> targets;
  for (const auto& s : specs) {
    if (s.normalized) throw InputError("pretrain: expects unnormalized spectrograms");
    patches.push_back(patchify(fit_length(s, cfg.target_frames), mcfg.patch_side, mcfg.patch_stride));
    targets.push_back(patch_norm_targets(patches.back().patches));
  }
  PretrainResult res{init ? *init : MaeModel::init(mcfg, cfg.seed), {}, {}};
  MaeModel& model = res.model;
  auto params = parameters_of(model);
  AdamW opt(cfg.optimizer);
  const std::size_t steps_per_epoch = (specs.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = cfg.max_steps ? std::min(cfg.max_steps, cfg.epochs * steps_per_epoch)
                                          : cfg.epochs * steps_per_epoch;
  const Rng root = seeded_rng(cfg.seed, "pretrain");
  Rng mask_rng = root.fork("mask");
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    std::vector<std::size_t> order(specs.size());
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng = root.fork("order/" + std::to_string(epoch));
    order_rng.shuffle(order);
    double epoch_sum = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t b0 = 0; b0 < order.size() && step < total; b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(b1 - b0);
      for (Parameter* p : params) p->zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = b0; i < b1; ++i) {
        const std::size_t idx = order[i];
        const MaskPlan plan = sample_mask(patches[idx].size(), cfg.mask_ratio, mask_rng);
        Tape tape;
        Var loss = mae_loss(tape, model, patches[idx], targets[idx], plan, cfg.attention);
        if (!std::isfinite(loss.value()[0])) throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));
        batch_loss += loss.value()[0] * inv;
        tape.backward(ops::scale(loss, inv));
      }
      opt.step(params, warmup_cosine(static_cast<long>(step), static_cast<long>(total), cfg.warmup_frac));
      res.step_loss.push_back(batch_loss);
      epoch_sum += batch_loss;
      ++epoch_steps;
      ++step;
    }
    res.epoch_loss.push_back(epoch_sum / static_cast<double>(std::max<std::size_t>(1, epoch_steps)));
    if (on_epoch) on_epoch(epoch, res.epoch_loss.back(), model);
  }
  return res;
}

}  // namespace coughvit
