#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "coughvit/dataset.hpp"
#include "coughvit/finetune.hpp"
#include "coughvit/gradcheck.hpp"
#include "coughvit/mae.hpp"
#include "coughvit/ops.hpp"
#include "coughvit/vit.hpp"

namespace coughvit {

struct GradCheckRow {
  std::string name;
  double max_error = 0.0;
  std::size_t points = 0;
};

namespace detail {

inline Tensor uniform_tensor(const Shape& shape, Rng& rng, double lo, double hi) {
  Tensor t(shape);
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Contracts the op output with fixed random weights so every output cell counts.
inline Var weighted_sum(Tape& t, Var y, std::uint64_t seed) {
  Rng rng = seeded_rng(seed, "weights");
  return ops::sum(ops::mul(y, t.constant(uniform_tensor(y.value().shape(), rng, -1.0, 1.0))));
}

}  // namespace detail

/// Central-difference checks of every differentiable op at `points` random
/// inputs each, followed by whole-model losses at desk scale: attention and
/// transformer blocks, the reconstruction loss (global and windowed decoder,
/// 48 patches) and the classification loss at 48 and 80 patches.
inline std::vector<GradCheckRow> run_grad_checks(std::uint64_t seed, std::size_t points = 10,
                                                 const std::function<void(const GradCheckRow&)>& on_row = {}) {
  std::vector<GradCheckRow> rows;
  auto record = [&](GradCheckRow r) {
    if (on_row) on_row(r);
    rows.push_back(std::move(r));
  };
  Rng fixed = seeded_rng(seed, "grad-check/fixed");
  using detail::uniform_tensor;
  using detail::weighted_sum;
  const Tensor w = uniform_tensor({5, 3}, fixed, -1, 1), b = uniform_tensor({3}, fixed, -1, 1);
  const Tensor m = uniform_tensor({4, 5}, fixed, -1, 1);
  const Tensor g = uniform_tensor({5}, fixed, 0.5, 1.5), beta = uniform_tensor({5}, fixed, -1, 1);
  std::vector<std::uint8_t> allow(4 * 5, 1);
  for (std::size_t i = 0; i < 4; ++i) allow[i * 5 + (i + 1) % 5] = 0;

  auto op = [&](const std::string& name, const ScalarFn& f, const Shape& shape, double lo = -1.0, double hi = 1.0) {
    Rng rng = seeded_rng(seed, "grad-check/" + name);
    GradCheckRow row{name, 0.0, points};
    for (std::size_t p = 0; p < points; ++p)
      row.max_error = std::max(row.max_error, grad_check(f, uniform_tensor(shape, rng, lo, hi)));
    record(row);
  };
  op("matmul", [&](Tape& t, Var x) { return weighted_sum(t, ops::matmul(x, t.constant(w)), 1); }, {4, 5});
  op("matmul (rhs)", [&](Tape& t, Var x) { return weighted_sum(t, ops::matmul(t.constant(m), x), 2); }, {5, 3});
  op("matmul_nt", [&](Tape& t, Var x) { return weighted_sum(t, ops::matmul_nt(x, t.constant(m)), 3); }, {2, 5});
  op("linear", [&](Tape& t, Var x) { return weighted_sum(t, ops::linear(x, t.constant(w), t.constant(b)), 4); }, {4, 5});
  op("linear (bias)", [&](Tape& t, Var x) { return weighted_sum(t, ops::linear(t.constant(m), t.constant(w), x), 5); }, {3});
  op("transpose", [&](Tape& t, Var x) { return weighted_sum(t, ops::transpose(x), 6); }, {4, 5});
  op("add", [&](Tape& t, Var x) { return weighted_sum(t, ops::add(x, ops::square(x)), 7); }, {4, 5});
  op("sub", [&](Tape& t, Var x) { return weighted_sum(t, ops::sub(t.constant(m), ops::square(x)), 8); }, {4, 5});
  op("mul", [&](Tape& t, Var x) { return weighted_sum(t, ops::mul(x, x), 9); }, {4, 5});
  op("add_row", [&](Tape& t, Var x) { return weighted_sum(t, ops::add_row(t.constant(m), ops::square(x)), 10); }, {5});
  op("scale", [&](Tape& t, Var x) { return weighted_sum(t, ops::scale(x, -2.5), 11); }, {4, 5});
  op("square", [&](Tape& t, Var x) { return weighted_sum(t, ops::square(x), 12); }, {4, 5});
  op("gelu", [&](Tape& t, Var x) { return weighted_sum(t, ops::gelu(x), 13); }, {4, 5}, -3.0, 3.0);
  op("sum", [&](Tape&, Var x) { return ops::sum(ops::square(x)); }, {4, 5});
  op("mean", [&](Tape&, Var x) { return ops::mean(ops::square(x)); }, {4, 5});
  op("mean_rows", [&](Tape& t, Var x) { return weighted_sum(t, ops::mean_rows(ops::square(x)), 14); }, {4, 5});
  op("reshape", [&](Tape& t, Var x) { return weighted_sum(t, ops::reshape(x, {5, 4}), 15); }, {4, 5});
  op("concat_rows", [&](Tape& t, Var x) { return weighted_sum(t, ops::concat_rows({x, ops::square(x), t.constant(m)}), 16); },
     {4, 5});
  op("concat_cols", [&](Tape& t, Var x) { return weighted_sum(t, ops::concat_cols({ops::square(x), t.constant(m), x}), 17); },
     {4, 5});
  op("slice_cols", [&](Tape& t, Var x) { return weighted_sum(t, ops::slice_cols(ops::square(x), 1, 3), 18); }, {4, 5});
  op("gather_rows", [&](Tape& t, Var x) { return weighted_sum(t, ops::gather_rows(x, {3, 0, 3, 1}), 19); }, {4, 5});
  op("scatter_rows", [&](Tape& t, Var x) { return weighted_sum(t, ops::scatter_rows(x, {5, 1, 2, 0}, 7), 20); }, {4, 5});
  op("softmax", [&](Tape& t, Var x) { return weighted_sum(t, ops::softmax(x), 21); }, {4, 5}, -3.0, 3.0);
  op("masked_softmax", [&](Tape& t, Var x) { return weighted_sum(t, ops::masked_softmax(x, allow), 22); }, {4, 5}, -3.0,
     3.0);
  op("log_softmax", [&](Tape& t, Var x) { return weighted_sum(t, ops::log_softmax(x), 23); }, {4, 5}, -3.0, 3.0);
  op("layer_norm (input)",
     [&](Tape& t, Var x) { return weighted_sum(t, ops::layer_norm(x, t.constant(g), t.constant(beta)), 24); }, {4, 5}, -2.0,
     2.0);
  op("layer_norm (gain)",
     [&](Tape& t, Var x) { return weighted_sum(t, ops::layer_norm(t.constant(m), x, t.constant(beta)), 25); }, {5});
  op("layer_norm (bias)",
     [&](Tape& t, Var x) { return weighted_sum(t, ops::layer_norm(t.constant(m), t.constant(g), x), 26); }, {5});
  op("cross_entropy", [&](Tape&, Var x) { return ops::cross_entropy(x, 1); }, {1, 2}, -4.0, 4.0);

  // Attention and a full block over the input sequence, with small widths.
  {
    Rng init = seeded_rng(seed, "grad-check/block");
    BlockParams blk = BlockParams::init("block", 8, 2, init);
    perturb_parameters(parameters_of(blk), 0.3, init.fork("point"));
    const WindowMap windows = window_map(2, 3, true, true, WindowConfig{2, 1});
    op("attention (global)", [&](Tape& t, Var x) { return weighted_sum(t, multi_head_attention(t, x, blk, 2, nullptr, nullptr), 27); },
       {7, 8});
    op("attention (windowed)",
       [&](Tape& t, Var x) { return weighted_sum(t, multi_head_attention(t, x, blk, 2, &windows, nullptr), 28); }, {7, 8});
    op("transformer block", [&](Tape& t, Var x) { return weighted_sum(t, transformer_block(t, x, blk, 2, &windows, nullptr), 29); },
       {7, 8});
  }

  // Whole-model losses on a synthetic clip at desk scale.
  const ModelConfig mc;
  Rng clip_rng = seeded_rng(seed, "grad-check/clip");
  const MelSpectrogram spec = log_mel_spectrogram(synth_clip(1, SynthSpec{.duration = 2.0}, clip_rng), MelConfig{});
  const PatchSequence p48 = patchify(fit_length(spec, 98), mc.patch_side, mc.patch_stride);
  for (auto mode : {DecoderAttention::global, DecoderAttention::windowed})
    record({"pretrain loss, " + to_string(mode) + " decoder, " + std::to_string(p48.size()) + " patches",
            pretrain_grad_check(mc, p48, mode, seed), 1});
  const auto stats = dataset_stats({spec});
  for (std::size_t frames : {std::size_t{98}, std::size_t{160}}) {
    const PatchSequence ps = prepare_input(spec, stats, frames, mc);
    for (auto pooling : {Pooling::cls, Pooling::mean})
      record({"classifier loss, " + to_string(pooling) + " pooling, " + std::to_string(ps.size()) + " patches",
              classifier_grad_check(mc, ps, 1, pooling, seed), 1});
  }
  return rows;
}

}  // namespace coughvit
