#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "coughvit/mel.hpp"
#include "coughvit/ops.hpp"
#include "coughvit/rng.hpp"
#include "coughvit/tensor.hpp"

namespace coughvit {

/// Architecture hyper-parameters shared by encoder, decoder and head.
struct ModelConfig {
  std::size_t patch_side = 16;
  std::size_t patch_stride = 16;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_blocks = 2;
  std::size_t mlp_ratio = 4;
  // The decoder keeps its full width at desk scale: narrower than a patch, its
  // final projection cannot span the reconstruction targets.
  std::size_t dec_dim = 512;
  std::size_t dec_heads = 16;
  std::size_t dec_blocks = 2;
  std::size_t dec_mlp_ratio = 4;
  std::size_t n_classes = 2;

  /// The encoder/decoder sizes of a ViT-B style full-scale model.
  static ModelConfig full_scale() {
    ModelConfig c;
    c.d_model = 768;
    c.n_heads = 12;
    c.n_blocks = 12;
    c.dec_blocks = 16;
    return c;
  }

  [[nodiscard]] std::size_t patch_dim() const { return patch_side * patch_side; }

  void validate() const {
    require(patch_side >= 1 && patch_stride >= 1 && patch_stride <= patch_side, "model: need 1 <= stride <= side");
    require(d_model > 0 && n_heads > 0 && d_model % n_heads == 0, "model: d_model must be divisible by n_heads");
    require(d_model % 2 == 0, "model: d_model must be even for sinusoidal encodings");
    require(dec_dim > 0 && dec_heads > 0 && dec_dim % dec_heads == 0, "model: dec_dim must be divisible by dec_heads");
    require(mlp_ratio >= 1 && dec_mlp_ratio >= 1 && n_classes >= 2,
            "model: mlp_ratio >= 1, dec_mlp_ratio >= 1 and n_classes >= 2 required");
  }
};

// ---- patches ------------------------------------------------------------------

/// Patch count along one axis for extent n, side s, stride sigma.
inline std::size_t patches_along(std::size_t n, std::size_t s, std::size_t sigma) {
  return n < s ? 0 : (n - s + sigma) / sigma;
}

/// floor((w - s + sigma)/sigma) * floor((h - s + sigma)/sigma)
inline std::size_t patch_count(std::size_t w, std::size_t h, std::size_t s, std::size_t sigma) {
  return patches_along(w, s, sigma) * patches_along(h, s, sigma);
}

/// Patches in raster order: index = time_index * n_freq + freq_index. Each
/// row of `patches` is one s x s patch flattened time-major.
struct PatchSequence {
  Tensor patches;  // [n_time * n_freq, s * s]
  std::size_t n_time = 0;
  std::size_t n_freq = 0;
  std::size_t side = 16;
  std::size_t stride = 16;

  [[nodiscard]] std::size_t size() const { return n_time * n_freq; }
};

inline PatchSequence patchify(const MelSpectrogram& spec, std::size_t side = 16, std::size_t stride = 16) {
  require(side >= 1 && stride >= 1, "patchify: side and stride must be positive");
  const std::size_t w = spec.frames(), h = spec.bins();
  if (w < side || h < side)
    throw InputError("patchify: spectrogram " + std::to_string(w) + "x" + std::to_string(h) +
                     " is smaller than one " + std::to_string(side) + "x" + std::to_string(side) + " patch");
  PatchSequence ps;
  ps.side = side;
  ps.stride = stride;
  ps.n_time = patches_along(w, side, stride);
  ps.n_freq = patches_along(h, side, stride);
  ps.patches = Tensor::matrix(ps.size(), side * side);
  for (std::size_t ti = 0; ti < ps.n_time; ++ti)
    for (std::size_t fi = 0; fi < ps.n_freq; ++fi) {
      auto dst = ps.patches.row(ti * ps.n_freq + fi);
      for (std::size_t i = 0; i < side; ++i)
        for (std::size_t j = 0; j < side; ++j) dst[i * side + j] = spec.values.at(ti * stride + i, fi * stride + j);
    }
  return ps;
}

/// Fixed 1-D sinusoidal table [n_positions, d]:
/// PE(p, 2i) = sin(p / 10000^(2i/d)), PE(p, 2i+1) = cos(p / 10000^(2i/d)).
inline Tensor sinusoidal_pe(std::size_t n_positions, std::size_t d) {
  require(d % 2 == 0, "sinusoidal_pe: dimension must be even, got " + std::to_string(d));
  Tensor pe = Tensor::matrix(n_positions, d);
  for (std::size_t p = 0; p < n_positions; ++p)
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double angle = static_cast<double>(p) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
      pe.at(p, 2 * i) = std::sin(angle);
      pe.at(p, 2 * i + 1) = std::cos(angle);
    }
  return pe;
}

// ---- parameters ------------------------------------------------------------

namespace detail {

inline Parameter init_weight(const std::string& name, std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.data()) v = rng.truncated_normal(0.02);
  return Parameter(name, std::move(t), true);
}

inline Parameter init_const(const std::string& name, std::size_t n, double v) {
  return Parameter(name, Tensor(Shape{n}, v), false);
}

inline Parameter init_token(const std::string& name, std::size_t d, Rng& rng) {
  Tensor t = Tensor::matrix(1, d);
  for (double& v : t.data()) v = rng.truncated_normal(0.02);
  return Parameter(name, std::move(t), false);
}

}  // namespace detail

/// Pre-norm transformer block: attention and a GELU MLP, each residual.
/// Keys carry no bias: it would add a per-query constant to every logit of a
/// softmax row, leaving outputs unchanged and its gradient identically zero.
struct BlockParams {
  Parameter ln1_g, ln1_b;
  Parameter wq, bq, wk, wv, bv, wo, bo;
  Parameter ln2_g, ln2_b;
  Parameter fc1_w, fc1_b, fc2_w, fc2_b;

  static BlockParams init(const std::string& prefix, std::size_t d, std::size_t mlp_ratio, Rng& rng) {
    using detail::init_const;
    using detail::init_weight;
    const std::size_t hidden = d * mlp_ratio;
    return BlockParams{init_const(prefix + ".ln1.g", d, 1.0), init_const(prefix + ".ln1.b", d, 0.0),
                       init_weight(prefix + ".attn.wq", d, d, rng), init_const(prefix + ".attn.bq", d, 0.0),
                       init_weight(prefix + ".attn.wk", d, d, rng),
                       init_weight(prefix + ".attn.wv", d, d, rng), init_const(prefix + ".attn.bv", d, 0.0),
                       init_weight(prefix + ".attn.wo", d, d, rng), init_const(prefix + ".attn.bo", d, 0.0),
                       init_const(prefix + ".ln2.g", d, 1.0), init_const(prefix + ".ln2.b", d, 0.0),
                       init_weight(prefix + ".mlp.fc1.w", d, hidden, rng), init_const(prefix + ".mlp.fc1.b", hidden, 0.0),
                       init_weight(prefix + ".mlp.fc2.w", hidden, d, rng), init_const(prefix + ".mlp.fc2.b", d, 0.0)};
  }

  template <class F>
  void for_each(F&& f) {
    for (Parameter* p : {&ln1_g, &ln1_b, &wq, &bq, &wk, &wv, &bv, &wo, &bo, &ln2_g, &ln2_b, &fc1_w, &fc1_b,
                         &fc2_w, &fc2_b})
      f(*p);
  }
};

struct EncoderParams {
  Parameter patch_w, patch_b;  // s*s -> d
  Parameter cls;               // [1, d]
  std::vector<BlockParams> blocks;
  Parameter norm_g, norm_b;
  std::size_t n_heads = 4;

  static EncoderParams init(const ModelConfig& cfg, Rng rng) {
    cfg.validate();
    EncoderParams e;
    e.patch_w = detail::init_weight("encoder.patch_embed.w", cfg.patch_dim(), cfg.d_model, rng);
    e.patch_b = detail::init_const("encoder.patch_embed.b", cfg.d_model, 0.0);
    e.cls = detail::init_token("encoder.cls_token", cfg.d_model, rng);
    for (std::size_t b = 0; b < cfg.n_blocks; ++b)
      e.blocks.push_back(BlockParams::init("encoder.block" + std::to_string(b), cfg.d_model, cfg.mlp_ratio, rng));
    e.norm_g = detail::init_const("encoder.norm.g", cfg.d_model, 1.0);
    e.norm_b = detail::init_const("encoder.norm.b", cfg.d_model, 0.0);
    e.n_heads = cfg.n_heads;
    return e;
  }

  [[nodiscard]] std::size_t dim() const { return patch_w.value.shape()[1]; }

  template <class F>
  void for_each(F&& f) {
    f(patch_w);
    f(patch_b);
    f(cls);
    for (auto& b : blocks) b.for_each(f);
    f(norm_g);
    f(norm_b);
  }
};

template <class P>
std::vector<Parameter*> parameters_of(P& p) {
  std::vector<Parameter*> out;
  p.for_each([&](Parameter& x) { out.push_back(&x); });
  return out;
}

// ---- forward ---------------------------------------------------------------

/// Embedded tokens on a tape; row 0 is the classification token when has_cls.
struct TokenSequence {
  Var tokens;
  bool has_cls = false;

  [[nodiscard]] std::size_t size() const { return tokens.value().rows(); }
  [[nodiscard]] std::size_t n_patches() const { return size() - (has_cls ? 1 : 0); }
};

/// Linear patch projection, optional CLS prepended, then the sinusoidal table
/// for exactly this sequence length added (CLS at position 0).
inline TokenSequence embed(Tape& tape, const PatchSequence& patches, EncoderParams& enc, bool with_cls) {
  if (patches.patches.cols() != enc.patch_w.value.shape()[0])
    throw InputError("embed: patch dimension " + std::to_string(patches.patches.cols()) +
                     " does not match projection input " + std::to_string(enc.patch_w.value.shape()[0]));
  const std::size_t d = enc.dim();
  Var x = ops::linear(tape.constant(patches.patches), tape.param(enc.patch_w), tape.param(enc.patch_b));
  if (with_cls) x = ops::concat_rows({tape.param(enc.cls), x});
  const std::size_t n = x.value().rows();
  x = ops::add(x, tape.constant(sinusoidal_pe(n, d)));
  return TokenSequence{x, with_cls};
}

/// Window id per token; attention is restricted to tokens with equal ids.
using WindowMap = std::vector<int>;

/// Attention probabilities of every head of one attention call, [n, n] each.
struct AttentionTrace {
  std::vector<std::vector<Tensor>> calls;  // calls[k][head]
};

inline Var multi_head_attention(Tape& tape, Var x, BlockParams& blk, std::size_t n_heads, const WindowMap* windows,
                                AttentionTrace* trace) {
  const std::size_t n = x.value().rows();
  const std::size_t d = x.value().cols();
  if (d % n_heads != 0) throw InputError("attention: dimension not divisible by head count");
  const std::size_t hd = d / n_heads;
  std::vector<std::uint8_t> allow;
  if (windows) {
    if (windows->size() != n) throw InputError("attention: window map length does not match token count");
    allow.resize(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) allow[i * n + j] = (*windows)[i] == (*windows)[j];
  }
  Var q = ops::linear(x, tape.param(blk.wq), tape.param(blk.bq));
  Var k = ops::matmul(x, tape.param(blk.wk));
  Var v = ops::linear(x, tape.param(blk.wv), tape.param(blk.bv));
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Var> heads;
  if (trace) trace->calls.emplace_back();
  for (std::size_t h = 0; h < n_heads; ++h) {
    Var qh = ops::slice_cols(q, h * hd, hd);
    Var kh = ops::slice_cols(k, h * hd, hd);
    Var vh = ops::slice_cols(v, h * hd, hd);
    Var scores = ops::scale(ops::matmul_nt(qh, kh), scale);
    Var p = windows ? ops::masked_softmax(scores, allow) : ops::softmax(scores);
    if (trace) trace->calls.back().push_back(p.value());
    heads.push_back(ops::matmul(p, vh));
  }
  Var cat = n_heads == 1 ? heads.front() : ops::concat_cols(heads);
  return ops::linear(cat, tape.param(blk.wo), tape.param(blk.bo));
}

inline Var transformer_block(Tape& tape, Var x, BlockParams& blk, std::size_t n_heads, const WindowMap* windows,
                             AttentionTrace* trace) {
  Var a = ops::layer_norm(x, tape.param(blk.ln1_g), tape.param(blk.ln1_b));
  x = ops::add(x, multi_head_attention(tape, a, blk, n_heads, windows, trace));
  Var m = ops::layer_norm(x, tape.param(blk.ln2_g), tape.param(blk.ln2_b));
  m = ops::gelu(ops::linear(m, tape.param(blk.fc1_w), tape.param(blk.fc1_b)));
  m = ops::linear(m, tape.param(blk.fc2_w), tape.param(blk.fc2_b));
  return ops::add(x, m);
}

/// Runs the encoder blocks and the final layer norm over a sequence of any length.
inline Var encode(Tape& tape, const TokenSequence& tokens, EncoderParams& enc, AttentionTrace* trace = nullptr) {
  if (tokens.tokens.value().cols() != enc.dim())
    throw InputError("encode: token dimension " + std::to_string(tokens.tokens.value().cols()) + " != model dimension " +
                     std::to_string(enc.dim()));
  Var x = tokens.tokens;
  for (auto& blk : enc.blocks) x = transformer_block(tape, x, blk, enc.n_heads, nullptr, trace);
  return ops::layer_norm(x, tape.param(enc.norm_g), tape.param(enc.norm_b));
}

}  // namespace coughvit
