#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coughvit/dataset.hpp"
#include "coughvit/gradcheck.hpp"
#include "coughvit/mel.hpp"
#include "coughvit/ops.hpp"
#include "coughvit/optim.hpp"
#include "coughvit/rng.hpp"
#include "coughvit/vit.hpp"

namespace coughvit {

enum class Pooling { cls, mean };

inline std::string to_string(Pooling p) { return p == Pooling::cls ? "cls" : "mean"; }

inline Pooling pooling_from(const std::string& s) {
  if (s == "cls") return Pooling::cls;
  if (s == "mean") return Pooling::mean;
  throw InputError("unknown pooling mode '" + s + "' (expected cls|mean)");
}

/// Linear map from a pooled d-vector to class logits.
struct HeadParams {
  Parameter w, b;
  Pooling pooling = Pooling::cls;

  static HeadParams init(std::size_t d, std::size_t n_classes, Pooling pooling, Rng rng) {
    return HeadParams{detail::init_weight("head.w", d, n_classes, rng), detail::init_const("head.b", n_classes, 0.0),
                      pooling};
  }

  template <class F>
  void for_each(F&& f) {
    f(w);
    f(b);
  }
};

/// Sequence-level representation: the CLS feature, or the mean over patch
/// features (CLS excluded).
inline Var pool(Var features, bool has_cls, Pooling mode) {
  const std::size_t n = features.value().rows();
  if (mode == Pooling::cls) {
    if (!has_cls) throw InputError("pool: cls pooling requires a classification token");
    return ops::gather_rows(features, {0});
  }
  const std::size_t off = has_cls ? 1 : 0;
  if (n <= off) throw InputError("pool: no patch features to average");
  if (off == 0) return ops::mean_rows(features);
  std::vector<std::size_t> rows(n - off);
  std::iota(rows.begin(), rows.end(), off);
  return ops::mean_rows(ops::gather_rows(features, rows));
}

inline Var head_logits(Tape& tape, Var pooled, HeadParams& head) {
  return ops::linear(pooled, tape.param(head.w), tape.param(head.b));
}

/// Class probabilities (softmax over the head's logits).
inline std::vector<double> classify(Tape& tape, Var pooled, HeadParams& head) {
  const Var p = ops::softmax(head_logits(tape, pooled, head));
  return {p.value().data().begin(), p.value().data().end()};
}

// ---- metrics and splits ----------------------------------------------------

/// Rank-based (Mann-Whitney) AUROC with mid-ranks for ties; label 1 is the
/// positive class.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), "auroc: scores and labels differ in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t)
      if (labels[idx[t]] == 1) {
        pos_rank_sum += mid;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw InputError("auroc: need at least one positive and one negative label");
  const double np = static_cast<double>(n_pos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

struct FoldSplit {
  std::vector<std::vector<std::size_t>> folds;
  std::uint64_t seed = 0;
  bool stratified = true;
};

/// k disjoint folds covering every index. With stratification each class is
/// shuffled and dealt round-robin, continuing where the previous class ended.
inline FoldSplit kfold_split(const std::vector<int>& labels, std::size_t k, std::uint64_t seed, bool stratified = true) {
  require(k >= 2, "kfold_split: k must be >= 2");
  require(labels.size() >= k, "kfold_split: fewer entries than folds");
  FoldSplit split{std::vector<std::vector<std::size_t>>(k), seed, stratified};
  const Rng root = seeded_rng(seed, "kfold");
  std::map<int, std::vector<std::size_t>> groups;
  if (stratified) {
    for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
  } else {
    auto& all = groups[0];
    all.resize(labels.size());
    std::iota(all.begin(), all.end(), 0);
  }
  std::size_t next = 0;
  for (auto& [cls, members] : groups) {
    if (stratified && members.size() < k)
      throw InputError("kfold_split: class " + std::to_string(cls) + " has " + std::to_string(members.size()) +
                       " members, fewer than k = " + std::to_string(k));
    Rng rng = root.fork("class/" + std::to_string(cls));
    rng.shuffle(members);
    for (std::size_t i : members) {
      split.folds[next].push_back(i);
      next = (next + 1) % k;
    }
  }
  for (auto& f : split.folds) std::sort(f.begin(), f.end());
  return split;
}

// ---- classifier --------------------------------------------------------------

/// Encoder plus classification head, with the normalization statistics its
/// inputs are standardized with.
struct Classifier {
  ModelConfig config;
  EncoderParams encoder;
  HeadParams head;
  std::optional<DatasetStats> stats;

  template <class F>
  void for_each(F&& f) {
    encoder.for_each(f);
    head.for_each(f);
  }
};

inline Var classifier_logits(Tape& tape, Classifier& model, const PatchSequence& patches) {
  TokenSequence tokens = embed(tape, patches, model.encoder, true);
  Var features = encode(tape, tokens, model.encoder);
  return head_logits(tape, pool(features, true, model.head.pooling), model.head);
}

/// Positive-class probability of one (already prepared) patch sequence.
inline double positive_probability(Classifier& model, const PatchSequence& patches) {
  Tape tape(false);
  Var p = ops::softmax(classifier_logits(tape, model, patches));
  return p.value()[1];
}

struct FinetuneConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double encoder_lr = 1e-4;
  double head_lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999;
  double weight_decay = 0.05;
  double warmup_frac = 0.05;
  Pooling pooling = Pooling::cls;
  std::size_t target_frames = 98;
  std::size_t k_folds = 5;
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 1 && batch_size >= 1 && target_frames >= 1, "finetune: epochs, batch_size, target_frames must be >= 1");
    require(encoder_lr >= 0.0 && head_lr > 0.0, "finetune: learning rates must be non-negative (head > 0)");
    require(k_folds >= 2, "finetune: k_folds must be >= 2");
  }
};

/// Normalizes (when stats are given), fixes the length and patchifies.
inline PatchSequence prepare_input(const MelSpectrogram& spec, const std::optional<DatasetStats>& stats,
                                   std::size_t target_frames, const ModelConfig& mcfg, double log_floor = 1e-10) {
  MelSpectrogram s = spec;
  if (stats && !s.normalized) s = normalize(s, stats->mean, stats->std);
  return patchify(fit_length(s, target_frames, log_floor), mcfg.patch_side, mcfg.patch_stride);
}

struct FinetuneResult {
  Classifier best;   // weights at the epoch with the best validation AUROC
  Classifier last;   // weights after the final epoch
  std::vector<double> train_loss;  // mean cross-entropy per epoch
  std::vector<double> val_auroc;   // per epoch; empty without a validation set
  std::size_t best_epoch = 0;      // 0-based
};

inline std::vector<double> predict(Classifier& model, const std::vector<PatchSequence>& inputs) {
  std::vector<double> out;
  out.reserve(inputs.size());
  for (const auto& p : inputs) out.push_back(positive_probability(model, p));
  return out;
}

/// Full fine-tuning (encoder and head) with cross-entropy. The encoder and the
/// head use separate learning rates under a shared warmup-cosine schedule.
/// Validation AUROC is recorded per epoch when a validation set is given.
inline FinetuneResult finetune(Classifier model, const std::vector<PatchSequence>& train, const std::vector<int>& train_labels,
                               const std::vector<PatchSequence>& val, const std::vector<int>& val_labels,
                               const FinetuneConfig& cfg) {
  cfg.validate();
  require(!train.empty() && train.size() == train_labels.size(), "finetune: training inputs and labels mismatch");
  require(val.size() == val_labels.size(), "finetune: validation inputs and labels mismatch");
  for (int l : train_labels)
    if (l < 0 || static_cast<std::size_t>(l) >= model.head.w.value.shape()[1])
      throw InputError("finetune: label " + std::to_string(l) + " outside the head's " +
                       std::to_string(model.head.w.value.shape()[1]) + " classes");
  auto params = parameters_of(model);
  std::vector<double> base_lr;
  {
    std::size_t n_enc = 0;
    model.encoder.for_each([&](Parameter&) { ++n_enc; });
    for (std::size_t i = 0; i < params.size(); ++i) base_lr.push_back(i < n_enc ? cfg.encoder_lr : cfg.head_lr);
  }
  AdamW opt(AdamWConfig{1.0, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});
  const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const long total = static_cast<long>(cfg.epochs * steps_per_epoch);
  const Rng root = seeded_rng(cfg.seed, "finetune");

  FinetuneResult res{model, model, {}, {}, 0};
  double best = -1.0;
  long step = 0;
  std::vector<double> lrs(params.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = root.fork("order/" + std::to_string(epoch));
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(b1 - b0);
      for (Parameter* p : params) p->zero_grad();
      for (std::size_t i = b0; i < b1; ++i) {
        Tape tape;
        Var loss = ops::cross_entropy(classifier_logits(tape, model, train[order[i]]),
                                      static_cast<std::size_t>(train_labels[order[i]]));
        loss_sum += loss.value()[0];
        tape.backward(ops::scale(loss, inv));
      }
      const double sched = warmup_cosine(step, total, cfg.warmup_frac);
      for (std::size_t i = 0; i < params.size(); ++i) lrs[i] = base_lr[i] * sched;
      opt.step(params, lrs);
      ++step;
    }
    res.train_loss.push_back(loss_sum / static_cast<double>(train.size()));
    if (!val.empty()) {
      const double a = auroc(predict(model, val), val_labels);
      res.val_auroc.push_back(a);
      if (a > best) {
        best = a;
        res.best_epoch = epoch;
        res.best = model;
      }
    }
  }
  res.last = model;
  if (val.empty()) {
    res.best = model;
    res.best_epoch = cfg.epochs - 1;
  }
  return res;
}

/// Fresh classifier: random encoder (or a given one) plus a new head.
inline Classifier make_classifier(const ModelConfig& mcfg, Pooling pooling, std::uint64_t seed,
                                  const EncoderParams* encoder = nullptr, std::optional<DatasetStats> stats = {}) {
  const Rng root = seeded_rng(seed, "init");
  Classifier c{mcfg, encoder ? *encoder : EncoderParams::init(mcfg, root.fork("encoder")),
               HeadParams::init(mcfg.d_model, mcfg.n_classes, pooling, root.fork("head")), std::move(stats)};
  if (c.encoder.dim() != mcfg.d_model)
    throw InputError("encoder dimension " + std::to_string(c.encoder.dim()) + " does not match requested d_model " +
                     std::to_string(mcfg.d_model));
  return c;
}

/// Finite-difference check of the classification loss at a seeded generic
/// point (encoder weights plus N(0, sigma^2) noise, head at init), as for the
/// reconstruction loss.
inline double classifier_grad_check(const ModelConfig& mcfg, const PatchSequence& patches, int label, Pooling pooling,
                                    std::uint64_t seed, double sigma = 0.2, std::size_t coords_per_param = 6) {
  Classifier model = make_classifier(mcfg, pooling, seed);
  std::vector<Parameter*> enc;
  model.encoder.for_each([&](Parameter& p) { enc.push_back(&p); });
  const Rng root = seeded_rng(seed, "grad-check");
  perturb_parameters(enc, sigma, root.fork("point"));
  return grad_check_params(
      [&](Tape& t) { return ops::cross_entropy(classifier_logits(t, model, patches), static_cast<std::size_t>(label)); },
      parameters_of(model), coords_per_param, root.fork("coords"));
}

// ---- cross-validation --------------------------------------------------------

struct FoldResult {
  std::size_t fold = 0;
  double auroc = 0.0;  // held-out AUROC at the chosen epoch
  std::size_t best_epoch = 0;
  std::vector<double> curve;
};

struct EvalReport {
  std::string init;  // "scratch" or "checkpoint"
  Pooling pooling = Pooling::cls;
  std::vector<FoldResult> folds;
  double mean_auroc = 0.0;

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j;
    j["init"] = init;
    j["pooling"] = to_string(pooling);
    j["mean_auroc"] = mean_auroc;
    j["folds"] = nlohmann::json::array();
    for (const auto& f : folds)
      j["folds"].push_back({{"fold", f.fold}, {"auroc", f.auroc}, {"best_epoch", f.best_epoch}, {"curve", f.curve}});
    return j;
  }

  [[nodiscard]] std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "fold,auroc,best_epoch,pooling,init\n";
    for (const auto& f : folds)
      os << f.fold << ',' << f.auroc << ',' << f.best_epoch << ',' << to_string(pooling) << ',' << init << '\n';
    return os.str();
  }
};

/// k-fold cross-validation: per fold, fine-tune `make_model()` on the other
/// folds and score the held-out fold at its best epoch.
inline EvalReport cross_validate(const std::function<Classifier()>& make_model, const std::vector<MelSpectrogram>& specs,
                                 const std::vector<int>& labels, const FinetuneConfig& cfg, const std::string& init_tag) {
  cfg.validate();
  require(specs.size() == labels.size(), "cross_validate: spectrograms and labels differ in length");
  const FoldSplit split = kfold_split(labels, cfg.k_folds, cfg.seed, true);
  EvalReport report{init_tag, cfg.pooling, {}, 0.0};
  for (std::size_t f = 0; f < split.folds.size(); ++f) {
    Classifier model = make_model();
    std::vector<bool> held(specs.size(), false);
    for (std::size_t i : split.folds[f]) held[i] = true;
    std::vector<PatchSequence> tr, va;
    std::vector<int> trl, val;
    for (std::size_t i = 0; i < specs.size(); ++i) {
      auto p = prepare_input(specs[i], model.stats, cfg.target_frames, model.config);
      (held[i] ? va : tr).push_back(std::move(p));
      (held[i] ? val : trl).push_back(labels[i]);
    }
    FinetuneConfig fcfg = cfg;
    fcfg.seed = cfg.seed + f;
    const FinetuneResult r = finetune(std::move(model), tr, trl, va, val, fcfg);
    report.folds.push_back(FoldResult{f, r.val_auroc[r.best_epoch], r.best_epoch, r.val_auroc});
  }
  double s = 0.0;
  for (const auto& f : report.folds) s += f.auroc;
  report.mean_auroc = s / static_cast<double>(report.folds.size());
  return report;
}

}  // namespace coughvit
