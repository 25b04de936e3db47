#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "coughvit/tensor.hpp"

namespace coughvit {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// AdamW with bias correction and decoupled weight decay. Moment state is
/// keyed by parameter name, so the optimizer survives copies of the model.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  [[nodiscard]] const AdamWConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] long steps() const noexcept { return t_; }

  /// One update of every parameter using its accumulated gradient. `lr_scale`
  /// multiplies the learning rate for this step (schedules, parameter groups).
  void step(const std::vector<Parameter*>& params, double lr_scale = 1.0) {
    ++t_;
    apply(params, cfg_.lr * lr_scale);
  }

  /// Update with a separate learning rate per parameter; `lrs[i]` goes with `params[i]`.
  void step(const std::vector<Parameter*>& params, const std::vector<double>& lrs) {
    if (lrs.size() != params.size()) throw InputError("AdamW: one learning rate per parameter required");
    ++t_;
    for (std::size_t i = 0; i < params.size(); ++i) apply({params[i]}, lrs[i]);
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };

  void apply(const std::vector<Parameter*>& params, double lr) {
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Parameter* p : params) {
      if (p->grad.size() != p->value.size()) throw InputError("AdamW: gradient missing for " + p->name);
      Moments& st = state_[p->name];
      if (st.m.size() != p->value.size()) {
        st.m.assign(p->value.size(), 0.0);
        st.v.assign(p->value.size(), 0.0);
      }
      const double wd = p->decay ? cfg_.weight_decay : 0.0;
      auto& w = p->value.storage();
      const auto& g = p->grad.storage();
      for (std::size_t i = 0; i < w.size(); ++i) {
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * w[i]);
      }
    }
  }

  AdamWConfig cfg_;
  long t_ = 0;
  std::unordered_map<std::string, Moments> state_;
};

inline void adamw_step(AdamW& opt, const std::vector<Parameter*>& params, double lr_scale = 1.0) {
  opt.step(params, lr_scale);
}

/// Linear warmup over the first `warmup_frac` of training, cosine decay to 0 after.
inline double warmup_cosine(long step, long total, double warmup_frac = 0.05) {
  if (total <= 0) return 1.0;
  const long warm = std::max(1L, static_cast<long>(std::ceil(warmup_frac * static_cast<double>(total))));
  if (step < warm) return static_cast<double>(step + 1) / static_cast<double>(warm);
  const double progress = static_cast<double>(step - warm) / static_cast<double>(std::max(1L, total - warm));
  return 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
}

}  // namespace coughvit
