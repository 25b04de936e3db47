#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "coughvit/rng.hpp"
#include "coughvit/tensor.hpp"

namespace coughvit {

/// Relative disagreement used by every gradient check.
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

using ScalarFn = std::function<Var(Tape&, Var)>;

/// Central finite differences against reverse-mode gradients of a function
/// Tensor -> scalar. Returns the maximum relative error over all coordinates.
inline double grad_check(const ScalarFn& fn, const Tensor& point, double step = 1e-5) {
  Tensor analytic;
  {
    Tape tape;
    Var x = tape.variable(point);
    Var y = fn(tape, x);
    tape.backward(y);
    analytic = tape.grad(x);
  }
  auto eval = [&](const Tensor& at) {
    Tape tape(false);
    const double v = fn(tape, tape.constant(at)).value()[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
  };
  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + step;
    const double up = eval(probe);
    probe[i] = point[i] - step;
    const double down = eval(probe);
    probe[i] = point[i];
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * step)));
  }
  return worst;
}

/// Same check over model parameters: `loss` records the full forward pass on
/// the given tape. At most `coords_per_param` randomly chosen coordinates of
/// each parameter are probed (all of them when the tensor is small).
inline double grad_check_params(const std::function<Var(Tape&)>& loss, const std::vector<Parameter*>& params,
                                std::size_t coords_per_param, Rng rng, double step = 1e-5) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var y = loss(tape);
    tape.backward(y);
  }
  auto eval = [&] {
    Tape tape(false);
    const double v = loss(tape).value()[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss value");
    return v;
  };
  double worst = 0.0;
  for (Parameter* p : params) {
    std::vector<std::size_t> coords(p->value.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > coords_per_param) {
      rng.shuffle(coords);
      coords.resize(coords_per_param);
    }
    for (std::size_t i : coords) {
      const double orig = p->value[i];
      p->value[i] = orig + step;
      const double up = eval();
      p->value[i] = orig - step;
      const double down = eval();
      p->value[i] = orig;
      worst = std::max(worst, relative_error(p->grad[i], (up - down) / (2.0 * step)));
    }
  }
  for (Parameter* p : params) p->zero_grad();
  return worst;
}

/// Moves each parameter off its initialization by i.i.d. Gaussian noise.
/// Vectors get standard deviation sigma; a weight matrix with fan-in n gets
/// sigma * sqrt(64 / n), so layers of any width keep O(1) activations.
inline void perturb_parameters(const std::vector<Parameter*>& params, double sigma, Rng rng) {
  constexpr double kReferenceFanIn = 64.0;
  for (Parameter* p : params) {
    const double sd = p->value.rank() == 2
                          ? sigma * std::sqrt(kReferenceFanIn / static_cast<double>(p->value.shape()[0]))
                          : sigma;
    for (double& v : p->value.storage()) v += sd * rng.normal();
  }
}

}  // namespace coughvit
