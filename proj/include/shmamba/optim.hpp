#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"
#include "shmamba/error.hpp"
#include "shmamba/params.hpp"
#include "shmamba/tensor.hpp"

namespace shmamba::optim {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("adam: lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("adam: betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("adam: eps must be positive");
  }
};

/// First and second moments per parameter, in ParameterSet order.
struct OptimState {
  AdamConfig cfg;
  std::size_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static OptimState for_params(const ParameterSet& params, AdamConfig cfg = {}) {
    cfg.validate();
    OptimState s;
    s.cfg = cfg;
    for (const auto& [name, t] : params) {
      s.m.push_back(Tensor::zeros_like(t));
      s.v.push_back(Tensor::zeros_like(t));
    }
    return s;
  }
};

/// Rejects non-finite gradients, naming the first offending parameter.
inline void check_gradients(const ParameterSet& params, const std::vector<Tensor>& grads) {
  if (grads.size() != params.size()) {
    throw ShapeError("gradient list has " + std::to_string(grads.size()) + " entries for " +
                     std::to_string(params.size()) + " parameters");
  }
  std::size_t i = 0;
  for (const auto& [name, t] : params) {
    if (grads[i].shape() != t.shape()) {
      throw ShapeError("gradient for '" + name + "' has shape " + shape_str(grads[i].shape()) + ", parameter has " +
                       shape_str(t.shape()));
    }
    if (!grads[i].all_finite()) throw NumericalError("non-finite gradient for parameter '" + name + "'");
    ++i;
  }
}

inline double global_norm(const std::vector<Tensor>& grads) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g.data()) sq += x * x;
  return std::sqrt(sq);
}

/// Rescales all gradients so their joint l2 norm is at most `max_norm`.
/// Returns true when rescaling happened.
inline bool clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  if (max_norm <= 0.0) return false;
  const double norm = global_norm(grads);
  if (!(norm > max_norm)) return false;
  const double s = max_norm / norm;
  for (auto& g : grads)
    for (double& x : g.data()) x *= s;
  return true;
}

/// One bias-corrected Adam update, in place.
inline void adam_step(ParameterSet& params, const std::vector<Tensor>& grads, OptimState& state) {
  check_gradients(params, grads);
  if (state.m.size() != params.size()) throw ShapeError("optimizer state does not match parameter set");
  state.step += 1;
  const auto& c = state.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  std::size_t i = 0;
  for (auto& [name, p] : params) {
    auto pd = p.data();
    auto gd = grads[i].data();
    auto md = state.m[i].data();
    auto vd = state.v[i].data();
    for (std::size_t j = 0; j < pd.size(); ++j) {
      md[j] = c.beta1 * md[j] + (1.0 - c.beta1) * gd[j];
      vd[j] = c.beta2 * vd[j] + (1.0 - c.beta2) * gd[j] * gd[j];
      const double mhat = md[j] / bc1;
      const double vhat = vd[j] / bc2;
      pd[j] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
    if (!p.all_finite()) throw NumericalError("adam update produced non-finite values in '" + name + "'");
    ++i;
  }
}

}  // namespace shmamba::optim
