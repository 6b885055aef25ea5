#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "shmamba/error.hpp"
#include "shmamba/tape.hpp"
#include "shmamba/tensor.hpp"

namespace shmamba {

/// Scalar-valued function of several tensors, built on a fresh tape per call.
using MultiScalarFn = std::function<Var(Tape&, std::span<const Var>)>;
using ScalarFn = std::function<Var(Tape&, const Var&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double tape_grad = 0.0;
  double fd_grad = 0.0;
  std::size_t coordinates = 0;
};

namespace detail {

inline double evaluate_scalar(const MultiScalarFn& f, const std::vector<Tensor>& points) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(points.size());
  for (const Tensor& p : points) vars.push_back(tape.constant(p));
  try {
    Var out = f(tape, vars);
    return out.item();
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("grad_check: function is non-finite at a perturbed point: ") + e.what());
  }
}

}  // namespace detail

/// Compares tape gradients against central differences
/// (f(x + eps e_i) - f(x - eps e_i)) / 2 eps over every coordinate of every
/// input. The error per coordinate is |g_tape - g_fd| / max(1, |g_fd|).
inline GradCheckReport grad_check(const MultiScalarFn& f, const std::vector<Tensor>& points, double eps = 1e-5) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw DomainError("grad_check: eps must lie in [1e-7, 1e-3]");

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& p : points) vars.push_back(tape.leaf(p));
    Var out = f(tape, vars);
    Gradients grads = tape.backward(out);
    for (const Var& v : vars) analytic.push_back(grads.of(v));
  }

  GradCheckReport report;
  std::vector<Tensor> probe = points;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    for (std::size_t i = 0; i < probe[k].numel(); ++i) {
      const double orig = probe[k][i];
      probe[k][i] = orig + eps;
      const double fp = detail::evaluate_scalar(f, probe);
      probe[k][i] = orig - eps;
      const double fm = detail::evaluate_scalar(f, probe);
      probe[k][i] = orig;
      const double fd = (fp - fm) / (2.0 * eps);
      const double err = std::abs(analytic[k][i] - fd) / std::max(1.0, std::abs(fd));
      ++report.coordinates;
      if (err >= report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_input = k;
        report.worst_index = i;
        report.tape_grad = analytic[k][i];
        report.fd_grad = fd;
      }
    }
  }
  return report;
}

inline double grad_check(const ScalarFn& f, const Tensor& point, double eps = 1e-5) {
  MultiScalarFn g = [&f](Tape& tape, std::span<const Var> vars) { return f(tape, vars[0]); };
  return grad_check(g, std::vector<Tensor>{point}, eps).max_rel_error;
}

}  // namespace shmamba
