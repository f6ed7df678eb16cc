#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "refdistill/autodiff.hpp"

namespace refdistill {

/// Builds a scalar on `tape` from parameter variables bound in the given order.
using ScalarFunction = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

namespace detail {

inline double evaluate(const ScalarFunction& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(tape.constant(p));
  const Var out = f(tape, vars);
  if (out.value().size() != 1) throw ShapeError("grad_check: function is not scalar-valued");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw ValidationError("grad_check: function value is not finite");
  return v;
}

}  // namespace detail

/// Compares reverse-mode gradients against central differences
/// (f(θ+h) - f(θ-h)) / 2h for every parameter entry. The relative error of an
/// entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline GradCheckReport grad_check(const ScalarFunction& f, std::vector<Tensor> params, double h = 1e-5) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& p : params) vars.push_back(tape.parameter(p));
    const Var out = f(tape, vars);
    if (out.value().size() != 1) throw ShapeError("grad_check: function is not scalar-valued");
    if (!std::isfinite(out.value()[0])) throw ValidationError("grad_check: function value is not finite");
    tape.backward(out);
    for (const Var& v : vars) analytic.push_back(tape.grad(v));
  }

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double saved = params[p][i];
      params[p][i] = saved + h;
      const double up = detail::evaluate(f, params);
      params[p][i] = saved - h;
      const double down = detail::evaluate(f, params);
      params[p][i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      ++report.checked;
      if (err > report.max_relative_error || report.checked == 1) {
        report.max_relative_error = std::max(err, report.max_relative_error);
        report.worst_param = p;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace refdistill
