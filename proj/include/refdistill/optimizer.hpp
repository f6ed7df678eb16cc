#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "refdistill/tensor.hpp"

namespace refdistill {

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
};

/// One Adam update with bias correction; lr = 0 leaves params untouched.
inline void adam_update(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& s,
                        const AdamParams& a) {
  if (s.m.empty()) {
    for (const Tensor* p : params) {
      s.m.emplace_back(p->shape());
      s.v.emplace_back(p->shape());
    }
  }
  ++s.step;
  const double bc1 = 1.0 - std::pow(a.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(a.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    Tensor& m = s.m[i];
    Tensor& v = s.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = a.beta1 * m[k] + (1.0 - a.beta1) * g[k];
      v[k] = a.beta2 * v[k] + (1.0 - a.beta2) * g[k] * g[k];
      p[k] -= a.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + a.eps);
    }
  }
}

}  // namespace refdistill
