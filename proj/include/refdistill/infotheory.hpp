#pragma once

// Exact information-theoretic quantities over small discrete joints, plus the
// closed-form Gaussian case of the conditional-entropy bound. Everything is in
// nats and computed by exhaustive summation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "refdistill/error.hpp"
#include "refdistill/rng.hpp"

namespace refdistill {

inline constexpr double kProbabilityTolerance = 1e-12;
inline constexpr std::size_t kMinAlphabet = 2;
inline constexpr std::size_t kMaxAlphabet = 6;

namespace detail {

inline void validate_distribution(std::span<const double> p) {
  if (p.empty()) throw ValidationError("empty probability vector");
  double sum = 0.0;
  for (double v : p) {
    if (!std::isfinite(v) || v < 0.0) throw ValidationError("probabilities must be finite and non-negative");
    sum += v;
  }
  if (std::abs(sum - 1.0) > kProbabilityTolerance)
    throw ValidationError("probabilities sum to " + std::to_string(sum) + ", not 1");
}

inline double plogp(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }

}  // namespace detail

/// -sum p ln p with 0 ln 0 = 0.
inline double entropy(std::span<const double> p) {
  detail::validate_distribution(p);
  double h = 0.0;
  for (double v : p) h -= detail::plogp(v);
  return std::max(h, 0.0);
}

/// Probability table over two or three finite alphabets, row-major in axis
/// order (last axis fastest).
struct DiscreteJoint {
  std::vector<std::size_t> axes;
  std::vector<double> probs;

  std::size_t rank() const { return axes.size(); }

  void validate() const {
    if (axes.size() != 2 && axes.size() != 3) throw ValidationError("joint must have 2 or 3 axes");
    std::size_t n = 1;
    for (auto a : axes) {
      if (a < kMinAlphabet || a > kMaxAlphabet)
        throw ValidationError("alphabet size " + std::to_string(a) + " outside [2, 6]");
      n *= a;
    }
    if (probs.size() != n) throw ValidationError("joint table has wrong size");
    detail::validate_distribution(probs);
  }

  double operator()(std::size_t i, std::size_t j) const { return probs[i * axes[1] + j]; }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return probs[(i * axes[1] + j) * axes[2] + k];
  }

  /// Marginal over a single axis.
  std::vector<double> marginal(std::size_t axis) const {
    std::vector<double> out(axes.at(axis), 0.0);
    std::vector<std::size_t> idx(axes.size(), 0);
    for (double p : probs) {
      out[idx[axis]] += p;
      for (std::size_t a = axes.size(); a-- > 0;) {
        if (++idx[a] < axes[a]) break;
        idx[a] = 0;
      }
    }
    return out;
  }

  /// Normalized i.i.d. Exp(1) variates, i.e. a flat Dirichlet draw.
  static DiscreteJoint random(std::vector<std::size_t> axes, Rng& rng) {
    DiscreteJoint j{std::move(axes), {}};
    const std::size_t n = std::accumulate(j.axes.begin(), j.axes.end(), std::size_t{1}, std::multiplies<>());
    j.probs.resize(n);
    double sum = 0.0;
    for (auto& p : j.probs) sum += (p = -std::log(rng.uniform_open_zero()) + 1e-300);
    for (auto& p : j.probs) p /= sum;
    return j;
  }

  /// Outer product p(x) q(y) of two distributions.
  static DiscreteJoint product(const std::vector<double>& p, const std::vector<double>& q) {
    DiscreteJoint j{{p.size(), q.size()}, {}};
    for (double a : p)
      for (double b : q) j.probs.push_back(a * b);
    return j;
  }
};

/// Both textbook routes to I(U;V) for a two-axis joint.
struct MutualInfoRoutes {
  double via_conditional;  // H(U) - H(U|V)
  double via_joint;        // H(U) + H(V) - H(U,V)
  double residual() const { return std::abs(via_conditional - via_joint); }
};

/// H(U|V) = sum_v p(v) H(U | V=v).
inline double conditional_entropy(const DiscreteJoint& joint) {
  const auto pv = joint.marginal(1);
  double h = 0.0;
  for (std::size_t v = 0; v < joint.axes[1]; ++v) {
    if (pv[v] <= 0.0) continue;
    double hv = 0.0;
    for (std::size_t u = 0; u < joint.axes[0]; ++u) hv -= detail::plogp(joint(u, v) / pv[v]);
    h += pv[v] * hv;
  }
  return h;
}

inline MutualInfoRoutes mutual_info_routes(const DiscreteJoint& joint) {
  joint.validate();
  if (joint.rank() != 2) throw ValidationError("mutual_info needs a two-axis joint");
  const double hu = entropy(joint.marginal(0));
  const double hv = entropy(joint.marginal(1));
  return {hu - conditional_entropy(joint), hu + hv - entropy(joint.probs)};
}

inline constexpr double kRouteTolerance = 1e-10;

/// I(U;V) in nats. The two formulas are cross-checked; disagreement beyond
/// 1e-10 signals a numerical defect and throws.
inline double mutual_info(const DiscreteJoint& joint) {
  const auto r = mutual_info_routes(joint);
  if (r.residual() > kRouteTolerance)
    throw ValidationError("mutual information routes disagree by " + std::to_string(r.residual()));
  return r.via_joint;
}

/// Joint of (f(U), V) obtained by summing U-cells that share an image.
inline DiscreteJoint push_forward(const DiscreteJoint& joint, std::span<const std::size_t> f) {
  if (joint.rank() != 2 || f.size() != joint.axes[0]) throw ValidationError("map must be total on U's alphabet");
  const std::size_t image = *std::max_element(f.begin(), f.end()) + 1;
  DiscreteJoint out{{image, joint.axes[1]}, std::vector<double>(image * joint.axes[1], 0.0)};
  for (std::size_t u = 0; u < joint.axes[0]; ++u)
    for (std::size_t v = 0; v < joint.axes[1]; ++v) out.probs[f[u] * joint.axes[1] + v] += joint(u, v);
  return out;
}

namespace detail {

// Same as mutual_info but allows a degenerate (size-1) first alphabet, which
// a constant map produces.
inline double mutual_info_unchecked_sizes(const DiscreteJoint& j) {
  const auto pu = j.marginal(0);
  const auto pv = j.marginal(1);
  double hu = 0.0, hv = 0.0, huv = 0.0;
  for (double p : pu) hu -= plogp(p);
  for (double p : pv) hv -= plogp(p);
  for (double p : j.probs) huv -= plogp(p);
  return hu + hv - huv;
}

}  // namespace detail

/// I(U;V) - I(f(U);V); non-negative by the data-processing inequality.
inline double check_dpi(const DiscreteJoint& joint, std::span<const std::size_t> f) {
  const double before = mutual_info(joint);
  return before - detail::mutual_info_unchecked_sizes(push_forward(joint, f));
}

struct ReferenceGain {
  double margin;             // I(U,W;V) - I(U;V)
  double cmi_v_u_given_w;    // I(U;V|W)
  double cmi_v_w_given_u;    // I(W;V|U)
  /// |margin - I(U;V|W)|; zero whenever (U, W) is exchangeable.
  double residual() const { return std::abs(margin - cmi_v_u_given_w); }
  /// |margin - I(W;V|U)|; zero for every joint by the chain rule.
  double chain_residual() const { return std::abs(margin - cmi_v_w_given_u); }
};

namespace detail {

/// I(X_a; X_b | X_c) for a three-axis joint, summed directly over the
/// conditional tables.
inline double conditional_mutual_info(const DiscreteJoint& j, std::size_t a, std::size_t b, std::size_t c) {
  const std::size_t na = j.axes[a], nb = j.axes[b], nc = j.axes[c];
  auto at = [&](std::size_t ia, std::size_t ib, std::size_t ic) {
    std::size_t idx[3];
    idx[a] = ia;
    idx[b] = ib;
    idx[c] = ic;
    return j(idx[0], idx[1], idx[2]);
  };
  double total = 0.0;
  for (std::size_t ic = 0; ic < nc; ++ic) {
    double pc = 0.0;
    std::vector<double> pa(na, 0.0), pb(nb, 0.0);
    for (std::size_t ia = 0; ia < na; ++ia)
      for (std::size_t ib = 0; ib < nb; ++ib) {
        const double p = at(ia, ib, ic);
        pc += p;
        pa[ia] += p;
        pb[ib] += p;
      }
    if (pc <= 0.0) continue;
    double inner = 0.0;
    for (std::size_t ia = 0; ia < na; ++ia)
      for (std::size_t ib = 0; ib < nb; ++ib) {
        const double p = at(ia, ib, ic);
        if (p > 0.0) inner += p * std::log(p * pc / (pa[ia] * pb[ib]));
      }
    total += inner;
  }
  return total;
}

}  // namespace detail

/// For a joint over (U, W, V): the information about V gained by adding W to
/// U, next to the two conditional mutual informations it can be compared to.
/// The chain rule makes the margin equal I(W;V|U) for every joint; it equals
/// I(U;V|W) as well when U and W are exchangeable.
inline ReferenceGain check_reference_gain(const DiscreteJoint& joint) {
  joint.validate();
  if (joint.rank() != 3) throw ValidationError("reference gain needs a three-axis joint (U, W, V)");
  const std::size_t nu = joint.axes[0], nw = joint.axes[1], nv = joint.axes[2];

  DiscreteJoint flat{{nu * nw, nv}, joint.probs};  // (U,W) as one variable
  DiscreteJoint uv{{nu, nv}, std::vector<double>(nu * nv, 0.0)};
  for (std::size_t u = 0; u < nu; ++u)
    for (std::size_t w = 0; w < nw; ++w)
      for (std::size_t v = 0; v < nv; ++v) uv.probs[u * nv + v] += joint(u, w, v);

  const double margin = detail::mutual_info_unchecked_sizes(flat) - detail::mutual_info_unchecked_sizes(uv);
  return {margin, detail::conditional_mutual_info(joint, 0, 2, 1), detail::conditional_mutual_info(joint, 1, 2, 0)};
}

/// Symmetrize a (U, W, V) joint over U <-> W so both have the same
/// distribution and the pair is exchangeable.
inline DiscreteJoint exchangeable(const DiscreteJoint& joint) {
  if (joint.rank() != 3 || joint.axes[0] != joint.axes[1])
    throw ValidationError("exchangeable() needs a (U, W, V) joint with equal U and W alphabets");
  DiscreteJoint out = joint;
  const std::size_t n = joint.axes[0], nv = joint.axes[2];
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t w = 0; w < n; ++w)
      for (std::size_t v = 0; v < nv; ++v)
        out.probs[(u * n + w) * nv + v] = 0.5 * (joint(u, w, v) + joint(w, u, v));
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian case of the conditional-entropy bound

struct GaussianPair {
  double sigma_u = 1.0;
  double sigma_v = 1.0;
  double rho = 0.0;

  void validate() const {
    if (!(sigma_u > 0.0) || !(sigma_v > 0.0)) throw ValidationError("standard deviations must be positive");
    if (!(std::abs(rho) < 1.0)) throw ValidationError("correlation must lie in (-1, 1)");
  }

  /// Slope of E[U | V=v] for zero-mean variables.
  double conditional_mean_slope() const { return rho * sigma_u / sigma_v; }
};

/// phi(v) = a v + b
struct AffineMap {
  double a = 0.0;
  double b = 0.0;
};

struct GaussianBound {
  double lhs;  // H(U|V)
  double rhs;  // 1/2 ln E[(U - phi(V))^2] + c
  double gap() const { return rhs - lhs; }
};

inline double gaussian_bound_constant() {
  return 0.5 * std::log(2.0 * 3.14159265358979323846 * std::exp(1.0));
}

/// Both sides of H(U|V) <= 1/2 ln E[(U - phi(V))^2] + 1/2 ln(2 pi e) for
/// zero-mean jointly Gaussian (U, V).
inline GaussianBound gaussian_bound(const GaussianPair& pair, const AffineMap& phi) {
  pair.validate();
  const double c = gaussian_bound_constant();
  const double su = pair.sigma_u, sv = pair.sigma_v, r = pair.rho;
  const double conditional_var = su * su * (1.0 - r * r);
  const double mse = su * su - 2.0 * phi.a * r * su * sv + phi.a * phi.a * sv * sv + phi.b * phi.b;
  return {0.5 * std::log(conditional_var) + c, 0.5 * std::log(mse) + c};
}

// ---------------------------------------------------------------------------
// Randomized sweeps

struct SweepResult {
  std::string theorem;
  std::size_t trials = 0;
  double min_margin = 0.0;
  double max_residual = 0.0;  // largest |equality residual|, 0 when none applies
  bool passed = false;
};

inline constexpr double kMarginTolerance = 1e-9;
inline constexpr double kEqualityTolerance = 1e-10;

namespace detail {

inline std::size_t random_alphabet(Rng& rng) { return kMinAlphabet + rng.below(kMaxAlphabet - kMinAlphabet + 1); }

inline std::uint64_t sweep_seed(std::uint64_t seed, std::uint64_t stream) {
  return seed * 0x9E3779B97F4A7C15ULL + stream;
}

}  // namespace detail

/// Data-processing inequality over random joints and random maps.
inline SweepResult sweep_dpi(std::size_t trials, std::uint64_t seed) {
  Rng rng(detail::sweep_seed(seed, 1));
  SweepResult res{"data processing (I(U;V) >= I(f(U);V))", trials, INFINITY, 0.0, false};
  for (std::size_t t = 0; t < trials; ++t) {
    const auto joint = DiscreteJoint::random({detail::random_alphabet(rng), detail::random_alphabet(rng)}, rng);
    const std::size_t image = 1 + rng.below(joint.axes[0]);
    std::vector<std::size_t> f(joint.axes[0]);
    for (auto& x : f) x = rng.below(image);
    res.min_margin = std::min(res.min_margin, check_dpi(joint, f));
    const auto routes = mutual_info_routes(joint);
    res.max_residual = std::max(res.max_residual, routes.residual());
  }
  res.passed = trials > 0 && res.min_margin >= -kMarginTolerance && res.max_residual <= kEqualityTolerance;
  return res;
}

/// Reference gain over random (U, W, V) joints in which U and W share a
/// distribution (exchangeable pairs); the residual is |margin - I(U;V|W)|.
inline SweepResult sweep_reference_gain(std::size_t trials, std::uint64_t seed) {
  Rng rng(detail::sweep_seed(seed, 2));
  SweepResult res{"reference gain (I(U,W;V) >= I(U;V))", trials, INFINITY, 0.0, false};
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t n = detail::random_alphabet(rng);
    const auto joint = exchangeable(DiscreteJoint::random({n, n, detail::random_alphabet(rng)}, rng));
    const auto gain = check_reference_gain(joint);
    res.min_margin = std::min(res.min_margin, gain.margin);
    res.max_residual = std::max(res.max_residual, gain.residual());
  }
  res.passed = trials > 0 && res.min_margin >= -kMarginTolerance && res.max_residual <= kEqualityTolerance;
  return res;
}

/// Reference gain over unrestricted (U, W, V) joints; the residual is the
/// chain-rule identity |margin - I(W;V|U)|.
inline SweepResult sweep_reference_gain_general(std::size_t trials, std::uint64_t seed) {
  Rng rng(detail::sweep_seed(seed, 3));
  SweepResult res{"reference gain, unrestricted joints", trials, INFINITY, 0.0, false};
  for (std::size_t t = 0; t < trials; ++t) {
    const auto joint = DiscreteJoint::random(
        {detail::random_alphabet(rng), detail::random_alphabet(rng), detail::random_alphabet(rng)}, rng);
    const auto gain = check_reference_gain(joint);
    res.min_margin = std::min(res.min_margin, gain.margin);
    res.max_residual = std::max(res.max_residual, gain.chain_residual());
  }
  res.passed = trials > 0 && res.min_margin >= -kMarginTolerance && res.max_residual <= kEqualityTolerance;
  return res;
}

/// Conditional-entropy bound over a fixed (sigma, rho, phi) grid. The margin is
/// rhs - lhs; the residual is the gap at the conditional-mean map.
inline SweepResult sweep_gaussian_bound() {
  SweepResult res{"conditional entropy bound (Gaussian)", 0, INFINITY, 0.0, false};
  const double sigmas[] = {0.25, 1.0, 3.0};
  const double offsets[] = {-1.0, -0.1, 0.0, 0.1, 1.0};
  for (double su : sigmas)
    for (double sv : sigmas)
      for (int ri = -9; ri <= 9; ++ri) {
        const GaussianPair pair{su, sv, ri / 10.0};
        const double slope = pair.conditional_mean_slope();
        for (double da : offsets)
          for (double b : offsets) {
            const auto bound = gaussian_bound(pair, {slope + da, b});
            res.min_margin = std::min(res.min_margin, bound.gap());
            ++res.trials;
          }
        res.max_residual = std::max(res.max_residual, std::abs(gaussian_bound(pair, {slope, 0.0}).gap()));
      }
  res.passed = res.min_margin >= -kEqualityTolerance && res.max_residual <= kEqualityTolerance;
  return res;
}

inline std::vector<SweepResult> run_theorem_sweeps(std::size_t trials, std::uint64_t seed) {
  return {sweep_gaussian_bound(), sweep_dpi(trials, seed), sweep_reference_gain(trials, seed),
          sweep_reference_gain_general(trials, seed)};
}

/// Plain-text table: theorem, trials, min margin, max |equality residual|.
inline std::string format_sweeps(const std::vector<SweepResult>& results) {
  std::ostringstream os;
  os << std::left << std::setw(44) << "theorem" << std::right << std::setw(8) << "trials" << std::setw(16)
     << "min_margin" << std::setw(16) << "max_residual" << "  status\n";
  for (const auto& r : results) {
    os << std::left << std::setw(44) << r.theorem << std::right << std::setw(8) << r.trials << std::scientific
       << std::setprecision(4) << std::setw(16) << r.min_margin << std::setw(16) << r.max_residual
       << (r.passed ? "  PASS" : "  FAIL") << '\n'
       << std::defaultfloat;
  }
  return os.str();
}

}  // namespace refdistill
