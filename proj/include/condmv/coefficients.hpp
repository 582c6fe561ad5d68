#pragma once

#include <condmv/errors.hpp>
#include <condmv/scalar_function.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace condmv
{

struct Interval
{
  double lo = 0.0;
  double hi = 0.0;

  double width() const noexcept { return hi - lo; }
  friend bool operator==(const Interval&, const Interval&) = default;
};

// Constants of the coefficient conditions: dissipativity x*b(x) <= -c x^2 + C1, linear
// growth |b(x)| <= C2 (1 + |x|), two-sided bounds on sigma, f and h, and
// derivative bounds on sigma and f.
struct AssumptionConstants
{
  double c = 1.0;
  double C1 = 0.1;
  double C2 = 1.0;
  double sigma_low = 1.0;
  double sigma_high = 1.0;
  double sigma_lip = 1.0;
  double f_low = 1.0;
  double f_high = 1.0;
  double h_low = 1.0;
  double h_high = 1.0;
  double f_lip = 1.0;

  void check() const
  {
    const auto positive = [](double v, const char* name) {
      if (!(v > 0.0) || !std::isfinite(v))
        throw ConfigError(std::string("assumption constant ") + name + " must be positive and finite");
    };
    positive(c, "c");
    positive(C1, "C1");
    positive(C2, "C2");
    positive(sigma_low, "sigma_low");
    positive(sigma_high, "sigma_high");
    positive(sigma_lip, "sigma_lip");
    positive(f_low, "f_low");
    positive(f_high, "f_high");
    positive(h_low, "h_low");
    positive(h_high, "h_high");
    positive(f_lip, "f_lip");
    if (sigma_low > sigma_high || f_low > f_high || h_low > h_high)
      throw ConfigError("assumption constants need low <= high for sigma, f and h");
  }

  friend bool operator==(const AssumptionConstants&, const AssumptionConstants&) = default;
};

// The six coefficient functions of the coupled system together with their
// certificate for the coefficient conditions.
struct CoefficientSet
{
  ScalarFunction b1, b2, sigma1, sigma2, h, f;
  AssumptionConstants constants;
  bool validated = false;

  bool h_is_f_squared() const { return h.is_square_of(f); }
};

struct Violation
{
  std::string inequality; // e.g. "dissipativity"
  std::string function;   // e.g. "b1"
  double witness = 0.0;   // x of the worst violation found
  double lhs = 0.0;
  double rhs = 0.0;
};

struct ValidationReport
{
  std::vector<Violation> violations;

  bool ok() const noexcept { return violations.empty(); }

  std::string summary() const
  {
    if (ok())
      return "coefficient conditions hold on the check grid";
    std::string s;
    for (const auto& v : violations) {
      if (!s.empty())
        s += "; ";
      s += v.inequality + " violated by " + v.function + " at x=" + csv::format(v.witness) +
           " (" + csv::format(v.lhs) + " > " + csv::format(v.rhs) + ")";
    }
    return s;
  }
};

namespace detail
{

// Keeps the worst witness of one inequality for one function.
class ViolationTracker
{
public:
  ViolationTracker(std::string inequality, std::string function)
      : v_{std::move(inequality), std::move(function), 0.0, 0.0, 0.0}
  {
  }

  void observe(double x, double lhs, double rhs)
  {
    const double excess = lhs - rhs;
    if (excess > 1e-12 * (1.0 + std::abs(rhs)) && excess > worst_) {
      worst_ = excess;
      v_.witness = x;
      v_.lhs = lhs;
      v_.rhs = rhs;
    }
  }

  void flush(std::vector<Violation>& out) const
  {
    if (worst_ > 0.0)
      out.push_back(v_);
  }

private:
  Violation v_;
  double worst_ = 0.0;
};

inline double slope_of(const ScalarFunction& fn, double x)
{
  return fn.has_derivative() ? fn.derivative(x) : fn.finite_difference(x);
}

} // namespace detail

// Samples `n_samples` points uniformly on `range` and reports each violated
// inequality with its worst witness. An empty report means the set passes.
inline ValidationReport validate_assumption_a(const CoefficientSet& cs, Interval range, std::size_t n_samples)
{
  if (n_samples < 2)
    throw InputError("validate_assumption_a needs n_samples >= 2");
  if (!(range.hi > range.lo))
    throw InputError("validate_assumption_a needs a nonempty range");
  const auto& k = cs.constants;

  using detail::ViolationTracker;
  struct DriftChecks
  {
    const ScalarFunction* fn;
    ViolationTracker dissip, growth;
  };
  DriftChecks drifts[2] = {
      {&cs.b1, {"dissipativity", "b1"}, {"linear-growth", "b1"}},
      {&cs.b2, {"dissipativity", "b2"}, {"linear-growth", "b2"}},
  };
  struct BoundChecks
  {
    const ScalarFunction* fn;
    double lo, hi, lip;
    ViolationTracker lower, upper, deriv;
  };
  const double no_lip = std::numeric_limits<double>::infinity();
  BoundChecks bounded[4] = {
      {&cs.sigma1, k.sigma_low, k.sigma_high, k.sigma_lip,
       {"ellipticity-lower", "sigma1"}, {"ellipticity-upper", "sigma1"}, {"sigma-derivative", "sigma1"}},
      {&cs.sigma2, k.sigma_low, k.sigma_high, k.sigma_lip,
       {"ellipticity-lower", "sigma2"}, {"ellipticity-upper", "sigma2"}, {"sigma-derivative", "sigma2"}},
      {&cs.f, k.f_low, k.f_high, k.f_lip,
       {"f-lower", "f"}, {"f-upper", "f"}, {"f-derivative", "f"}},
      {&cs.h, k.h_low, k.h_high, no_lip,
       {"h-lower", "h"}, {"h-upper", "h"}, {"h-derivative", "h"}},
  };

  const double dx = range.width() / static_cast<double>(n_samples - 1);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const double x = (i + 1 == n_samples) ? range.hi : range.lo + dx * static_cast<double>(i);
    for (auto& d : drifts) {
      const double b = (*d.fn)(x);
      d.dissip.observe(x, x * b, -k.c * x * x + k.C1);
      d.growth.observe(x, std::abs(b), k.C2 * (1.0 + std::abs(x)));
    }
    for (auto& s : bounded) {
      const double v = (*s.fn)(x);
      s.lower.observe(x, s.lo, v);
      s.upper.observe(x, v, s.hi);
      if (std::isfinite(s.lip))
        s.deriv.observe(x, std::abs(detail::slope_of(*s.fn, x)), s.lip);
    }
  }

  ValidationReport report;
  for (const auto& d : drifts) {
    d.dissip.flush(report.violations);
    d.growth.flush(report.violations);
  }
  for (const auto& s : bounded) {
    s.lower.flush(report.violations);
    s.upper.flush(report.violations);
    s.deriv.flush(report.violations);
  }
  return report;
}

// Returns a copy with `validated` set from a fresh grid check.
inline CoefficientSet validated(CoefficientSet cs, Interval range = {-10.0, 10.0}, std::size_t n = 20001)
{
  cs.constants.check();
  cs.validated = validate_assumption_a(cs, range, n).ok();
  return cs;
}

// Numerically fitted constants for an arbitrary set of functions. The
// dissipativity rate is half the smallest tail slope -b(x)/x over the outer
// half of the range; a non-dissipative tail leaves c at a floor and C1 fitted
// on |x| <= 1 only, so the subsequent grid check reports the violation.
inline AssumptionConstants fit_constants(const CoefficientSet& cs, Interval range = {-10.0, 10.0},
                                         std::size_t n = 20001, double margin = 0.01)
{
  AssumptionConstants k;
  const double dx = range.width() / static_cast<double>(n - 1);
  const double half = 0.5 * std::max(std::abs(range.lo), std::abs(range.hi));
  double tail_rate = std::numeric_limits<double>::infinity();
  double growth = 0.0;
  double s_lo = std::numeric_limits<double>::infinity(), s_hi = 0.0, s_lip = 0.0;
  double f_lo = s_lo, f_hi = 0.0, f_lip = 0.0, h_lo = s_lo, h_hi = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = range.lo + dx * static_cast<double>(i);
    for (const auto* b : {&cs.b1, &cs.b2}) {
      const double v = (*b)(x);
      if (std::abs(x) >= half)
        tail_rate = std::min(tail_rate, -v / x);
      growth = std::max(growth, std::abs(v) / (1.0 + std::abs(x)));
    }
    for (const auto* s : {&cs.sigma1, &cs.sigma2}) {
      const double v = (*s)(x);
      s_lo = std::min(s_lo, v);
      s_hi = std::max(s_hi, v);
      s_lip = std::max(s_lip, std::abs(detail::slope_of(*s, x)));
    }
    const double fv = cs.f(x), hv = cs.h(x);
    f_lo = std::min(f_lo, fv);
    f_hi = std::max(f_hi, fv);
    f_lip = std::max(f_lip, std::abs(detail::slope_of(cs.f, x)));
    h_lo = std::min(h_lo, hv);
    h_hi = std::max(h_hi, hv);
  }
  const bool dissipative = tail_rate > 0.0 && std::isfinite(tail_rate);
  k.c = dissipative ? 0.5 * tail_rate : 1e-3;
  double offset = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = range.lo + dx * static_cast<double>(i);
    if (!dissipative && std::abs(x) > 1.0)
      continue;
    for (const auto* b : {&cs.b1, &cs.b2})
      offset = std::max(offset, x * (*b)(x) + k.c * x * x);
  }
  const double up = 1.0 + margin, down = 1.0 - margin;
  k.C1 = std::max(offset * up, 1e-3);
  k.C2 = std::max(growth * up, 1e-3);
  k.sigma_low = s_lo * down;
  k.sigma_high = s_hi * up;
  k.sigma_lip = std::max(s_lip * up, 1e-6);
  k.f_low = f_lo * down;
  k.f_high = f_hi * up;
  k.f_lip = std::max(f_lip * up, 1e-6);
  k.h_low = h_lo * down;
  k.h_high = h_hi * up;
  return k;
}

// Curated coefficient sets. Each satisfies the coefficient conditions with the constants
// written next to it (derived by hand from the closed forms).
namespace catalog
{

// b(x) = -kappa (x - mu)
inline ScalarFunction ou_drift(double kappa, double mu) { return ScalarFunction::affine(-kappa, kappa * mu); }

// f in (0.7, 1.5), |f'| <= 0.3.
inline ScalarFunction vol_factor() { return ScalarFunction::logistic(0.7, 1.5, 1.5, 0.0); }

// Shared OU drifts and diffusions: b1 = -(x - 0.25), b2 = -y,
// sigma1 = 1 + 0.3 tanh(x / 2) in (0.7, 1.3), sigma2 = 1.
inline CoefficientSet base_set()
{
  CoefficientSet cs;
  cs.b1 = ou_drift(1.0, 0.25);
  cs.b2 = ou_drift(1.0, 0.0);
  cs.sigma1 = ScalarFunction::tanh_shape(1.0, 0.3, 0.5, 0.0);
  cs.sigma2 = ScalarFunction::constant(1.0);
  cs.f = vol_factor();
  cs.h = ScalarFunction::square_of(cs.f);
  // x(-x + 0.25) <= -x^2/2 + 0.25^2/2
  cs.constants.c = 0.5;
  cs.constants.C1 = 0.05;
  cs.constants.C2 = 1.0;
  cs.constants.sigma_low = 0.7;
  cs.constants.sigma_high = 1.3;
  cs.constants.sigma_lip = 0.15;
  cs.constants.f_low = 0.7;
  cs.constants.f_high = 1.5;
  cs.constants.f_lip = 0.3;
  cs.constants.h_low = 0.49;
  cs.constants.h_high = 2.25;
  return cs;
}

// h = f^2 with nonconstant f: the independent case.
inline CoefficientSet independence_set() { return validated(base_set()); }

// Decreasing logistic h in (0.6, 1.6), not a function of f.
inline CoefficientSet general_set()
{
  auto cs = base_set();
  cs.h = ScalarFunction::logistic(1.6, 0.6, 1.2, 0.0);
  cs.constants.h_low = 0.6;
  cs.constants.h_high = 1.6;
  return validated(cs);
}

// f and h constant: the coupling terms cancel.
inline CoefficientSet constant_fh_set()
{
  auto cs = base_set();
  cs.f = ScalarFunction::constant(1.2);
  cs.h = ScalarFunction::constant(0.8);
  cs.constants.f_low = cs.constants.f_high = 1.2;
  cs.constants.h_low = cs.constants.h_high = 0.8;
  return validated(cs);
}

// b_i = -x, sigma_i = sqrt(2), f = h = 1: product of standard normals.
inline CoefficientSet standard_ou_set()
{
  CoefficientSet cs;
  cs.b1 = ScalarFunction::affine(-1.0, 0.0);
  cs.b2 = ScalarFunction::affine(-1.0, 0.0);
  cs.sigma1 = ScalarFunction::constant(std::sqrt(2.0));
  cs.sigma2 = ScalarFunction::constant(std::sqrt(2.0));
  cs.f = ScalarFunction::constant(1.0);
  cs.h = ScalarFunction::constant(1.0);
  cs.constants.c = 1.0;
  cs.constants.C1 = 0.1;
  cs.constants.C2 = 1.0;
  cs.constants.sigma_low = cs.constants.sigma_high = std::sqrt(2.0);
  cs.constants.sigma_lip = 1e-6;
  cs.constants.f_low = cs.constants.f_high = 1.0;
  cs.constants.h_low = cs.constants.h_high = 1.0;
  cs.constants.f_lip = 1e-6;
  return validated(cs);
}

// Three nonconstant volatility factors used in the transformation checks.
inline std::vector<ScalarFunction> vol_factors()
{
  return {vol_factor(), ScalarFunction::tanh_shape(1.0, 0.4, 0.8, 0.5),
          ScalarFunction::smooth_step(0.8, 1.4, -1.0, 1.5)};
}

} // namespace catalog

} // namespace condmv
