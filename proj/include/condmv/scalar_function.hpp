#pragma once

#include <condmv/csv.hpp>
#include <condmv/errors.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace condmv
{

enum class FunctionKind
{
  affine,           // slope * x + intercept
  saturated_linear, // -kappa*u - gamma*u^3 on |u| <= radius, linear tails, u = x - mu
  constant,
  logistic,         // lo + (hi - lo) / (1 + exp(-slope (x - center)))
  tanh,             // mid + amp * tanh(slope (x - center))
  sine,             // mid + amp * sin(freq * x + phase)
  smooth_step,      // v0 for x <= x0, v1 for x >= x1, cubic Hermite blend between
  tabulated,        // linear interpolation, clamped outside the abscissae
  square,           // inner(x)^2
};

inline std::string_view to_string(FunctionKind k)
{
  switch (k) {
  case FunctionKind::affine: return "affine";
  case FunctionKind::saturated_linear: return "saturated-linear";
  case FunctionKind::constant: return "constant";
  case FunctionKind::logistic: return "logistic";
  case FunctionKind::tanh: return "tanh";
  case FunctionKind::sine: return "sine";
  case FunctionKind::smooth_step: return "smooth-step";
  case FunctionKind::tabulated: return "tabulated";
  case FunctionKind::square: return "square";
  }
  return "?";
}

inline FunctionKind function_kind_from_string(std::string_view s)
{
  for (auto k : {FunctionKind::affine, FunctionKind::saturated_linear, FunctionKind::constant,
                 FunctionKind::logistic, FunctionKind::tanh, FunctionKind::sine,
                 FunctionKind::smooth_step, FunctionKind::tabulated, FunctionKind::square})
    if (to_string(k) == s)
      return k;
  throw ConfigError("unknown function kind '" + std::string(s) + "'");
}

// Number of entries in the parameter vector for each parametric kind.
inline std::size_t parameter_count(FunctionKind k)
{
  switch (k) {
  case FunctionKind::affine: return 2;
  case FunctionKind::saturated_linear: return 4;
  case FunctionKind::constant: return 1;
  case FunctionKind::logistic: return 4;
  case FunctionKind::tanh: return 4;
  case FunctionKind::sine: return 4;
  case FunctionKind::smooth_step: return 4;
  case FunctionKind::tabulated: return 0;
  case FunctionKind::square: return 0;
  }
  return 0;
}

// One real-valued coefficient function. Immutable value type; copies share
// the wrapped function of a `square` node.
class ScalarFunction
{
public:
  ScalarFunction() : ScalarFunction(FunctionKind::constant, {1.0}) {}

  ScalarFunction(FunctionKind kind, std::vector<double> params) : kind_(kind), p_(std::move(params))
  {
    if (kind == FunctionKind::tabulated || kind == FunctionKind::square)
      throw ConfigError("use ScalarFunction::tabulated / square_of for kind " +
                        std::string(to_string(kind)));
    if (p_.size() != parameter_count(kind))
      throw ConfigError("function kind '" + std::string(to_string(kind)) + "' expects " +
                        std::to_string(parameter_count(kind)) + " parameters, got " +
                        std::to_string(p_.size()));
    for (double v : p_)
      if (!std::isfinite(v))
        throw ConfigError("non-finite parameter for kind '" + std::string(to_string(kind)) + "'");
    if (kind == FunctionKind::saturated_linear && (p_[3] <= 0.0 || p_[0] < 0.0 || p_[1] < 0.0))
      throw ConfigError("saturated-linear needs kappa >= 0, gamma >= 0, radius > 0");
    if (kind == FunctionKind::smooth_step && !(p_[2] < p_[3]))
      throw ConfigError("smooth-step needs x0 < x1");
  }

  static ScalarFunction affine(double slope, double intercept)
  {
    return {FunctionKind::affine, {slope, intercept}};
  }
  static ScalarFunction constant(double v) { return {FunctionKind::constant, {v}}; }
  static ScalarFunction logistic(double lo, double hi, double slope, double center)
  {
    return {FunctionKind::logistic, {lo, hi, slope, center}};
  }
  static ScalarFunction tanh_shape(double mid, double amp, double slope, double center)
  {
    return {FunctionKind::tanh, {mid, amp, slope, center}};
  }
  static ScalarFunction sine(double mid, double amp, double freq, double phase)
  {
    return {FunctionKind::sine, {mid, amp, freq, phase}};
  }
  static ScalarFunction smooth_step(double v0, double v1, double x0, double x1)
  {
    return {FunctionKind::smooth_step, {v0, v1, x0, x1}};
  }
  static ScalarFunction saturated_linear(double kappa, double gamma, double mu, double radius)
  {
    return {FunctionKind::saturated_linear, {kappa, gamma, mu, radius}};
  }

  static ScalarFunction tabulated(std::vector<double> xs, std::vector<double> values)
  {
    if (xs.size() < 2 || xs.size() != values.size())
      throw ConfigError("tabulated function needs >= 2 (x, value) pairs of equal length");
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (!std::isfinite(xs[i]) || !std::isfinite(values[i]))
        throw ConfigError("tabulated function has a non-finite entry");
      if (i > 0 && !(xs[i] > xs[i - 1]))
        throw ConfigError("tabulated abscissae must be strictly increasing");
    }
    ScalarFunction fn;
    fn.kind_ = FunctionKind::tabulated;
    fn.p_.clear();
    fn.xs_ = std::move(xs);
    fn.vs_ = std::move(values);
    return fn;
  }

  // Two-column CSV (x, value) with a header row.
  static ScalarFunction from_csv(const std::filesystem::path& path)
  {
    auto table = csv::read(path);
    if (table.header.size() != 2)
      throw ConfigError("tabulated CSV " + path.string() + " must have exactly two columns");
    std::vector<double> xs, vs;
    for (const auto& r : table.rows) {
      xs.push_back(r[0]);
      vs.push_back(r[1]);
    }
    return tabulated(std::move(xs), std::move(vs));
  }

  static ScalarFunction square_of(const ScalarFunction& inner)
  {
    ScalarFunction fn;
    fn.kind_ = FunctionKind::square;
    fn.p_.clear();
    fn.inner_ = std::make_shared<const ScalarFunction>(inner);
    return fn;
  }

  FunctionKind kind() const noexcept { return kind_; }
  std::span<const double> params() const noexcept { return p_; }
  std::span<const double> abscissae() const noexcept { return xs_; }
  std::span<const double> ordinates() const noexcept { return vs_; }
  const ScalarFunction* inner() const noexcept { return inner_.get(); }

  bool is_constant() const noexcept
  {
    return kind_ == FunctionKind::constant || (kind_ == FunctionKind::square && inner_->is_constant());
  }

  // True when this is structurally the square of `f`.
  bool is_square_of(const ScalarFunction& f) const { return kind_ == FunctionKind::square && *inner_ == f; }

  bool has_derivative() const noexcept
  {
    if (kind_ == FunctionKind::tabulated)
      return false;
    if (kind_ == FunctionKind::square)
      return inner_->has_derivative();
    return true;
  }

  double operator()(double x) const
  {
    switch (kind_) {
    case FunctionKind::affine: return p_[0] * x + p_[1];
    case FunctionKind::saturated_linear: {
      const double kappa = p_[0], gamma = p_[1], u = x - p_[2], r = p_[3];
      if (std::abs(u) <= r)
        return -kappa * u - gamma * u * u * u;
      const double s = u > 0 ? 1.0 : -1.0;
      const double edge = -kappa * s * r - gamma * s * r * r * r;
      const double slope = -kappa - 3.0 * gamma * r * r;
      return edge + slope * (u - s * r);
    }
    case FunctionKind::constant: return p_[0];
    case FunctionKind::logistic: return p_[0] + (p_[1] - p_[0]) / (1.0 + std::exp(-p_[2] * (x - p_[3])));
    case FunctionKind::tanh: return p_[0] + p_[1] * std::tanh(p_[2] * (x - p_[3]));
    case FunctionKind::sine: return p_[0] + p_[1] * std::sin(p_[2] * x + p_[3]);
    case FunctionKind::smooth_step: {
      if (x <= p_[2])
        return p_[0];
      if (x >= p_[3])
        return p_[1];
      const double t = (x - p_[2]) / (p_[3] - p_[2]);
      return p_[0] + (p_[1] - p_[0]) * t * t * (3.0 - 2.0 * t);
    }
    case FunctionKind::tabulated: return interpolate(x);
    case FunctionKind::square: {
      const double v = (*inner_)(x);
      return v * v;
    }
    }
    return 0.0;
  }

  // Analytic derivative; falls back to a centered difference (step 1e-5)
  // for kinds without one.
  double derivative(double x) const
  {
    switch (kind_) {
    case FunctionKind::affine: return p_[0];
    case FunctionKind::saturated_linear: {
      const double u = x - p_[2];
      const double uc = std::clamp(u, -p_[3], p_[3]);
      return -p_[0] - 3.0 * p_[1] * uc * uc;
    }
    case FunctionKind::constant: return 0.0;
    case FunctionKind::logistic: {
      const double e = std::exp(-p_[2] * (x - p_[3]));
      return (p_[1] - p_[0]) * p_[2] * e / ((1.0 + e) * (1.0 + e));
    }
    case FunctionKind::tanh: {
      const double t = std::tanh(p_[2] * (x - p_[3]));
      return p_[1] * p_[2] * (1.0 - t * t);
    }
    case FunctionKind::sine: return p_[1] * p_[2] * std::cos(p_[2] * x + p_[3]);
    case FunctionKind::smooth_step: {
      if (x <= p_[2] || x >= p_[3])
        return 0.0;
      const double w = p_[3] - p_[2];
      const double t = (x - p_[2]) / w;
      return (p_[1] - p_[0]) * 6.0 * t * (1.0 - t) / w;
    }
    case FunctionKind::square:
      if (inner_->has_derivative())
        return 2.0 * (*inner_)(x) * inner_->derivative(x);
      break;
    case FunctionKind::tabulated: break;
    }
    return finite_difference(x);
  }

  double finite_difference(double x, double step = 1e-5) const
  {
    return ((*this)(x + step) - (*this)(x - step)) / (2.0 * step);
  }

  // out[i] = f(in[i]); dispatch is hoisted out of the loop.
  void eval(std::span<const double> in, std::span<double> out) const
  {
    const std::size_t n = in.size();
    switch (kind_) {
    case FunctionKind::affine:
      for (std::size_t i = 0; i < n; ++i)
        out[i] = p_[0] * in[i] + p_[1];
      return;
    case FunctionKind::constant:
      std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(n), p_[0]);
      return;
    case FunctionKind::logistic: {
      const double lo = p_[0], d = p_[1] - p_[0], s = p_[2], c = p_[3];
      for (std::size_t i = 0; i < n; ++i)
        out[i] = lo + d / (1.0 + std::exp(-s * (in[i] - c)));
      return;
    }
    case FunctionKind::tanh: {
      const double m = p_[0], a = p_[1], s = p_[2], c = p_[3];
      for (std::size_t i = 0; i < n; ++i)
        out[i] = m + a * std::tanh(s * (in[i] - c));
      return;
    }
    case FunctionKind::square:
      inner_->eval(in, out);
      for (std::size_t i = 0; i < n; ++i)
        out[i] *= out[i];
      return;
    default:
      for (std::size_t i = 0; i < n; ++i)
        out[i] = (*this)(in[i]);
      return;
    }
  }

  friend bool operator==(const ScalarFunction& a, const ScalarFunction& b)
  {
    if (a.kind_ != b.kind_ || a.p_ != b.p_ || a.xs_ != b.xs_ || a.vs_ != b.vs_)
      return false;
    if (a.kind_ == FunctionKind::square)
      return *a.inner_ == *b.inner_;
    return true;
  }

private:
  double interpolate(double x) const
  {
    if (x <= xs_.front())
      return vs_.front();
    if (x >= xs_.back())
      return vs_.back();
    const auto it = std::upper_bound(xs_.begin(), xs_.end(), x);
    const std::size_t k = static_cast<std::size_t>(it - xs_.begin()) - 1;
    const double t = (x - xs_[k]) / (xs_[k + 1] - xs_[k]);
    return vs_[k] + t * (vs_[k + 1] - vs_[k]);
  }

  FunctionKind kind_;
  std::vector<double> p_;
  std::vector<double> xs_, vs_;
  std::shared_ptr<const ScalarFunction> inner_;
};

} // namespace condmv
