#pragma once

#include <condmv/coefficients.hpp>
#include <condmv/csv.hpp>
#include <condmv/errors.hpp>
#include <condmv/rng.hpp>
#include <condmv/scalar_function.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <vector>

namespace condmv
{

// Closed-form stationary density of dX = b(X) dt + sigma(X) dW on a
// truncated interval:
//   m(x) proportional to sigma(x)^-2 exp( int_0^x 2 b / sigma^2 ).
// The log of the unnormalized density is tabulated on a uniform grid.
class StationaryDensity1D
{
public:
  const ScalarFunction& drift() const noexcept { return drift_; }
  const ScalarFunction& diffusion() const noexcept { return diffusion_; }
  Interval domain() const noexcept { return domain_; }
  std::size_t grid_size() const noexcept { return xs_.size(); }
  double spacing() const noexcept { return h_; }
  std::span<const double> grid() const noexcept { return xs_; }
  std::span<const double> log_unnormalized() const noexcept { return log_u_; }
  std::span<const double> density_values() const noexcept { return pdf_; }
  std::span<const double> cdf_values() const noexcept { return cdf_; }
  double log_normalizer() const noexcept { return log_z_; }
  double normalizer() const noexcept { return std::exp(log_z_); }

  // Density at an arbitrary point; the inner integral is completed from the
  // nearest node with one Simpson panel. Zero outside the truncation domain.
  double density(double x) const
  {
    if (x < domain_.lo || x > domain_.hi)
      return 0.0;
    const std::size_t k = node_below(x);
    const double lu = cumulative_[k] + simpson(xs_[k], x) - 2.0 * std::log(diffusion_(x)) - anchor_;
    return std::exp(lu - log_z_);
  }

  // Piecewise-linear interpolation of the tabulated CDF.
  double cdf(double x) const
  {
    if (x <= domain_.lo)
      return 0.0;
    if (x >= domain_.hi)
      return 1.0;
    const std::size_t k = node_below(x);
    const double t = (x - xs_[k]) / h_;
    return cdf_[k] + t * (cdf_[k + 1] - cdf_[k]);
  }

  double quantile(double u) const
  {
    if (u <= 0.0)
      return domain_.lo;
    if (u >= 1.0)
      return domain_.hi;
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    if (it == cdf_.begin())
      return domain_.lo;
    if (it == cdf_.end())
      return domain_.hi;
    const std::size_t k = static_cast<std::size_t>(it - cdf_.begin()) - 1;
    const double span = cdf_[k + 1] - cdf_[k];
    const double t = span > 0.0 ? (u - cdf_[k]) / span : 0.0;
    return xs_[k] + t * h_;
  }

  // E[g(X)] by the trapezoid rule on the grid.
  template <class Fn>
  double expectation(Fn&& g) const
  {
    double acc = 0.0;
    for (std::size_t i = 0; i < xs_.size(); ++i) {
      const double w = (i == 0 || i + 1 == xs_.size()) ? 0.5 : 1.0;
      acc += w * g(xs_[i]) * pdf_[i];
    }
    return acc * h_;
  }

  double mean() const
  {
    return expectation([](double x) { return x; });
  }

  double variance() const
  {
    const double mu = mean();
    return expectation([mu](double x) { return (x - mu) * (x - mu); });
  }

  void write_csv(const std::filesystem::path& path) const
  {
    csv::Writer w(path);
    w.header({"x", "density"});
    for (std::size_t i = 0; i < xs_.size(); ++i)
      w.row(xs_[i], pdf_[i]);
  }

private:
  friend StationaryDensity1D build_stationary_density(const ScalarFunction&, const ScalarFunction&, Interval,
                                                      std::size_t);

  double integrand(double x) const
  {
    const double s = diffusion_(x);
    return 2.0 * drift_(x) / (s * s);
  }

  double simpson(double a, double b) const
  {
    if (b == a)
      return 0.0;
    return (b - a) / 6.0 * (integrand(a) + 4.0 * integrand(0.5 * (a + b)) + integrand(b));
  }

  std::size_t node_below(double x) const
  {
    const double t = (x - domain_.lo) / h_;
    const auto k = static_cast<std::size_t>(std::max(0.0, std::floor(t)));
    return std::min(k, xs_.size() - 2);
  }

  ScalarFunction drift_, diffusion_;
  Interval domain_;
  double h_ = 0.0;
  double anchor_ = 0.0; // inner integral from the left end to 0
  double log_z_ = 0.0;
  std::vector<double> xs_, cumulative_, log_u_, pdf_, cdf_;
};

// Builds the density on `grid_size` uniform nodes of `domain`. The inner
// integral uses composite Simpson (one midpoint per panel), the normalizer
// the trapezoid rule.
inline StationaryDensity1D build_stationary_density(const ScalarFunction& drift, const ScalarFunction& diffusion,
                                                    Interval domain, std::size_t grid_size = 4097)
{
  if (grid_size < 64)
    throw InputError("stationary density needs grid_size >= 64");
  if (!(domain.hi > domain.lo))
    throw InputError("stationary density needs a nonempty domain");

  StationaryDensity1D d;
  d.drift_ = drift;
  d.diffusion_ = diffusion;
  d.domain_ = domain;
  const std::size_t n = grid_size;
  d.h_ = domain.width() / static_cast<double>(n - 1);
  d.xs_.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    d.xs_[i] = (i + 1 == n) ? domain.hi : domain.lo + d.h_ * static_cast<double>(i);

  for (std::size_t i = 0; i < n; ++i) {
    const double x = d.xs_[i];
    const double mid = i + 1 < n ? 0.5 * (x + d.xs_[i + 1]) : x;
    for (double p : {x, mid}) {
      const double s = diffusion(p);
      if (!(s > 0.0))
        throw EllipticityError("diffusion coefficient is not positive at x=" + csv::format(p));
      if (!std::isfinite(d.integrand(p)))
        throw DomainError("non-finite drift/diffusion ratio at x=" + csv::format(p));
    }
  }

  d.cumulative_.assign(n, 0.0);
  for (std::size_t i = 0; i + 1 < n; ++i)
    d.cumulative_[i + 1] = d.cumulative_[i] + d.simpson(d.xs_[i], d.xs_[i + 1]);
  if (domain.lo <= 0.0 && 0.0 <= domain.hi) {
    const std::size_t k = d.node_below(0.0);
    d.anchor_ = d.cumulative_[k] + d.simpson(d.xs_[k], 0.0);
  } else {
    d.anchor_ = 0.0;
  }

  d.log_u_.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    d.log_u_[i] = d.cumulative_[i] - d.anchor_ - 2.0 * std::log(diffusion(d.xs_[i]));
  const double top = *std::max_element(d.log_u_.begin(), d.log_u_.end());
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = (i == 0 || i + 1 == n) ? 0.5 : 1.0;
    z += w * std::exp(d.log_u_[i] - top);
  }
  z *= d.h_;
  d.log_z_ = top + std::log(z);

  d.pdf_.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    d.pdf_[i] = std::exp(d.log_u_[i] - d.log_z_);
  d.cdf_.assign(n, 0.0);
  for (std::size_t i = 0; i + 1 < n; ++i)
    d.cdf_[i + 1] = d.cdf_[i] + 0.5 * d.h_ * (d.pdf_[i] + d.pdf_[i + 1]);
  const double total = d.cdf_.back();
  for (auto& c : d.cdf_)
    c /= total;
  d.cdf_.back() = 1.0;
  return d;
}

// Truncation interval centred at the origin: +-10 times the stationary
// spread implied by the dissipativity constants,
// sqrt((sigma_high^2 + 2 C1) / (2 c)).
inline Interval default_domain(const AssumptionConstants& k)
{
  const double scale = std::sqrt((k.sigma_high * k.sigma_high + 2.0 * k.C1) / (2.0 * k.c));
  return {-10.0 * scale, 10.0 * scale};
}

// Inverse-CDF samples; a pure function of (n, seed).
inline std::vector<double> sample(const StationaryDensity1D& d, std::size_t n, std::uint64_t seed,
                                  StreamId stream = StreamId::sampling)
{
  if (n < 1)
    throw InputError("sample needs n >= 1");
  const NoiseStream noise(seed, stream);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = d.quantile(noise.uniform(i));
  return out;
}

// W1 between a weighted empirical law and `d`: trapezoid integral of
// |F_emp - F_d| over the density grid.
inline double wasserstein1(std::span<const double> samples, std::span<const double> weights,
                           const StationaryDensity1D& d)
{
  if (samples.empty())
    throw InputError("wasserstein1 needs a nonempty sample");
  if (!weights.empty() && weights.size() != samples.size())
    throw InputError("wasserstein1 weights must match samples");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return samples[a] < samples[b]; });
  double total = 0.0;
  if (weights.empty())
    total = static_cast<double>(samples.size());
  else
    for (double w : weights)
      total += w;

  const auto grid = d.grid();
  const auto cdf = d.cdf_values();
  std::size_t j = 0;
  double acc_w = 0.0, integral = 0.0, prev = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    while (j < order.size() && samples[order[j]] <= grid[i]) {
      acc_w += weights.empty() ? 1.0 : weights[order[j]];
      ++j;
    }
    const double femp = (i + 1 == grid.size()) ? 1.0 : acc_w / total;
    const double diff = std::abs(femp - cdf[i]);
    if (i > 0)
      integral += 0.5 * d.spacing() * (prev + diff);
    prev = diff;
  }
  return integral;
}

inline double wasserstein1(std::span<const double> samples, const StationaryDensity1D& d)
{
  return wasserstein1(samples, {}, d);
}

// Stationary densities of the two uncoupled marginal diffusions.
struct MarginalPair
{
  StationaryDensity1D m1, m2;
};

inline MarginalPair build_marginals(const CoefficientSet& cs, std::size_t grid_size = 4097)
{
  const Interval dom = default_domain(cs.constants);
  return {build_stationary_density(cs.b1, cs.sigma1, dom, grid_size),
          build_stationary_density(cs.b2, cs.sigma2, dom, grid_size)};
}

} // namespace condmv
