#pragma once

#include <condmv/errors.hpp>
#include <condmv/grid_density.hpp>
#include <condmv/scalar_function.hpp>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <filesystem>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

namespace condmv
{

template <class F>
concept RealFunction = std::regular_invocable<const F&, double> &&
                       std::convertible_to<std::invoke_result_t<const F&, double>, double>;

// N weighted particles; the empirical surrogate for the law of (X_t, Y_t).
struct ParticleCloud
{
  std::vector<double> xs;
  std::vector<double> ys;
  std::vector<double> weights;
  double time = 0.0;

  std::size_t size() const noexcept { return xs.size(); }
  bool empty() const noexcept { return xs.empty(); }

  static ParticleCloud uniform(std::vector<double> xs, std::vector<double> ys, double time = 0.0)
  {
    if (xs.size() != ys.size())
      throw InputError("particle cloud needs equally many x and y values");
    const std::size_t n = xs.size();
    ParticleCloud c{std::move(xs), std::move(ys), std::vector<double>(n, n ? 1.0 / static_cast<double>(n) : 0.0),
                    time};
    return c;
  }

  void check() const
  {
    if (xs.size() != ys.size() || xs.size() != weights.size())
      throw InputError("particle cloud arrays differ in length");
    double s = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0))
        throw InputError("particle cloud has a negative weight");
      s += w;
    }
    if (!xs.empty() && std::abs(s - 1.0) > 1e-12 * static_cast<double>(std::max<std::size_t>(1, xs.size() / 1000)))
      throw InputError("particle cloud weights do not sum to 1");
  }
};

// c_psi <= psi <= C_psi.
struct PsiBounds
{
  double lo = 1.0;
  double hi = 1.0;

  double g_min() const noexcept { return 1.0 / hi; }
  double g_max() const noexcept { return 1.0 / lo; }
};

enum class EstimatorMethod
{
  binning,
  kernel_regression,
  exact_from_grid,
  mollified,
};

// Estimate of x -> 1 / E[psi(V) | U = x] on a one-dimensional grid.
// `values` are clamped to [1/C_psi, 1/c_psi]; `raw_values` keep the
// estimate before clamping.
struct CondExpectationField
{
  std::vector<double> grid;
  std::vector<double> values;
  std::vector<double> raw_values;
  std::vector<bool> inherited; // node value copied from a neighbour
  PsiBounds psi_bounds;
  EstimatorMethod method = EstimatorMethod::binning;

  bool uniform_grid() const
  {
    if (grid.size() < 2)
      return false;
    const double h = (grid.back() - grid.front()) / static_cast<double>(grid.size() - 1);
    for (std::size_t i = 1; i < grid.size(); ++i)
      if (std::abs((grid[i] - grid[i - 1]) - h) > 1e-9 * std::abs(h))
        return false;
    return true;
  }

  // Linear interpolation, constant beyond the end nodes.
  double operator()(double x) const
  {
    if (grid.size() == 1 || x <= grid.front())
      return values.front();
    if (x >= grid.back())
      return values.back();
    const auto it = std::upper_bound(grid.begin(), grid.end(), x);
    const std::size_t k = static_cast<std::size_t>(it - grid.begin()) - 1;
    const double t = (x - grid[k]) / (grid[k + 1] - grid[k]);
    return values[k] + t * (values[k + 1] - values[k]);
  }

  std::size_t inherited_count() const
  {
    return static_cast<std::size_t>(std::count(inherited.begin(), inherited.end(), true));
  }

  void write_csv(const std::filesystem::path& path) const
  {
    csv::Writer w(path);
    w.header({"x", "G"});
    for (std::size_t i = 0; i < grid.size(); ++i)
      w.row(grid[i], values[i]);
  }
};

enum class KernelShape
{
  bump,       // exp(-1 / (1 - u^2)) on (-1, 1), normalized
  triangular, // 1 - |u|
};

// Mollifier of half-width `bandwidth` (the 1/n of the mollified coefficients).
struct MollifierConfig
{
  double bandwidth = 0.1;
  KernelShape kernel_shape = KernelShape::triangular;

  friend bool operator==(const MollifierConfig&, const MollifierConfig&) = default;
};

namespace detail
{

inline double kernel_profile(KernelShape shape, double u)
{
  const double a = std::abs(u);
  if (a >= 1.0)
    return 0.0;
  if (shape == KernelShape::triangular)
    return 1.0 - a;
  return std::exp(-1.0 / (1.0 - u * u));
}

// Fills nodes whose estimate is undefined with the nearest defined node
// (ties go left). Throws when no node is defined.
inline void inherit_nearest(std::vector<double>& raw, std::vector<bool>& defined, const char* what)
{
  const std::size_t n = raw.size();
  std::vector<bool> inherited(n, false);
  std::ptrdiff_t last = -1;
  std::vector<std::ptrdiff_t> left(n, -1), right(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    if (defined[i])
      last = static_cast<std::ptrdiff_t>(i);
    left[i] = last;
  }
  last = -1;
  for (std::size_t i = n; i-- > 0;) {
    if (defined[i])
      last = static_cast<std::ptrdiff_t>(i);
    right[i] = last;
  }
  if (n == 0 || (left[n - 1] < 0))
    throw EstimationError(std::string(what) + ": no node carries enough mass");
  for (std::size_t i = 0; i < n; ++i) {
    if (defined[i])
      continue;
    const auto l = left[i], r = right[i];
    std::ptrdiff_t src;
    if (l < 0)
      src = r;
    else if (r < 0)
      src = l;
    else
      src = (static_cast<std::ptrdiff_t>(i) - l <= r - static_cast<std::ptrdiff_t>(i)) ? l : r;
    raw[i] = raw[static_cast<std::size_t>(src)];
    inherited[i] = true;
  }
  defined = std::move(inherited);
}

inline CondExpectationField finish_field(std::vector<double> grid, std::vector<double> raw, std::vector<bool> inherited,
                                         PsiBounds bounds, EstimatorMethod method)
{
  CondExpectationField g;
  g.grid = std::move(grid);
  g.values.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    g.values[i] = std::clamp(raw[i], bounds.g_min(), bounds.g_max());
  g.raw_values = std::move(raw);
  g.inherited = std::move(inherited);
  g.psi_bounds = bounds;
  g.method = method;
  return g;
}

inline void check_bounds(PsiBounds b)
{
  if (!(b.lo > 0.0) || !(b.hi >= b.lo))
    throw InputError("psi bounds need 0 < c_psi <= C_psi");
}

// Index of the bin containing x; values outside the edges go to the end bins.
class BinLocator
{
public:
  explicit BinLocator(std::span<const double> edges) : edges_(edges)
  {
    const std::size_t nb = edges.size() - 1;
    const double w = (edges.back() - edges.front()) / static_cast<double>(nb);
    uniform_ = true;
    for (std::size_t k = 1; k < edges.size(); ++k)
      if (std::abs((edges[k] - edges[k - 1]) - w) > 1e-9 * w)
        uniform_ = false;
    lo_ = edges.front();
    inv_w_ = 1.0 / w;
    nb_ = nb;
  }

  std::size_t operator()(double x) const
  {
    if (uniform_) {
      const double t = (x - lo_) * inv_w_;
      if (!(t > 0.0))
        return 0;
      return std::min(static_cast<std::size_t>(t), nb_ - 1);
    }
    const auto it = std::upper_bound(edges_.begin(), edges_.end(), x);
    const auto k = static_cast<std::ptrdiff_t>(it - edges_.begin()) - 1;
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(k, 0, static_cast<std::ptrdiff_t>(nb_) - 1));
  }

private:
  std::span<const double> edges_;
  double lo_ = 0.0, inv_w_ = 1.0;
  std::size_t nb_ = 1;
  bool uniform_ = false;
};

inline void check_edges(std::span<const double> edges)
{
  if (edges.size() < 2)
    throw InputError("binning needs at least two bin edges");
  for (std::size_t k = 1; k < edges.size(); ++k)
    if (!(edges[k] > edges[k - 1]))
      throw InputError("bin edges must be strictly increasing");
}

} // namespace detail

// Binned estimate from precomputed psi(y_i). Bins whose effective count
// (sum w)^2 / sum w^2 is below `min_count` inherit the nearest populated bin.
inline CondExpectationField estimate_G_binning(std::span<const double> xs, std::span<const double> weights,
                                               std::span<const double> psi_values, PsiBounds bounds,
                                               std::span<const double> edges, double min_count)
{
  if (xs.empty())
    throw InputError("estimate_G_binning: empty particle cloud");
  if (min_count < 1.0)
    throw InputError("estimate_G_binning: min_count must be >= 1");
  detail::check_bounds(bounds);
  detail::check_edges(edges);
  const std::size_t nb = edges.size() - 1;
  std::vector<double> sw(nb, 0.0), swp(nb, 0.0), sw2(nb, 0.0);
  const detail::BinLocator locate(edges);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const std::size_t k = locate(xs[i]);
    const double w = weights[i];
    sw[k] += w;
    swp[k] += w * psi_values[i];
    sw2[k] += w * w;
  }
  std::vector<double> raw(nb, 0.0), grid(nb);
  std::vector<bool> defined(nb, false);
  for (std::size_t k = 0; k < nb; ++k) {
    grid[k] = 0.5 * (edges[k] + edges[k + 1]);
    const double eff = sw2[k] > 0.0 ? sw[k] * sw[k] / sw2[k] : 0.0;
    if (eff >= min_count * (1.0 - 1e-12) && swp[k] > 0.0) {
      raw[k] = sw[k] / swp[k];
      defined[k] = true;
    }
  }
  detail::inherit_nearest(raw, defined, "estimate_G_binning");
  return detail::finish_field(std::move(grid), std::move(raw), std::move(defined), bounds, EstimatorMethod::binning);
}

template <RealFunction Psi>
CondExpectationField estimate_G_binning(const ParticleCloud& cloud, const Psi& psi, PsiBounds bounds,
                                        std::span<const double> edges, double min_count)
{
  if (cloud.empty())
    throw InputError("estimate_G_binning: empty particle cloud");
  std::vector<double> pv(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i)
    pv[i] = psi(cloud.ys[i]);
  return estimate_G_binning(cloud.xs, cloud.weights, pv, bounds, edges, min_count);
}

// 1.06 * std(xs) * N^(-1/5).
inline double rule_of_thumb_bandwidth(std::span<const double> xs, std::span<const double> weights)
{
  double sw = 0.0, m = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sw += weights[i];
    m += weights[i] * xs[i];
  }
  m /= sw;
  double v = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i)
    v += weights[i] * (xs[i] - m) * (xs[i] - m);
  v /= sw;
  const double n = static_cast<double>(xs.size());
  const double bw = 1.06 * std::sqrt(v) * std::pow(n, -0.2);
  return bw > 0.0 ? bw : 1.0;
}

inline double rule_of_thumb_bandwidth(const ParticleCloud& cloud)
{
  return rule_of_thumb_bandwidth(cloud.xs, cloud.weights);
}

// Nadaraya-Watson ratio with a Gaussian kernel. Weights are rescaled by the
// nearest particle so that far nodes do not underflow; terms below e^-36
// relative to the nearest one are dropped.
inline CondExpectationField estimate_G_kernel(std::span<const double> xs, std::span<const double> weights,
                                              std::span<const double> psi_values, PsiBounds bounds,
                                              std::span<const double> grid, double bandwidth)
{
  if (!(bandwidth > 0.0))
    throw InputError("estimate_G_kernel: bandwidth must be positive");
  if (xs.empty())
    throw InputError("estimate_G_kernel: empty particle cloud");
  detail::check_bounds(bounds);
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> sx(xs.size());
  for (std::size_t k = 0; k < order.size(); ++k)
    sx[k] = xs[order[k]];

  const double inv2h2 = 1.0 / (2.0 * bandwidth * bandwidth);
  const double cutoff = 36.0;
  std::vector<double> raw(grid.size());
  std::vector<bool> defined(grid.size(), false);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const double x = grid[g];
    const auto it = std::lower_bound(sx.begin(), sx.end(), x);
    std::size_t nearest = static_cast<std::size_t>(it - sx.begin());
    if (nearest == sx.size() || (nearest > 0 && x - sx[nearest - 1] < sx[nearest] - x))
      nearest = nearest == sx.size() ? sx.size() - 1 : nearest - 1;
    const double d0 = (x - sx[nearest]) * (x - sx[nearest]);
    double num = 0.0, den = 0.0;
    const auto add = [&](std::size_t k) {
      const double d = (x - sx[k]) * (x - sx[k]);
      const double a = (d - d0) * inv2h2;
      if (a > cutoff)
        return false;
      const double kw = weights[order[k]] * std::exp(-a);
      num += kw;
      den += kw * psi_values[order[k]];
      return true;
    };
    for (std::size_t k = nearest; k < sx.size(); ++k)
      if (!add(k))
        break;
    for (std::size_t k = nearest; k-- > 0;)
      if (!add(k))
        break;
    if (den > 0.0 && num > 0.0) {
      raw[g] = num / den;
      defined[g] = true;
    }
  }
  detail::inherit_nearest(raw, defined, "estimate_G_kernel");
  return detail::finish_field({grid.begin(), grid.end()}, std::move(raw), std::move(defined), bounds,
                              EstimatorMethod::kernel_regression);
}

template <RealFunction Psi>
CondExpectationField estimate_G_kernel(const ParticleCloud& cloud, const Psi& psi, PsiBounds bounds,
                                       std::span<const double> grid, double bandwidth)
{
  if (cloud.empty())
    throw InputError("estimate_G_kernel: empty particle cloud");
  std::vector<double> pv(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i)
    pv[i] = psi(cloud.ys[i]);
  return estimate_G_kernel(cloud.xs, cloud.weights, pv, bounds, grid, bandwidth);
}

// Columns carrying less than this fraction of the total mass are undefined.
inline constexpr double column_mass_floor = 1e-12;

// Per-column quadrature of the defining ratio on a grid density.
template <RealFunction Psi>
CondExpectationField exact_G_from_grid(const GridDensity2D& p, const Psi& psi, PsiBounds bounds)
{
  detail::check_bounds(bounds);
  const std::size_t nx = p.nx(), ny = p.ny();
  std::vector<double> pv(ny);
  for (std::size_t j = 0; j < ny; ++j)
    pv[j] = psi(p.y_axis().center(j));
  std::vector<double> mass(nx), wmass(nx);
  double total = 0.0;
  for (std::size_t i = 0; i < nx; ++i) {
    const auto col = p.column(i);
    double m = 0.0, wm = 0.0;
    for (std::size_t j = 0; j < ny; ++j) {
      m += col[j];
      wm += pv[j] * col[j];
    }
    mass[i] = m;
    wmass[i] = wm;
    total += m;
  }
  std::vector<double> raw(nx, 0.0);
  std::vector<bool> defined(nx, false);
  for (std::size_t i = 0; i < nx; ++i) {
    if (mass[i] >= column_mass_floor * total && wmass[i] > 0.0) {
      raw[i] = mass[i] / wmass[i];
      defined[i] = true;
    }
  }
  try {
    detail::inherit_nearest(raw, defined, "exact_G_from_grid");
  } catch (const EstimationError& e) {
    throw DegenerateDensityError(e.what());
  }
  return detail::finish_field(p.x_axis().centers(), std::move(raw), std::move(defined), bounds,
                              EstimatorMethod::exact_from_grid);
}

// Conditional fields of the transformed system: G^{h f^-2} in the X-drift and
// G^{f^-2} in the Y-dynamics.
struct TransformedFields
{
  CondExpectationField g_hf2inv;
  CondExpectationField g_f2inv;
};

// Normalized kernel weights at offsets k * spacing, |k * spacing| <= bandwidth.
inline std::vector<double> mollifier_weights(const MollifierConfig& cfg, double spacing)
{
  const auto half = static_cast<std::size_t>(std::floor(cfg.bandwidth / spacing + 1e-12));
  std::vector<double> w(2 * half + 1);
  double s = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double u = (static_cast<double>(k) - static_cast<double>(half)) * spacing / cfg.bandwidth;
    w[k] = detail::kernel_profile(cfg.kernel_shape, u);
    s += w[k];
  }
  for (auto& v : w)
    v /= s;
  return w;
}

// Integral of |kappa'| for the unit-bandwidth kernel.
inline double kernel_derivative_l1(KernelShape shape)
{
  if (shape == KernelShape::triangular)
    return 2.0;
  // 2 * kappa(0) for a symmetric unimodal kernel; kappa normalized on (-1, 1).
  const std::size_t n = 200000;
  double z = 0.0;
  for (std::size_t i = 1; i < n; ++i) {
    const double u = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n);
    z += detail::kernel_profile(shape, u);
  }
  z *= 2.0 / static_cast<double>(n);
  return 2.0 * std::exp(-1.0) / z;
}

// Discrete convolution with the mollifier; edges replicate the end values.
inline CondExpectationField mollify_G(const CondExpectationField& field, const MollifierConfig& cfg)
{
  if (!field.uniform_grid())
    throw InputError("mollify_G needs a uniform grid");
  const double h = field.grid[1] - field.grid[0];
  if (!(cfg.bandwidth >= h * (1.0 - 1e-12)))
    throw InputError("mollifier bandwidth is smaller than the grid spacing");
  const auto w = mollifier_weights(cfg, h);
  const auto half = static_cast<std::ptrdiff_t>(w.size() / 2);
  const auto n = static_cast<std::ptrdiff_t>(field.values.size());
  std::vector<double> out(field.values.size());
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::ptrdiff_t k = -half; k <= half; ++k) {
      const auto src = std::clamp<std::ptrdiff_t>(i - k, 0, n - 1);
      s += w[static_cast<std::size_t>(k + half)] * field.values[static_cast<std::size_t>(src)];
    }
    out[static_cast<std::size_t>(i)] = s;
  }
  auto g = detail::finish_field(field.grid, std::move(out), field.inherited, field.psi_bounds,
                                EstimatorMethod::mollified);
  return g;
}

// int |G1 - G2| m dx on a shared uniform grid with spacing dx.
inline double weighted_l1(const CondExpectationField& a, const CondExpectationField& b, std::span<const double> m,
                          double dx)
{
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i)
    s += std::abs(a.values[i] - b.values[i]) * m[i];
  return s * dx;
}

} // namespace condmv
