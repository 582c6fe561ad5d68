#pragma once

#include <condmv/condexp.hpp>
#include <condmv/errors.hpp>
#include <condmv/grid_density.hpp>
#include <condmv/scalar_function.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

namespace condmv
{

// Mass before the final renormalization of the last transform on this thread.
struct TransformDiagnostics
{
  double mass_defect = 0.0;
  std::size_t inherited_columns = 0;
};

inline TransformDiagnostics& last_transform_diagnostics()
{
  thread_local TransformDiagnostics d;
  return d;
}

inline constexpr double mass_defect_warning = 1e-6;

namespace detail
{

// Columns below the mass floor that lie between two columns above it.
inline std::size_t interior_gap_columns(const CondExpectationField& g)
{
  const auto& inh = g.inherited;
  const auto first = std::find(inh.begin(), inh.end(), false);
  const auto last = std::find(inh.rbegin(), inh.rend(), false);
  if (first == inh.end())
    return 0;
  return static_cast<std::size_t>(std::count(first, last.base(), true));
}

// p(x, y) * w(y) * G^{w;p}(x), renormalized.
template <class W>
GridDensity2D reweight_by_column(const GridDensity2D& p, const W& w, PsiBounds bounds)
{
  const auto g = exact_G_from_grid(p, w, bounds);
  const std::size_t nx = p.nx(), ny = p.ny();
  if (static_cast<double>(interior_gap_columns(g)) > 0.01 * static_cast<double>(nx))
    throw DegenerateDensityError("more than 1% of the grid columns are massless gaps inside the support");
  std::vector<double> wy(ny);
  for (std::size_t j = 0; j < ny; ++j)
    wy[j] = w(p.y_axis().center(j));
  std::vector<double> out(nx * ny);
  for (std::size_t i = 0; i < nx; ++i) {
    const auto col = p.column(i);
    const double gi = g.raw_values[i];
    for (std::size_t j = 0; j < ny; ++j)
      out[i * ny + j] = col[j] * wy[j] * gi;
  }
  GridDensity2D r(p.x_axis(), p.y_axis(), std::move(out));
  const double m = r.normalize();
  auto& diag = last_transform_diagnostics();
  diag.mass_defect = std::abs(m - 1.0);
  diag.inherited_columns = g.inherited_count();
  if (diag.mass_defect > mass_defect_warning)
    std::fprintf(stderr, "warning: transform mass defect %.3g\n", diag.mass_defect);
  return r;
}

inline void check_f_bounds(Interval fb)
{
  if (!(fb.lo > 0.0) || !(fb.hi >= fb.lo))
    throw InputError("f bounds need 0 < f_low <= f_high");
}

} // namespace detail

// p -> p f^2(y) G^{f^2;p}(x). Keeps the x-marginal and moves the
// conditional factor from the X-diffusion to the Y-dynamics.
inline GridDensity2D apply_T(const GridDensity2D& p, const ScalarFunction& f, Interval f_bounds)
{
  detail::check_f_bounds(f_bounds);
  if (f.is_constant())
    return p;
  const auto f2 = [&f](double y) {
    const double v = f(y);
    return v * v;
  };
  return detail::reweight_by_column(p, f2, {f_bounds.lo * f_bounds.lo, f_bounds.hi * f_bounds.hi});
}

// pt -> pt f^-2(y) G^{f^-2;pt}(x).
inline GridDensity2D apply_T_inverse(const GridDensity2D& pt, const ScalarFunction& f, Interval f_bounds)
{
  detail::check_f_bounds(f_bounds);
  if (f.is_constant())
    return pt;
  const auto f2inv = [&f](double y) {
    const double v = f(y);
    return 1.0 / (v * v);
  };
  return detail::reweight_by_column(pt, f2inv,
                                    {1.0 / (f_bounds.hi * f_bounds.hi), 1.0 / (f_bounds.lo * f_bounds.lo)});
}

// p -> f^2(y) p / int f^2 p.
inline GridDensity2D apply_independence_transform(const GridDensity2D& p, const ScalarFunction& f)
{
  if (f.is_constant())
    return p;
  const std::size_t nx = p.nx(), ny = p.ny();
  std::vector<double> f2(ny);
  for (std::size_t j = 0; j < ny; ++j) {
    const double v = f(p.y_axis().center(j));
    f2[j] = v * v;
  }
  std::vector<double> out(nx * ny);
  for (std::size_t i = 0; i < nx; ++i) {
    const auto col = p.column(i);
    for (std::size_t j = 0; j < ny; ++j)
      out[i * ny + j] = col[j] * f2[j];
  }
  GridDensity2D r(p.x_axis(), p.y_axis(), std::move(out));
  r.normalize();
  return r;
}

} // namespace condmv
