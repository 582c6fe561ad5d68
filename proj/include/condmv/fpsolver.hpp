#pragma once

#include <condmv/coefficients.hpp>
#include <condmv/condexp.hpp>
#include <condmv/csv.hpp>
#include <condmv/errors.hpp>
#include <condmv/grid_density.hpp>

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace condmv
{

// Regularity and tightness diagnostics of a grid density.
struct KDiagnostics
{
  double fisher_information = 0.0; // int |grad q|^2 / q
  double second_moment = 0.0;      // int (x^2 + y^2) q
  std::vector<std::pair<double, double>> marginal_floor; // (R, min of the x-marginal on [-R, R])

  double floor_at(double radius) const
  {
    for (const auto& [r, v] : marginal_floor)
      if (r == radius)
        return v;
    throw InputError("no marginal floor recorded for R = " + std::to_string(radius));
  }
};

struct PicardReport
{
  std::size_t iterations = 0; // linear solves performed
  std::vector<double> l1_deltas;
  double final_residual = 0.0; // max-norm of the transformed weak residual
  bool converged = false;
  double damping = 1.0; // relaxation in force at the end
  std::vector<KDiagnostics> k_history;
  std::vector<double> fisher_bounds; // gradient bound 2/alpha^2 int (|B|^2 + |D|^2) q per iterate
};

struct FpSolveOptions
{
  std::size_t max_iters = 50;
  double tol = 1e-12;            // L1 change between inverse-iteration steps
  double relative_shift = 1e-10; // shift as a fraction of the largest diagonal entry
};

struct PicardOptions
{
  double tol = 1e-6;
  std::size_t max_iters = 200;
  double damping = 1.0;
  bool adaptive_damping = true; // drop to reduced_damping after two successive increases
  double reduced_damping = 0.3;
  std::optional<MollifierConfig> mollifier;
  FpSolveOptions solver;
};

// Values in [-negative_clip, 0) are set to zero; anything below is an error.
inline constexpr double negative_clip = 1e-10;

namespace detail
{

inline CondExpectationField constant_field(const GridAxis& x, double g, PsiBounds b)
{
  std::vector<double> grid = x.centers();
  std::vector<double> raw(grid.size(), g);
  std::vector<bool> inherited(grid.size(), false);
  return finish_field(std::move(grid), std::move(raw), std::move(inherited), b, EstimatorMethod::exact_from_grid);
}

inline double inv_square(double v) { return 1.0 / (v * v); }

inline PsiBounds hf2inv_bounds(const AssumptionConstants& k)
{
  return {k.h_low / (k.f_high * k.f_high), k.h_high / (k.f_low * k.f_low)};
}

inline PsiBounds f2inv_bounds(const AssumptionConstants& k)
{
  return {1.0 / (k.f_high * k.f_high), 1.0 / (k.f_low * k.f_low)};
}

} // namespace detail

// G^{h f^-2; q} and G^{f^-2; q} by column quadrature; constant ratios are
// filled in exactly.
inline TransformedFields transformed_fields(const GridDensity2D& q, const CoefficientSet& cs,
                                            const std::optional<MollifierConfig>& mollifier = std::nullopt)
{
  const auto& k = cs.constants;
  const auto ba = detail::hf2inv_bounds(k), bb = detail::f2inv_bounds(k);
  const auto& f = cs.f;
  const auto& h = cs.h;
  TransformedFields t;
  const bool f_const = f.is_constant();
  if (cs.h_is_f_squared())
    t.g_hf2inv = detail::constant_field(q.x_axis(), 1.0, ba);
  else if (f_const && h.is_constant())
    t.g_hf2inv = detail::constant_field(q.x_axis(), 1.0 / (h(0.0) * detail::inv_square(f(0.0))), ba);
  else {
    t.g_hf2inv = exact_G_from_grid(q, [&](double y) { return h(y) * detail::inv_square(f(y)); }, ba);
    if (mollifier)
      t.g_hf2inv = mollify_G(t.g_hf2inv, *mollifier);
  }
  if (f_const)
    t.g_f2inv = detail::constant_field(q.x_axis(), f(0.0) * f(0.0), bb);
  else {
    t.g_f2inv = exact_G_from_grid(q, [&](double y) { return detail::inv_square(f(y)); }, bb);
    if (mollifier)
      t.g_f2inv = mollify_G(t.g_f2inv, *mollifier);
  }
  return t;
}

// G^{h; p} and G^{f^2; p} of the original equation.
struct OriginalFields
{
  CondExpectationField g_h;
  CondExpectationField g_f2;
};

inline OriginalFields original_fields(const GridDensity2D& p, const CoefficientSet& cs)
{
  const auto& k = cs.constants;
  const PsiBounds bh{k.h_low, k.h_high}, bf{k.f_low * k.f_low, k.f_high * k.f_high};
  OriginalFields o;
  o.g_h = cs.h.is_constant() ? detail::constant_field(p.x_axis(), 1.0 / cs.h(0.0), bh)
                             : exact_G_from_grid(p, cs.h, bh);
  o.g_f2 = cs.f.is_constant() ? detail::constant_field(p.x_axis(), 1.0 / (cs.f(0.0) * cs.f(0.0)), bf)
                              : exact_G_from_grid(p, [&](double y) { return cs.f(y) * cs.f(y); }, bf);
  return o;
}

// Finite-volume form of the stationary operator with frozen fields:
//   (L p)_c = -div J,  J_x = B1 p - (1/2) d_x(sigma1^2 p),
//   J_y = B2 p - (1/2) d_y(sigma2^2 f^-2 G^{f^-2} p),
// with central face averages and zero flux through the outer boundary.
// Unknowns are ordered as in GridDensity2D (row-major in x). Columns sum to 0.
inline Eigen::SparseMatrix<double> assemble_fp_operator(const CoefficientSet& cs, const TransformedFields& g,
                                                        const GridAxis& x, const GridAxis& y)
{
  const std::size_t nx = x.n, ny = y.n;
  const double dx = x.spacing(), dy = y.spacing();
  std::vector<double> a1(nx), gb(nx), b1f(nx + 1), gaf(nx + 1);
  for (std::size_t i = 0; i < nx; ++i) {
    const double xc = x.center(i);
    a1[i] = cs.sigma1(xc) * cs.sigma1(xc);
    gb[i] = g.g_f2inv(xc);
  }
  for (std::size_t i = 1; i < nx; ++i) {
    b1f[i] = cs.b1(x.face(i));
    gaf[i] = g.g_hf2inv(x.face(i));
  }
  std::vector<double> hf2c(ny), s2f2c(ny), b2f2f(ny + 1);
  for (std::size_t j = 0; j < ny; ++j) {
    const double yc = y.center(j), fi = detail::inv_square(cs.f(yc));
    hf2c[j] = cs.h(yc) * fi;
    s2f2c[j] = cs.sigma2(yc) * cs.sigma2(yc) * fi;
  }
  for (std::size_t j = 1; j < ny; ++j) {
    const double yf = y.face(j);
    b2f2f[j] = cs.b2(yf) * detail::inv_square(cs.f(yf));
  }

  using Triplet = Eigen::Triplet<double>;
  std::vector<Triplet> t;
  t.reserve(8 * nx * ny);
  auto add_flux = [&t](std::size_t lo, std::size_t hi, double c_lo, double c_hi, double inv_h) {
    // flux F = c_lo p_lo + c_hi p_hi leaves `lo` and enters `hi`
    const auto l = static_cast<int>(lo), r = static_cast<int>(hi);
    t.emplace_back(l, l, -c_lo * inv_h);
    t.emplace_back(l, r, -c_hi * inv_h);
    t.emplace_back(r, l, c_lo * inv_h);
    t.emplace_back(r, r, c_hi * inv_h);
  };
  for (std::size_t i = 0; i + 1 < nx; ++i)
    for (std::size_t j = 0; j < ny; ++j) {
      const double b = b1f[i + 1] * hf2c[j] * gaf[i + 1];
      add_flux(i * ny + j, (i + 1) * ny + j, 0.5 * b + 0.5 * a1[i] / dx, 0.5 * b - 0.5 * a1[i + 1] / dx, 1.0 / dx);
    }
  for (std::size_t i = 0; i < nx; ++i)
    for (std::size_t j = 0; j + 1 < ny; ++j) {
      const double b = b2f2f[j + 1] * gb[i];
      const double a_lo = s2f2c[j] * gb[i], a_hi = s2f2c[j + 1] * gb[i];
      add_flux(i * ny + j, i * ny + j + 1, 0.5 * b + 0.5 * a_lo / dy, 0.5 * b - 0.5 * a_hi / dy, 1.0 / dy);
    }
  Eigen::SparseMatrix<double> L(static_cast<int>(nx * ny), static_cast<int>(nx * ny));
  L.setFromTriplets(t.begin(), t.end());
  return L;
}

// Normalized nonnegative null vector of the discrete operator by inverse
// iteration with a small shift. `warm` seeds the iteration.
inline GridDensity2D solve_linear_fp(const CoefficientSet& cs, const TransformedFields& g, const GridAxis& x,
                                     const GridAxis& y, const FpSolveOptions& opt = {},
                                     const GridDensity2D* warm = nullptr)
{
  for (const auto* field : {&g.g_hf2inv, &g.g_f2inv})
    for (double v : field->values)
      if (!(v > 0.0) || !std::isfinite(v))
        throw InputError("solve_linear_fp needs positive finite fields");
  const Eigen::SparseMatrix<double> L = assemble_fp_operator(cs, g, x, y);
  const auto n = L.rows();
  const double area = x.spacing() * y.spacing();
  double diag_max = 0.0;
  for (int c = 0; c < n; ++c)
    diag_max = std::max(diag_max, std::abs(L.coeff(c, c)));
  Eigen::SparseMatrix<double> M = L;
  const double shift = opt.relative_shift * diag_max;
  for (int c = 0; c < n; ++c)
    M.coeffRef(c, c) -= shift;
  M.makeCompressed();
  Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> lu;
  lu.compute(M);
  if (lu.info() != Eigen::Success)
    throw SolverError(std::nan(""), "sparse LU factorization of the Fokker-Planck operator failed");

  Eigen::VectorXd v(n);
  if (warm && warm->x_axis() == x && warm->y_axis() == y)
    for (int c = 0; c < n; ++c)
      v[c] = warm->values()[static_cast<std::size_t>(c)];
  else
    v.setConstant(1.0 / (area * static_cast<double>(n)));
  bool done = false;
  for (std::size_t it = 0; it < opt.max_iters && !done; ++it) {
    Eigen::VectorXd w = lu.solve(v);
    const double s = w.sum() * area;
    if (!(std::abs(s) > 0.0) || !std::isfinite(s))
      throw SolverError(std::nan(""), "inverse iteration produced a degenerate vector");
    w /= s;
    done = (w - v).cwiseAbs().sum() * area < opt.tol;
    v = std::move(w);
  }
  if (!done)
    throw SolverError((L * v).cwiseAbs().sum() * area,
                      "inverse iteration did not converge in " + std::to_string(opt.max_iters) + " steps");

  std::vector<double> out(static_cast<std::size_t>(n));
  for (int c = 0; c < n; ++c) {
    double val = v[c];
    if (val < -negative_clip)
      throw DiscretizationError("Fokker-Planck solution has a negative entry " + csv::format(val) +
                                " at cell " + std::to_string(c));
    out[static_cast<std::size_t>(c)] = std::max(val, 0.0);
  }
  GridDensity2D p(x, y, std::move(out));
  p.normalize();
  return p;
}

inline GridDensity2D solve_linear_fp(const CoefficientSet& cs, const CondExpectationField& g_hf2inv,
                                     const CondExpectationField& g_f2inv, const GridAxis& x, const GridAxis& y,
                                     const FpSolveOptions& opt = {})
{
  return solve_linear_fp(cs, TransformedFields{g_hf2inv, g_f2inv}, x, y, opt);
}

// phi(x, y) = beta((x - cx) / wx) beta((y - cy) / wy), beta(u) = (1 - u^2)^4 on |u| < 1.
struct BumpTestFunction
{
  double cx = 0.0, cy = 0.0, wx = 1.0, wy = 1.0;

  struct Jet
  {
    double v = 0.0, d1 = 0.0, d2 = 0.0;
  };

  static Jet bump(double u)
  {
    if (std::abs(u) >= 1.0)
      return {};
    const double s = 1.0 - u * u, s2 = s * s;
    return {s2 * s2, -8.0 * u * s2 * s, -8.0 * s2 * s + 48.0 * u * u * s2};
  }

  Jet x_jet(double x) const
  {
    auto j = bump((x - cx) / wx);
    return {j.v, j.d1 / wx, j.d2 / (wx * wx)};
  }

  Jet y_jet(double y) const
  {
    auto j = bump((y - cy) / wy);
    return {j.v, j.d1 / wy, j.d2 / (wy * wy)};
  }
};

// 4 x 5 centres over the bulk of the catalog densities; widths alternate
// between 1.0 and 1.6 in a checkerboard.
inline std::vector<BumpTestFunction> test_dictionary()
{
  std::vector<BumpTestFunction> d;
  const std::array<double, 4> cx{-1.5, -0.5, 0.5, 1.5};
  const std::array<double, 5> cy{-2.0, -1.0, 0.0, 1.0, 2.0};
  for (std::size_t a = 0; a < cx.size(); ++a)
    for (std::size_t b = 0; b < cy.size(); ++b) {
      const double w = (a + b) % 2 == 0 ? 1.0 : 1.6;
      d.push_back({cx[a], cy[b], w, w});
    }
  return d;
}

enum class WeakEquation
{
  original,    // generator of the conditional system acting on p
  transformed, // generator of the transformed system acting on Tp
};

// int (A11 phi_xx + A22 phi_yy + B1 phi_x + B2 phi_y) q for every dictionary
// function, with the conditional fields taken from q itself.
inline std::vector<double> weak_residual(const GridDensity2D& q, const CoefficientSet& cs, WeakEquation eq,
                                         std::span<const BumpTestFunction> dictionary)
{
  const std::size_t nx = q.nx(), ny = q.ny();
  std::vector<double> a11(nx), bx(nx), gx1(nx), gx2(nx);
  std::vector<double> a22(ny), by(ny), wy1(ny), wy2(ny);
  // Coefficients factor as A11 = a11(x) gx2(x) wy2(y) etc.; keep the pieces separate.
  const GridAxis& X = q.x_axis();
  const GridAxis& Y = q.y_axis();
  if (eq == WeakEquation::transformed) {
    const auto g = transformed_fields(q, cs);
    for (std::size_t i = 0; i < nx; ++i) {
      const double x = X.center(i);
      a11[i] = 0.5 * cs.sigma1(x) * cs.sigma1(x);
      bx[i] = cs.b1(x);
      gx1[i] = g.g_hf2inv.values[i];
      gx2[i] = g.g_f2inv.values[i];
    }
    for (std::size_t j = 0; j < ny; ++j) {
      const double y = Y.center(j), fi = detail::inv_square(cs.f(y));
      a22[j] = 0.5 * cs.sigma2(y) * cs.sigma2(y) * fi;
      by[j] = cs.b2(y) * fi;
      wy1[j] = cs.h(y) * fi;
      wy2[j] = 1.0;
    }
  } else {
    const auto g = original_fields(q, cs);
    for (std::size_t i = 0; i < nx; ++i) {
      const double x = X.center(i);
      a11[i] = 0.5 * cs.sigma1(x) * cs.sigma1(x);
      bx[i] = cs.b1(x);
      gx1[i] = g.g_h.values[i];
      gx2[i] = g.g_f2.values[i];
    }
    for (std::size_t j = 0; j < ny; ++j) {
      const double y = Y.center(j);
      a22[j] = 0.5 * cs.sigma2(y) * cs.sigma2(y);
      by[j] = cs.b2(y);
      wy1[j] = cs.h(y);
      wy2[j] = cs.f(y) * cs.f(y);
    }
  }
  const double area = q.cell_area();
  std::vector<double> out;
  out.reserve(dictionary.size());
  std::vector<BumpTestFunction::Jet> jx(nx), jy(ny);
  for (const auto& phi : dictionary) {
    for (std::size_t i = 0; i < nx; ++i)
      jx[i] = phi.x_jet(X.center(i));
    for (std::size_t j = 0; j < ny; ++j)
      jy[j] = phi.y_jet(Y.center(j));
    double acc = 0.0;
    for (std::size_t i = 0; i < nx; ++i) {
      if (jx[i].v == 0.0 && jx[i].d1 == 0.0 && jx[i].d2 == 0.0)
        continue;
      const auto col = q.column(i);
      double s = 0.0;
      for (std::size_t j = 0; j < ny; ++j) {
        if (jy[j].v == 0.0 && jy[j].d1 == 0.0 && jy[j].d2 == 0.0)
          continue;
        double integrand;
        if (eq == WeakEquation::transformed)
          integrand = a11[i] * jx[i].d2 * jy[j].v + a22[j] * gx2[i] * jx[i].v * jy[j].d2 +
                      bx[i] * wy1[j] * gx1[i] * jx[i].d1 * jy[j].v + by[j] * gx2[i] * jx[i].v * jy[j].d1;
        else
          integrand = a11[i] * wy2[j] * gx2[i] * jx[i].d2 * jy[j].v + a22[j] * jx[i].v * jy[j].d2 +
                      bx[i] * wy1[j] * gx1[i] * jx[i].d1 * jy[j].v + by[j] * jx[i].v * jy[j].d1;
        s += integrand * col[j];
      }
      acc += s;
    }
    out.push_back(acc * area);
  }
  return out;
}

inline std::vector<double> weak_residual(const GridDensity2D& q, const CoefficientSet& cs, WeakEquation eq)
{
  const auto d = test_dictionary();
  return weak_residual(q, cs, eq, d);
}

inline double max_abs(std::span<const double> v)
{
  double m = 0.0;
  for (double a : v)
    m = std::max(m, std::abs(a));
  return m;
}

// Discretization-error estimate from residual vectors on a grid and on the
// grid with twice the spacing.
inline double refinement_error_estimate(std::span<const double> fine, std::span<const double> coarse)
{
  if (fine.size() != coarse.size())
    throw InputError("residual vectors differ in length");
  double m = 0.0;
  for (std::size_t k = 0; k < fine.size(); ++k)
    m = std::max(m, std::abs(fine[k] - coarse[k]));
  return m;
}

inline KDiagnostics k_diagnostics(const GridDensity2D& q)
{
  const std::size_t nx = q.nx(), ny = q.ny();
  const double dx = q.dx(), dy = q.dy(), area = q.cell_area();
  double qmax = 0.0;
  for (double v : q.values())
    qmax = std::max(qmax, v);
  const double floor = column_mass_floor * qmax;
  KDiagnostics k;
  auto diff = [](double lo, double hi, double h) { return (hi - lo) / h; };
  for (std::size_t i = 0; i < nx; ++i)
    for (std::size_t j = 0; j < ny; ++j) {
      const double v = q(i, j);
      const double x = q.x_axis().center(i), y = q.y_axis().center(j);
      k.second_moment += (x * x + y * y) * v * area;
      if (v < floor)
        continue;
      const double gx = i == 0        ? diff(q(0, j), q(1, j), dx)
                        : i + 1 == nx ? diff(q(nx - 2, j), q(nx - 1, j), dx)
                                      : diff(q(i - 1, j), q(i + 1, j), 2.0 * dx);
      const double gy = j == 0        ? diff(q(i, 0), q(i, 1), dy)
                        : j + 1 == ny ? diff(q(i, ny - 2), q(i, ny - 1), dy)
                                      : diff(q(i, j - 1), q(i, j + 1), 2.0 * dy);
      k.fisher_information += (gx * gx + gy * gy) / v * area;
    }
  const auto m = q.x_marginal();
  for (double r : {1.0, 2.0, 4.0}) {
    double lo = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < nx; ++i)
      if (std::abs(q.x_axis().center(i)) <= r)
        lo = std::min(lo, m[i]);
    k.marginal_floor.emplace_back(r, std::isfinite(lo) ? lo : 0.0);
  }
  return k;
}

// Right-hand side of the gradient bound for a density of the transformed
// equation: 2 / alpha^2 int (|B|^2 + |D|^2) q, alpha the ellipticity constant.
inline double fisher_information_bound(const GridDensity2D& q, const CoefficientSet& cs, const TransformedFields& g)
{
  const auto& k = cs.constants;
  const double alpha = 0.5 * std::min(k.sigma_low * k.sigma_low,
                                      k.sigma_low * k.sigma_low / (k.f_high * k.f_high) * k.f_low * k.f_low);
  double acc = 0.0;
  for (std::size_t i = 0; i < q.nx(); ++i) {
    const double x = q.x_axis().center(i);
    const double ga = g.g_hf2inv(x), gb = g.g_f2inv(x);
    const double s1 = cs.sigma1(x), d1 = s1 * cs.sigma1.derivative(x), b1 = cs.b1(x);
    for (std::size_t j = 0; j < q.ny(); ++j) {
      const double y = q.y_axis().center(j);
      const double f = cs.f(y), fi = detail::inv_square(f), s2 = cs.sigma2(y);
      const double B1 = b1 * cs.h(y) * fi * ga, B2 = cs.b2(y) * fi * gb;
      const double D2 = (s2 * cs.sigma2.derivative(y) * fi - s2 * s2 * fi / f * cs.f.derivative(y)) * gb;
      acc += (B1 * B1 + B2 * B2 + d1 * d1 + D2 * D2) * q(i, j);
    }
  }
  return 2.0 / (alpha * alpha) * acc * q.cell_area();
}

struct PicardResult
{
  GridDensity2D density;
  PicardReport report;
};

// q <- (1 - w) q + w Phi(q), Phi(q) the solution of the linear equation with
// the fields of q. When the fields of Phi(q) equal those of q, Phi(q) is a
// fixed point and the iteration stops with a recorded zero change.
inline PicardResult picard_iterate(const CoefficientSet& cs, const GridDensity2D& initial, const PicardOptions& opt = {})
{
  initial.check_valid(1e-10);
  if (!(opt.damping > 0.0 && opt.damping <= 1.0) || !(opt.reduced_damping > 0.0 && opt.reduced_damping <= 1.0))
    throw ConfigError("Picard damping must lie in (0, 1]");
  if (!(opt.tol > 0.0))
    throw ConfigError("Picard tolerance must be positive");
  GridDensity2D q = initial;
  PicardReport rep;
  double w = opt.damping;
  auto fields = transformed_fields(q, cs, opt.mollifier);
  for (std::size_t it = 0; it < opt.max_iters; ++it) {
    GridDensity2D next = solve_linear_fp(cs, fields, q.x_axis(), q.y_axis(), opt.solver, &q);
    ++rep.iterations;
    auto next_fields = transformed_fields(next, cs, opt.mollifier);
    const bool fixed =
        next_fields.g_hf2inv.values == fields.g_hf2inv.values && next_fields.g_f2inv.values == fields.g_f2inv.values;
    if (w < 1.0) {
      std::vector<double> mix(q.values().size());
      for (std::size_t c = 0; c < mix.size(); ++c)
        mix[c] = (1.0 - w) * q.values()[c] + w * next.values()[c];
      next = GridDensity2D(q.x_axis(), q.y_axis(), std::move(mix));
      next.normalize();
      next_fields = transformed_fields(next, cs, opt.mollifier);
    }
    const double delta = l1_distance(next, q);
    rep.l1_deltas.push_back(delta);
    rep.k_history.push_back(k_diagnostics(next));
    rep.fisher_bounds.push_back(fisher_information_bound(next, cs, next_fields));
    q = std::move(next);
    fields = std::move(next_fields);
    if (delta < opt.tol) {
      rep.converged = true;
      break;
    }
    if (fixed && w == 1.0) {
      rep.l1_deltas.push_back(0.0);
      rep.converged = true;
      break;
    }
    const auto& d = rep.l1_deltas;
    if (opt.adaptive_damping && d.size() >= 3 && d[d.size() - 1] > d[d.size() - 2] &&
        d[d.size() - 2] > d[d.size() - 3])
      w = std::min(w, opt.reduced_damping);
  }
  rep.damping = w;
  rep.final_residual = max_abs(weak_residual(q, cs, WeakEquation::transformed));
  return {std::move(q), std::move(rep)};
}

} // namespace condmv
