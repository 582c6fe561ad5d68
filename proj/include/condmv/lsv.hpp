#pragma once

#include <condmv/coefficients.hpp>
#include <condmv/csv.hpp>
#include <condmv/errors.hpp>
#include <condmv/particlesim.hpp>
#include <condmv/scalar_function.hpp>
#include <condmv/stationary1d.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace condmv
{

// Call prices C(T, K) on a maturity x strike lattice; zero rates and dividends.
struct CallSurface
{
  std::vector<double> maturities;
  std::vector<double> strikes;
  std::vector<double> prices; // row-major in maturity
  double spot = 1.0;

  std::size_t n_maturities() const noexcept { return maturities.size(); }
  std::size_t n_strikes() const noexcept { return strikes.size(); }
  double operator()(std::size_t m, std::size_t k) const noexcept { return prices[m * strikes.size() + k]; }

  // Shape checks plus static arbitrage: nonincreasing and convex in strike.
  void check(double tol = 1e-10) const
  {
    if (!(spot > 0.0))
      throw InputError("call surface needs a positive spot");
    if (maturities.empty() || strikes.size() < 3)
      throw InputError("call surface needs at least one maturity and three strikes");
    if (prices.size() != maturities.size() * strikes.size())
      throw InputError("call surface price matrix has the wrong size");
    for (std::size_t m = 0; m < maturities.size(); ++m)
      if (!(maturities[m] > 0.0) || (m > 0 && !(maturities[m] > maturities[m - 1])))
        throw InputError("maturities must be positive and increasing");
    for (std::size_t k = 0; k < strikes.size(); ++k)
      if (!(strikes[k] > 0.0) || (k > 0 && !(strikes[k] > strikes[k - 1])))
        throw InputError("strikes must be positive and increasing");
    for (std::size_t m = 0; m < maturities.size(); ++m)
      for (std::size_t k = 0; k < strikes.size(); ++k) {
        const double c = (*this)(m, k);
        if (!(c >= 0.0) || !std::isfinite(c))
          throw ArbitrageError(m, k, "call price is negative or non-finite");
        if (k > 0 && c > (*this)(m, k - 1) + tol)
          throw ArbitrageError(m, k, "call price increases in strike");
        if (k > 0 && k + 1 < strikes.size() && second_difference(m, k) < -tol)
          throw ArbitrageError(m, k, "call price is not convex in strike");
      }
  }

  // Central second difference in strike on a possibly nonuniform grid.
  double second_difference(std::size_t m, std::size_t k) const
  {
    const double hl = strikes[k] - strikes[k - 1], hr = strikes[k + 1] - strikes[k];
    const double cl = (*this)(m, k - 1), c = (*this)(m, k), cr = (*this)(m, k + 1);
    return 2.0 * ((cr - c) / hr - (c - cl) / hl) / (hl + hr);
  }

  void write_csv(const std::filesystem::path& path) const;
  static CallSurface read_csv(const std::filesystem::path& path, double spot);
};

struct FlatteningRegion
{
  double center = 0.0; // log-moneyness around which sigma is left untouched
  double radius = 0.0;
  double tail_slope = 0.01;
};

struct LocalVolSurface
{
  std::vector<double> maturities;
  std::vector<double> strikes;
  std::vector<double> values; // sigma_Dup, row-major in maturity
  std::vector<bool> clamped;
  double spot = 1.0;
  double vol_min = 0.01;
  double vol_max = 2.0;
  FlatteningRegion flattening;

  double operator()(std::size_t m, std::size_t k) const noexcept { return values[m * strikes.size() + k]; }

  std::size_t clamped_count() const
  {
    return static_cast<std::size_t>(std::count(clamped.begin(), clamped.end(), true));
  }

  void write_csv(const std::filesystem::path& path) const;
};

namespace detail
{

inline void write_matrix_csv(const std::filesystem::path& path, std::span<const double> rows,
                             std::span<const double> cols, std::span<const double> values)
{
  std::ofstream out(path);
  if (!out)
    throw InputError("cannot write " + path.string());
  out << "maturity\\strike";
  for (double k : cols)
    out << ',' << csv::format(k);
  out << '\n';
  for (std::size_t m = 0; m < rows.size(); ++m) {
    out << csv::format(rows[m]);
    for (std::size_t k = 0; k < cols.size(); ++k)
      out << ',' << csv::format(values[m * cols.size() + k]);
    out << '\n';
  }
}

inline double parse_double(const std::string& s, const std::filesystem::path& path)
{
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size())
      throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw InputError("malformed number '" + s + "' in " + path.string());
  }
}

} // namespace detail

inline void CallSurface::write_csv(const std::filesystem::path& path) const
{
  detail::write_matrix_csv(path, maturities, strikes, prices);
}

inline CallSurface CallSurface::read_csv(const std::filesystem::path& path, double spot)
{
  std::ifstream in(path);
  if (!in)
    throw InputError("cannot read " + path.string());
  CallSurface s;
  s.spot = spot;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#')
      continue;
    std::stringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ','))
      cells.push_back(cell);
    if (cells.size() < 2)
      throw InputError("call surface row has fewer than two cells in " + path.string());
    if (header) {
      for (std::size_t c = 1; c < cells.size(); ++c)
        s.strikes.push_back(detail::parse_double(cells[c], path));
      header = false;
      continue;
    }
    if (cells.size() != s.strikes.size() + 1)
      throw InputError("call surface row length differs from the strike header in " + path.string());
    s.maturities.push_back(detail::parse_double(cells[0], path));
    for (std::size_t c = 1; c < cells.size(); ++c)
      s.prices.push_back(detail::parse_double(cells[c], path));
  }
  return s;
}

inline void LocalVolSurface::write_csv(const std::filesystem::path& path) const
{
  detail::write_matrix_csv(path, maturities, strikes, values);
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double black_scholes_call(double spot, double strike, double maturity, double vol)
{
  if (strike <= 0.0)
    return spot;
  const double sd = vol * std::sqrt(maturity);
  if (!(sd > 0.0))
    return std::max(spot - strike, 0.0);
  const double d1 = (std::log(spot / strike) + 0.5 * sd * sd) / sd;
  return spot * normal_cdf(d1) - strike * normal_cdf(d1 - sd);
}

inline CallSurface black_scholes_surface(double spot, double vol, std::vector<double> maturities,
                                         std::vector<double> strikes)
{
  CallSurface s{std::move(maturities), std::move(strikes), {}, spot};
  for (double t : s.maturities)
    for (double k : s.strikes)
      s.prices.push_back(black_scholes_call(spot, k, t, vol));
  return s;
}

struct ForwardPdeGrid
{
  std::size_t n_strikes = 2001;  // nodes on [0, strike_max_multiple * spot]
  double strike_max_multiple = 5.0;
  double dt = 1e-3;
  std::size_t smoothing_steps = 4; // implicit Euler half-steps before Crank-Nicolson
};

// Calls under the local volatility sigma(K) by the forward equation
//   dC/dT = 1/2 sigma(K)^2 K^2 d^2C/dK^2,  C(0, K) = (spot - K)^+,
// with C(T, 0) = spot and C(T, K_max) = 0. Prices at off-node strikes are
// interpolated linearly.
template <class LocalVol>
CallSurface forward_pde_surface(double spot, const LocalVol& sigma, std::vector<double> maturities,
                                std::vector<double> strikes, const ForwardPdeGrid& g = {})
{
  const std::size_t n = g.n_strikes;
  const double kmax = g.strike_max_multiple * spot, h = kmax / static_cast<double>(n - 1);
  std::vector<double> K(n), a(n), c(n);
  for (std::size_t i = 0; i < n; ++i) {
    K[i] = h * static_cast<double>(i);
    const double s = i == 0 ? 0.0 : sigma(K[i]);
    a[i] = 0.5 * s * s * K[i] * K[i] / (h * h);
    c[i] = std::max(spot - K[i], 0.0);
  }
  // (I - theta dt A) c_new = (I + (1 - theta) dt A) c_old on interior nodes.
  std::vector<double> rhs(n), lower(n), diag(n), upper(n), cp(n), dp(n);
  auto advance = [&](double dt, double theta) {
    for (std::size_t i = 1; i + 1 < n; ++i) {
      const double lap = c[i - 1] - 2.0 * c[i] + c[i + 1];
      rhs[i] = c[i] + (1.0 - theta) * dt * a[i] * lap;
      lower[i] = -theta * dt * a[i];
      upper[i] = -theta * dt * a[i];
      diag[i] = 1.0 + 2.0 * theta * dt * a[i];
    }
    rhs[1] -= lower[1] * spot; // C(T, 0) = spot
    // Thomas algorithm on nodes 1 .. n-2
    cp[1] = upper[1] / diag[1];
    dp[1] = rhs[1] / diag[1];
    for (std::size_t i = 2; i + 1 < n; ++i) {
      const double m = diag[i] - lower[i] * cp[i - 1];
      cp[i] = upper[i] / m;
      dp[i] = (rhs[i] - lower[i] * dp[i - 1]) / m;
    }
    c[n - 2] = dp[n - 2];
    for (std::size_t i = n - 2; i-- > 1;)
      c[i] = dp[i] - cp[i] * c[i + 1];
    c[0] = spot;
    c[n - 1] = 0.0;
  };
  CallSurface s{std::move(maturities), std::move(strikes), {}, spot};
  double t = 0.0;
  std::size_t smoothing = g.smoothing_steps;
  for (double T : s.maturities) {
    while (t < T - 1e-12) {
      const double step = std::min(g.dt, T - t);
      if (smoothing > 0) {
        advance(0.5 * step, 1.0);
        advance(0.5 * step, 1.0);
        --smoothing;
      } else
        advance(step, 0.5);
      t += step;
    }
    for (double k : s.strikes) {
      const double u = k / h;
      const auto i = std::min(static_cast<std::size_t>(u), n - 2);
      const double w = u - static_cast<double>(i);
      s.prices.push_back((1.0 - w) * c[i] + w * c[i + 1]);
    }
  }
  return s;
}

struct DupireOptions
{
  double vol_min = 0.01;
  double vol_max = 2.0;
  double convexity_tol = 1e-10;
};

namespace detail
{

// Five-point central stencil where the four neighbours are equally spaced,
// three-point otherwise.
inline double strike_curvature(const CallSurface& s, std::size_t m, std::size_t k)
{
  const auto& K = s.strikes;
  if (k < 2 || k + 2 >= K.size())
    return s.second_difference(m, k);
  const double h = K[k + 1] - K[k];
  const double rel = 1e-9 * h;
  if (std::abs(K[k] - K[k - 1] - h) > rel || std::abs(K[k + 2] - K[k + 1] - h) > rel ||
      std::abs(K[k - 1] - K[k - 2] - h) > rel)
    return s.second_difference(m, k);
  const double five = (-s(m, k - 2) + 16.0 * s(m, k - 1) - 30.0 * s(m, k) + 16.0 * s(m, k + 1) - s(m, k + 2)) /
                      (12.0 * h * h);
  return five > 0.0 ? five : s.second_difference(m, k);
}

} // namespace detail

// sigma^2 = 2 dC/dT / (K^2 d^2C/dK^2). dC/dT is the forward difference to
// the next maturity and d^2C/dK^2 the central stencil averaged over the
// same two maturities; the last maturity repeats the row before it and the
// end strikes copy their neighbours. Cells outside [vol_min, vol_max] or with
// a vanishing denominator are clamped and flagged.
inline LocalVolSurface dupire_from_surface(const CallSurface& s, const DupireOptions& opt = {})
{
  s.check(opt.convexity_tol);
  if (s.n_maturities() < 2)
    throw InputError("Dupire needs at least two maturities");
  if (!(opt.vol_min > 0.0) || !(opt.vol_max > opt.vol_min))
    throw InputError("Dupire needs 0 < vol_min < vol_max");
  const std::size_t nm = s.n_maturities(), nk = s.n_strikes();
  LocalVolSurface lv;
  lv.maturities = s.maturities;
  lv.strikes = s.strikes;
  lv.spot = s.spot;
  lv.vol_min = opt.vol_min;
  lv.vol_max = opt.vol_max;
  lv.values.assign(nm * nk, 0.0);
  lv.clamped.assign(nm * nk, false);
  const double v2min = opt.vol_min * opt.vol_min, v2max = opt.vol_max * opt.vol_max;
  for (std::size_t m = 0; m + 1 < nm; ++m) {
    const double dT = s.maturities[m + 1] - s.maturities[m];
    for (std::size_t k = 1; k + 1 < nk; ++k) {
      if (s.second_difference(m, k) < -opt.convexity_tol)
        throw ArbitrageError(m, k, "negative second strike derivative");
      if (s.second_difference(m + 1, k) < -opt.convexity_tol)
        throw ArbitrageError(m + 1, k, "negative second strike derivative");
      const double d2 = 0.5 * (detail::strike_curvature(s, m, k) + detail::strike_curvature(s, m + 1, k));
      const double dt = (s(m + 1, k) - s(m, k)) / dT;
      const double K = s.strikes[k];
      double v2 = d2 > 0.0 ? 2.0 * dt / (K * K * d2) : v2max;
      const std::size_t c = m * nk + k;
      if (!(v2 >= v2min) || !(v2 <= v2max) || !std::isfinite(v2)) {
        v2 = std::clamp(std::isfinite(v2) ? v2 : v2max, v2min, v2max);
        lv.clamped[c] = true;
      }
      lv.values[c] = std::sqrt(v2);
    }
    lv.values[m * nk] = lv.values[m * nk + 1];
    lv.clamped[m * nk] = lv.clamped[m * nk + 1];
    lv.values[m * nk + nk - 1] = lv.values[m * nk + nk - 2];
    lv.clamped[m * nk + nk - 1] = lv.clamped[m * nk + nk - 2];
  }
  for (std::size_t k = 0; k < nk; ++k) {
    lv.values[(nm - 1) * nk + k] = lv.values[(nm - 2) * nk + k];
    lv.clamped[(nm - 1) * nk + k] = lv.clamped[(nm - 2) * nk + k];
  }
  return lv;
}

// Stochastic factor Z = f(Y) with dY = b2 dt + sigma2 dB.
struct VolProcess
{
  ScalarFunction b2, sigma2, f;
};

struct LsvOptions
{
  double flattening_multiple = 3.0; // radius = multiple * ATM vol * sqrt(T_max)
  double tail_slope = 0.01;
  double table_half_width = 40.0;   // log-moneyness range of the tabulated coefficients
  double table_spacing = 0.005;
};

namespace detail
{

inline std::size_t nearest_index(std::span<const double> v, double x)
{
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (std::abs(v[i] - x) < std::abs(v[best] - x))
      best = i;
  return best;
}

// Linear interpolation in strike on one maturity row; constant beyond the ends.
inline double slice_vol(const LocalVolSurface& lv, std::size_t m, double K)
{
  const auto& ks = lv.strikes;
  const std::size_t nk = ks.size();
  if (K <= ks.front())
    return lv(m, 0);
  if (K >= ks.back())
    return lv(m, nk - 1);
  const auto it = std::upper_bound(ks.begin(), ks.end(), K);
  const auto k = static_cast<std::size_t>(it - ks.begin()) - 1;
  const double w = (K - ks[k]) / (ks[k + 1] - ks[k]);
  return (1.0 - w) * lv(m, k) + w * lv(m, k + 1);
}

} // namespace detail

// Coefficients of the calibrated log-moneyness dynamics x = log(S / spot):
//   b1(x) = -1/2 sigma_Dup^2(spot e^x), sigma1(x) = sigma_Dup(spot e^x), h = f^2,
// using the maturity slice nearest to `horizon`. Beyond the flattening radius
// sigma is frozen and b1 gains the continuous tail -eps (|x| - R) sign(x).
inline CoefficientSet assemble_lsv_coefficients(LocalVolSurface& lv, const VolProcess& vp, double horizon,
                                                const LsvOptions& opt = {})
{
  const std::size_t m = detail::nearest_index(lv.maturities, horizon);
  const double atm = detail::slice_vol(lv, m, lv.spot);
  const double R = opt.flattening_multiple * atm * std::sqrt(lv.maturities.back());
  lv.flattening = {0.0, R, opt.tail_slope};
  const auto n = static_cast<std::size_t>(std::llround(2.0 * opt.table_half_width / opt.table_spacing)) + 1;
  std::vector<double> xs(n), b(n), s(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = -opt.table_half_width + opt.table_spacing * static_cast<double>(i);
    const double xc = std::clamp(x, -R, R);
    const double sig = detail::slice_vol(lv, m, lv.spot * std::exp(xc));
    xs[i] = x;
    s[i] = sig;
    b[i] = -0.5 * sig * sig - opt.tail_slope * (x - xc);
  }
  CoefficientSet cs;
  cs.b1 = ScalarFunction::tabulated(xs, std::move(b));
  cs.sigma1 = ScalarFunction::tabulated(std::move(xs), std::move(s));
  cs.b2 = vp.b2;
  cs.sigma2 = vp.sigma2;
  cs.f = vp.f;
  cs.h = ScalarFunction::square_of(vp.f);
  cs.constants = fit_constants(cs);
  cs = validated(cs);
  if (!cs.validated)
    throw ConfigError("calibrated coefficients fail the coefficient conditions: " +
                      validate_assumption_a(cs, {-10.0, 10.0}, 20001).summary());
  return cs;
}

// Particle simulation of the calibrated model started at x = 0 with the
// factor process in its stationary law.
inline SimOutput simulate_calibrated_lsv(LocalVolSurface& lv, const VolProcess& vp, SimConfig cfg,
                                         const LsvOptions& opt = {})
{
  const auto cs = assemble_lsv_coefficients(lv, vp, cfg.horizon(), opt);
  cfg.mode = CouplingMode::mckean_vlasov;
  if (cfg.init == InitKind::product_stationary) {
    const auto m2 = build_stationary_density(cs.b2, cs.sigma2, default_domain(cs.constants), cfg.marginal_grid_size);
    cfg.init = InitKind::custom;
    cfg.initial_cloud = ParticleCloud::uniform(std::vector<double>(cfg.n_particles, 0.0),
                                               sample(m2, cfg.n_particles, cfg.seed, StreamId::init_y));
  }
  cfg.burn_in_fraction = 0.0;
  return run(cs, cfg);
}

struct RepriceResult
{
  std::vector<double> strikes;
  std::vector<double> prices;
  std::vector<double> std_errors;
};

// price(K) = sum_i w_i max(spot e^{x_i} - K, 0), x the log-moneyness.
inline RepriceResult reprice(const ParticleCloud& cloud, std::span<const double> strikes, double spot)
{
  if (cloud.empty())
    throw InputError("reprice needs a nonempty cloud");
  const std::size_t n = cloud.size();
  const double bessel = n > 1 ? static_cast<double>(n) / static_cast<double>(n - 1) : 0.0;
  RepriceResult r;
  r.strikes.assign(strikes.begin(), strikes.end());
  for (double K : strikes) {
    double p = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      p += cloud.weights[i] * std::max(spot * std::exp(cloud.xs[i]) - K, 0.0);
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = std::max(spot * std::exp(cloud.xs[i]) - K, 0.0) - p;
      v += cloud.weights[i] * cloud.weights[i] * d * d;
    }
    r.prices.push_back(p);
    r.std_errors.push_back(std::sqrt(v * bessel));
  }
  return r;
}

struct RepriceRow
{
  double strike, price, std_error, reference, z_score;
};

inline std::vector<RepriceRow> compare_prices(const RepriceResult& r, std::span<const double> reference)
{
  std::vector<RepriceRow> rows;
  for (std::size_t k = 0; k < r.strikes.size(); ++k) {
    const double z = r.std_errors[k] > 0.0 ? (r.prices[k] - reference[k]) / r.std_errors[k]
                     : r.prices[k] == reference[k] ? 0.0
                                                   : std::numeric_limits<double>::infinity();
    rows.push_back({r.strikes[k], r.prices[k], r.std_errors[k], reference[k], z});
  }
  return rows;
}

inline void write_reprice_csv(const std::filesystem::path& path, std::span<const RepriceRow> rows)
{
  csv::Writer w(path);
  w.header({"strike", "price", "std_error", "reference", "z_score"});
  for (const auto& r : rows)
    w.row(r.strike, r.price, r.std_error, r.reference, r.z_score);
}

} // namespace condmv
