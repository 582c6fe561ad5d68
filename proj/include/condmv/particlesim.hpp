#pragma once

#include <condmv/coefficients.hpp>
#include <condmv/condexp.hpp>
#include <condmv/csv.hpp>
#include <condmv/errors.hpp>
#include <condmv/rng.hpp>
#include <condmv/stationary1d.hpp>
#include <condmv/stats.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace condmv
{

enum class EstimatorKind
{
  binning,
  kernel_regression,
};

struct EstimatorConfig
{
  EstimatorKind kind = EstimatorKind::binning;
  std::size_t n_bins = 50;    // bins, or regression nodes for the kernel estimator
  double min_count = 20.0;
  double bandwidth = 0.0;     // 0 selects the rule of thumb

  friend bool operator==(const EstimatorConfig&, const EstimatorConfig&) = default;
};

enum class CouplingMode
{
  mckean_vlasov, // conditional coefficients of the original system
  transformed,   // the Y-dynamics carry the conditional factors
  frozen_g,      // transformed form with supplied fields
  decoupled,     // f and h frozen to constants
};

enum class InitKind
{
  product_stationary,
  custom,
};

using FrozenFields = TransformedFields;

struct SimConfig
{
  std::size_t n_particles = 10'000;
  double dt = 1e-3;
  std::size_t n_steps = 1000;
  std::uint64_t seed = 1;
  EstimatorConfig estimator;
  CouplingMode mode = CouplingMode::mckean_vlasov;
  InitKind init = InitKind::product_stationary;
  std::optional<ParticleCloud> initial_cloud;
  std::optional<FrozenFields> frozen;
  std::vector<double> snapshot_times; // empty: final time only
  double burn_in_fraction = 0.5;
  std::size_t histogram_bins = 10;    // per axis, equal-probability under the marginals
  std::size_t marginal_grid_size = 4097;
  std::size_t clock_refinement = 2;   // time change: X clock steps per dt
  bool allow_large_dt = false;
  bool allow_unvalidated = false;

  double horizon() const noexcept { return dt * static_cast<double>(n_steps); }
};

struct SnapshotDiagnostics
{
  double time = 0.0;
  double second_moment = 0.0;
  double second_moment_se = 0.0;
  double xy_correlation = 0.0;
  double hist_l1_product = 0.0; // empirical joint vs product of empirical marginals
  double w1_x = 0.0;
  double w1_y = 0.0;
  bool burn_in = false;
};

struct TimeChangeStats
{
  double min_increment = 0.0;
  double max_increment = 0.0;
  double mean_final_tau = 0.0;
};

struct SimOutput
{
  ParticleCloud initial_cloud;
  ParticleCloud final_cloud;
  std::vector<double> snapshot_times;
  std::vector<ParticleCloud> snapshots;
  std::vector<SnapshotDiagnostics> diagnostics;
  std::optional<TimeChangeStats> time_change;

  void write_snapshot_csv(std::size_t k, const std::filesystem::path& path) const
  {
    csv::Writer w(path);
    w.comment("time=" + csv::format(snapshot_times.at(k)));
    w.header({"particle_index", "x", "y", "weight"});
    const auto& c = snapshots[k];
    for (std::size_t i = 0; i < c.size(); ++i)
      w.row(i, c.xs[i], c.ys[i], c.weights[i]);
  }

  void write_diagnostics_csv(const std::filesystem::path& path) const
  {
    csv::Writer w(path);
    w.header({"time", "second_moment", "xy_correlation", "w1_x", "w1_y", "second_moment_se", "hist_l1_product",
              "burn_in"});
    for (const auto& d : diagnostics)
      w.row(d.time, d.second_moment, d.xy_correlation, d.w1_x, d.w1_y, d.second_moment_se, d.hist_l1_product,
            d.burn_in ? 1 : 0);
  }
};

// Constants of the frozen-coefficient system and the resulting bound on
// E[X^2 + Y^2] in stationarity.
struct MomentBound
{
  double c_bar = 0.0;
  double C1_bar = 0.0;
  double two_sigma = 0.0; // 2 Sigma: upper bound on both squared diffusions
  double value = 0.0;     // (2 Sigma + C1_bar) / c_bar
};

// With the drift ratio in [r_min, r_max] = [h_low/h_high, h_high/h_low] and
// f^2 G^{f^2} in [f_low^2/f_high^2, f_high^2/f_low^2]:
//   x b1 r <= -c r_min x^2 + C1 r_max.
inline MomentBound moment_bound(const CoefficientSet& cs)
{
  const auto& k = cs.constants;
  const double r_min = k.h_low / k.h_high, r_max = k.h_high / k.h_low;
  MomentBound m;
  m.c_bar = k.c * r_min;
  m.C1_bar = k.C1 * r_max;
  const double s2 = k.sigma_high * k.sigma_high;
  m.two_sigma = std::max(s2 * (k.f_high * k.f_high) / (k.f_low * k.f_low), s2);
  m.value = (m.two_sigma + m.C1_bar) / m.c_bar;
  return m;
}

namespace detail
{

inline constexpr std::size_t reduction_chunk = 8192;

inline void check_sim_config(const CoefficientSet& cs, const SimConfig& cfg)
{
  if (cfg.n_particles < 1)
    throw ConfigError("simulation needs at least one particle");
  if (!(cfg.dt > 0.0) || !std::isfinite(cfg.dt))
    throw ConfigError("simulation needs dt > 0");
  if (cfg.n_steps < 1)
    throw ConfigError("simulation needs n_steps >= 1");
  const double cap = 0.01 / (cs.constants.sigma_high * cs.constants.sigma_high);
  if (cfg.dt > cap && !cfg.allow_large_dt)
    throw ConfigError("dt = " + csv::format(cfg.dt) + " exceeds the stability cap 0.01/sigma_high^2 = " +
                      csv::format(cap));
  if (!cs.validated && !cfg.allow_unvalidated)
    throw ValidationError("coefficient set has not passed the coefficient condition check");
  for (double t : cfg.snapshot_times)
    if (t < 0.0 || t > cfg.horizon() * (1.0 + 1e-12))
      throw ConfigError("snapshot time " + csv::format(t) + " lies outside [0, horizon]");
  if (cfg.estimator.n_bins < 2)
    throw ConfigError("estimator needs at least two bins");
  if (cfg.estimator.min_count < 1.0)
    throw ConfigError("estimator min_count must be >= 1");
  if (cfg.estimator.bandwidth < 0.0)
    throw ConfigError("estimator bandwidth must be >= 0");
  if (cfg.burn_in_fraction < 0.0 || cfg.burn_in_fraction >= 1.0)
    throw ConfigError("burn_in_fraction must lie in [0, 1)");
  if (cfg.histogram_bins < 2)
    throw ConfigError("histogram needs at least two bins per axis");
  if (cfg.clock_refinement < 1)
    throw ConfigError("clock_refinement must be >= 1");
  if (cfg.mode == CouplingMode::frozen_g && !cfg.frozen)
    throw ConfigError("frozen-G mode needs supplied fields");
  if (cfg.init == InitKind::custom && !cfg.initial_cloud)
    throw ConfigError("custom initialization needs an initial cloud");
}

inline std::size_t step_of(double t, double dt)
{
  return static_cast<std::size_t>(std::llround(t / dt));
}

// Snapshot steps in increasing order; the final step is always included.
inline std::vector<std::size_t> snapshot_steps(const SimConfig& cfg)
{
  std::vector<std::size_t> s;
  for (double t : cfg.snapshot_times)
    s.push_back(std::min(step_of(t, cfg.dt), cfg.n_steps));
  if (s.empty())
    s.push_back(cfg.n_steps);
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

// Interpolation on a uniform field, constant beyond the end nodes.
class UniformLookup
{
public:
  explicit UniformLookup(const CondExpectationField& g) : v_(g.values)
  {
    lo_ = g.grid.front();
    n_ = g.grid.size();
    const double h = n_ > 1 ? (g.grid.back() - g.grid.front()) / static_cast<double>(n_ - 1) : 1.0;
    inv_h_ = 1.0 / h;
    uniform_ = g.uniform_grid() || n_ == 1;
    field_ = &g;
  }

  double operator()(double x) const
  {
    if (!uniform_)
      return (*field_)(x);
    if (n_ == 1)
      return v_[0];
    const double t = (x - lo_) * inv_h_;
    if (!(t > 0.0))
      return v_.front();
    if (t >= static_cast<double>(n_ - 1))
      return v_.back();
    const auto k = static_cast<std::size_t>(t);
    const double u = t - static_cast<double>(k);
    return v_[k] + u * (v_[k + 1] - v_[k]);
  }

private:
  std::span<const double> v_;
  const CondExpectationField* field_ = nullptr;
  double lo_ = 0.0, inv_h_ = 1.0;
  std::size_t n_ = 1;
  bool uniform_ = true;
};

// Both conditional fields from one pass over uniformly weighted particles.
// Bins span [min x, max x]; partial sums run over fixed chunks.
inline std::pair<CondExpectationField, CondExpectationField>
binned_pair(std::span<const double> xs, std::span<const double> psi_a, PsiBounds ba, std::span<const double> psi_b,
            PsiBounds bb, const EstimatorConfig& ec)
{
  const std::size_t n = xs.size(), nb = ec.n_bins;
  double lo = xs[0], hi = xs[0];
  for (double x : xs) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  if (!(hi > lo))
    hi = lo + 1.0;
  std::vector<double> edges(nb + 1);
  for (std::size_t k = 0; k <= nb; ++k)
    edges[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(nb);
  const BinLocator locate(edges);

  const std::size_t chunks = (n + reduction_chunk - 1) / reduction_chunk;
  std::vector<double> part(chunks * 3 * nb, 0.0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(chunks); ++c) {
    double* cnt = part.data() + static_cast<std::size_t>(c) * 3 * nb;
    double* sa = cnt + nb;
    double* sb = sa + nb;
    const std::size_t begin = static_cast<std::size_t>(c) * reduction_chunk;
    const std::size_t end = std::min(n, begin + reduction_chunk);
    for (std::size_t i = begin; i < end; ++i) {
      const std::size_t k = locate(xs[i]);
      cnt[k] += 1.0;
      sa[k] += psi_a[i];
      sb[k] += psi_b[i];
    }
  }
  std::vector<double> cnt(nb, 0.0), sa(nb, 0.0), sb(nb, 0.0);
  for (std::size_t c = 0; c < chunks; ++c)
    for (std::size_t k = 0; k < nb; ++k) {
      cnt[k] += part[c * 3 * nb + k];
      sa[k] += part[c * 3 * nb + nb + k];
      sb[k] += part[c * 3 * nb + 2 * nb + k];
    }
  std::vector<double> grid(nb), ra(nb, 0.0), rb(nb, 0.0);
  std::vector<bool> da(nb, false), db(nb, false);
  for (std::size_t k = 0; k < nb; ++k) {
    grid[k] = 0.5 * (edges[k] + edges[k + 1]);
    if (cnt[k] >= ec.min_count) {
      if (sa[k] > 0.0) {
        ra[k] = cnt[k] / sa[k];
        da[k] = true;
      }
      if (sb[k] > 0.0) {
        rb[k] = cnt[k] / sb[k];
        db[k] = true;
      }
    }
  }
  inherit_nearest(ra, da, "particle binning");
  inherit_nearest(rb, db, "particle binning");
  return {finish_field(grid, std::move(ra), std::move(da), ba, EstimatorMethod::binning),
          finish_field(grid, std::move(rb), std::move(db), bb, EstimatorMethod::binning)};
}

inline std::pair<CondExpectationField, CondExpectationField>
estimate_pair(std::span<const double> xs, std::span<const double> psi_a, PsiBounds ba, std::span<const double> psi_b,
              PsiBounds bb, const EstimatorConfig& ec)
{
  if (ec.kind == EstimatorKind::binning)
    return binned_pair(xs, psi_a, ba, psi_b, bb, ec);
  const std::vector<double> w(xs.size(), 1.0 / static_cast<double>(xs.size()));
  const double bw = ec.bandwidth > 0.0 ? ec.bandwidth : rule_of_thumb_bandwidth(xs, w);
  const auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
  std::vector<double> grid(ec.n_bins);
  for (std::size_t k = 0; k < grid.size(); ++k)
    grid[k] = *lo + (*hi - *lo) * static_cast<double>(k) / static_cast<double>(grid.size() - 1);
  return {estimate_G_kernel(xs, w, psi_a, ba, grid, bw), estimate_G_kernel(xs, w, psi_b, bb, grid, bw)};
}

inline PsiBounds square_bounds(double lo, double hi) { return {lo * lo, hi * hi}; }

} // namespace detail

// Euler-Maruyama kernel for one step of every particle, given the standard
// normals xi (X-noise) and eta (Y-noise). Conditional fields are estimated
// from (xs, ys) before any particle moves.
class ParticleStepper
{
public:
  ParticleStepper(const CoefficientSet& cs, const SimConfig& cfg) : cs_(cs), cfg_(cfg)
  {
    const auto& k = cs.constants;
    r_lo_ = k.h_low / k.h_high;
    r_hi_ = k.h_high / k.h_low;
    h_const_ = cs.h.is_constant();
    f_const_ = cs.f.is_constant();
    h_is_f2_ = cs.h_is_f_squared();
  }

  // Advances in place; `step_index` only labels errors.
  void advance(std::vector<double>& xs, std::vector<double>& ys, std::span<const double> xi,
               std::span<const double> eta, std::size_t step_index)
  {
    const std::size_t n = xs.size();
    resize(n);
    cs_.b1.eval(xs, b1_);
    cs_.sigma1.eval(xs, s1_);
    cs_.b2.eval(ys, b2_);
    cs_.sigma2.eval(ys, s2_);
    const double dt = cfg_.dt, sq = std::sqrt(dt);

    switch (cfg_.mode) {
    case CouplingMode::decoupled:
      for (std::size_t i = 0; i < n; ++i) {
        drift_x_[i] = 1.0;
        diff_x_[i] = 1.0;
        drift_y_[i] = 1.0;
        diff_y_[i] = 1.0;
      }
      break;
    case CouplingMode::mckean_vlasov: original_factors(xs, ys); break;
    case CouplingMode::transformed: transformed_factors(xs, ys, nullptr); break;
    case CouplingMode::frozen_g: transformed_factors(xs, ys, &*cfg_.frozen); break;
    }

    bool finite = true;
#pragma omp parallel for schedule(static) reduction(&& : finite)
    for (std::ptrdiff_t si = 0; si < static_cast<std::ptrdiff_t>(n); ++si) {
      const auto i = static_cast<std::size_t>(si);
      const double x = xs[i] + b1_[i] * drift_x_[i] * dt + s1_[i] * diff_x_[i] * sq * xi[i];
      const double y = ys[i] + b2_[i] * drift_y_[i] * dt + s2_[i] * diff_y_[i] * sq * eta[i];
      xs[i] = x;
      ys[i] = y;
      finite = finite && std::isfinite(x) && std::isfinite(y);
    }
    if (!finite)
      throw BlowupError(step_index, "non-finite particle state");
  }

private:
  void resize(std::size_t n)
  {
    for (auto* v : {&b1_, &s1_, &b2_, &s2_, &drift_x_, &diff_x_, &drift_y_, &diff_y_, &fy_, &psi_a_, &psi_b_})
      v->resize(n);
  }

  // X: b1 h(Y) G^h(X) dt + sigma1 f(Y) sqrt(G^{f^2}(X)) dW.
  void original_factors(std::span<const double> xs, std::span<const double> ys)
  {
    const std::size_t n = xs.size();
    std::fill(drift_y_.begin(), drift_y_.end(), 1.0);
    std::fill(diff_y_.begin(), diff_y_.end(), 1.0);
    if (h_const_ && f_const_) {
      std::fill(drift_x_.begin(), drift_x_.end(), 1.0);
      std::fill(diff_x_.begin(), diff_x_.end(), 1.0);
      return;
    }
    const auto& k = cs_.constants;
    cs_.f.eval(ys, fy_);
    for (std::size_t i = 0; i < n; ++i)
      psi_b_[i] = fy_[i] * fy_[i];
    if (h_is_f2_)
      std::copy(psi_b_.begin(), psi_b_.end(), psi_a_.begin());
    else
      cs_.h.eval(ys, psi_a_);
    const auto [gh, gf2] = detail::estimate_pair(xs, psi_a_, {k.h_low, k.h_high}, psi_b_,
                                                 detail::square_bounds(k.f_low, k.f_high), cfg_.estimator);
    const detail::UniformLookup lh(gh), lf(gf2);
    for (std::size_t i = 0; i < n; ++i) {
      drift_x_[i] = h_const_ ? 1.0 : std::clamp(psi_a_[i] * lh(xs[i]), r_lo_, r_hi_);
      diff_x_[i] = f_const_ ? 1.0 : fy_[i] * std::sqrt(lf(xs[i]));
    }
  }

  // X: b1 (h f^-2)(Y) G^{hf^-2}(X) dt + sigma1 dW;
  // Y: b2 f^-2(Y) G^{f^-2}(X) dt + sigma2 f^-1(Y) sqrt(G^{f^-2}(X)) dB.
  void transformed_factors(std::span<const double> xs, std::span<const double> ys, const FrozenFields* frozen)
  {
    const std::size_t n = xs.size();
    std::fill(diff_x_.begin(), diff_x_.end(), 1.0);
    const auto& k = cs_.constants;
    cs_.f.eval(ys, fy_);
    cs_.h.eval(ys, psi_a_);
    for (std::size_t i = 0; i < n; ++i) {
      const double inv = 1.0 / (fy_[i] * fy_[i]);
      psi_a_[i] *= inv;
      psi_b_[i] = inv;
    }
    std::optional<std::pair<CondExpectationField, CondExpectationField>> est;
    if (!frozen) {
      const PsiBounds b_hf{k.h_low / (k.f_high * k.f_high), k.h_high / (k.f_low * k.f_low)};
      const PsiBounds b_f{1.0 / (k.f_high * k.f_high), 1.0 / (k.f_low * k.f_low)};
      est = detail::estimate_pair(xs, psi_a_, b_hf, psi_b_, b_f, cfg_.estimator);
    }
    const auto& ga = frozen ? frozen->g_hf2inv : est->first;
    const auto& gb = frozen ? frozen->g_f2inv : est->second;
    const detail::UniformLookup la(ga), lb(gb);
    const double rf_lo = (k.f_low * k.f_low) / (k.f_high * k.f_high), rf_hi = 1.0 / rf_lo;
    const double rh_lo = r_lo_ * rf_lo, rh_hi = r_hi_ * rf_hi;
    for (std::size_t i = 0; i < n; ++i) {
      drift_x_[i] = std::clamp(psi_a_[i] * la(xs[i]), rh_lo, rh_hi);
      const double r = std::clamp(psi_b_[i] * lb(xs[i]), rf_lo, rf_hi);
      drift_y_[i] = r;
      diff_y_[i] = std::sqrt(r);
    }
  }

  const CoefficientSet& cs_;
  const SimConfig& cfg_;
  double r_lo_ = 1.0, r_hi_ = 1.0;
  bool h_const_ = false, f_const_ = false, h_is_f2_ = false;
  std::vector<double> b1_, s1_, b2_, s2_, drift_x_, diff_x_, drift_y_, diff_y_, fy_, psi_a_, psi_b_;
};

// One Euler-Maruyama step of `cloud` with caller-supplied noise.
inline ParticleCloud step(const ParticleCloud& cloud, const CoefficientSet& cs, const SimConfig& cfg,
                          std::span<const double> xi, std::span<const double> eta, std::size_t step_index = 0)
{
  if (cloud.empty())
    throw InputError("step needs a nonempty cloud");
  if (xi.size() != cloud.size() || eta.size() != cloud.size())
    throw InputError("step needs one normal pair per particle");
  ParticleCloud out = cloud;
  ParticleStepper stepper(cs, cfg);
  stepper.advance(out.xs, out.ys, xi, eta, step_index);
  out.time = cloud.time + cfg.dt;
  return out;
}

namespace detail
{

inline ParticleCloud initial_cloud(const SimConfig& cfg, const MarginalPair& m)
{
  if (cfg.init == InitKind::custom) {
    auto c = *cfg.initial_cloud;
    c.check();
    return c;
  }
  auto c = ParticleCloud::uniform(sample(m.m1, cfg.n_particles, cfg.seed, StreamId::init_x),
                                  sample(m.m2, cfg.n_particles, cfg.seed, StreamId::init_y));
  return c;
}

inline SnapshotDiagnostics diagnose(const ParticleCloud& c, const MarginalPair& m, const SimConfig& cfg)
{
  SnapshotDiagnostics d;
  d.time = c.time;
  const auto mom = stats::second_moment(c.xs, c.ys);
  d.second_moment = mom.value;
  d.second_moment_se = mom.standard_error;
  d.xy_correlation = stats::pearson(c.xs, c.ys);
  const auto h = stats::histogram(c.xs, c.ys, c.weights, stats::quantile_edges(m.m1, cfg.histogram_bins),
                                  stats::quantile_edges(m.m2, cfg.histogram_bins));
  d.hist_l1_product = stats::l1_distance(h, stats::product_of_marginals(h));
  d.w1_x = wasserstein1(c.xs, c.weights, m.m1);
  d.w1_y = wasserstein1(c.ys, c.weights, m.m2);
  d.burn_in = c.time < cfg.burn_in_fraction * cfg.horizon() * (1.0 - 1e-12);
  return d;
}

inline void fill_normals(const NoiseStream& noise, std::size_t step, std::vector<double>& xi, std::vector<double>& eta)
{
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t si = 0; si < static_cast<std::ptrdiff_t>(xi.size()); ++si) {
    const auto i = static_cast<std::size_t>(si);
    const auto [a, b] = noise.normals(i, step);
    xi[i] = a;
    eta[i] = b;
  }
}

} // namespace detail

// Full particle run; the marginal oracles m1, m2 come from the stationary
// densities of the two uncoupled diffusions.
inline SimOutput run(const CoefficientSet& cs, const SimConfig& cfg)
{
  detail::check_sim_config(cs, cfg);
  const auto m = build_marginals(cs, cfg.marginal_grid_size);
  SimOutput out;
  out.initial_cloud = detail::initial_cloud(cfg, m);
  const auto snaps = detail::snapshot_steps(cfg);

  ParticleCloud cur = out.initial_cloud;
  const std::size_t n = cur.size();
  std::vector<double> xi(n), eta(n);
  const NoiseStream noise(cfg.seed, StreamId::dynamics);
  ParticleStepper stepper(cs, cfg);
  std::size_t next = 0;
  auto record = [&](std::size_t s) {
    while (next < snaps.size() && snaps[next] == s) {
      cur.time = static_cast<double>(s) * cfg.dt;
      out.snapshot_times.push_back(cur.time);
      out.snapshots.push_back(cur);
      out.diagnostics.push_back(detail::diagnose(cur, m, cfg));
      ++next;
    }
  };
  record(0);
  for (std::size_t s = 0; s < cfg.n_steps; ++s) {
    detail::fill_normals(noise, s, xi, eta);
    stepper.advance(cur.xs, cur.ys, xi, eta, s);
    record(s + 1);
  }
  cur.time = cfg.horizon();
  out.final_cloud = std::move(cur);
  return out;
}

// Independent marginal diffusions with X read off at tau_t = int_0^t f^2(Y_s) ds.
// X runs on its own clock with step dt / clock_refinement and is linearly
// interpolated between clock nodes.
inline SimOutput run_time_change(const CoefficientSet& cs, const SimConfig& cfg)
{
  detail::check_sim_config(cs, cfg);
  if (!cs.h_is_f_squared())
    throw ConfigError("the time-change construction needs h = f^2");
  const auto m = build_marginals(cs, cfg.marginal_grid_size);
  SimOutput out;
  out.initial_cloud = detail::initial_cloud(cfg, m);
  const auto snaps = detail::snapshot_steps(cfg);
  const std::size_t n = out.initial_cloud.size();
  out.snapshots.assign(snaps.size(), out.initial_cloud);
  for (std::size_t k = 0; k < snaps.size(); ++k) {
    out.snapshot_times.push_back(static_cast<double>(snaps[k]) * cfg.dt);
    out.snapshots[k].time = out.snapshot_times.back();
  }

  const NoiseStream ny(cfg.seed, StreamId::dynamics), nx(cfg.seed, StreamId::clock_x);
  const double dt = cfg.dt, sq = std::sqrt(dt);
  const double ds = dt / static_cast<double>(cfg.clock_refinement), sqs = std::sqrt(ds);
  double inc_min = std::numeric_limits<double>::infinity(), inc_max = 0.0, tau_sum = 0.0;
  bool finite = true;
  std::size_t bad_step = 0;

  for (std::size_t i = 0; i < n; ++i) {
    double y = out.initial_cloud.ys[i];
    double x0 = out.initial_cloud.xs[i], x1 = x0; // X at clock nodes j and j + 1
    std::uint64_t j = 0;                          // nodes advanced so far
    double tau = 0.0;
    bool have_next = false;
    // X at clock node j + 1 from node j; normals come in pairs per two nodes.
    auto clock_step = [&](double xc, std::uint64_t node) {
      const auto [a, b] = nx.normals(i, node / 2);
      const double z = (node % 2 == 0) ? a : b;
      return xc + cs.b1(xc) * ds + cs.sigma1(xc) * sqs * z;
    };
    auto x_at = [&](double t) {
      while (true) {
        if (!have_next) {
          x1 = clock_step(x0, j);
          have_next = true;
        }
        const double s1 = static_cast<double>(j + 1) * ds;
        if (t <= s1)
          break;
        x0 = x1;
        ++j;
        have_next = false;
      }
      const double s0 = static_cast<double>(j) * ds;
      return x0 + (t - s0) / ds * (x1 - x0);
    };
    std::size_t next = 0;
    while (next < snaps.size() && snaps[next] == 0)
      ++next;
    for (std::size_t s = 0; s < cfg.n_steps && next < snaps.size(); ++s) {
      const double fy = cs.f(y);
      const double inc = fy * fy * dt;
      inc_min = std::min(inc_min, inc);
      inc_max = std::max(inc_max, inc);
      tau += inc;
      const auto [u, eta] = ny.normals(i, s);
      (void)u;
      y = y + cs.b2(y) * dt + cs.sigma2(y) * sq * eta;
      if (!std::isfinite(y) && finite) {
        finite = false;
        bad_step = s;
      }
      while (next < snaps.size() && snaps[next] == s + 1) {
        const double x = x_at(tau);
        if (!std::isfinite(x) && finite) {
          finite = false;
          bad_step = s;
        }
        out.snapshots[next].xs[i] = x;
        out.snapshots[next].ys[i] = y;
        ++next;
      }
    }
    tau_sum += tau;
    if (!finite)
      throw BlowupError(bad_step, "non-finite particle state in the time-change run");
  }
  for (const auto& c : out.snapshots)
    out.diagnostics.push_back(detail::diagnose(c, m, cfg));
  out.final_cloud = out.snapshots.back();
  out.final_cloud.time = cfg.horizon();
  out.time_change = TimeChangeStats{inc_min, inc_max, tau_sum / static_cast<double>(n)};
  return out;
}

// Distances between the X-marginals of the full system and of the
// one-dimensional mimicking diffusion at each snapshot.
struct MimicReport
{
  std::vector<double> times;
  std::vector<double> w1_to_system; // empirical vs empirical
  std::vector<double> w1_to_m1;     // mimicking marginal vs m1
  std::vector<double> w1_system_to_m1;
};

namespace detail
{

// Kernel regression of the realized drift and squared diffusion of X on X.
struct MimicCoefficients
{
  std::vector<double> grid, drift, diffusion2;

  std::pair<double, double> operator()(double x) const
  {
    if (x <= grid.front())
      return {drift.front(), diffusion2.front()};
    if (x >= grid.back())
      return {drift.back(), diffusion2.back()};
    const double h = grid[1] - grid[0];
    const double t = (x - grid.front()) / h;
    const auto k = std::min(static_cast<std::size_t>(t), grid.size() - 2);
    const double u = t - static_cast<double>(k);
    return {drift[k] + u * (drift[k + 1] - drift[k]), diffusion2[k] + u * (diffusion2[k + 1] - diffusion2[k])};
  }
};

inline MimicCoefficients regress_coefficients(const ParticleCloud& c, const CoefficientSet& cs, const SimConfig& cfg)
{
  const std::size_t n = c.size();
  std::vector<double> fy(n), hy(n), f2(n);
  cs.f.eval(c.ys, fy);
  cs.h.eval(c.ys, hy);
  for (std::size_t i = 0; i < n; ++i)
    f2[i] = fy[i] * fy[i];
  const auto& k = cs.constants;
  std::vector<double> drift(n), diff2(n);
  if (cfg.mode == CouplingMode::decoupled || (cs.h.is_constant() && cs.f.is_constant())) {
    for (std::size_t i = 0; i < n; ++i) {
      drift[i] = cs.b1(c.xs[i]);
      diff2[i] = cs.sigma1(c.xs[i]) * cs.sigma1(c.xs[i]);
    }
  } else {
    const auto [gh, gf2] =
        estimate_pair(c.xs, hy, {k.h_low, k.h_high}, f2, square_bounds(k.f_low, k.f_high), cfg.estimator);
    const UniformLookup lh(gh), lf(gf2);
    const double r_lo = k.h_low / k.h_high, r_hi = k.h_high / k.h_low;
    for (std::size_t i = 0; i < n; ++i) {
      const double x = c.xs[i];
      drift[i] = cs.b1(x) * (cs.h.is_constant() ? 1.0 : std::clamp(hy[i] * lh(x), r_lo, r_hi));
      const double s = cs.sigma1(x);
      diff2[i] = s * s * (cs.f.is_constant() ? 1.0 : f2[i] * lf(x));
    }
  }
  // Nadaraya-Watson on a uniform grid over the bulk of the cloud.
  std::vector<double> sorted = c.xs;
  std::sort(sorted.begin(), sorted.end());
  const double lo = sorted[n / 1000], hi = sorted[n - 1 - n / 1000];
  MimicCoefficients mc;
  const std::size_t nodes = 201;
  for (std::size_t g = 0; g < nodes; ++g)
    mc.grid.push_back(lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(nodes - 1));
  const double bw = cfg.estimator.bandwidth > 0.0 ? cfg.estimator.bandwidth : rule_of_thumb_bandwidth(c);
  // Ratio estimator: G uses (sum w K)/(sum w psi K), so psi = regressand gives 1/E[.|x].
  auto regress = [&](const std::vector<double>& v) {
    double vmin = std::numeric_limits<double>::infinity(), vmax = -vmin;
    for (double a : v) {
      vmin = std::min(vmin, a);
      vmax = std::max(vmax, a);
    }
    const double shift = vmin <= 0.0 ? 1.0 - vmin : 0.0; // keep psi positive
    std::vector<double> psi(n);
    for (std::size_t i = 0; i < n; ++i)
      psi[i] = v[i] + shift;
    const auto g = estimate_G_kernel(c.xs, c.weights, psi, {vmin + shift, vmax + shift}, mc.grid, bw);
    std::vector<double> out(nodes);
    for (std::size_t q = 0; q < nodes; ++q)
      out[q] = 1.0 / g.values[q] - shift;
    return out;
  };
  mc.drift = regress(drift);
  mc.diffusion2 = regress(diff2);
  return mc;
}

} // namespace detail

// Simulates dX = b_hat(t, X) dt + sigma_hat(t, X) dW from the system's
// initial X-values, with coefficients regressed at time 0 and at each
// snapshot and held constant in between.
inline MimicReport mimick_check(const SimOutput& output, const CoefficientSet& cs, const SimConfig& cfg)
{
  const auto m = build_marginals(cs, cfg.marginal_grid_size);
  std::vector<detail::MimicCoefficients> coeffs;
  coeffs.push_back(detail::regress_coefficients(output.initial_cloud, cs, cfg));
  for (const auto& snap : output.snapshots)
    coeffs.push_back(detail::regress_coefficients(snap, cs, cfg));

  std::vector<double> xs = output.initial_cloud.xs;
  const std::size_t n = xs.size();
  const NoiseStream noise(cfg.seed, StreamId::mimic);
  const double dt = cfg.dt, sq = std::sqrt(dt);
  MimicReport rep;
  std::size_t seg = 0; // coefficients in force: regression at the last passed snapshot
  std::size_t step = 0;
  for (std::size_t k = 0; k < output.snapshots.size(); ++k) {
    const std::size_t target = detail::step_of(output.snapshot_times[k], dt);
    for (; step < target; ++step) {
      const auto& co = coeffs[seg];
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t si = 0; si < static_cast<std::ptrdiff_t>(n); ++si) {
        const auto i = static_cast<std::size_t>(si);
        const auto [b, s2] = co(xs[i]);
        xs[i] += b * dt + std::sqrt(std::max(s2, 0.0)) * sq * noise.normals(i, step).first;
      }
    }
    seg = k + 1;
    rep.times.push_back(output.snapshot_times[k]);
    rep.w1_to_system.push_back(stats::wasserstein1(xs, output.snapshots[k].xs));
    rep.w1_to_m1.push_back(wasserstein1(xs, m.m1));
    rep.w1_system_to_m1.push_back(wasserstein1(output.snapshots[k].xs, m.m1));
  }
  return rep;
}

} // namespace condmv
