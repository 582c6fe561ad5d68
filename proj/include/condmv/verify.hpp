#pragma once

#include <condmv/density_catalog.hpp>
#include <condmv/fpsolver.hpp>
#include <condmv/lsv.hpp>
#include <condmv/particlesim.hpp>
#include <condmv/stats.hpp>
#include <condmv/transform.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace condmv::verify
{

// One measured quantity against its limit; passes when value < limit.
struct Measurement
{
  std::string name;
  double value = 0.0;
  double limit = 0.0;

  bool passed() const { return value < limit; }
};

struct CheckResult
{
  std::string name;
  std::vector<Measurement> measurements;
  std::string note;
  double seconds = 0.0;

  bool passed() const
  {
    if (measurements.empty())
      return false;
    for (const auto& m : measurements)
      if (!m.passed())
        return false;
    return true;
  }

  // "name: PASS  a=1.2e-06 (< 1e-05)  b=..."
  std::string summary() const
  {
    std::ostringstream s;
    s << name << ": " << (passed() ? "PASS" : "FAIL");
    for (const auto& m : measurements)
      s << "  " << m.name << '=' << csv::format(m.value) << " (< " << csv::format(m.limit) << ')';
    if (!note.empty())
      s << "  [" << note << ']';
    return s.str();
  }
};

// Sizes of the stochastic and grid runs.
struct Scale
{
  std::size_t n_particles = 100000;
  double horizon = 10.0;
  double dt = 1e-3;
  std::uint64_t seed = 1;
  std::size_t fp_grid = 256;
  double fp_half_width = 6.0;
  std::size_t lsv_particles = 100000;
  double lsv_horizon = 1.0;

  friend bool operator==(const Scale&, const Scale&) = default;
};

struct SuiteOptions
{
  Scale scale;
  std::filesystem::path work_dir;
  std::optional<double> tolerance_override;   // replaces every limit
  std::map<std::string, double> limits;       // "check.measurement" -> limit
  std::ostream* log = nullptr;
};

namespace detail
{

inline double seconds_since(std::chrono::steady_clock::time_point t0)
{
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::string read_bytes(const std::filesystem::path& p)
{
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::vector<double> grid_range(double lo, double hi, double step)
{
  std::vector<double> v;
  const auto n = static_cast<std::size_t>(std::llround((hi - lo) / step));
  for (std::size_t k = 0; k <= n; ++k)
    v.push_back(lo + step * static_cast<double>(k));
  return v;
}

inline Interval f_bounds(const CoefficientSet& cs) { return {cs.constants.f_low, cs.constants.f_high}; }

inline double cev_vol(double K) { return 0.2 * std::pow(K, -0.25); }

inline void write_sim_artifacts(const SimOutput& out, const std::filesystem::path& dir)
{
  std::filesystem::create_directories(dir);
  for (std::size_t k = 0; k < out.snapshots.size(); ++k)
    out.write_snapshot_csv(k, dir / ("snapshot_" + std::to_string(k) + ".csv"));
  out.write_diagnostics_csv(dir / "diagnostics.csv");
}

inline std::vector<double> concat(const std::vector<const std::vector<double>*>& parts)
{
  std::vector<double> v;
  for (const auto* p : parts)
    v.insert(v.end(), p->begin(), p->end());
  return v;
}

} // namespace detail

// Cross-module checks at a configurable scale. Simulation runs and fixed
// points are computed once and shared between checks.
class Suite
{
public:
  explicit Suite(SuiteOptions opt) : opt_(std::move(opt))
  {
    if (opt_.work_dir.empty())
      opt_.work_dir = std::filesystem::temp_directory_path() / "condmv_verify";
  }

  static const std::vector<std::string>& check_names()
  {
    static const std::vector<std::string> names{
        "stationary_oracle", "transform_algebra", "independence", "fixed_point", "solver_simulator",
        "mimicking",         "time_change",       "moment_bound", "lsv",         "determinism"};
    return names;
  }

  static bool is_stochastic(const std::string& name)
  {
    return name == "independence" || name == "solver_simulator" || name == "mimicking" || name == "time_change" ||
           name == "moment_bound" || name == "lsv" || name == "determinism";
  }

  CheckResult run(const std::string& name)
  {
    const auto t0 = std::chrono::steady_clock::now();
    log("running " + name);
    CheckResult r;
    if (name == "stationary_oracle")
      r = stationary_oracle();
    else if (name == "transform_algebra")
      r = transform_algebra();
    else if (name == "fixed_point")
      r = fixed_point();
    else if (name == "independence")
      r = independence();
    else if (name == "solver_simulator")
      r = solver_simulator();
    else if (name == "mimicking")
      r = mimicking();
    else if (name == "time_change")
      r = time_change();
    else if (name == "moment_bound")
      r = moment_bound_check();
    else if (name == "lsv")
      r = lsv();
    else if (name == "determinism")
      r = determinism();
    else
      throw ConfigError("unknown check '" + name + "'");
    r.name = name;
    r.seconds = detail::seconds_since(t0);
    for (auto& m : r.measurements) {
      if (const auto it = opt_.limits.find(name + "." + m.name); it != opt_.limits.end())
        m.limit = it->second;
      if (opt_.tolerance_override)
        m.limit = *opt_.tolerance_override;
    }
    log(r.summary());
    return r;
  }

  std::vector<CheckResult> run(const std::vector<std::string>& names)
  {
    for (const auto& n : names)
      if (std::find(check_names().begin(), check_names().end(), n) == check_names().end())
        throw ConfigError("unknown check '" + n + "'");
    std::vector<CheckResult> out;
    for (const auto& n : names)
      out.push_back(run(n));
    return out;
  }

  const SuiteOptions& options() const noexcept { return opt_; }

private:
  struct LsvRun
  {
    SimOutput output;
    std::vector<RepriceRow> rows;
  };

  void log(const std::string& s) const
  {
    if (opt_.log)
      *opt_.log << s << std::endl;
  }

  SimConfig base_config() const
  {
    const auto& s = opt_.scale;
    SimConfig cfg;
    cfg.n_particles = s.n_particles;
    cfg.dt = s.dt;
    cfg.n_steps = static_cast<std::size_t>(std::llround(s.horizon / s.dt));
    cfg.seed = s.seed;
    cfg.snapshot_times = {s.horizon / 3.0, 2.0 * s.horizon / 3.0, s.horizon};
    cfg.burn_in_fraction = 0.5;
    return cfg;
  }

  GridAxis fp_axis() const { return {-opt_.scale.fp_half_width, opt_.scale.fp_half_width, opt_.scale.fp_grid}; }

  // ---- shared runs -------------------------------------------------------

  SimOutput simulate_independence() const { return condmv::run(catalog::independence_set(), base_config()); }
  SimOutput simulate_general() const { return condmv::run(catalog::general_set(), base_config()); }
  SimOutput simulate_time_change() const { return run_time_change(catalog::independence_set(), base_config()); }
  MimicReport simulate_mimic(const SimOutput& general) const
  {
    return mimick_check(general, catalog::general_set(), base_config());
  }

  LsvRun simulate_lsv() const
  {
    const auto& s = opt_.scale;
    const auto surface = black_scholes_surface(1.0, 0.2, detail::grid_range(0.5, 2.0, 0.01),
                                               detail::grid_range(0.5, 2.0, 0.01));
    auto lv = dupire_from_surface(surface);
    const auto base = catalog::base_set();
    SimConfig cfg;
    cfg.n_particles = s.lsv_particles;
    cfg.dt = s.dt;
    cfg.n_steps = static_cast<std::size_t>(std::llround(s.lsv_horizon / s.dt));
    cfg.seed = s.seed;
    LsvRun r{simulate_calibrated_lsv(lv, {base.b2, base.sigma2, base.f}, cfg), {}};
    const std::vector<double> strikes{0.8, 1.0, 1.2};
    std::vector<double> ref;
    for (double K : strikes)
      ref.push_back(black_scholes_call(1.0, K, s.lsv_horizon, 0.2));
    r.rows = compare_prices(reprice(r.output.final_cloud, strikes, 1.0), ref);
    return r;
  }

  static void write_mimic(const MimicReport& m, const std::filesystem::path& dir)
  {
    std::filesystem::create_directories(dir);
    csv::Writer w(dir / "mimic.csv");
    w.header({"time", "w1_to_system", "w1_to_m1", "w1_system_to_m1"});
    for (std::size_t k = 0; k < m.times.size(); ++k)
      w.row(m.times[k], m.w1_to_system[k], m.w1_to_m1[k], m.w1_system_to_m1[k]);
  }

  static void write_lsv(const LsvRun& r, const std::filesystem::path& dir)
  {
    std::filesystem::create_directories(dir);
    write_reprice_csv(dir / "reprice.csv", r.rows);
    detail::write_sim_artifacts(r.output, dir);
  }

  const SimOutput& independence_run()
  {
    if (!independence_) {
      log("  simulating the h = f^2 system");
      independence_ = simulate_independence();
      detail::write_sim_artifacts(*independence_, opt_.work_dir / "first" / "independence");
    }
    return *independence_;
  }

  const SimOutput& general_run()
  {
    if (!general_) {
      log("  simulating the h != f^2 system");
      general_ = simulate_general();
      detail::write_sim_artifacts(*general_, opt_.work_dir / "first" / "general");
    }
    return *general_;
  }

  const SimOutput& time_change_run()
  {
    if (!time_change_) {
      log("  simulating the time-changed construction");
      time_change_ = simulate_time_change();
      detail::write_sim_artifacts(*time_change_, opt_.work_dir / "first" / "time_change");
    }
    return *time_change_;
  }

  const MimicReport& mimic_run()
  {
    if (!mimic_) {
      const auto& g = general_run();
      log("  simulating the mimicking diffusion");
      mimic_ = simulate_mimic(g);
      write_mimic(*mimic_, opt_.work_dir / "first" / "mimic");
    }
    return *mimic_;
  }

  const LsvRun& lsv_run()
  {
    if (!lsv_) {
      log("  simulating the calibrated LSV model");
      lsv_ = simulate_lsv();
      write_lsv(*lsv_, opt_.work_dir / "first" / "lsv");
    }
    return *lsv_;
  }

  // ---- checks ------------------------------------------------------------

  CheckResult stationary_oracle() const
  {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cs = catalog::standard_ou_set();
    const auto d = build_stationary_density(cs.b1, cs.sigma1, {-10.0, 10.0}, 4097);
    double worst = 0.0;
    for (std::size_t k = 0; k <= 1200; ++k) {
      const double x = -6.0 + 0.01 * static_cast<double>(k);
      const double ref = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
      worst = std::max(worst, std::abs(d.density(x) - ref));
    }
    return {{}, {{"max_pointwise_error", worst, 1e-5}, {"seconds", detail::seconds_since(t0), 1.0}}, {}, 0.0};
  }

  CheckResult transform_algebra() const
  {
    const auto t0 = std::chrono::steady_clock::now();
    const auto psi = ScalarFunction::logistic(1.6, 0.6, 1.2, 0.0);
    double round = 0.0, marg = 0.0, comp = 0.0;
    std::size_t cases = 0;
    for (const auto& [name, p] : catalog::test_densities())
      for (const auto& f : catalog::vol_factors()) {
        const Interval fb{0.6, 1.5}; // encloses all catalog factors
        const auto tp = apply_T(p, f, fb);
        round = std::max(round, l1_distance(apply_T_inverse(tp, f, fb), p));
        const auto mp = p.x_marginal(), mt = tp.x_marginal();
        for (std::size_t i = 0; i < mp.size(); ++i)
          marg = std::max(marg, std::abs(mp[i] - mt[i]));
        const auto direct = exact_G_from_grid(p, psi, {0.6, 1.6});
        const double f2lo = fb.lo * fb.lo, f2hi = fb.hi * fb.hi;
        const auto num = exact_G_from_grid(
            tp, [&](double y) { return psi(y) / (f(y) * f(y)); }, {0.6 / f2hi, 1.6 / f2lo});
        const auto den = exact_G_from_grid(
            tp, [&](double y) { return 1.0 / (f(y) * f(y)); }, {1.0 / f2hi, 1.0 / f2lo});
        for (std::size_t i = 0; i < direct.raw_values.size(); ++i)
          if (!direct.inherited[i])
            comp = std::max(comp, std::abs(direct.raw_values[i] - num.raw_values[i] / den.raw_values[i]));
        ++cases;
      }
    return {{},
            {{"round_trip_l1", round, 1e-8},
             {"marginal_preservation", marg, 1e-8},
             {"g_composition", comp, 1e-8},
             {"seconds", detail::seconds_since(t0), 10.0}},
            std::to_string(cases) + " density/factor pairs",
            0.0};
  }

  CheckResult fixed_point()
  {
    const auto t0 = std::chrono::steady_clock::now();
    const auto ax = fp_axis();
    const GridAxis coarse{ax.lo, ax.hi, ax.n / 2};
    std::vector<Measurement> ms;

    const auto ind = catalog::independence_set();
    const auto m_ind = build_marginals(ind);
    const auto prod = catalog::product_density(m_ind, ax, ax);
    const auto ri = picard_iterate(ind, prod);
    ms.push_back({"independence_last_change", ri.report.l1_deltas.empty() ? 1.0 : ri.report.l1_deltas.back(), 1e-6});
    ms.push_back({"independence_iterations", static_cast<double>(ri.report.iterations), 201.0});
    ms.push_back({"independence_l1_to_product",
                  l1_distance(apply_T_inverse(ri.density, ind.f, detail::f_bounds(ind)), prod), 1e-2});

    const auto gen = catalog::general_set();
    const auto m_gen = build_marginals(gen);
    const auto rg = picard_iterate(gen, catalog::product_density(m_gen, ax, ax));
    const auto rc = picard_iterate(gen, catalog::product_density(m_gen, coarse, coarse));
    const auto fine = weak_residual(rg.density, gen, WeakEquation::transformed);
    const auto est = refinement_error_estimate(fine, weak_residual(rc.density, gen, WeakEquation::transformed));
    ms.push_back({"general_last_change", rg.report.l1_deltas.empty() ? 1.0 : rg.report.l1_deltas.back(), 1e-6});
    ms.push_back({"general_iterations", static_cast<double>(rg.report.iterations), 201.0});
    ms.push_back({"general_weak_residual", max_abs(fine), 10.0 * est});
    ms.push_back({"seconds", detail::seconds_since(t0), 300.0});
    general_fixed_point_ = apply_T_inverse(rg.density, gen.f, detail::f_bounds(gen));
    return {{}, std::move(ms), "grids " + std::to_string(ax.n) + " and " + std::to_string(coarse.n), 0.0};
  }

  CheckResult independence()
  {
    const auto& out = independence_run();
    const auto& d = out.diagnostics.back();
    const double n = static_cast<double>(out.final_cloud.size());
    return {{},
            {{"abs_correlation", std::abs(d.xy_correlation), 4.0 / std::sqrt(n)},
             {"hist_l1_to_marginal_product", d.hist_l1_product, 0.05},
             {"w1_x", d.w1_x, 0.02},
             {"w1_y", d.w1_y, 0.02}},
            "N = " + std::to_string(out.final_cloud.size()) + ", T = " + csv::format(d.time),
            0.0};
  }

  CheckResult solver_simulator()
  {
    if (!general_fixed_point_) {
      const auto gen = catalog::general_set();
      const auto ax = fp_axis();
      const auto rg = picard_iterate(gen, catalog::product_density(build_marginals(gen), ax, ax));
      general_fixed_point_ = apply_T_inverse(rg.density, gen.f, detail::f_bounds(gen));
    }
    const auto& out = general_run();
    std::vector<const std::vector<double>*> px, py;
    std::size_t pooled = 0;
    for (std::size_t k = 0; k < out.snapshots.size(); ++k)
      if (!out.diagnostics[k].burn_in) {
        px.push_back(&out.snapshots[k].xs);
        py.push_back(&out.snapshots[k].ys);
        ++pooled;
      }
    const auto xs = detail::concat(px), ys = detail::concat(py);
    const std::size_t bins = 10;
    auto ex = stats::quantile_edges(xs, bins), ey = stats::quantile_edges(ys, bins);
    const auto emp = stats::histogram(xs, ys, {}, ex, ey);
    const auto fp = stats::histogram_of(*general_fixed_point_, ex, ey);
    return {{},
            {{"hist_l1_to_fixed_point", stats::l1_distance(emp, fp), 0.08}},
            std::to_string(pooled) + " post-burn-in snapshots pooled",
            0.0};
  }

  CheckResult mimicking()
  {
    const auto& m = mimic_run();
    CheckResult r;
    for (std::size_t k = 0; k < m.times.size(); ++k)
      r.measurements.push_back({"w1_at_t" + csv::format(m.times[k]), m.w1_to_system[k], 0.02});
    return r;
  }

  CheckResult time_change()
  {
    const auto& tc = time_change_run();
    const auto& direct = independence_run();
    const auto cs = catalog::independence_set();
    const auto m = build_marginals(cs, base_config().marginal_grid_size);
    const std::size_t bins = base_config().histogram_bins;
    const auto ex = stats::quantile_edges(m.m1, bins), ey = stats::quantile_edges(m.m2, bins);
    const auto& a = tc.final_cloud;
    const auto& b = direct.final_cloud;
    const auto ha = stats::histogram(a.xs, a.ys, a.weights, ex, ey);
    const auto hb = stats::histogram(b.xs, b.ys, b.weights, ex, ey);
    const auto oracle = stats::product_histogram(m.m1, m.m2, ex, ey);
    return {{},
            {{"hist_l1_to_product_oracle", stats::l1_distance(ha, oracle), 0.05},
             {"hist_l1_to_direct_simulation", stats::l1_distance(ha, hb), 0.05}},
            {},
            0.0};
  }

  CheckResult moment_bound_check()
  {
    CheckResult r;
    const auto add = [&](const std::string& label, const SimOutput& out, const CoefficientSet& cs) {
      const double bound = moment_bound(cs).value;
      double worst_value = 0.0, worst_limit = 1.0, worst_ratio = -1.0;
      for (const auto& d : out.diagnostics) {
        const double limit = bound + 3.0 * d.second_moment_se;
        if (d.second_moment / limit > worst_ratio) {
          worst_ratio = d.second_moment / limit;
          worst_value = d.second_moment;
          worst_limit = limit;
        }
      }
      r.measurements.push_back({label + "_max_second_moment", worst_value, worst_limit});
    };
    add("independence", independence_run(), catalog::independence_set());
    add("general", general_run(), catalog::general_set());
    add("time_change", time_change_run(), catalog::independence_set());
    return r;
  }

  CheckResult lsv()
  {
    const auto& r = lsv_run();
    CheckResult c;
    for (const auto& row : r.rows)
      c.measurements.push_back({"abs_z_at_K" + csv::format(row.strike), std::abs(row.z_score), 3.0});
    const auto grid = detail::grid_range(0.5, 2.0, 0.01);
    const auto s = forward_pde_surface(1.0, detail::cev_vol, grid, grid);
    const auto lv = dupire_from_surface(s);
    double worst = 0.0;
    for (std::size_t m = 0; m + 1 < s.n_maturities(); ++m)
      for (std::size_t k = 5; k + 5 < s.n_strikes(); ++k)
        worst = std::max(worst, std::abs(lv(m, k) / detail::cev_vol(s.strikes[k]) - 1.0));
    c.measurements.push_back({"cev_dupire_relative_error", worst, 0.01});
    return c;
  }

  // Repeats every stochastic run with the same configuration and compares the
  // CSV artifacts byte by byte.
  CheckResult determinism()
  {
    independence_run();
    general_run();
    time_change_run();
    mimic_run();
    lsv_run();
    const auto first = opt_.work_dir / "first", second = opt_.work_dir / "repeat";
    log("  repeating every stochastic run");
    detail::write_sim_artifacts(simulate_independence(), second / "independence");
    const auto g = simulate_general();
    detail::write_sim_artifacts(g, second / "general");
    detail::write_sim_artifacts(simulate_time_change(), second / "time_change");
    write_mimic(simulate_mimic(g), second / "mimic");
    write_lsv(simulate_lsv(), second / "lsv");
    std::size_t files = 0, differing = 0;
    for (const auto& e : std::filesystem::recursive_directory_iterator(first)) {
      if (!e.is_regular_file())
        continue;
      const auto rel = std::filesystem::relative(e.path(), first);
      ++files;
      const auto other = second / rel;
      if (!std::filesystem::exists(other) || detail::read_bytes(e.path()) != detail::read_bytes(other)) {
        ++differing;
        log("  differs: " + rel.string());
      }
    }
    return {{}, {{"differing_artifacts", static_cast<double>(differing), 1.0}},
            std::to_string(files) + " CSV artifacts compared", 0.0};
  }

  SuiteOptions opt_;
  std::optional<SimOutput> independence_, general_, time_change_;
  std::optional<MimicReport> mimic_;
  std::optional<LsvRun> lsv_;
  std::optional<GridDensity2D> general_fixed_point_;
};

} // namespace condmv::verify
