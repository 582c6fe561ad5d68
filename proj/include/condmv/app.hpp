#pragma once

#include <condmv/config.hpp>
#include <condmv/density_catalog.hpp>
#include <condmv/fpsolver.hpp>
#include <condmv/lsv.hpp>
#include <condmv/particlesim.hpp>
#include <condmv/transform.hpp>
#include <condmv/verify.hpp>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#ifndef CONDMV_VERSION
#define CONDMV_VERSION "0.0.0"
#endif

namespace condmv::app
{

using json = nlohmann::json;

enum ExitCode : int
{
  exit_ok = 0,
  exit_verify_failed = 1,
  exit_config = 2,
  exit_numerical = 3,
};

inline int exit_code_for(const Error& e)
{
  const auto& k = e.kind();
  for (const char* c : {"config", "input", "validation", "arbitrage", "degenerate-density", "ellipticity", "domain"})
    if (k == c)
      return exit_config;
  return exit_numerical;
}

inline json error_json(const std::string& kind, const std::string& message, int code)
{
  return {{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}};
}

inline json error_json(const Error& e)
{
  auto j = error_json(e.kind(), e.what(), exit_code_for(e));
  if (const auto* a = dynamic_cast<const ArbitrageError*>(&e)) {
    j["error"]["maturity_index"] = a->maturity_index();
    j["error"]["strike_index"] = a->strike_index();
  }
  if (const auto* b = dynamic_cast<const BlowupError*>(&e))
    j["error"]["step"] = b->step();
  return j;
}

// Exclusive lock file in the output directory, removed on destruction.
class OutputLock
{
public:
  explicit OutputLock(const std::filesystem::path& dir) : path_(dir / ".condmv.lock")
  {
    std::filesystem::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      if (errno == EEXIST)
        throw ConfigError("output directory " + dir.string() + " is locked by another run (" + path_.string() +
                          ")");
      throw ConfigError("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
    }
    const auto pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto w = ::write(fd_, pid.data(), pid.size());
  }

  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

  ~OutputLock()
  {
    if (fd_ >= 0) {
      ::close(fd_);
      std::error_code ec;
      std::filesystem::remove(path_, ec);
    }
  }

private:
  std::filesystem::path path_;
  int fd_ = -1;
};

inline void write_json(const std::filesystem::path& path, const json& j)
{
  std::ofstream out(path);
  if (!out)
    throw InputError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline std::string file_hash(const std::filesystem::path& p)
{
  return config::hex64(config::fnv1a(verify::detail::read_bytes(p)));
}

// Manifest listing the config, its hash, the seed, versions and every
// artifact with its FNV-1a digest.
inline void write_manifest(const std::filesystem::path& dir, const std::string& command,
                           const config::ExperimentConfig& c, const std::vector<std::string>& artifacts)
{
  json files = json::array();
  for (const auto& a : artifacts)
    files.push_back({{"file", a}, {"fnv1a", file_hash(dir / a)}});
  const json m{{"command", command},
               {"config_hash", config::config_hash(c)},
               {"seed", c.seed},
               {"schema_version", c.schema_version},
               {"versions",
                {{"condmv", CONDMV_VERSION},
                 {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                               std::to_string(EIGEN_MINOR_VERSION)},
                 {"compiler", __VERSION__}}},
               {"config", config::to_json(c)},
               {"artifacts", files}};
  write_json(dir / "manifest.json", m);
}

inline json to_json(const KDiagnostics& k)
{
  json floors = json::array();
  for (const auto& [r, v] : k.marginal_floor)
    floors.push_back({{"radius", r}, {"min_marginal", v}});
  return {{"fisher_information", k.fisher_information}, {"second_moment", k.second_moment}, {"marginal_floor", floors}};
}

inline json to_json(const PicardReport& r)
{
  json hist = json::array();
  for (const auto& k : r.k_history)
    hist.push_back(to_json(k));
  return {{"iterations", r.iterations},
          {"l1_deltas", r.l1_deltas},
          {"final_residual", r.final_residual},
          {"converged", r.converged},
          {"damping", r.damping},
          {"fisher_bounds", r.fisher_bounds},
          {"k_history", hist}};
}

inline json to_json(const verify::CheckResult& r)
{
  json ms = json::array();
  for (const auto& m : r.measurements)
    ms.push_back({{"name", m.name}, {"value", m.value}, {"limit", m.limit}, {"passed", m.passed()}});
  return {{"name", r.name}, {"passed", r.passed()}, {"measurements", ms}, {"note", r.note}};
}

// ---- commands ---------------------------------------------------------------

inline int cmd_simulate(const config::ExperimentConfig& c, std::ostream& out)
{
  const auto cs = config::build_coefficients(c.coefficients);
  const auto cfg = config::build_sim_config(c);
  const auto& dir = c.output.directory;
  OutputLock lock(dir);
  const auto res = c.simulation.time_change ? run_time_change(cs, cfg) : run(cs, cfg);
  std::vector<std::string> artifacts;
  for (std::size_t k = 0; k < res.snapshots.size(); ++k) {
    const auto name = "snapshot_" + std::to_string(k) + ".csv";
    res.write_snapshot_csv(k, dir / name);
    artifacts.push_back(name);
  }
  res.write_diagnostics_csv(dir / "diagnostics.csv");
  artifacts.push_back("diagnostics.csv");
  if (res.time_change) {
    write_json(dir / "time_change.json", {{"min_increment", res.time_change->min_increment},
                                          {"max_increment", res.time_change->max_increment},
                                          {"mean_final_tau", res.time_change->mean_final_tau}});
    artifacts.push_back("time_change.json");
  }
  if (c.simulation.mimic) {
    const auto rep = mimick_check(res, cs, cfg);
    csv::Writer w(dir / "mimic.csv");
    w.header({"time", "w1_to_system", "w1_to_m1", "w1_system_to_m1"});
    for (std::size_t k = 0; k < rep.times.size(); ++k)
      w.row(rep.times[k], rep.w1_to_system[k], rep.w1_to_m1[k], rep.w1_system_to_m1[k]);
    artifacts.push_back("mimic.csv");
  }
  write_manifest(dir, "simulate", c, artifacts);
  const auto& d = res.diagnostics.back();
  out << "simulate: T=" << csv::format(d.time) << " second_moment=" << csv::format(d.second_moment)
      << " xy_correlation=" << csv::format(d.xy_correlation) << " w1_x=" << csv::format(d.w1_x)
      << " w1_y=" << csv::format(d.w1_y) << '\n';
  return exit_ok;
}

inline int cmd_solve_fp(const config::ExperimentConfig& c, std::ostream& out)
{
  const auto cs = config::build_coefficients(c.coefficients);
  const auto opt = config::build_picard_options(c.solver);
  if (c.solver.grid < 4)
    throw ConfigError("solver.grid must be at least 4");
  const GridAxis ax{-c.solver.half_width, c.solver.half_width, c.solver.grid};
  const auto& dir = c.output.directory;
  OutputLock lock(dir);
  const auto m = build_marginals(cs);
  const auto prod = catalog::product_density(m, ax, ax);
  const auto res = picard_iterate(cs, prod, opt);
  const Interval fb{cs.constants.f_low, cs.constants.f_high};
  const auto p = apply_T_inverse(res.density, cs.f, fb);
  res.density.write_csv(dir / "fixed_point_transformed.csv");
  p.write_csv(dir / "fixed_point.csv");
  auto report = to_json(res.report);
  int code = exit_ok;
  if (cs.h_is_f_squared()) {
    const double l1 = l1_distance(p, prod);
    const bool ok = l1 < c.solver.product_tolerance;
    report["product_check"] = {{"l1_to_marginal_product", l1}, {"limit", c.solver.product_tolerance}, {"passed", ok}};
    if (!ok && res.report.converged)
      code = exit_verify_failed;
  }
  write_json(dir / "picard_report.json", report);
  write_json(dir / "k_diagnostics.json", to_json(k_diagnostics(res.density)));
  write_manifest(dir, "solve-fp", c,
                 {"fixed_point_transformed.csv", "fixed_point.csv", "picard_report.json", "k_diagnostics.json"});
  out << "solve-fp: iterations=" << res.report.iterations << " converged=" << (res.report.converged ? "true" : "false")
      << " final_residual=" << csv::format(res.report.final_residual) << '\n';
  return code;
}

inline int cmd_verify(const config::ExperimentConfig& c, const std::vector<std::string>& checks,
                      std::optional<double> tolerance, std::ostream& out)
{
  verify::SuiteOptions opt;
  opt.scale = c.verify.scale;
  opt.scale.seed = c.seed;
  opt.work_dir = c.output.directory / "verify_runs";
  opt.tolerance_override = tolerance ? tolerance : c.verify.tolerance_override;
  opt.limits = c.verify.limits;
  const auto& dir = c.output.directory;
  OutputLock lock(dir);
  std::filesystem::remove_all(opt.work_dir);
  verify::Suite suite(opt);
  const auto names = !checks.empty() ? checks : !c.verify.checks.empty() ? c.verify.checks : verify::Suite::check_names();
  const auto results = suite.run(names);
  json rep = json::array();
  bool all = true;
  for (const auto& r : results) {
    out << r.summary() << '\n';
    rep.push_back(to_json(r));
    rep.back()["stochastic"] = verify::Suite::is_stochastic(r.name);
    all = all && r.passed();
  }
  write_json(dir / "verify_report.json", {{"passed", all}, {"checks", rep}});
  write_manifest(dir, "verify", c, {});
  return all ? exit_ok : exit_verify_failed;
}

inline CallSurface build_surface(const config::LsvSection& l)
{
  const auto axis = [](const std::vector<double>& t) { return verify::detail::grid_range(t[0], t[1], t[2]); };
  if (l.surface == "black-scholes")
    return black_scholes_surface(l.spot, l.vol, axis(l.maturities), axis(l.strikes));
  if (l.surface == "cev") {
    const double spot = l.spot, vol = l.vol, e = l.exponent;
    return forward_pde_surface(spot, [=](double K) { return vol * std::pow(K / spot, e); }, axis(l.maturities),
                               axis(l.strikes));
  }
  if (l.surface == "file") {
    if (l.surface_file.empty())
      throw ConfigError("lsv.surface = file needs lsv.surface_file");
    return CallSurface::read_csv(l.surface_file, l.spot);
  }
  throw ConfigError("unknown lsv.surface '" + l.surface + "' (black-scholes, cev, file)");
}

// Reference call prices at the simulation horizon.
inline std::vector<double> reference_prices(const config::LsvSection& l, const CallSurface& s, double T)
{
  std::vector<double> ref;
  if (l.surface == "black-scholes") {
    for (double K : l.reprice_strikes)
      ref.push_back(black_scholes_call(l.spot, K, T, l.vol));
    return ref;
  }
  if (l.surface == "cev") {
    const double spot = l.spot, vol = l.vol, e = l.exponent;
    return forward_pde_surface(spot, [=](double K) { return vol * std::pow(K / spot, e); }, {T}, l.reprice_strikes)
        .prices;
  }
  const auto m = detail::nearest_index(s.maturities, T);
  if (std::abs(s.maturities[m] - T) > 1e-9)
    throw ConfigError("the simulation horizon " + csv::format(T) + " is not a maturity of the surface file");
  for (double K : l.reprice_strikes) {
    const auto& ks = s.strikes;
    if (K < ks.front() || K > ks.back())
      throw ConfigError("reprice strike " + csv::format(K) + " lies outside the surface strikes");
    const auto it = std::upper_bound(ks.begin(), ks.end(), K);
    const auto k = std::min(static_cast<std::size_t>(it - ks.begin()), ks.size() - 1) - 1;
    const double w = (K - ks[k]) / (ks[k + 1] - ks[k]);
    ref.push_back((1.0 - w) * s(m, k) + w * s(m, k + 1));
  }
  return ref;
}

inline int cmd_lsv_demo(const config::ExperimentConfig& c, std::ostream& out)
{
  const auto& l = c.lsv;
  const auto cs = config::build_coefficients(c.coefficients);
  auto cfg = config::build_sim_config(c);
  cfg.snapshot_times.clear();
  const auto& dir = c.output.directory;
  OutputLock lock(dir);
  const auto surface = build_surface(l);
  auto lv = dupire_from_surface(surface, {l.vol_min, l.vol_max, 1e-10});
  surface.write_csv(dir / "call_surface.csv");
  const auto sim = simulate_calibrated_lsv(lv, {cs.b2, cs.sigma2, cs.f}, cfg,
                                           {l.flattening_multiple, l.tail_slope, 40.0, 0.005});
  lv.write_csv(dir / "local_vol.csv");
  const auto rows =
      compare_prices(reprice(sim.final_cloud, l.reprice_strikes, l.spot), reference_prices(l, surface, cfg.horizon()));
  write_reprice_csv(dir / "reprice.csv", rows);
  sim.write_diagnostics_csv(dir / "diagnostics.csv");
  bool ok = true;
  for (const auto& r : rows)
    ok = ok && std::abs(r.z_score) < l.z_limit;
  write_json(dir / "lsv_summary.json", {{"clamped_cells", lv.clamped_count()},
                                        {"flattening_radius", lv.flattening.radius},
                                        {"tail_slope", lv.flattening.tail_slope},
                                        {"horizon", cfg.horizon()},
                                        {"z_limit", l.z_limit},
                                        {"passed", ok}});
  write_manifest(dir, "lsv-demo", c,
                 {"call_surface.csv", "local_vol.csv", "reprice.csv", "diagnostics.csv", "lsv_summary.json"});
  for (const auto& r : rows)
    out << "lsv-demo: K=" << csv::format(r.strike) << " price=" << csv::format(r.price)
        << " reference=" << csv::format(r.reference) << " z=" << csv::format(r.z_score) << '\n';
  return ok ? exit_ok : exit_verify_failed;
}

// ---- entry point ------------------------------------------------------------

inline void set_threads(std::optional<int> threads)
{
  if (!threads)
    if (const char* env = std::getenv("CONDMV_THREADS"); env && *env) {
      try {
        threads = std::stoi(env);
      } catch (const std::exception&) {
        throw ConfigError(std::string("CONDMV_THREADS is not an integer: ") + env);
      }
    }
  if (threads && *threads < 1)
    throw ConfigError("thread count must be at least 1");
#ifdef _OPENMP
  if (threads)
    omp_set_num_threads(*threads);
#endif
}

inline std::vector<std::string> split_checks(const std::string& s)
{
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty())
      out.push_back(item);
  return out;
}

inline int main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
  CLI::App cli{"Conditional McKean-Vlasov laboratory"};
  cli.require_subcommand(1);
  std::string config_path, output_dir, checks;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<double> tolerance;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--output", output_dir, "output directory, overrides the config");
    sub->add_option("--seed", seed, "seed, overrides the config");
    sub->add_option("--threads", threads, "worker threads (default: CONDMV_THREADS)");
  };
  auto* simulate = cli.add_subcommand("simulate", "particle simulation");
  auto* solve = cli.add_subcommand("solve-fp", "Picard fixed point of the stationary Fokker-Planck equation");
  auto* verify_cmd = cli.add_subcommand("verify", "cross-module verification suite");
  auto* lsv = cli.add_subcommand("lsv-demo", "calibrated local stochastic volatility loop");
  for (auto* s : {simulate, solve, verify_cmd, lsv})
    add_common(s);
  verify_cmd->add_option("--checks", checks, "comma-separated subset of checks");
  verify_cmd->add_option("--tolerance", tolerance, "replace every tolerance by this value");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << cli.help();
    return exit_ok;
  } catch (const CLI::ParseError& e) {
    err << error_json("usage", e.what(), exit_config).dump() << '\n';
    return exit_config;
  }

  try {
    set_threads(threads);
    auto c = config::load(config_path);
    if (seed) {
      c.seed = *seed;
      c.verify.scale.seed = *seed;
    }
    if (!output_dir.empty())
      c.output.directory = std::filesystem::absolute(output_dir).lexically_normal();
    if (simulate->parsed())
      return cmd_simulate(c, out);
    if (solve->parsed())
      return cmd_solve_fp(c, out);
    if (verify_cmd->parsed())
      return cmd_verify(c, split_checks(checks), tolerance, out);
    return cmd_lsv_demo(c, out);
  } catch (const Error& e) {
    const int code = exit_code_for(e);
    err << error_json(e).dump() << '\n';
    return code;
  } catch (const std::exception& e) {
    err << error_json("internal", e.what(), exit_numerical).dump() << '\n';
    return exit_numerical;
  }
}

} // namespace condmv::app
