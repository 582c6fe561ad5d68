#pragma once

#include <condmv/coefficients.hpp>
#include <condmv/errors.hpp>
#include <condmv/fpsolver.hpp>
#include <condmv/lsv.hpp>
#include <condmv/particlesim.hpp>
#include <condmv/verify.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace condmv::config
{

using json = nlohmann::json;

inline constexpr int schema_version = 1;

// A coefficient function as written in a config: a parametric kind, a
// tabulated CSV file, or the square of another spec (of f when `inner` is empty).
struct FunctionSpec
{
  std::string kind;
  std::vector<double> params;
  std::filesystem::path file;
  std::vector<FunctionSpec> inner;

  friend bool operator==(const FunctionSpec&, const FunctionSpec&) = default;
};

struct CoefficientsSection
{
  std::string catalog = "independence";
  std::map<std::string, FunctionSpec> functions; // overrides keyed by b1, b2, sigma1, sigma2, f, h
  double validation_lo = -10.0;
  double validation_hi = 10.0;

  friend bool operator==(const CoefficientsSection&, const CoefficientsSection&) = default;
};

struct SimulationSection
{
  std::size_t n_particles = 10000;
  double dt = 1e-3;
  std::size_t n_steps = 1000;
  std::string mode = "mckean-vlasov";
  std::string estimator = "binning";
  std::size_t n_bins = 50;
  double min_count = 20.0;
  double bandwidth = 0.0;
  double burn_in_fraction = 0.5;
  std::size_t histogram_bins = 10;
  std::size_t marginal_grid_size = 4097;
  std::size_t clock_refinement = 2;
  bool allow_large_dt = false;
  bool time_change = false;
  bool mimic = false;

  friend bool operator==(const SimulationSection&, const SimulationSection&) = default;
};

struct SolverSection
{
  std::size_t grid = 256;
  double half_width = 6.0;
  double tol = 1e-6;
  std::size_t max_iters = 200;
  double damping = 1.0;
  bool adaptive_damping = true;
  std::optional<double> mollifier_bandwidth;
  std::string mollifier_kernel = "triangular";
  double product_tolerance = 1e-2;

  friend bool operator==(const SolverSection&, const SolverSection&) = default;
};

struct LsvSection
{
  std::string surface = "black-scholes"; // black-scholes | cev | file
  std::filesystem::path surface_file;
  double spot = 1.0;
  double vol = 0.2;         // flat vol, or CEV level at the spot
  double exponent = -0.25;  // CEV: vol (K / spot)^exponent
  std::vector<double> maturities{0.5, 2.0, 0.01}; // lo, hi, step
  std::vector<double> strikes{0.5, 2.0, 0.01};
  double vol_min = 0.01;
  double vol_max = 2.0;
  double flattening_multiple = 3.0;
  double tail_slope = 0.01;
  std::vector<double> reprice_strikes{0.8, 1.0, 1.2};
  double z_limit = 3.0;

  friend bool operator==(const LsvSection&, const LsvSection&) = default;
};

struct OutputSection
{
  std::filesystem::path directory = "out";
  std::vector<double> snapshot_times;

  friend bool operator==(const OutputSection&, const OutputSection&) = default;
};

struct VerifySection
{
  std::vector<std::string> checks; // empty: all
  verify::Scale scale;
  std::optional<double> tolerance_override;
  std::map<std::string, double> limits;

  friend bool operator==(const VerifySection&, const VerifySection&) = default;
};

struct ExperimentConfig
{
  int schema_version = config::schema_version;
  std::uint64_t seed = 1;
  CoefficientsSection coefficients;
  SimulationSection simulation;
  SolverSection solver;
  LsvSection lsv;
  OutputSection output;
  VerifySection verify;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

namespace detail
{

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where)
{
  if (!j.is_object())
    throw ConfigError(where + " must be a JSON object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k))
      throw ConfigError("unknown key '" + k + "' in " + where);
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where)
{
  if (!j.contains(key))
    return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base)
{
  if (p.empty() || p.is_absolute())
    return p.lexically_normal();
  return (base / p).lexically_normal();
}

inline FunctionSpec parse_function(const json& j, const std::filesystem::path& base, const std::string& where)
{
  check_keys(j, {"kind", "params", "file", "inner"}, where);
  FunctionSpec f;
  read(j, "kind", f.kind, where);
  read(j, "params", f.params, where);
  std::string file;
  read(j, "file", file, where);
  f.file = resolve(file, base);
  if (j.contains("inner"))
    f.inner.push_back(parse_function(j.at("inner"), base, where + ".inner"));
  if (f.kind.empty())
    throw ConfigError(where + " needs a kind");
  return f;
}

inline json function_to_json(const FunctionSpec& f)
{
  json j{{"kind", f.kind}};
  if (!f.params.empty())
    j["params"] = f.params;
  if (!f.file.empty())
    j["file"] = f.file.string();
  if (!f.inner.empty())
    j["inner"] = function_to_json(f.inner.front());
  return j;
}

inline void check_range_triple(const std::vector<double>& v, const std::string& where)
{
  if (v.size() != 3 || !(v[2] > 0.0) || !(v[1] > v[0]))
    throw ConfigError(where + " must be [lo, hi, step] with lo < hi and step > 0");
}

} // namespace detail

inline ExperimentConfig from_json(const json& j, const std::filesystem::path& base_dir)
{
  using detail::check_keys;
  using detail::read;
  check_keys(j, {"schema_version", "seed", "coefficients", "simulation", "solver", "lsv", "output", "verify"},
             "config");
  if (!j.contains("schema_version"))
    throw ConfigError("config needs a schema_version");
  ExperimentConfig c;
  read(j, "schema_version", c.schema_version, "config");
  if (c.schema_version != schema_version)
    throw ConfigError("unsupported schema_version " + std::to_string(c.schema_version) + " (expected " +
                      std::to_string(schema_version) + ")");
  read(j, "seed", c.seed, "config");

  if (j.contains("coefficients")) {
    const auto& s = j.at("coefficients");
    check_keys(s, {"catalog", "functions", "validation_range"}, "coefficients");
    read(s, "catalog", c.coefficients.catalog, "coefficients");
    if (s.contains("functions")) {
      check_keys(s.at("functions"), {"b1", "b2", "sigma1", "sigma2", "f", "h"}, "coefficients.functions");
      for (const auto& [k, v] : s.at("functions").items())
        c.coefficients.functions[k] = detail::parse_function(v, base_dir, "coefficients.functions." + k);
    }
    std::vector<double> r{c.coefficients.validation_lo, c.coefficients.validation_hi};
    read(s, "validation_range", r, "coefficients");
    if (r.size() != 2 || !(r[1] > r[0]))
      throw ConfigError("coefficients.validation_range must be [lo, hi] with lo < hi");
    c.coefficients.validation_lo = r[0];
    c.coefficients.validation_hi = r[1];
  }

  if (j.contains("simulation")) {
    const auto& s = j.at("simulation");
    auto& o = c.simulation;
    check_keys(s,
               {"n_particles", "dt", "n_steps", "mode", "estimator", "n_bins", "min_count", "bandwidth",
                "burn_in_fraction", "histogram_bins", "marginal_grid_size", "clock_refinement", "allow_large_dt",
                "time_change", "mimic"},
               "simulation");
    read(s, "n_particles", o.n_particles, "simulation");
    read(s, "dt", o.dt, "simulation");
    read(s, "n_steps", o.n_steps, "simulation");
    read(s, "mode", o.mode, "simulation");
    read(s, "estimator", o.estimator, "simulation");
    read(s, "n_bins", o.n_bins, "simulation");
    read(s, "min_count", o.min_count, "simulation");
    read(s, "bandwidth", o.bandwidth, "simulation");
    read(s, "burn_in_fraction", o.burn_in_fraction, "simulation");
    read(s, "histogram_bins", o.histogram_bins, "simulation");
    read(s, "marginal_grid_size", o.marginal_grid_size, "simulation");
    read(s, "clock_refinement", o.clock_refinement, "simulation");
    read(s, "allow_large_dt", o.allow_large_dt, "simulation");
    read(s, "time_change", o.time_change, "simulation");
    read(s, "mimic", o.mimic, "simulation");
  }

  if (j.contains("solver")) {
    const auto& s = j.at("solver");
    auto& o = c.solver;
    check_keys(s,
               {"grid", "half_width", "tol", "max_iters", "damping", "adaptive_damping", "mollifier",
                "product_tolerance"},
               "solver");
    read(s, "grid", o.grid, "solver");
    read(s, "half_width", o.half_width, "solver");
    read(s, "tol", o.tol, "solver");
    read(s, "max_iters", o.max_iters, "solver");
    read(s, "damping", o.damping, "solver");
    read(s, "adaptive_damping", o.adaptive_damping, "solver");
    read(s, "product_tolerance", o.product_tolerance, "solver");
    if (s.contains("mollifier") && !s.at("mollifier").is_null()) {
      const auto& m = s.at("mollifier");
      check_keys(m, {"bandwidth", "kernel"}, "solver.mollifier");
      double bw = 0.1;
      read(m, "bandwidth", bw, "solver.mollifier");
      o.mollifier_bandwidth = bw;
      read(m, "kernel", o.mollifier_kernel, "solver.mollifier");
    }
  }

  if (j.contains("lsv")) {
    const auto& s = j.at("lsv");
    auto& o = c.lsv;
    check_keys(s,
               {"surface", "surface_file", "spot", "vol", "exponent", "maturities", "strikes", "vol_min", "vol_max",
                "flattening_multiple", "tail_slope", "reprice_strikes", "z_limit"},
               "lsv");
    read(s, "surface", o.surface, "lsv");
    std::string file;
    read(s, "surface_file", file, "lsv");
    o.surface_file = detail::resolve(file, base_dir);
    read(s, "spot", o.spot, "lsv");
    read(s, "vol", o.vol, "lsv");
    read(s, "exponent", o.exponent, "lsv");
    read(s, "maturities", o.maturities, "lsv");
    read(s, "strikes", o.strikes, "lsv");
    read(s, "vol_min", o.vol_min, "lsv");
    read(s, "vol_max", o.vol_max, "lsv");
    read(s, "flattening_multiple", o.flattening_multiple, "lsv");
    read(s, "tail_slope", o.tail_slope, "lsv");
    read(s, "reprice_strikes", o.reprice_strikes, "lsv");
    read(s, "z_limit", o.z_limit, "lsv");
    detail::check_range_triple(o.maturities, "lsv.maturities");
    detail::check_range_triple(o.strikes, "lsv.strikes");
  }

  if (j.contains("output")) {
    const auto& s = j.at("output");
    check_keys(s, {"directory", "snapshot_times"}, "output");
    std::string dir = c.output.directory.string();
    read(s, "directory", dir, "output");
    c.output.directory = dir;
    read(s, "snapshot_times", c.output.snapshot_times, "output");
  }
  c.output.directory = detail::resolve(c.output.directory, base_dir);

  if (j.contains("verify")) {
    const auto& s = j.at("verify");
    auto& o = c.verify;
    check_keys(s, {"checks", "scale", "tolerance_override", "limits"}, "verify");
    read(s, "checks", o.checks, "verify");
    if (s.contains("scale")) {
      const auto& k = s.at("scale");
      check_keys(k,
                 {"n_particles", "horizon", "dt", "fp_grid", "fp_half_width", "lsv_particles", "lsv_horizon"},
                 "verify.scale");
      read(k, "n_particles", o.scale.n_particles, "verify.scale");
      read(k, "horizon", o.scale.horizon, "verify.scale");
      read(k, "dt", o.scale.dt, "verify.scale");
      read(k, "fp_grid", o.scale.fp_grid, "verify.scale");
      read(k, "fp_half_width", o.scale.fp_half_width, "verify.scale");
      read(k, "lsv_particles", o.scale.lsv_particles, "verify.scale");
      read(k, "lsv_horizon", o.scale.lsv_horizon, "verify.scale");
    }
    if (s.contains("tolerance_override") && !s.at("tolerance_override").is_null()) {
      double t = 0.0;
      read(s, "tolerance_override", t, "verify");
      o.tolerance_override = t;
    }
    read(s, "limits", o.limits, "verify");
  }
  c.verify.scale.seed = c.seed;
  return c;
}

inline json to_json(const ExperimentConfig& c)
{
  json fns = json::object();
  for (const auto& [k, f] : c.coefficients.functions)
    fns[k] = detail::function_to_json(f);
  const auto& s = c.simulation;
  const auto& v = c.solver;
  const auto& l = c.lsv;
  const auto& k = c.verify.scale;
  json j{
      {"schema_version", c.schema_version},
      {"seed", c.seed},
      {"coefficients",
       {{"catalog", c.coefficients.catalog},
        {"functions", fns},
        {"validation_range", {c.coefficients.validation_lo, c.coefficients.validation_hi}}}},
      {"simulation",
       {{"n_particles", s.n_particles},
        {"dt", s.dt},
        {"n_steps", s.n_steps},
        {"mode", s.mode},
        {"estimator", s.estimator},
        {"n_bins", s.n_bins},
        {"min_count", s.min_count},
        {"bandwidth", s.bandwidth},
        {"burn_in_fraction", s.burn_in_fraction},
        {"histogram_bins", s.histogram_bins},
        {"marginal_grid_size", s.marginal_grid_size},
        {"clock_refinement", s.clock_refinement},
        {"allow_large_dt", s.allow_large_dt},
        {"time_change", s.time_change},
        {"mimic", s.mimic}}},
      {"solver",
       {{"grid", v.grid},
        {"half_width", v.half_width},
        {"tol", v.tol},
        {"max_iters", v.max_iters},
        {"damping", v.damping},
        {"adaptive_damping", v.adaptive_damping},
        {"mollifier", v.mollifier_bandwidth
                          ? json{{"bandwidth", *v.mollifier_bandwidth}, {"kernel", v.mollifier_kernel}}
                          : json(nullptr)},
        {"product_tolerance", v.product_tolerance}}},
      {"lsv",
       {{"surface", l.surface},
        {"surface_file", l.surface_file.string()},
        {"spot", l.spot},
        {"vol", l.vol},
        {"exponent", l.exponent},
        {"maturities", l.maturities},
        {"strikes", l.strikes},
        {"vol_min", l.vol_min},
        {"vol_max", l.vol_max},
        {"flattening_multiple", l.flattening_multiple},
        {"tail_slope", l.tail_slope},
        {"reprice_strikes", l.reprice_strikes},
        {"z_limit", l.z_limit}}},
      {"output", {{"directory", c.output.directory.string()}, {"snapshot_times", c.output.snapshot_times}}},
      {"verify",
       {{"checks", c.verify.checks},
        {"scale",
         {{"n_particles", k.n_particles},
          {"horizon", k.horizon},
          {"dt", k.dt},
          {"fp_grid", k.fp_grid},
          {"fp_half_width", k.fp_half_width},
          {"lsv_particles", k.lsv_particles},
          {"lsv_horizon", k.lsv_horizon}}},
        {"tolerance_override", c.verify.tolerance_override ? json(*c.verify.tolerance_override) : json(nullptr)},
        {"limits", c.verify.limits}}}};
  return j;
}

inline ExperimentConfig load(const std::filesystem::path& path)
{
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j, std::filesystem::absolute(path).parent_path());
}

// FNV-1a over the canonical serialization.
inline std::uint64_t fnv1a(std::string_view bytes)
{
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v)
{
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int k = 15; k >= 0; --k, v >>= 4)
    s[static_cast<std::size_t>(k)] = digits[v & 0xf];
  return s;
}

inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

// ---- assembly of library objects ------------------------------------------

namespace detail
{

inline ScalarFunction build_function(const FunctionSpec& s, const ScalarFunction& f)
{
  if (s.kind == "square") {
    if (!s.params.empty() || !s.file.empty())
      throw ConfigError("square takes only an optional inner function");
    return ScalarFunction::square_of(s.inner.empty() ? f : build_function(s.inner.front(), f));
  }
  const auto kind = function_kind_from_string(s.kind);
  if (kind == FunctionKind::tabulated) {
    if (s.file.empty())
      throw ConfigError("tabulated function needs a file");
    return ScalarFunction::from_csv(s.file);
  }
  if (s.params.size() != parameter_count(kind))
    throw ConfigError("function kind '" + s.kind + "' takes " + std::to_string(parameter_count(kind)) +
                      " parameters, got " + std::to_string(s.params.size()));
  const auto& p = s.params;
  switch (kind) {
  case FunctionKind::affine: return ScalarFunction::affine(p[0], p[1]);
  case FunctionKind::saturated_linear: return ScalarFunction::saturated_linear(p[0], p[1], p[2], p[3]);
  case FunctionKind::constant: return ScalarFunction::constant(p[0]);
  case FunctionKind::logistic: return ScalarFunction::logistic(p[0], p[1], p[2], p[3]);
  case FunctionKind::tanh: return ScalarFunction::tanh_shape(p[0], p[1], p[2], p[3]);
  case FunctionKind::sine: return ScalarFunction::sine(p[0], p[1], p[2], p[3]);
  case FunctionKind::smooth_step: return ScalarFunction::smooth_step(p[0], p[1], p[2], p[3]);
  default: break;
  }
  throw ConfigError("function kind '" + s.kind + "' cannot be built from parameters");
}

inline CoefficientSet catalog_set(const std::string& name)
{
  if (name == "base" || name == "independence")
    return catalog::independence_set();
  if (name == "general")
    return catalog::general_set();
  if (name == "constant-fh")
    return catalog::constant_fh_set();
  if (name == "standard-ou")
    return catalog::standard_ou_set();
  throw ConfigError("unknown catalog set '" + name + "'");
}

} // namespace detail

// Catalog set with overrides. Overrides refit the constants and rerun the
// coefficient condition check; a failure raises ValidationError naming the violations.
inline CoefficientSet build_coefficients(const CoefficientsSection& s)
{
  auto cs = detail::catalog_set(s.catalog);
  if (s.functions.empty())
    return cs;
  const bool h_was_f2 = cs.h_is_f_squared();
  const auto get = [&](const char* key, ScalarFunction& target) {
    if (const auto it = s.functions.find(key); it != s.functions.end())
      target = detail::build_function(it->second, cs.f);
  };
  get("b1", cs.b1);
  get("b2", cs.b2);
  get("sigma1", cs.sigma1);
  get("sigma2", cs.sigma2);
  get("f", cs.f);
  if (h_was_f2)
    cs.h = ScalarFunction::square_of(cs.f);
  get("h", cs.h);
  const Interval range{s.validation_lo, s.validation_hi};
  cs.constants = fit_constants(cs, range);
  const auto report = validate_assumption_a(cs, range, 20001);
  if (!report.ok())
    throw ValidationError("coefficient set fails the coefficient conditions: " + report.summary());
  cs.validated = true;
  return cs;
}

inline SimConfig build_sim_config(const ExperimentConfig& c)
{
  const auto& s = c.simulation;
  SimConfig cfg;
  cfg.n_particles = s.n_particles;
  cfg.dt = s.dt;
  cfg.n_steps = s.n_steps;
  cfg.seed = c.seed;
  if (s.mode == "mckean-vlasov")
    cfg.mode = CouplingMode::mckean_vlasov;
  else if (s.mode == "transformed")
    cfg.mode = CouplingMode::transformed;
  else if (s.mode == "decoupled")
    cfg.mode = CouplingMode::decoupled;
  else
    throw ConfigError("unknown simulation mode '" + s.mode + "' (mckean-vlasov, transformed, decoupled)");
  if (s.estimator == "binning")
    cfg.estimator.kind = EstimatorKind::binning;
  else if (s.estimator == "kernel")
    cfg.estimator.kind = EstimatorKind::kernel_regression;
  else
    throw ConfigError("unknown estimator '" + s.estimator + "' (binning, kernel)");
  cfg.estimator.n_bins = s.n_bins;
  cfg.estimator.min_count = s.min_count;
  cfg.estimator.bandwidth = s.bandwidth;
  cfg.snapshot_times = c.output.snapshot_times;
  cfg.burn_in_fraction = s.burn_in_fraction;
  cfg.histogram_bins = s.histogram_bins;
  cfg.marginal_grid_size = s.marginal_grid_size;
  cfg.clock_refinement = s.clock_refinement;
  cfg.allow_large_dt = s.allow_large_dt;
  return cfg;
}

inline PicardOptions build_picard_options(const SolverSection& s)
{
  PicardOptions o;
  o.tol = s.tol;
  o.max_iters = s.max_iters;
  o.damping = s.damping;
  o.adaptive_damping = s.adaptive_damping;
  if (s.mollifier_bandwidth) {
    MollifierConfig m;
    m.bandwidth = *s.mollifier_bandwidth;
    if (s.mollifier_kernel == "triangular")
      m.kernel_shape = KernelShape::triangular;
    else if (s.mollifier_kernel == "bump")
      m.kernel_shape = KernelShape::bump;
    else
      throw ConfigError("unknown mollifier kernel '" + s.mollifier_kernel + "' (triangular, bump)");
    o.mollifier = m;
  }
  return o;
}

} // namespace condmv::config
