#include <condmv/particlesim.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace condmv;

namespace
{

SimConfig small_config(std::size_t n, double dt, std::size_t steps)
{
  SimConfig cfg;
  cfg.n_particles = n;
  cfg.dt = dt;
  cfg.n_steps = steps;
  cfg.seed = 7;
  return cfg;
}

CoefficientSet unit_f_set()
{
  auto cs = catalog::base_set();
  cs.f = ScalarFunction::constant(1.0);
  cs.h = ScalarFunction::square_of(cs.f);
  cs.constants.f_low = cs.constants.f_high = 1.0;
  cs.constants.h_low = cs.constants.h_high = 1.0;
  return validated(cs);
}

std::string read_file(const std::filesystem::path& p)
{
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

} // namespace

TEST(ParticleSim, ZeroNoiseEulerStep)
{
  const auto cs = catalog::standard_ou_set();
  auto cfg = small_config(4, 0.01, 1);
  const auto cloud = ParticleCloud::uniform(std::vector<double>(4, 1.0), std::vector<double>(4, 0.0));
  const std::vector<double> zero(4, 0.0);
  const auto next = step(cloud, cs, cfg, zero, zero);
  for (double x : next.xs)
    EXPECT_EQ(x, 1.0 - cfg.dt);
  EXPECT_DOUBLE_EQ(next.time, cfg.dt);
}

TEST(ParticleSim, ConstantFactorsReduceToScalarEuler)
{
  const auto cs = catalog::constant_fh_set();
  const auto cfg = small_config(500, 1e-3, 1);
  const auto m = build_marginals(cs);
  const auto cloud = ParticleCloud::uniform(sample(m.m1, 500, 3), sample(m.m2, 500, 4));
  std::vector<double> xi(500), eta(500);
  const NoiseStream noise(11, StreamId::dynamics);
  for (std::size_t i = 0; i < 500; ++i)
    std::tie(xi[i], eta[i]) = noise.normals(i, 0);
  const auto next = step(cloud, cs, cfg, xi, eta);
  const double sq = std::sqrt(cfg.dt);
  for (std::size_t i = 0; i < 500; ++i) {
    const double x = cloud.xs[i], y = cloud.ys[i];
    EXPECT_EQ(next.xs[i], x + cs.b1(x) * cfg.dt + cs.sigma1(x) * sq * xi[i]);
    EXPECT_EQ(next.ys[i], y + cs.b2(y) * cfg.dt + cs.sigma2(y) * sq * eta[i]);
  }
}

TEST(ParticleSim, ConstantFactorsMatchDecoupledBitwise)
{
  const auto cs = catalog::constant_fh_set();
  auto cfg = small_config(3000, 2e-3, 200);
  cfg.snapshot_times = {0.1, 0.4};
  const auto mv = run(cs, cfg);
  cfg.mode = CouplingMode::decoupled;
  const auto dec = run(cs, cfg);
  ASSERT_EQ(mv.snapshots.size(), dec.snapshots.size());
  for (std::size_t k = 0; k < mv.snapshots.size(); ++k) {
    EXPECT_EQ(mv.snapshots[k].xs, dec.snapshots[k].xs);
    EXPECT_EQ(mv.snapshots[k].ys, dec.snapshots[k].ys);
  }
}

TEST(ParticleSim, RunIsDeterministic)
{
  const auto cs = catalog::general_set();
  auto cfg = small_config(4000, 2e-3, 150);
  cfg.snapshot_times = {0.1, 0.3};
  const auto a = run(cs, cfg);
  const auto b = run(cs, cfg);
  ASSERT_EQ(a.snapshots.size(), 2u);
  for (std::size_t k = 0; k < a.snapshots.size(); ++k) {
    EXPECT_EQ(a.snapshots[k].xs, b.snapshots[k].xs);
    EXPECT_EQ(a.snapshots[k].ys, b.snapshots[k].ys);
  }
  cfg.seed = 8;
  const auto c = run(cs, cfg);
  EXPECT_NE(a.final_cloud.xs, c.final_cloud.xs);
}

TEST(ParticleSim, NoiseDoesNotDependOnParticleCount)
{
  const auto cs = catalog::constant_fh_set();
  auto cfg = small_config(1000, 2e-3, 50);
  cfg.mode = CouplingMode::decoupled;
  const auto a = run(cs, cfg);
  cfg.n_particles = 1500;
  const auto b = run(cs, cfg);
  for (std::size_t i = 0; i < 1000; ++i)
    ASSERT_EQ(a.final_cloud.xs[i], b.final_cloud.xs[i]);
}

TEST(ParticleSim, SnapshotsAndDiagnosticsAlign)
{
  const auto cs = catalog::general_set();
  auto cfg = small_config(2000, 2e-3, 100);
  cfg.snapshot_times = {0.0, 0.1, 0.2};
  const auto out = run(cs, cfg);
  ASSERT_EQ(out.snapshots.size(), 3u);
  ASSERT_EQ(out.diagnostics.size(), 3u);
  EXPECT_EQ(out.snapshots[0].xs, out.initial_cloud.xs);
  EXPECT_NEAR(out.snapshot_times[1], 0.1, 1e-12);
  EXPECT_TRUE(out.diagnostics[0].burn_in);
  EXPECT_FALSE(out.diagnostics[2].burn_in);
  EXPECT_EQ(out.final_cloud.xs, out.snapshots[2].xs);

  const auto dir = std::filesystem::temp_directory_path() / "condmv_particlesim_test";
  std::filesystem::create_directories(dir);
  out.write_diagnostics_csv(dir / "diag.csv");
  out.write_snapshot_csv(1, dir / "snap.csv");
  const auto diag = read_file(dir / "diag.csv");
  EXPECT_EQ(diag.substr(0, diag.find('\n')),
            "time,second_moment,xy_correlation,w1_x,w1_y,second_moment_se,hist_l1_product,burn_in");
  const auto snap = read_file(dir / "snap.csv");
  EXPECT_NE(snap.find("particle_index,x,y,weight\n0,"), std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST(ParticleSim, ConfigErrors)
{
  const auto cs = catalog::general_set();
  auto cfg = small_config(2000, 0.05, 10);
  EXPECT_THROW(run(cs, cfg), ConfigError);
  cfg.dt = 1e-3;
  cfg.snapshot_times = {1.0};
  EXPECT_THROW(run(cs, cfg), ConfigError);
  cfg.snapshot_times.clear();
  cfg.mode = CouplingMode::frozen_g;
  EXPECT_THROW(run(cs, cfg), ConfigError);
  cfg.mode = CouplingMode::mckean_vlasov;
  auto raw = cs;
  raw.validated = false;
  EXPECT_THROW(run(raw, cfg), ValidationError);
  cfg.allow_unvalidated = true;
  EXPECT_NO_THROW(run(raw, cfg));
  EXPECT_THROW(run_time_change(cs, cfg), ConfigError);
}

TEST(ParticleSim, BlowupNamesTheStep)
{
  auto cs = catalog::constant_fh_set();
  cs.b1 = ScalarFunction::affine(500.0, 0.0);
  cs.validated = false;
  auto cfg = small_config(10, 0.01, 1000);
  cfg.allow_unvalidated = true;
  cfg.allow_large_dt = true;
  cfg.mode = CouplingMode::decoupled;
  try {
    run(cs, cfg);
    FAIL() << "expected a blowup";
  } catch (const BlowupError& e) {
    EXPECT_GT(e.step(), 100u);
    EXPECT_LT(e.step(), 1000u);
  }
}

TEST(ParticleSim, MomentBoundConstants)
{
  const auto cs = catalog::independence_set();
  const auto& k = cs.constants;
  const auto mb = moment_bound(cs);
  const double r_min = k.h_low / k.h_high;
  EXPECT_DOUBLE_EQ(mb.c_bar, k.c * r_min);
  EXPECT_DOUBLE_EQ(mb.C1_bar, k.C1 / r_min);
  EXPECT_DOUBLE_EQ(mb.two_sigma, 1.3 * 1.3 * 1.5 * 1.5 / (0.7 * 0.7));
  EXPECT_NEAR(mb.value, (mb.two_sigma + mb.C1_bar) / mb.c_bar, 1e-12);
}

TEST(ParticleSim, SecondMomentRespectsBound)
{
  for (const auto& cs : {catalog::independence_set(), catalog::general_set()}) {
    auto cfg = small_config(10'000, 5e-3, 600);
    cfg.snapshot_times = {0.5, 1.5, 3.0};
    const auto out = run(cs, cfg);
    const double bound = moment_bound(cs).value;
    for (const auto& d : out.diagnostics)
      EXPECT_LE(d.second_moment, bound + 3.0 * d.second_moment_se);
  }
}

TEST(ParticleSim, IndependenceWhenHIsFSquared)
{
  const auto cs = catalog::independence_set();
  const std::size_t n = 20'000;
  auto cfg = small_config(n, 5e-3, 400);
  cfg.snapshot_times = {0.5, 1.0, 2.0};
  const auto out = run(cs, cfg);
  const double tol = 5.0 / std::sqrt(static_cast<double>(n));
  for (const auto& d : out.diagnostics) {
    EXPECT_LT(std::abs(d.xy_correlation), 4.0 / std::sqrt(static_cast<double>(n)));
    EXPECT_LT(d.w1_x, tol);
    EXPECT_LT(d.w1_y, tol);
    EXPECT_LT(d.hist_l1_product, 0.1);
  }
}

TEST(ParticleSim, DecoupledKeepsStationaryMarginals)
{
  const auto cs = catalog::general_set();
  const std::size_t n = 20'000;
  auto cfg = small_config(n, 5e-3, 400);
  cfg.mode = CouplingMode::decoupled;
  const auto out = run(cs, cfg);
  EXPECT_LT(out.diagnostics.back().w1_x, 5.0 / std::sqrt(static_cast<double>(n)));
  EXPECT_LT(out.diagnostics.back().w1_y, 5.0 / std::sqrt(static_cast<double>(n)));
}

TEST(ParticleSim, KernelAndBinningAgree)
{
  const auto cs = catalog::general_set();
  const std::size_t n = 10'000;
  auto cfg = small_config(n, 5e-3, 200);
  const auto bin = run(cs, cfg);
  cfg.estimator.kind = EstimatorKind::kernel_regression;
  const auto ker = run(cs, cfg);
  const double tol = 2.0 * 5.0 / std::sqrt(static_cast<double>(n));
  EXPECT_LT(stats::wasserstein1(bin.final_cloud.xs, ker.final_cloud.xs), tol);
  EXPECT_LT(stats::wasserstein1(bin.final_cloud.ys, ker.final_cloud.ys), tol);
}

TEST(ParticleSim, TransformedAndFrozenModesRun)
{
  const auto cs = catalog::independence_set();
  const std::size_t n = 10'000;
  auto cfg = small_config(n, 5e-3, 200);
  cfg.mode = CouplingMode::transformed;
  const auto tr = run(cs, cfg);
  // X-dynamics of the transformed system are those of the first marginal.
  EXPECT_LT(tr.diagnostics.back().w1_x, 5.0 / std::sqrt(static_cast<double>(n)));

  cfg.mode = CouplingMode::frozen_g;
  CondExpectationField one;
  one.grid = {-1.0, 1.0};
  one.values = one.raw_values = {1.0, 1.0};
  one.inherited = {false, false};
  cfg.frozen = FrozenFields{one, one};
  const auto fr = run(cs, cfg);
  EXPECT_LT(fr.diagnostics.back().w1_x, 5.0 / std::sqrt(static_cast<double>(n)));
}

TEST(ParticleSim, TimeChangeWithUnitFactorMatchesDecoupled)
{
  const auto cs = unit_f_set();
  const std::size_t n = 20'000;
  auto cfg = small_config(n, 5e-3, 400);
  const auto tc = run_time_change(cs, cfg);
  ASSERT_TRUE(tc.time_change);
  EXPECT_DOUBLE_EQ(tc.time_change->min_increment, cfg.dt);
  EXPECT_DOUBLE_EQ(tc.time_change->max_increment, cfg.dt);
  cfg.mode = CouplingMode::decoupled;
  const auto dec = run(cs, cfg);
  EXPECT_LT(stats::wasserstein1(tc.final_cloud.xs, dec.final_cloud.xs), 5.0 / std::sqrt(static_cast<double>(n)));
  // Y uses the same stream in both constructions.
  for (std::size_t i = 0; i < n; ++i)
    ASSERT_NEAR(tc.final_cloud.ys[i], dec.final_cloud.ys[i], 1e-12);
}

TEST(ParticleSim, TimeChangeKeepsProductLaw)
{
  const auto cs = catalog::independence_set();
  const std::size_t n = 20'000;
  auto cfg = small_config(n, 5e-3, 400);
  cfg.snapshot_times = {1.0, 2.0};
  const auto tc = run_time_change(cs, cfg);
  const auto& k = cs.constants;
  EXPECT_GT(tc.time_change->min_increment, 0.0);
  EXPECT_LE(tc.time_change->max_increment, k.f_high * k.f_high * cfg.dt);
  const auto m = build_marginals(cs);
  const auto xe = stats::quantile_edges(m.m1, 10), ye = stats::quantile_edges(m.m2, 10);
  const auto& c = tc.final_cloud;
  const double l1 = stats::l1_distance(stats::histogram(c.xs, c.ys, c.weights, xe, ye),
                                       stats::product_histogram(m.m1, m.m2, xe, ye));
  EXPECT_LT(l1, 10.0 * std::sqrt(100.0 / static_cast<double>(n)));
  EXPECT_LT(std::abs(tc.diagnostics.back().xy_correlation), 4.0 / std::sqrt(static_cast<double>(n)));
}

TEST(ParticleSim, MimickingDiffusionTracksSystem)
{
  const auto cs = catalog::independence_set();
  const std::size_t n = 20'000;
  auto cfg = small_config(n, 5e-3, 400);
  cfg.snapshot_times = {0.5, 1.0, 2.0};
  const auto out = run(cs, cfg);
  const auto rep = mimick_check(out, cs, cfg);
  ASSERT_EQ(rep.w1_to_system.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_LT(rep.w1_to_system[k], 10.0 / std::sqrt(static_cast<double>(n)));
    EXPECT_LT(rep.w1_to_m1[k], 10.0 / std::sqrt(static_cast<double>(n)));
  }
}

TEST(ParticleSim, MimickingDecoupledRun)
{
  const auto cs = catalog::general_set();
  const std::size_t n = 10'000;
  auto cfg = small_config(n, 5e-3, 200);
  cfg.mode = CouplingMode::decoupled;
  cfg.snapshot_times = {0.5, 1.0};
  const auto out = run(cs, cfg);
  const auto rep = mimick_check(out, cs, cfg);
  for (double d : rep.w1_to_system)
    EXPECT_LT(d, 5.0 / std::sqrt(static_cast<double>(n)));
}
