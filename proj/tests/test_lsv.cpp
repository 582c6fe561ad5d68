#include <condmv/lsv.hpp>
#include <condmv/stats.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

using namespace condmv;

namespace
{

std::vector<double> range(double lo, double hi, double step)
{
  std::vector<double> v;
  for (double x = lo; x <= hi + 1e-9; x += step)
    v.push_back(std::round(x / step) * step);
  return v;
}

double cev_vol(double K) { return 0.2 * std::pow(K, -0.25); }

VolProcess unit_factor()
{
  const auto base = catalog::base_set();
  return {base.b2, base.sigma2, ScalarFunction::constant(1.0)};
}

VolProcess catalog_factor()
{
  const auto base = catalog::base_set();
  return {base.b2, base.sigma2, base.f};
}

SimConfig lsv_config(std::size_t n, double horizon)
{
  SimConfig cfg;
  cfg.n_particles = n;
  cfg.dt = 1e-3;
  cfg.n_steps = static_cast<std::size_t>(std::llround(horizon / cfg.dt));
  cfg.seed = 11;
  return cfg;
}

// Independent Euler scheme for dX = -1/2 s(X)^2 dt + s(X) dW, s(x) = sigma(e^x).
std::vector<double> local_vol_euler(const LocalVolSurface& lv, std::size_t slice, std::size_t n, double dt,
                                    std::size_t steps, unsigned seed)
{
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> z;
  std::vector<double> xs(n, 0.0);
  for (std::size_t s = 0; s < steps; ++s)
    for (auto& x : xs) {
      const double v = detail::slice_vol(lv, slice, std::exp(x));
      x += -0.5 * v * v * dt + v * std::sqrt(dt) * z(gen);
    }
  return xs;
}

} // namespace

TEST(CallSurface, BlackScholesSurfaceIsArbitrageFree)
{
  const auto s = black_scholes_surface(1.0, 0.2, range(0.25, 2.0, 0.25), range(0.5, 2.0, 0.05));
  EXPECT_NO_THROW(s.check());
}

TEST(CallSurface, DetectsButterflyArbitrage)
{
  auto s = black_scholes_surface(1.0, 0.2, {0.5, 1.0}, range(0.8, 1.2, 0.05));
  s.prices[1 * s.n_strikes() + 4] += 0.01;
  try {
    s.check();
    FAIL() << "expected ArbitrageError";
  } catch (const ArbitrageError& e) {
    EXPECT_EQ(e.maturity_index(), 1u);
    EXPECT_EQ(e.strike_index(), 4u);
  }
  EXPECT_THROW(dupire_from_surface(s), ArbitrageError);
}

TEST(CallSurface, RejectsMalformedAxes)
{
  auto s = black_scholes_surface(1.0, 0.2, {0.5, 1.0}, {0.9, 1.0, 1.1});
  s.maturities = {1.0, 0.5};
  EXPECT_THROW(s.check(), InputError);
  s = black_scholes_surface(1.0, 0.2, {0.5, 1.0}, {0.9, 1.0, 1.1});
  s.prices.pop_back();
  EXPECT_THROW(s.check(), InputError);
}

TEST(CallSurface, CsvRoundTrip)
{
  const auto dir = std::filesystem::temp_directory_path() / "condmv_lsv_csv";
  std::filesystem::create_directories(dir);
  const auto s = black_scholes_surface(1.0, 0.25, {0.5, 1.0, 1.5}, {0.8, 0.9, 1.0, 1.1});
  s.write_csv(dir / "surface.csv");
  const auto r = CallSurface::read_csv(dir / "surface.csv", 1.0);
  EXPECT_EQ(r.maturities, s.maturities);
  EXPECT_EQ(r.strikes, s.strikes);
  ASSERT_EQ(r.prices.size(), s.prices.size());
  for (std::size_t k = 0; k < s.prices.size(); ++k)
    EXPECT_DOUBLE_EQ(r.prices[k], s.prices[k]);
}

TEST(BlackScholes, KnownValues)
{
  EXPECT_NEAR(black_scholes_call(1.0, 1.0, 1.0, 0.2), 0.0796556745, 1e-9);
  EXPECT_DOUBLE_EQ(black_scholes_call(1.0, 0.0, 1.0, 0.2), 1.0);
  EXPECT_DOUBLE_EQ(black_scholes_call(1.0, 0.7, 0.0, 0.2), 0.3);
}

class FlatVolRecovery : public ::testing::TestWithParam<double>
{
};

TEST_P(FlatVolRecovery, DupireReturnsTheFlatVol)
{
  const double vol = GetParam();
  const auto s = black_scholes_surface(1.0, vol, range(0.5, 2.0, 0.01), range(0.5, 2.0, 0.01));
  const auto lv = dupire_from_surface(s);
  double worst = 0.0;
  for (std::size_t m = 0; m + 1 < s.n_maturities(); ++m)
    for (std::size_t k = 5; k + 5 < s.n_strikes(); ++k)
      worst = std::max(worst, std::abs(lv(m, k) - vol));
  EXPECT_LT(worst, 2e-3);
  EXPECT_EQ(lv.clamped_count(), 0u);
}

INSTANTIATE_TEST_SUITE_P(Vols, FlatVolRecovery, ::testing::Values(0.2, 0.3));

TEST(Dupire, ClampsToTheConfiguredBounds)
{
  const auto s = black_scholes_surface(1.0, 0.2, range(0.5, 1.0, 0.05), range(0.8, 1.2, 0.05));
  const auto lv = dupire_from_surface(s, {0.25, 2.0, 1e-10});
  for (double v : lv.values)
    EXPECT_DOUBLE_EQ(v, 0.25);
  EXPECT_EQ(lv.clamped_count(), lv.values.size());
}

TEST(Dupire, RecoversTheCevGenerator)
{
  const auto s = forward_pde_surface(1.0, cev_vol, range(0.5, 2.0, 0.01), range(0.5, 2.0, 0.01));
  ASSERT_NO_THROW(s.check());
  const auto lv = dupire_from_surface(s);
  double worst = 0.0;
  for (std::size_t m = 0; m + 1 < s.n_maturities(); ++m)
    for (std::size_t k = 5; k + 5 < s.n_strikes(); ++k) {
      const double K = s.strikes[k];
      worst = std::max(worst, std::abs(lv(m, k) / cev_vol(K) - 1.0));
    }
  EXPECT_LT(worst, 0.01);
}

TEST(ForwardPde, FlatVolMatchesBlackScholes)
{
  const auto flat = [](double) { return 0.2; };
  const auto s = forward_pde_surface(1.0, flat, {0.5, 1.0}, range(0.7, 1.3, 0.1));
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t k = 0; k < s.n_strikes(); ++k)
      EXPECT_NEAR(s(m, k), black_scholes_call(1.0, s.strikes[k], s.maturities[m], 0.2), 2e-5);
}

TEST(Reprice, StrikeZeroGivesTheForward)
{
  auto cloud = ParticleCloud::uniform({-0.3, 0.0, 0.4}, {0.0, 0.0, 0.0});
  const std::vector<double> k{0.0};
  const auto r = reprice(cloud, k, 1.0);
  EXPECT_NEAR(r.prices[0], (std::exp(-0.3) + 1.0 + std::exp(0.4)) / 3.0, 1e-15);
}

TEST(Reprice, SingleParticle)
{
  auto cloud = ParticleCloud::uniform({0.0}, {0.0});
  const std::vector<double> k{0.5};
  const auto r = reprice(cloud, k, 1.0);
  EXPECT_DOUBLE_EQ(r.prices[0], 0.5);
  EXPECT_DOUBLE_EQ(r.std_errors[0], 0.0);
}

TEST(Reprice, LognormalCloudMatchesBlackScholes)
{
  const std::size_t n = 1000000;
  const NoiseStream noise(3, StreamId::sampling);
  std::vector<double> xs(n);
  for (std::size_t i = 0; i < n; ++i)
    xs[i] = -0.02 + 0.2 * noise.normals(i, 0).first;
  const auto cloud = ParticleCloud::uniform(std::move(xs), std::vector<double>(n, 0.0));
  const std::vector<double> k{1.0};
  const auto r = reprice(cloud, k, 1.0);
  EXPECT_NEAR(r.prices[0], 0.079656, 3.0 * r.std_errors[0]);
  EXPECT_LT(r.std_errors[0], 2e-4);
}

TEST(Reprice, PricesAreNonincreasingAndConvexInStrike)
{
  std::mt19937_64 gen(5);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(0.1, 1.0);
  const auto strikes = range(0.5, 1.5, 0.05);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 50 + 10 * static_cast<std::size_t>(trial);
    std::vector<double> xs(n), w(n);
    double tot = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      xs[i] = 0.3 * z(gen);
      w[i] = u(gen);
      tot += w[i];
    }
    for (auto& v : w)
      v /= tot;
    const ParticleCloud cloud{xs, std::vector<double>(n, 0.0), w};
    const auto r = reprice(cloud, strikes, 1.0);
    for (std::size_t k = 1; k < strikes.size(); ++k)
      EXPECT_LE(r.prices[k], r.prices[k - 1] + 1e-15);
    for (std::size_t k = 1; k + 1 < strikes.size(); ++k)
      EXPECT_GE(r.prices[k - 1] - 2.0 * r.prices[k] + r.prices[k + 1], -1e-15);
  }
}

TEST(Reprice, ReportCsvHasTheDocumentedColumns)
{
  const auto dir = std::filesystem::temp_directory_path() / "condmv_lsv_report";
  std::filesystem::create_directories(dir);
  auto cloud = ParticleCloud::uniform({-0.1, 0.1}, {0.0, 0.0});
  const std::vector<double> k{0.9, 1.0}, ref{0.11, 0.05};
  const auto rows = compare_prices(reprice(cloud, k, 1.0), ref);
  write_reprice_csv(dir / "reprice.csv", rows);
  const auto t = csv::read(dir / "reprice.csv");
  ASSERT_EQ(t.header.size(), 5u);
  EXPECT_EQ(t.header[0], "strike");
  EXPECT_EQ(t.header[4], "z_score");
  EXPECT_EQ(t.rows.size(), 2u);
}

TEST(CalibratedCoefficients, FlatteningKeepsCoefficientConditions)
{
  const auto s = forward_pde_surface(1.0, cev_vol, range(0.5, 2.0, 0.01), range(0.5, 2.0, 0.01));
  auto lv = dupire_from_surface(s);
  const auto cs = assemble_lsv_coefficients(lv, catalog_factor(), 1.0);
  EXPECT_TRUE(cs.validated);
  EXPECT_TRUE(cs.h_is_f_squared());
  const double R = lv.flattening.radius;
  EXPECT_NEAR(R, 3.0 * cev_vol(1.0) * std::sqrt(2.0), 5e-3);
  // constant vol beyond the radius, linear tail in the drift
  EXPECT_DOUBLE_EQ(cs.sigma1(R + 1.0), cs.sigma1(R + 2.0));
  EXPECT_NEAR(cs.b1(R + 2.0) - cs.b1(R + 1.0), -0.01, 1e-9);
  EXPECT_NEAR(cs.b1(-R - 2.0) - cs.b1(-R - 1.0), 0.01, 1e-9);
  EXPECT_NEAR(cs.b1(0.0), -0.5 * cs.sigma1(0.0) * cs.sigma1(0.0), 1e-12);
}

TEST(CalibratedLsv, UnitFactorFlatVolIsBlackScholes)
{
  auto lv = dupire_from_surface(black_scholes_surface(1.0, 0.2, range(0.5, 2.0, 0.01), range(0.5, 2.0, 0.01)));
  const auto out = simulate_calibrated_lsv(lv, unit_factor(), lsv_config(20000, 1.0));
  const auto& xs = out.final_cloud.xs;
  const double m = stats::mean(xs);
  double v = 0.0;
  for (double x : xs)
    v += (x - m) * (x - m);
  v /= static_cast<double>(xs.size() - 1);
  const double se_mean = std::sqrt(0.04 / 20000.0), se_var = 0.04 * std::sqrt(2.0 / 20000.0);
  EXPECT_NEAR(m, -0.02, 4.0 * se_mean);
  EXPECT_NEAR(v, 0.04, 4.0 * se_var);
}

TEST(CalibratedLsv, UnitFactorMatchesOneDimensionalLocalVol)
{
  const auto s = forward_pde_surface(1.0, cev_vol, range(0.5, 2.0, 0.01), range(0.5, 2.0, 0.01));
  auto lv = dupire_from_surface(s);
  const std::size_t n = 20000;
  const auto out = simulate_calibrated_lsv(lv, unit_factor(), lsv_config(n, 1.0));
  const auto slice = detail::nearest_index(lv.maturities, 1.0);
  const auto ref = local_vol_euler(lv, slice, n, 1e-3, 1000, 17);
  const double scale = std::sqrt(0.04);
  EXPECT_LT(stats::wasserstein1(out.final_cloud.xs, ref), 5.0 * scale / std::sqrt(static_cast<double>(n)));
}

TEST(CalibratedLsv, UnitFactorReproducesInputPricesAtEveryMaturity)
{
  const auto s = black_scholes_surface(1.0, 0.2, range(0.5, 2.0, 0.01), range(0.5, 2.0, 0.01));
  auto lv = dupire_from_surface(s);
  auto cfg = lsv_config(20000, 1.0);
  cfg.snapshot_times = {0.5, 0.75, 1.0};
  const auto out = simulate_calibrated_lsv(lv, unit_factor(), cfg);
  const auto strikes = range(0.8, 1.2, 0.1);
  for (std::size_t j = 0; j < out.snapshots.size(); ++j) {
    std::vector<double> ref;
    for (double K : strikes)
      ref.push_back(black_scholes_call(1.0, K, out.snapshot_times[j], 0.2));
    for (const auto& row : compare_prices(reprice(out.snapshots[j], strikes, 1.0), ref))
      EXPECT_LT(std::abs(row.z_score), 3.0) << "T=" << out.snapshot_times[j] << " K=" << row.strike;
  }
}

TEST(CalibratedLsv, CatalogFactorRepricesFlatVolCalls)
{
  auto lv = dupire_from_surface(black_scholes_surface(1.0, 0.2, range(0.5, 2.0, 0.01), range(0.5, 2.0, 0.01)));
  const auto out = simulate_calibrated_lsv(lv, catalog_factor(), lsv_config(20000, 1.0));
  const std::vector<double> strikes{0.8, 1.0, 1.2};
  std::vector<double> ref;
  for (double K : strikes)
    ref.push_back(black_scholes_call(1.0, K, 1.0, 0.2));
  for (const auto& row : compare_prices(reprice(out.final_cloud, strikes, 1.0), ref))
    EXPECT_LT(std::abs(row.z_score), 3.0) << "K=" << row.strike;
}

TEST(CalibratedLsv, IndependenceCarriesOver)
{
  auto lv = dupire_from_surface(black_scholes_surface(1.0, 0.2, range(0.5, 2.0, 0.01), range(0.5, 2.0, 0.01)));
  const auto out = simulate_calibrated_lsv(lv, catalog_factor(), lsv_config(20000, 1.0));
  EXPECT_LT(std::abs(stats::pearson(out.final_cloud.xs, out.final_cloud.ys)), 4.0 / std::sqrt(20000.0));
}
