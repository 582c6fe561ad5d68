#include <condmv/stationary1d.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace condmv;

namespace
{

const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);

StationaryDensity1D standard_normal(std::size_t n = 4097)
{
  return build_stationary_density(ScalarFunction::affine(-1.0, 0.0), ScalarFunction::constant(std::sqrt(2.0)),
                                  {-8.0, 8.0}, n);
}

// max |1/2 (s^2 m)'' - (b m)'| by centered differences at interior nodes.
double fp_residual(const StationaryDensity1D& d)
{
  const auto xs = d.grid();
  const auto m = d.density_values();
  const double h = d.spacing();
  double worst = 0.0;
  auto a = [&](std::size_t i) {
    const double s = d.diffusion()(xs[i]);
    return 0.5 * s * s * m[i];
  };
  auto bm = [&](std::size_t i) { return d.drift()(xs[i]) * m[i]; };
  for (std::size_t i = 1; i + 1 < xs.size(); ++i) {
    const double r = (a(i + 1) - 2.0 * a(i) + a(i - 1)) / (h * h) - (bm(i + 1) - bm(i - 1)) / (2.0 * h);
    worst = std::max(worst, std::abs(r));
  }
  return worst;
}

} // namespace

TEST(StationaryDensity, StandardNormalPointwise)
{
  const auto d = standard_normal();
  EXPECT_NEAR(d.density(0.0), 0.398942, 1e-5);
  for (double x = -6.0; x <= 6.0; x += 0.0137)
    EXPECT_NEAR(d.density(x), inv_sqrt_2pi * std::exp(-0.5 * x * x), 1e-8) << x;
}

TEST(StationaryDensity, HalfVarianceGaussian)
{
  const auto d =
      build_stationary_density(ScalarFunction::affine(-1.0, 0.0), ScalarFunction::constant(1.0), {-8.0, 8.0}, 4097);
  EXPECT_NEAR(d.density(0.0), 0.564190, 1e-5);
  EXPECT_NEAR(d.variance(), 0.5, 1e-8);
}

TEST(StationaryDensity, CubicDriftMatchesBruteForceQuadrature)
{
  // -u^3 with linear tails of slope -12 beyond |u| = 2.
  const auto b = ScalarFunction::saturated_linear(0.0, 1.0, 0.0, 2.0);
  const auto d = build_stationary_density(b, ScalarFunction::constant(1.0), {-8.0, 8.0}, 4097);
  auto potential = [](double x) {
    const double a = std::abs(x);
    if (a <= 2.0)
      return -0.5 * a * a * a * a;
    const double t = a - 2.0;
    return -8.0 + 2.0 * (-8.0 * t - 6.0 * t * t);
  };
  const int n = 1'000'000;
  const double h = 16.0 / n;
  double z = 0.0;
  for (int k = 0; k <= n; ++k) {
    const double w = (k == 0 || k == n) ? 0.5 : 1.0;
    z += w * std::exp(potential(-8.0 + h * k));
  }
  z *= h;
  EXPECT_NEAR(d.density(0.0), 1.0 / z, 1e-8);
}

TEST(StationaryDensity, InvariantsHold)
{
  const auto cs = catalog::base_set();
  const auto m = build_marginals(cs);
  for (const auto* d : {&m.m1, &m.m2}) {
    double total = 0.0;
    const auto p = d->density_values();
    for (std::size_t i = 0; i < p.size(); ++i)
      total += ((i == 0 || i + 1 == p.size()) ? 0.5 : 1.0) * p[i];
    EXPECT_NEAR(total * d->spacing(), 1.0, 1e-10);
    for (std::size_t i = 1; i + 1 < p.size(); ++i)
      ASSERT_GT(p[i], 0.0);
    const auto c = d->cdf_values();
    EXPECT_EQ(c.front(), 0.0);
    EXPECT_EQ(c.back(), 1.0);
    for (std::size_t i = 1; i < c.size(); ++i)
      ASSERT_GE(c[i], c[i - 1]);
  }
}

TEST(StationaryDensity, ShiftEquivariance)
{
  const auto s = ScalarFunction::constant(1.3);
  const auto d0 = build_stationary_density(catalog::ou_drift(1.0, 0.0), s, {-10.0, 10.0}, 4097);
  const auto d1 = build_stationary_density(catalog::ou_drift(1.0, 0.7), s, {-9.3, 10.7}, 4097);
  for (double x = -4.0; x <= 4.0; x += 0.05)
    EXPECT_NEAR(d1.density(x + 0.7), d0.density(x), 1e-8) << x;
}

TEST(StationaryDensity, FokkerPlanckResidualShrinksWithGrid)
{
  const auto cs = catalog::base_set();
  const double r1 = fp_residual(build_stationary_density(cs.b1, cs.sigma1, {-8.0, 8.0}, 1025));
  const double r2 = fp_residual(build_stationary_density(cs.b1, cs.sigma1, {-8.0, 8.0}, 2049));
  const double r3 = fp_residual(build_stationary_density(cs.b1, cs.sigma1, {-8.0, 8.0}, 4097));
  EXPECT_GT(r1 / r2, 2.0 * 0.95);
  EXPECT_GT(r2 / r3, 2.0 * 0.95);
}

TEST(StationaryDensity, TruncationRobustness)
{
  const auto cs = catalog::base_set();
  const Interval dom = default_domain(cs.constants);
  const auto d1 = build_stationary_density(cs.b1, cs.sigma1, dom, 4097);
  const auto d2 = build_stationary_density(cs.b1, cs.sigma1, {2.0 * dom.lo, 2.0 * dom.hi}, 8193);
  for (double x = -3.0; x <= 3.0; x += 0.01)
    EXPECT_NEAR(d1.density(x), d2.density(x), 1e-8) << x;
}

TEST(StationaryDensity, RejectsBadInput)
{
  EXPECT_THROW(build_stationary_density(ScalarFunction::affine(-1, 0), ScalarFunction::sine(0.0, 1.0, 1.0, 0.0),
                                        {-8.0, 8.0}, 4097),
               EllipticityError);
  EXPECT_THROW(build_stationary_density(ScalarFunction::affine(-1, 0), ScalarFunction::constant(1.0), {-8.0, 8.0}, 63),
               InputError);
  EXPECT_THROW(build_stationary_density(ScalarFunction::affine(-1, 0), ScalarFunction::constant(1e-200), {-8.0, 8.0},
                                        4097),
               DomainError);
}

TEST(Sampling, MomentsAndDeterminism)
{
  const auto d = standard_normal();
  const auto xs = sample(d, 1'000'000, 42);
  double m = 0.0;
  for (double x : xs)
    m += x;
  m /= static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs)
    v += (x - m) * (x - m);
  v /= static_cast<double>(xs.size() - 1);
  EXPECT_LT(std::abs(m), 4.0 / 1000.0);
  EXPECT_NEAR(v, d.variance(), 0.01);
  EXPECT_EQ(xs, sample(d, 1'000'000, 42));
  EXPECT_NE(xs, sample(d, 1'000'000, 43));
}

TEST(Wasserstein, QuantileSamplesAreClose)
{
  const auto d = standard_normal();
  std::vector<double> q;
  for (int k = 1; k < 2000; ++k)
    q.push_back(d.quantile(k / 2000.0));
  EXPECT_LE(wasserstein1(q, d), d.spacing());
}

TEST(Wasserstein, PointMassAtZero)
{
  const auto d = standard_normal();
  const std::vector<double> zeros(100, 0.0);
  // E|Z| = sqrt(2 / pi)
  EXPECT_NEAR(wasserstein1(zeros, d), std::sqrt(2.0 / std::numbers::pi), 1e-3);
}

TEST(Wasserstein, EmptySampleRejected)
{
  EXPECT_THROW(wasserstein1(std::vector<double>{}, standard_normal()), InputError);
}
