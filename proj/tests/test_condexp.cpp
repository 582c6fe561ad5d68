#include <condmv/condexp.hpp>
#include <condmv/stationary1d.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace condmv;

namespace
{

std::vector<double> uniform_edges(double lo, double hi, std::size_t nb)
{
  std::vector<double> e(nb + 1);
  for (std::size_t k = 0; k <= nb; ++k)
    e[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(nb);
  return e;
}

ScalarFunction f_squared() { return ScalarFunction::square_of(catalog::vol_factor()); }

const PsiBounds f2_bounds{0.49, 2.25};

// Smooth joint density whose conditional law of y shifts with x.
GridDensity2D tilted_density(std::size_t n = 128)
{
  return GridDensity2D::from_function({-6.0, 6.0, n}, {-6.0, 6.0, n}, [](double x, double y) {
    const double s = y - 0.8 * std::tanh(x);
    return std::exp(-0.5 * x * x - 0.5 * s * s / 0.6);
  });
}

ParticleCloud product_cloud(std::size_t n, std::uint64_t seed)
{
  const auto cs = catalog::base_set();
  const auto m = build_marginals(cs);
  return ParticleCloud::uniform(sample(m.m1, n, seed, StreamId::init_x), sample(m.m2, n, seed, StreamId::init_y));
}

} // namespace

TEST(Binning, ConstantPsi)
{
  const auto cloud = product_cloud(5000, 1);
  const auto g = estimate_G_binning(cloud, ScalarFunction::constant(2.0), {2.0, 2.0}, uniform_edges(-6, 6, 40), 1);
  for (double v : g.values)
    EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Binning, HandComputedRatio)
{
  const auto cloud = ParticleCloud::uniform({0.0, 0.0, 1.0}, {1.0, 2.0, 1.0});
  const auto g = estimate_G_binning(cloud, ScalarFunction::affine(1.0, 0.0), {1.0, 2.0},
                                    std::vector<double>{-0.5, 0.5, 1.5}, 1);
  ASSERT_EQ(g.values.size(), 2u);
  EXPECT_DOUBLE_EQ(g.values[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(g.values[1], 1.0);
  EXPECT_EQ(g.method, EstimatorMethod::binning);
}

TEST(Binning, ProductCloudIsFlat)
{
  const std::size_t n = 100'000;
  const auto cloud = product_cloud(n, 7);
  const auto cs = catalog::base_set();
  const auto m = build_marginals(cs);
  const double limit = 1.0 / m.m2.expectation([&](double y) { return cs.h(y); });
  const auto edges = uniform_edges(-3.0, 3.0, 20);
  const auto g = estimate_G_binning(cloud, cs.h, f2_bounds, edges, 50);
  // Per-bin standard error of the ratio, then a 5-sigma envelope.
  const double var_h = m.m2.expectation([&](double y) { return cs.h(y) * cs.h(y); }) - 1.0 / (limit * limit);
  const detail::BinLocator locate(edges);
  std::vector<double> counts(20, 0.0);
  for (double x : cloud.xs)
    counts[locate(x)] += 1.0;
  for (std::size_t k = 0; k < g.values.size(); ++k) {
    const double se = limit * limit * std::sqrt(var_h / counts[k]);
    EXPECT_NEAR(g.values[k], limit, 5.0 * se + 1e-12) << k;
  }
}

TEST(Binning, SparseBinsInheritNearestNeighbour)
{
  const auto cloud = ParticleCloud::uniform({-1.2, -1.1, 1.0, 1.05}, {1.0, 1.0, 2.0, 2.0});
  const auto g = estimate_G_binning(cloud, ScalarFunction::affine(1.0, 0.0), {1.0, 2.0}, uniform_edges(-1.5, 1.5, 6),
                                    2);
  ASSERT_EQ(g.values.size(), 6u);
  EXPECT_DOUBLE_EQ(g.values[0], 1.0);
  EXPECT_DOUBLE_EQ(g.values[1], 1.0);
  EXPECT_DOUBLE_EQ(g.values[2], 1.0);
  EXPECT_DOUBLE_EQ(g.values[3], 0.5);
  EXPECT_DOUBLE_EQ(g.values[5], 0.5);
  EXPECT_EQ(g.inherited_count(), 4u);
}

TEST(Binning, Errors)
{
  const ParticleCloud empty;
  EXPECT_THROW(estimate_G_binning(empty, ScalarFunction::constant(1.0), {1, 1}, uniform_edges(0, 1, 2), 1),
               InputError);
  const auto cloud = ParticleCloud::uniform({0.1, 0.9}, {0.0, 0.0});
  EXPECT_THROW(estimate_G_binning(cloud, ScalarFunction::constant(1.0), {1, 1}, uniform_edges(0, 1, 2), 5),
               EstimationError);
}

TEST(Kernel, ConstantPsiAndSingleParticle)
{
  const auto cloud = product_cloud(2000, 3);
  const std::vector<double> grid = {-20.0, -1.0, 0.0, 0.3, 5.0, 40.0};
  for (double bw : {0.01, 0.3, 5.0}) {
    const auto g = estimate_G_kernel(cloud, ScalarFunction::constant(4.0), {4.0, 4.0}, grid, bw);
    for (double v : g.values)
      EXPECT_DOUBLE_EQ(v, 0.25);
  }
  const auto one = ParticleCloud::uniform({0.4}, {0.5});
  const auto psi = catalog::vol_factor();
  const auto g = estimate_G_kernel(one, psi, {0.7, 1.5}, grid, 0.2);
  for (double v : g.values)
    EXPECT_DOUBLE_EQ(v, 1.0 / psi(0.5));
}

TEST(Kernel, MatchesExactFieldOnSampledDensity)
{
  const auto p = tilted_density(256);
  const auto pts = sample_grid_density(p, 100'000, 11);
  const auto cloud = ParticleCloud::uniform(pts.xs, pts.ys);
  const auto psi = f_squared();
  const auto exact = exact_G_from_grid(p, psi, f2_bounds);
  const double bw = rule_of_thumb_bandwidth(cloud);
  const auto g = estimate_G_kernel(cloud, psi, f2_bounds, exact.grid, bw);
  // Nodes with at least 1000 particles within one bandwidth.
  std::vector<double> sorted = cloud.xs;
  std::sort(sorted.begin(), sorted.end());
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < g.values.size(); ++i) {
    const double x = g.grid[i];
    const auto near = std::upper_bound(sorted.begin(), sorted.end(), x + bw) -
                      std::lower_bound(sorted.begin(), sorted.end(), x - bw);
    if (near < 1000)
      continue;
    ++checked;
    worst = std::max(worst, std::abs(g.values[i] - exact.values[i]));
  }
  EXPECT_GT(checked, 80u);
  EXPECT_LT(worst, 0.05);
}

TEST(Kernel, RejectsNonpositiveBandwidth)
{
  const auto cloud = product_cloud(10, 1);
  EXPECT_THROW(estimate_G_kernel(cloud, ScalarFunction::constant(1.0), {1, 1}, std::vector<double>{0.0}, 0.0),
               InputError);
}

TEST(Estimators, BinningAndKernelAgree)
{
  const auto cloud = product_cloud(100'000, 5);
  const auto cs = catalog::general_set();
  const auto edges = uniform_edges(-2.5, 2.5, 25);
  const auto gb = estimate_G_binning(cloud, cs.h, {0.6, 1.6}, edges, 50);
  const auto gk = estimate_G_kernel(cloud, cs.h, {0.6, 1.6}, gb.grid, rule_of_thumb_bandwidth(cloud));
  const detail::BinLocator locate(edges);
  std::vector<std::size_t> counts(gb.values.size(), 0);
  for (double x : cloud.xs)
    if (x >= edges.front() && x < edges.back())
      ++counts[locate(x)];
  std::size_t checked = 0;
  for (std::size_t i = 0; i < gb.values.size(); ++i) {
    if (counts[i] < 1000)
      continue;
    ++checked;
    EXPECT_NEAR(gb.values[i], gk.values[i], 0.05) << gb.grid[i];
  }
  EXPECT_GE(checked, 15u);
}

TEST(ExactField, ProductDensityIsConstant)
{
  const auto cs = catalog::base_set();
  const GridAxis ax{-6.0, 6.0, 128};
  const auto p = GridDensity2D::from_function(ax, ax, [&](double x, double y) {
    return std::exp(-x * x / 1.5) * std::exp(-y * y);
  });
  const auto psi = f_squared();
  // Midpoint quadrature of int psi m2 with m2 proportional to exp(-y^2).
  double num = 0.0, den = 0.0;
  for (std::size_t j = 0; j < ax.n; ++j) {
    const double y = ax.center(j);
    den += std::exp(-y * y);
    num += psi(y) * std::exp(-y * y);
  }
  const auto g = exact_G_from_grid(p, psi, f2_bounds);
  for (double v : g.values)
    EXPECT_NEAR(v, den / num, 1e-8);
}

TEST(ExactField, UnitPsiGivesOne)
{
  const auto g = exact_G_from_grid(tilted_density(), ScalarFunction::constant(1.0), {1.0, 1.0});
  for (double v : g.values)
    EXPECT_EQ(v, 1.0);
}

TEST(ExactField, MatchesRefinedQuadrature)
{
  const GridAxis ax{-6.0, 6.0, 256};
  auto fn = [](double x, double y) {
    const double s = y - 0.5 * (x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0));
    return std::exp(-x * x - s * s);
  };
  const auto p = GridDensity2D::from_function(ax, ax, fn);
  auto psi = [](double y) { return std::exp(y); };
  const PsiBounds b{std::exp(-6.0), std::exp(6.0)};
  const auto g = exact_G_from_grid(p, psi, b);
  const std::size_t fine = 2560;
  const double hy = 12.0 / static_cast<double>(fine);
  for (std::size_t i = 0; i < ax.n; ++i) {
    const double x = ax.center(i);
    double m = 0.0, w = 0.0;
    for (std::size_t j = 0; j < fine; ++j) {
      const double y = -6.0 + (static_cast<double>(j) + 0.5) * hy;
      m += fn(x, y);
      w += psi(y) * fn(x, y);
    }
    EXPECT_NEAR(g.values[i], m / w, 1e-6) << x;
  }
}

TEST(ExactField, EmptyColumnsInherit)
{
  const GridAxis ax{-1.0, 1.0, 8};
  std::vector<double> v(64, 0.0);
  for (std::size_t j = 0; j < 8; ++j) {
    v[2 * 8 + j] = 1.0;
    v[5 * 8 + j] = j < 4 ? 1.0 : 0.0;
  }
  GridDensity2D p(ax, ax, v);
  p.normalize();
  const auto g = exact_G_from_grid(p, [](double y) { return y < 0 ? 1.0 : 2.0; }, {1.0, 2.0});
  EXPECT_DOUBLE_EQ(g.values[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(g.values[3], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(g.values[4], 1.0);
  EXPECT_DOUBLE_EQ(g.values[7], 1.0);
  EXPECT_EQ(g.inherited_count(), 6u);
}

TEST(Bounds, EveryEstimatorIsClamped)
{
  const auto cloud = ParticleCloud::uniform({0.0, 1.0, 2.0}, {-3.0, 0.0, 3.0});
  auto psi = [](double y) { return std::exp(y); };
  const PsiBounds b{0.5, 2.0};
  const auto check = [&](const CondExpectationField& g) {
    for (double v : g.values) {
      EXPECT_GE(v, b.g_min());
      EXPECT_LE(v, b.g_max());
    }
  };
  const auto gb = estimate_G_binning(cloud, psi, b, uniform_edges(-0.5, 2.5, 3), 1);
  check(gb);
  EXPECT_GT(gb.raw_values[0], b.g_max());
  check(estimate_G_kernel(cloud, psi, b, gb.grid, 0.1));
  check(mollify_G(gb, {1.0, KernelShape::bump}));
}

TEST(Mollifier, WeightsNormalizedAndSupported)
{
  for (auto shape : {KernelShape::triangular, KernelShape::bump}) {
    const auto w = mollifier_weights({0.37, shape}, 0.01);
    double s = 0.0;
    for (double v : w) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-10);
    EXPECT_LE(static_cast<double>(w.size() / 2) * 0.01, 0.37);
  }
}

TEST(Mollifier, ConstantFieldUnchanged)
{
  CondExpectationField g;
  for (int i = 0; i < 50; ++i) {
    g.grid.push_back(0.1 * i);
    g.values.push_back(0.8);
  }
  g.raw_values = g.values;
  g.inherited.assign(50, false);
  g.psi_bounds = {1.0, 2.0};
  for (auto shape : {KernelShape::triangular, KernelShape::bump}) {
    const auto m = mollify_G(g, {0.45, shape});
    for (double v : m.values)
      EXPECT_NEAR(v, 0.8, 1e-15);
  }
}

TEST(Mollifier, StepSlopeBound)
{
  CondExpectationField g;
  const double h = 0.01;
  for (int i = 0; i < 400; ++i) {
    g.grid.push_back(-2.0 + h * i);
    g.values.push_back(g.grid.back() < 0.0 ? 1.0 : 2.0);
  }
  g.raw_values = g.values;
  g.inherited.assign(g.values.size(), false);
  g.psi_bounds = {0.5, 1.0};
  for (auto shape : {KernelShape::triangular, KernelShape::bump})
    for (double bw : {0.05, 0.2, 0.5}) {
      const auto m = mollify_G(g, {bw, shape});
      const double bound = (1.0 / bw) * 2.0 * kernel_derivative_l1(shape);
      for (std::size_t i = 1; i < m.values.size(); ++i)
        EXPECT_LE(std::abs(m.values[i] - m.values[i - 1]) / h, bound + 1e-6);
    }
}

TEST(Mollifier, SpacingLimitRecoversSmoothField)
{
  CondExpectationField g;
  const double h = 0.002;
  for (int i = 0; i < 2000; ++i) {
    g.grid.push_back(-2.0 + h * i);
    g.values.push_back(1.0 + 0.5 * std::tanh(g.grid.back()));
  }
  g.raw_values = g.values;
  g.inherited.assign(g.values.size(), false);
  g.psi_bounds = {0.5, 2.0};
  const auto m = mollify_G(g, {h, KernelShape::triangular});
  for (std::size_t i = 0; i < g.values.size(); ++i)
    EXPECT_NEAR(m.values[i], g.values[i], 1e-3);
  EXPECT_THROW(mollify_G(g, {0.5 * h, KernelShape::triangular}), InputError);
}

TEST(Continuity, MixingSequenceBound)
{
  const auto q = tilted_density(96);
  const GridAxis ax = q.x_axis();
  const auto qp = GridDensity2D::from_function(ax, ax, [](double x, double y) {
    return std::exp(-0.5 * (x - 1) * (x - 1) - 0.5 * (y + x) * (y + x));
  });
  const auto psi = f_squared();
  const auto gq = exact_G_from_grid(q, psi, f2_bounds);
  const auto m = q.x_marginal();
  double prev = std::numeric_limits<double>::infinity();
  for (int n : {2, 4, 8, 16, 32, 64}) {
    std::vector<double> v(q.values().size());
    for (std::size_t k = 0; k < v.size(); ++k)
      v[k] = (1.0 - 1.0 / n) * q.values()[k] + (1.0 / n) * qp.values()[k];
    const GridDensity2D qn(ax, ax, v);
    const double dist = weighted_l1(exact_G_from_grid(qn, psi, f2_bounds), gq, m, q.dx());
    const double bound = 2.0 * std::pow(f2_bounds.lo, -2.0) * f2_bounds.hi * l1_distance(qn, q);
    EXPECT_LT(dist, prev);
    EXPECT_LE(dist, bound);
    prev = dist;
  }
}
