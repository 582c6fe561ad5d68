#pragma once

#include <condmv/coefficients.hpp>
#include <condmv/grid_density.hpp>
#include <condmv/stationary1d.hpp>

#include <cmath>
#include <string>
#include <vector>

namespace condmv::catalog
{

struct NamedDensity
{
  std::string name;
  GridDensity2D density;
};

// Product of the two stationary marginals of `cs`, sampled at cell centres.
inline GridDensity2D product_density(const MarginalPair& m, GridAxis x, GridAxis y)
{
  return GridDensity2D::from_function(x, y, [&](double a, double b) { return m.m1.density(a) * m.m2.density(b); });
}

// Five smooth test densities with different dependence structures.
inline std::vector<NamedDensity> test_densities(GridAxis x = {}, GridAxis y = {})
{
  std::vector<NamedDensity> out;
  const auto m = build_marginals(base_set());
  out.push_back({"product", product_density(m, x, y)});
  out.push_back({"tilted", GridDensity2D::from_function(x, y, [](double a, double b) {
                   const double s = b - 0.8 * std::tanh(a);
                   return std::exp(-0.5 * a * a - 0.5 * s * s / 0.6);
                 })});
  out.push_back({"correlated", GridDensity2D::from_function(x, y, [](double a, double b) {
                   const double r = 0.6;
                   return std::exp(-(a * a - 2.0 * r * a * b + b * b) / (2.0 * (1.0 - r * r)));
                 })});
  out.push_back({"bimodal", GridDensity2D::from_function(x, y, [](double a, double b) {
                   const double p = std::exp(-((a - 1.2) * (a - 1.2) + (b - 1.0) * (b - 1.0)) / 0.8);
                   const double q = std::exp(-((a + 1.0) * (a + 1.0) + (b + 0.8) * (b + 0.8)) / 1.2);
                   return p + 0.7 * q;
                 })});
  out.push_back({"heteroscedastic", GridDensity2D::from_function(x, y, [](double a, double b) {
                   const double v = 0.3 + 0.7 * std::tanh(0.5 * a) * std::tanh(0.5 * a) + 0.2;
                   return std::exp(-0.5 * a * a / 1.4) * std::exp(-0.5 * b * b / v) / std::sqrt(v);
                 })});
  return out;
}

} // namespace condmv::catalog
