#pragma once

#include <condmv/errors.hpp>
#include <condmv/grid_density.hpp>
#include <condmv/stationary1d.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

namespace condmv::stats
{

inline double mean(std::span<const double> v)
{
  double s = 0.0;
  for (double x : v)
    s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Pearson correlation; 0 when either coordinate is constant.
inline double pearson(std::span<const double> xs, std::span<const double> ys)
{
  const double mx = mean(xs), my = mean(ys);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double a = xs[i] - mx, b = ys[i] - my;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (!(sxx > 0.0) || !(syy > 0.0))
    return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// Mean of x^2 + y^2 and its Monte Carlo standard error.
struct MomentEstimate
{
  double value = 0.0;
  double standard_error = 0.0;
};

inline MomentEstimate second_moment(std::span<const double> xs, std::span<const double> ys)
{
  const std::size_t n = xs.size();
  double s = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = xs[i] * xs[i] + ys[i] * ys[i];
    s += r;
    s2 += r * r;
  }
  const double m = s / static_cast<double>(n);
  const double var = n > 1 ? (s2 - static_cast<double>(n) * m * m) / static_cast<double>(n - 1) : 0.0;
  return {m, std::sqrt(std::max(var, 0.0) / static_cast<double>(n))};
}

// B equal-probability bins of an empirical sample; outer edges at the extremes.
inline std::vector<double> quantile_edges(std::span<const double> sample, std::size_t bins)
{
  if (sample.empty() || bins < 1)
    throw InputError("quantile_edges needs a sample and at least one bin");
  std::vector<double> s(sample.begin(), sample.end());
  std::sort(s.begin(), s.end());
  std::vector<double> e(bins + 1);
  for (std::size_t k = 0; k <= bins; ++k) {
    const auto idx = std::min(s.size() - 1, k * s.size() / bins);
    e[k] = s[idx];
  }
  e.front() = s.front();
  e.back() = s.back();
  return e;
}

// B equal-probability bins of a tabulated density; outer edges at the domain ends.
inline std::vector<double> quantile_edges(const StationaryDensity1D& d, std::size_t bins)
{
  std::vector<double> e(bins + 1);
  for (std::size_t k = 0; k <= bins; ++k)
    e[k] = d.quantile(static_cast<double>(k) / static_cast<double>(bins));
  return e;
}

// Probability masses on a rectangular bin lattice; out-of-range points go
// to the nearest edge bin.
struct Histogram2D
{
  std::vector<double> x_edges, y_edges;
  std::vector<double> mass; // row-major in x

  std::size_t nx() const noexcept { return x_edges.size() - 1; }
  std::size_t ny() const noexcept { return y_edges.size() - 1; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return mass[i * ny() + j]; }

  std::vector<double> x_marginal() const
  {
    std::vector<double> m(nx(), 0.0);
    for (std::size_t i = 0; i < nx(); ++i)
      for (std::size_t j = 0; j < ny(); ++j)
        m[i] += (*this)(i, j);
    return m;
  }

  std::vector<double> y_marginal() const
  {
    std::vector<double> m(ny(), 0.0);
    for (std::size_t i = 0; i < nx(); ++i)
      for (std::size_t j = 0; j < ny(); ++j)
        m[j] += (*this)(i, j);
    return m;
  }
};

namespace detail
{

inline std::size_t locate(std::span<const double> edges, double v)
{
  const auto it = std::upper_bound(edges.begin() + 1, edges.end() - 1, v);
  return static_cast<std::size_t>(it - (edges.begin() + 1));
}

inline void check_edges(std::span<const double> e)
{
  if (e.size() < 2)
    throw InputError("histogram needs at least two edges per axis");
  for (std::size_t k = 1; k < e.size(); ++k)
    if (!(e[k] > e[k - 1]))
      throw InputError("histogram edges must be strictly increasing");
}

} // namespace detail

inline Histogram2D histogram(std::span<const double> xs, std::span<const double> ys, std::span<const double> weights,
                             std::vector<double> x_edges, std::vector<double> y_edges)
{
  detail::check_edges(x_edges);
  detail::check_edges(y_edges);
  Histogram2D h{std::move(x_edges), std::move(y_edges), {}};
  h.mass.assign(h.nx() * h.ny(), 0.0);
  double total = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const double w = weights.empty() ? 1.0 : weights[k];
    h.mass[detail::locate(h.x_edges, xs[k]) * h.ny() + detail::locate(h.y_edges, ys[k])] += w;
    total += w;
  }
  if (total > 0.0)
    for (auto& m : h.mass)
      m /= total;
  return h;
}

// Outer product of the two marginals of `h`.
inline Histogram2D product_of_marginals(const Histogram2D& h)
{
  const auto mx = h.x_marginal(), my = h.y_marginal();
  Histogram2D p{h.x_edges, h.y_edges, std::vector<double>(h.mass.size())};
  for (std::size_t i = 0; i < h.nx(); ++i)
    for (std::size_t j = 0; j < h.ny(); ++j)
      p.mass[i * h.ny() + j] = mx[i] * my[j];
  return p;
}

// Product of two one-dimensional densities integrated over the bins.
inline Histogram2D product_histogram(const StationaryDensity1D& m1, const StationaryDensity1D& m2,
                                     std::vector<double> x_edges, std::vector<double> y_edges)
{
  Histogram2D p{std::move(x_edges), std::move(y_edges), {}};
  p.mass.resize(p.nx() * p.ny());
  std::vector<double> px(p.nx()), py(p.ny());
  for (std::size_t i = 0; i < p.nx(); ++i)
    px[i] = (i + 1 == p.nx() ? 1.0 : m1.cdf(p.x_edges[i + 1])) - (i == 0 ? 0.0 : m1.cdf(p.x_edges[i]));
  for (std::size_t j = 0; j < p.ny(); ++j)
    py[j] = (j + 1 == p.ny() ? 1.0 : m2.cdf(p.y_edges[j + 1])) - (j == 0 ? 0.0 : m2.cdf(p.y_edges[j]));
  for (std::size_t i = 0; i < p.nx(); ++i)
    for (std::size_t j = 0; j < p.ny(); ++j)
      p.mass[i * p.ny() + j] = px[i] * py[j];
  return p;
}

// Grid density integrated over the bins by fractional cell overlap; cells
// beyond the outer edges fold into the edge bins.
inline Histogram2D histogram_of(const GridDensity2D& p, std::vector<double> x_edges, std::vector<double> y_edges)
{
  detail::check_edges(x_edges);
  detail::check_edges(y_edges);
  Histogram2D h{std::move(x_edges), std::move(y_edges), {}};
  h.mass.assign(h.nx() * h.ny(), 0.0);
  auto overlaps = [](const GridAxis& ax, std::size_t c, const std::vector<double>& e) {
    std::vector<std::pair<std::size_t, double>> out;
    const double a = ax.face(c), b = ax.face(c + 1), w = b - a;
    const std::size_t nb = e.size() - 1;
    for (std::size_t k = 0; k < nb; ++k) {
      const double lo = k == 0 ? -std::numeric_limits<double>::infinity() : e[k];
      const double hi = k + 1 == nb ? std::numeric_limits<double>::infinity() : e[k + 1];
      const double o = std::min(b, hi) - std::max(a, lo);
      if (o > 0.0)
        out.emplace_back(k, o / w);
    }
    return out;
  };
  std::vector<std::vector<std::pair<std::size_t, double>>> ox(p.nx()), oy(p.ny());
  for (std::size_t i = 0; i < p.nx(); ++i)
    ox[i] = overlaps(p.x_axis(), i, h.x_edges);
  for (std::size_t j = 0; j < p.ny(); ++j)
    oy[j] = overlaps(p.y_axis(), j, h.y_edges);
  const double area = p.cell_area();
  for (std::size_t i = 0; i < p.nx(); ++i)
    for (std::size_t j = 0; j < p.ny(); ++j) {
      const double m = p(i, j) * area;
      if (m == 0.0)
        continue;
      for (const auto& [bi, fx] : ox[i])
        for (const auto& [bj, fy] : oy[j])
          h.mass[bi * h.ny() + bj] += m * fx * fy;
    }
  return h;
}

inline double l1_distance(const Histogram2D& a, const Histogram2D& b)
{
  if (a.mass.size() != b.mass.size())
    throw InputError("histograms differ in shape");
  double s = 0.0;
  for (std::size_t k = 0; k < a.mass.size(); ++k)
    s += std::abs(a.mass[k] - b.mass[k]);
  return s;
}

// W1 between two unweighted empirical laws: integral of |F_a - F_b|.
inline double wasserstein1(std::span<const double> a, std::span<const double> b)
{
  if (a.empty() || b.empty())
    throw InputError("wasserstein1 needs nonempty samples");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  const double na = static_cast<double>(sa.size()), nb = static_cast<double>(sb.size());
  std::size_t i = 0, j = 0;
  double prev = std::min(sa.front(), sb.front()), acc = 0.0;
  while (i < sa.size() || j < sb.size()) {
    const double next = (j == sb.size() || (i < sa.size() && sa[i] <= sb[j])) ? sa[i] : sb[j];
    acc += std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb) * (next - prev);
    prev = next;
    while (i < sa.size() && sa[i] == next)
      ++i;
    while (j < sb.size() && sb[j] == next)
      ++j;
  }
  return acc;
}

// Least-squares slope of v against t.
inline double slope(std::span<const double> t, std::span<const double> v)
{
  const double mt = mean(t), mv = mean(v);
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < t.size(); ++k) {
    num += (t[k] - mt) * (v[k] - mv);
    den += (t[k] - mt) * (t[k] - mt);
  }
  return den > 0.0 ? num / den : 0.0;
}

} // namespace condmv::stats
