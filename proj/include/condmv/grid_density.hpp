#pragma once

#include <condmv/csv.hpp>
#include <condmv/errors.hpp>
#include <condmv/rng.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace condmv
{

// Uniform cell-centred axis: n cells of width (hi - lo) / n.
struct GridAxis
{
  double lo = -6.0;
  double hi = 6.0;
  std::size_t n = 256;

  double spacing() const noexcept { return (hi - lo) / static_cast<double>(n); }
  double center(std::size_t i) const noexcept { return lo + (static_cast<double>(i) + 0.5) * spacing(); }
  double face(std::size_t i) const noexcept { return lo + static_cast<double>(i) * spacing(); }

  std::vector<double> centers() const
  {
    std::vector<double> c(n);
    for (std::size_t i = 0; i < n; ++i)
      c[i] = center(i);
    return c;
  }

  // Same interval, half the spacing.
  GridAxis refined() const { return {lo, hi, 2 * n}; }
  GridAxis coarsened() const { return {lo, hi, n / 2}; }

  friend bool operator==(const GridAxis&, const GridAxis&) = default;
};

// Nonnegative density on a rectangle of cells, values at cell centres,
// normalized so that sum(values) * dx * dy = 1. Storage is row-major in x:
// value(i, j) sits at x-cell i, y-cell j.
class GridDensity2D
{
public:
  GridDensity2D() = default;

  GridDensity2D(GridAxis x, GridAxis y, std::vector<double> values)
      : x_(x), y_(y), v_(std::move(values))
  {
    if (x_.n < 2 || y_.n < 2)
      throw InputError("grid density needs at least 2 cells per axis");
    if (!(x_.hi > x_.lo) || !(y_.hi > y_.lo))
      throw InputError("grid density axes must be nonempty intervals");
    if (v_.size() != x_.n * y_.n)
      throw InputError("grid density value count does not match the axes");
  }

  // Evaluates `fn(x, y)` at cell centres and normalizes.
  template <class Fn>
  static GridDensity2D from_function(GridAxis x, GridAxis y, Fn&& fn)
  {
    std::vector<double> v(x.n * y.n);
    for (std::size_t i = 0; i < x.n; ++i) {
      const double xc = x.center(i);
      for (std::size_t j = 0; j < y.n; ++j)
        v[i * y.n + j] = fn(xc, y.center(j));
    }
    GridDensity2D d(x, y, std::move(v));
    d.normalize();
    return d;
  }

  const GridAxis& x_axis() const noexcept { return x_; }
  const GridAxis& y_axis() const noexcept { return y_; }
  std::size_t nx() const noexcept { return x_.n; }
  std::size_t ny() const noexcept { return y_.n; }
  double dx() const noexcept { return x_.spacing(); }
  double dy() const noexcept { return y_.spacing(); }
  double cell_area() const noexcept { return dx() * dy(); }

  std::span<const double> values() const noexcept { return v_; }
  std::span<double> values() noexcept { return v_; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return v_[i * y_.n + j]; }
  double& operator()(std::size_t i, std::size_t j) noexcept { return v_[i * y_.n + j]; }
  std::span<const double> column(std::size_t i) const noexcept { return {v_.data() + i * y_.n, y_.n}; }

  double mass() const
  {
    double s = 0.0;
    for (double v : v_)
      s += v;
    return s * cell_area();
  }

  // Rescales to unit mass; returns the mass before rescaling.
  double normalize()
  {
    const double m = mass();
    if (!(m > 0.0) || !std::isfinite(m))
      throw DegenerateDensityError("cannot normalize a grid density with mass " + csv::format(m));
    for (auto& v : v_)
      v /= m;
    return m;
  }

  // x-marginal at cell centres: sum over y times dy.
  std::vector<double> x_marginal() const
  {
    std::vector<double> m(x_.n, 0.0);
    for (std::size_t i = 0; i < x_.n; ++i) {
      double s = 0.0;
      for (double v : column(i))
        s += v;
      m[i] = s * dy();
    }
    return m;
  }

  std::vector<double> y_marginal() const
  {
    std::vector<double> m(y_.n, 0.0);
    for (std::size_t i = 0; i < x_.n; ++i)
      for (std::size_t j = 0; j < y_.n; ++j)
        m[j] += (*this)(i, j);
    for (auto& v : m)
      v *= dx();
    return m;
  }

  // Throws unless nonnegative and normalized within `tol`.
  void check_valid(double tol = 1e-12) const
  {
    for (double v : v_)
      if (!(v >= 0.0) || !std::isfinite(v))
        throw InputError("grid density has a negative or non-finite value");
    if (std::abs(mass() - 1.0) > tol)
      throw InputError("grid density is not normalized (mass " + csv::format(mass()) + ")");
  }

  bool same_grid(const GridDensity2D& o) const { return x_ == o.x_ && y_ == o.y_; }

  // CSV of (x, y, value) triplets; the first line declares the dimensions.
  void write_csv(const std::filesystem::path& path) const
  {
    csv::Writer w(path);
    w.comment("grid nx=" + std::to_string(x_.n) + " ny=" + std::to_string(y_.n) + " x_lo=" +
              csv::format(x_.lo) + " x_hi=" + csv::format(x_.hi) + " y_lo=" + csv::format(y_.lo) +
              " y_hi=" + csv::format(y_.hi));
    w.header({"x", "y", "value"});
    for (std::size_t i = 0; i < x_.n; ++i)
      for (std::size_t j = 0; j < y_.n; ++j)
        w.row(x_.center(i), y_.center(j), (*this)(i, j));
  }

  static GridDensity2D read_csv(const std::filesystem::path& path)
  {
    std::ifstream in(path);
    std::string first;
    if (!in || !std::getline(in, first))
      throw InputError("cannot read grid density " + path.string());
    GridAxis x, y;
    if (std::sscanf(first.c_str(), "# grid nx=%zu ny=%zu x_lo=%lf x_hi=%lf y_lo=%lf y_hi=%lf", &x.n, &y.n, &x.lo,
                    &x.hi, &y.lo, &y.hi) != 6)
      throw InputError("grid density CSV " + path.string() + " lacks the dimension header");
    const auto table = csv::read(path);
    if (table.rows.size() != x.n * y.n || table.header.size() != 3)
      throw InputError("grid density CSV " + path.string() + " has the wrong number of rows");
    std::vector<double> v(x.n * y.n);
    for (std::size_t k = 0; k < v.size(); ++k)
      v[k] = table.rows[k][2];
    return {x, y, std::move(v)};
  }

private:
  GridAxis x_, y_;
  std::vector<double> v_;
};

// L1 distance between two densities on the same grid.
inline double l1_distance(const GridDensity2D& a, const GridDensity2D& b)
{
  if (!a.same_grid(b))
    throw InputError("l1_distance needs densities on the same grid");
  double s = 0.0;
  const auto va = a.values(), vb = b.values();
  for (std::size_t k = 0; k < va.size(); ++k)
    s += std::abs(va[k] - vb[k]);
  return s * a.cell_area();
}

// n points drawn from the piecewise-constant density: a cell by inverse CDF
// over cell masses, then a uniform position inside the cell.
struct PointSample
{
  std::vector<double> xs, ys;
};

inline PointSample sample_grid_density(const GridDensity2D& p, std::size_t n, std::uint64_t seed,
                                       StreamId stream = StreamId::sampling)
{
  const auto v = p.values();
  std::vector<double> cdf(v.size());
  double acc = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) {
    acc += v[k];
    cdf[k] = acc;
  }
  if (!(acc > 0.0))
    throw DegenerateDensityError("cannot sample a grid density without mass");
  const NoiseStream noise(seed, stream);
  PointSample out;
  out.xs.resize(n);
  out.ys.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = noise.uniform(i, 0) * acc;
    const auto [ux, uy] = noise.uniforms(i, 1);
    auto k = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    k = std::min(k, v.size() - 1);
    const std::size_t ix = k / p.ny(), iy = k % p.ny();
    out.xs[i] = p.x_axis().face(ix) + ux * p.dx();
    out.ys[i] = p.y_axis().face(iy) + uy * p.dy();
  }
  return out;
}

} // namespace condmv
