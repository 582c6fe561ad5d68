#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>

namespace condmv
{

// Philox4x32-10 counter-based generator (Salmon et al., SC'11). Every draw is
// a pure function of (key, counter), so a particle's noise does not depend on
// how many other particles exist or on evaluation order.
class Philox4x32
{
public:
  using Block = std::array<std::uint32_t, 4>;

  explicit constexpr Philox4x32(std::uint64_t seed) noexcept
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)}
  {
  }

  constexpr Block operator()(Block ctr) const noexcept
  {
    std::array<std::uint32_t, 2> k = key_;
    for (int r = 0; r < 10; ++r) {
      ctr = round(ctr, k);
      k[0] += 0x9E3779B9u;
      k[1] += 0xBB67AE85u;
    }
    return ctr;
  }

private:
  static constexpr Block round(const Block& c, const std::array<std::uint32_t, 2>& k) noexcept
  {
    const std::uint64_t p0 = std::uint64_t{0xD2511F53u} * c[0];
    const std::uint64_t p1 = std::uint64_t{0xCD9E8D57u} * c[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
  }

  std::array<std::uint32_t, 2> key_;
};

// Stream identifiers keep independent uses of one seed apart.
enum class StreamId : std::uint32_t
{
  dynamics = 1,     // per-step Brownian increments of the particle system
  init_x = 2,       // initial X samples
  init_y = 3,       // initial Y samples
  clock_x = 4,      // X increments on its own clock (time-change construction)
  mimic = 5,        // mimicking one-dimensional SDE
  sampling = 6,     // generic inverse-CDF sampling
};

// Noise indexed by (particle, step) within one stream of one seed.
class NoiseStream
{
public:
  constexpr NoiseStream(std::uint64_t seed, StreamId stream) noexcept
      : gen_(seed), stream_(static_cast<std::uint32_t>(stream))
  {
  }

  // Two uniforms in (0, 1).
  std::pair<double, double> uniforms(std::uint64_t index, std::uint64_t step) const noexcept
  {
    const auto b = gen_({static_cast<std::uint32_t>(index), stream_ ^ static_cast<std::uint32_t>(index >> 32),
                         static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32)});
    return {to_unit((std::uint64_t{b[0]} << 32) | b[1]), to_unit((std::uint64_t{b[2]} << 32) | b[3])};
  }

  double uniform(std::uint64_t index, std::uint64_t step = 0) const noexcept
  {
    return uniforms(index, step).first;
  }

  // Two independent standard normals (Box-Muller).
  std::pair<double, double> normals(std::uint64_t index, std::uint64_t step) const noexcept
  {
    const auto [u1, u2] = uniforms(index, step);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    return {r * std::cos(theta), r * std::sin(theta)};
  }

private:
  static double to_unit(std::uint64_t bits) noexcept
  {
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
  }

  Philox4x32 gen_;
  std::uint32_t stream_;
};

} // namespace condmv
