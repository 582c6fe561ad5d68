#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace condmv
{

// Base for every error raised by the library. `kind()` is a stable
// machine-readable tag used by the command-line front end.
class Error : public std::runtime_error
{
public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind))
  {
  }

  const std::string& kind() const noexcept { return kind_; }

private:
  std::string kind_;
};

class ConfigError : public Error
{
public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

class InputError : public Error
{
public:
  explicit InputError(const std::string& what) : Error("input", what) {}
};

class EllipticityError : public Error
{
public:
  explicit EllipticityError(const std::string& what) : Error("ellipticity", what) {}
};

class DomainError : public Error
{
public:
  explicit DomainError(const std::string& what) : Error("domain", what) {}
};

class EstimationError : public Error
{
public:
  explicit EstimationError(const std::string& what) : Error("estimation", what) {}
};

class DegenerateDensityError : public Error
{
public:
  explicit DegenerateDensityError(const std::string& what)
      : Error("degenerate-density", what)
  {
  }
};

// Raised when a particle leaves the finite floating-point range.
class BlowupError : public Error
{
public:
  BlowupError(std::size_t step, const std::string& what)
      : Error("numerical-blowup", what + " at step " + std::to_string(step)),
        step_(step)
  {
  }

  std::size_t step() const noexcept { return step_; }

private:
  std::size_t step_;
};

class SolverError : public Error
{
public:
  SolverError(double residual, const std::string& what)
      : Error("solver", what + " (residual " + std::to_string(residual) + ")"),
        residual_(residual)
  {
  }

  double residual() const noexcept { return residual_; }

private:
  double residual_;
};

class DiscretizationError : public Error
{
public:
  explicit DiscretizationError(const std::string& what) : Error("discretization", what) {}
};

class ArbitrageError : public Error
{
public:
  ArbitrageError(std::size_t maturity_index, std::size_t strike_index, const std::string& what)
      : Error("arbitrage", what + " at cell (maturity " + std::to_string(maturity_index) +
                               ", strike " + std::to_string(strike_index) + ")"),
        maturity_index_(maturity_index), strike_index_(strike_index)
  {
  }

  std::size_t maturity_index() const noexcept { return maturity_index_; }
  std::size_t strike_index() const noexcept { return strike_index_; }

private:
  std::size_t maturity_index_;
  std::size_t strike_index_;
};

// Raised when a coefficient set fails the coefficient condition grid check and the
// caller did not opt out.
class ValidationError : public Error
{
public:
  explicit ValidationError(const std::string& what) : Error("validation", what) {}
};

} // namespace condmv
