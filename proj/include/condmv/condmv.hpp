#pragma once

#include <condmv/errors.hpp>
#include <condmv/rng.hpp>
#include <condmv/csv.hpp>
#include <condmv/scalar_function.hpp>
#include <condmv/coefficients.hpp>
#include <condmv/stationary1d.hpp>
#include <condmv/grid_density.hpp>
#include <condmv/condexp.hpp>
#include <condmv/stats.hpp>
#include <condmv/transform.hpp>
#include <condmv/density_catalog.hpp>
#include <condmv/particlesim.hpp>
#include <condmv/fpsolver.hpp>
#include <condmv/lsv.hpp>
