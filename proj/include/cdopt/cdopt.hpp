#pragma once

// Umbrella header for the compressed distributed constrained-optimization
// simulator: graph/spectral utilities, the ST compressor family, quadratic
// instance generators with exact KKT oracles, the two saddle-point engines,
// run diagnostics, and the config-driven experiment runner.

#include "cdopt/compressor.hpp"
#include "cdopt/config.hpp"
#include "cdopt/engine.hpp"
#include "cdopt/errors.hpp"
#include "cdopt/graph.hpp"
#include "cdopt/metrics.hpp"
#include "cdopt/problem.hpp"
#include "cdopt/rng.hpp"
#include "cdopt/runner.hpp"
