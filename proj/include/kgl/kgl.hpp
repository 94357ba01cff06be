// Umbrella header for the kernel graph learning library.

#pragma once

#include "kgl/datagen.hpp"
#include "kgl/errors.hpp"
#include "kgl/experiment.hpp"
#include "kgl/graph.hpp"
#include "kgl/io.hpp"
#include "kgl/kernels.hpp"
#include "kgl/metrics.hpp"
#include "kgl/numerics.hpp"
#include "kgl/rng.hpp"
#include "kgl/solvers.hpp"
