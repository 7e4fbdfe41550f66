#pragma once

// Everything in one include.

#include "basis.hpp"
#include "common.hpp"
#include "datagen.hpp"
#include "design.hpp"
#include "diagnostics.hpp"
#include "estimands.hpp"
#include "frequentist.hpp"
#include "harness.hpp"
#include "io.hpp"
#include "numeric.hpp"
#include "posterior.hpp"
#include "sampler.hpp"
