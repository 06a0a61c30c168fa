#pragma once

#include "cowlib/core.hpp"
#include "cowlib/integrate.hpp"
#include "cowlib/density.hpp"
#include "cowlib/optimize.hpp"
#include "cowlib/mlfit.hpp"
#include "cowlib/sweights.hpp"
#include "cowlib/cows.hpp"
#include "cowlib/wcov.hpp"
#include "cowlib/diagnostics.hpp"
#include "cowlib/rng.hpp"
#include "cowlib/toygen.hpp"
#include "cowlib/io.hpp"
