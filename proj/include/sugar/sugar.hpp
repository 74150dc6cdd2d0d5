#pragma once

#include "sugar/deform.hpp"
#include "sugar/errors.hpp"
#include "sugar/geometry.hpp"
#include "sugar/interp.hpp"
#include "sugar/io.hpp"
#include "sugar/loss.hpp"
#include "sugar/mesh.hpp"
#include "sugar/metrics.hpp"
#include "sugar/net.hpp"
#include "sugar/registry.hpp"
#include "sugar/rng.hpp"
#include "sugar/synth.hpp"
