#pragma once

#include "nrreg/grid.hpp"
#include "nrreg/frame.hpp"
#include "nrreg/pyramid.hpp"
#include "nrreg/deformation.hpp"
#include "nrreg/energy.hpp"
#include "nrreg/sobolev.hpp"
#include "nrreg/flow.hpp"
#include "nrreg/drift.hpp"
#include "nrreg/series.hpp"
#include "nrreg/quality.hpp"
#include "nrreg/synth.hpp"
