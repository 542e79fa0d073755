#pragma once

#include "partseg/crbm.hpp"
#include "partseg/densecrf.hpp"
#include "partseg/io.hpp"
#include "partseg/metrics.hpp"
#include "partseg/multiscale.hpp"
#include "partseg/ops.hpp"
#include "partseg/rng.hpp"
#include "partseg/synth.hpp"
#include "partseg/types.hpp"
