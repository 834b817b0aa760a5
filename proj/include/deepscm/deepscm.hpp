#pragma once

#include "deepscm/channel.hpp"
#include "deepscm/config.hpp"
#include "deepscm/constellation.hpp"
#include "deepscm/csv.hpp"
#include "deepscm/decorrelator.hpp"
#include "deepscm/error.hpp"
#include "deepscm/hier_data.hpp"
#include "deepscm/layers.hpp"
#include "deepscm/models.hpp"
#include "deepscm/modulator.hpp"
#include "deepscm/optim.hpp"
#include "deepscm/pipeline.hpp"
#include "deepscm/rng.hpp"
#include "deepscm/tensor.hpp"
