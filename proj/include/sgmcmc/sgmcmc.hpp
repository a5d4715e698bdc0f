#pragma once

#include "sgmcmc/core.hpp"
#include "sgmcmc/data.hpp"
#include "sgmcmc/diagnostics.hpp"
#include "sgmcmc/estimators.hpp"
#include "sgmcmc/experiment.hpp"
#include "sgmcmc/gaussian.hpp"
#include "sgmcmc/logistic.hpp"
#include "sgmcmc/model.hpp"
#include "sgmcmc/recipe.hpp"
#include "sgmcmc/samplers.hpp"
#include "sgmcmc/schedule.hpp"
#include "sgmcmc/trace_io.hpp"
