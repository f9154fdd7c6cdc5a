#pragma once

#include "mabflow/allocator.hpp"
#include "mabflow/attribution.hpp"
#include "mabflow/campaign.hpp"
#include "mabflow/error.hpp"
#include "mabflow/metrics.hpp"
#include "mabflow/persistence.hpp"
#include "mabflow/posterior.hpp"
#include "mabflow/random.hpp"
#include "mabflow/randomizer.hpp"
#include "mabflow/simulator.hpp"
