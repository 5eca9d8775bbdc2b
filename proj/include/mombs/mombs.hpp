#pragma once

#include "mombs/assessor.hpp"
#include "mombs/config.hpp"
#include "mombs/csv.hpp"
#include "mombs/data.hpp"
#include "mombs/harness.hpp"
#include "mombs/micronet.hpp"
#include "mombs/random.hpp"
#include "mombs/scheduler.hpp"
#include "mombs/version.hpp"
