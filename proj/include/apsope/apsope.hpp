#pragma once

#include "apsope/error.hpp"
#include "apsope/rng.hpp"
#include "apsope/parallel.hpp"
#include "apsope/core_types.hpp"
#include "apsope/csv_io.hpp"
#include "apsope/stats.hpp"
#include "apsope/ols.hpp"
#include "apsope/policy.hpp"
#include "apsope/policy_json.hpp"
#include "apsope/aps.hpp"
#include "apsope/estimator.hpp"
#include "apsope/simlab.hpp"
#include "apsope/cli.hpp"
