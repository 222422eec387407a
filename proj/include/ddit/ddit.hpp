#pragma once

#include "ddit/error.hpp"
#include "ddit/experiment.hpp"
#include "ddit/format.hpp"
#include "ddit/gpu_pool.hpp"
#include "ddit/metrics.hpp"
#include "ddit/policies.hpp"
#include "ddit/profile.hpp"
#include "ddit/simulator.hpp"
#include "ddit/solver.hpp"
#include "ddit/workload.hpp"
