#pragma once

// Umbrella header: structured Lagrangian prior + stochastic flow-matching
// residual dynamics, baselines, desk-scale environments, MPPI control and
// evaluation protocols.

#include "stride/autodiff.hpp"
#include "stride/baselines.hpp"
#include "stride/cfm.hpp"
#include "stride/checkpoint.hpp"
#include "stride/common.hpp"
#include "stride/dataset_io.hpp"
#include "stride/envs.hpp"
#include "stride/eval.hpp"
#include "stride/features.hpp"
#include "stride/lnn.hpp"
#include "stride/model.hpp"
#include "stride/mppi.hpp"
#include "stride/nets.hpp"
#include "stride/optim.hpp"
#include "stride/trainer.hpp"
