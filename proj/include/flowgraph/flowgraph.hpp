#pragma once

#include "flowgraph/autodiff.hpp"
#include "flowgraph/checkpoint.hpp"
#include "flowgraph/datasets.hpp"
#include "flowgraph/error.hpp"
#include "flowgraph/flow_path.hpp"
#include "flowgraph/graph.hpp"
#include "flowgraph/graphevo.hpp"
#include "flowgraph/io.hpp"
#include "flowgraph/metrics.hpp"
#include "flowgraph/oracle.hpp"
#include "flowgraph/ot_coupling.hpp"
#include "flowgraph/parallel.hpp"
#include "flowgraph/prior.hpp"
#include "flowgraph/rl_guidance.hpp"
#include "flowgraph/rng.hpp"
#include "flowgraph/sampler.hpp"
#include "flowgraph/self_check.hpp"
#include "flowgraph/structural_features.hpp"
#include "flowgraph/training.hpp"
