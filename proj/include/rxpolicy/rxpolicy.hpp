#pragma once

#include "rxpolicy/balance.hpp"
#include "rxpolicy/cohort.hpp"
#include "rxpolicy/error.hpp"
#include "rxpolicy/evaluation.hpp"
#include "rxpolicy/imputation.hpp"
#include "rxpolicy/io.hpp"
#include "rxpolicy/matching.hpp"
#include "rxpolicy/parallel.hpp"
#include "rxpolicy/pipeline.hpp"
#include "rxpolicy/policy_tree.hpp"
#include "rxpolicy/rewards.hpp"
#include "rxpolicy/survival_forest.hpp"
#include "rxpolicy/synthetic.hpp"
#include "rxpolicy/weighting.hpp"
