#pragma once

#include "ctxswitch/common.hpp"
#include "ctxswitch/dataset.hpp"
#include "ctxswitch/heads.hpp"
#include "ctxswitch/predictor.hpp"
#include "ctxswitch/selection.hpp"
#include "ctxswitch/similarity.hpp"
#include "ctxswitch/simulator.hpp"
#include "ctxswitch/switching.hpp"
