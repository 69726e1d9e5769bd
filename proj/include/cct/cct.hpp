#pragma once

#include "cct/core.hpp"
#include "cct/random.hpp"
#include "cct/systems.hpp"
#include "cct/metric.hpp"
#include "cct/predictor.hpp"
#include "cct/control.hpp"
#include "cct/conformal.hpp"
#include "cct/tube.hpp"
#include "cct/dataset.hpp"
#include "cct/planner.hpp"
#include "cct/io.hpp"
#include "cct/config.hpp"
#include "cct/pipeline.hpp"
