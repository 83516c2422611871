#pragma once

#include "bciar/ar_loop.hpp"
#include "bciar/bridge.hpp"
#include "bciar/bridge_server.hpp"
#include "bciar/config.hpp"
#include "bciar/dsp.hpp"
#include "bciar/eeg_sim.hpp"
#include "bciar/error.hpp"
#include "bciar/experiments.hpp"
#include "bciar/geom.hpp"
#include "bciar/handeye.hpp"
#include "bciar/metrics.hpp"
#include "bciar/mi_decoder.hpp"
#include "bciar/pipeline.hpp"
#include "bciar/rng.hpp"
#include "bciar/robot_arm.hpp"
#include "bciar/session.hpp"
#include "bciar/vision.hpp"
