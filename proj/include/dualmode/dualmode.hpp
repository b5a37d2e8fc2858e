#pragma once

#include "dualmode/checkpoint.hpp"
#include "dualmode/data.hpp"
#include "dualmode/encoder.hpp"
#include "dualmode/eval.hpp"
#include "dualmode/experiment.hpp"
#include "dualmode/layers.hpp"
#include "dualmode/mode.hpp"
#include "dualmode/rng.hpp"
#include "dualmode/tensor.hpp"
#include "dualmode/training.hpp"
#include "dualmode/transducer.hpp"
