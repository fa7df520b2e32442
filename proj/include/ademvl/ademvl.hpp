#pragma once

#include "ademvl/decoder.hpp"
#include "ademvl/errors.hpp"
#include "ademvl/experiment.hpp"
#include "ademvl/flops.hpp"
#include "ademvl/fusion.hpp"
#include "ademvl/gradcheck.hpp"
#include "ademvl/heatmap.hpp"
#include "ademvl/prompt.hpp"
#include "ademvl/rng.hpp"
#include "ademvl/task.hpp"
#include "ademvl/tensor.hpp"
#include "ademvl/tensor_io.hpp"
#include "ademvl/train.hpp"
