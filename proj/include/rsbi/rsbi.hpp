#pragma once

#include "rsbi/config.hpp"
#include "rsbi/detection.hpp"
#include "rsbi/evaluation.hpp"
#include "rsbi/inference.hpp"
#include "rsbi/io.hpp"
#include "rsbi/kernel.hpp"
#include "rsbi/networks.hpp"
#include "rsbi/pipeline.hpp"
#include "rsbi/rng.hpp"
#include "rsbi/simulators.hpp"
#include "rsbi/svg.hpp"
#include "rsbi/training.hpp"
#include "rsbi/types.hpp"
