#pragma once

#include "ugeforge/config.hpp"
#include "ugeforge/data.hpp"
#include "ugeforge/dual.hpp"
#include "ugeforge/embedding.hpp"
#include "ugeforge/engine.hpp"
#include "ugeforge/error.hpp"
#include "ugeforge/eval.hpp"
#include "ugeforge/generator.hpp"
#include "ugeforge/hash.hpp"
#include "ugeforge/layers.hpp"
#include "ugeforge/losses.hpp"
#include "ugeforge/network.hpp"
#include "ugeforge/optim.hpp"
#include "ugeforge/pipeline.hpp"
#include "ugeforge/publish.hpp"
#include "ugeforge/report.hpp"
#include "ugeforge/rng.hpp"
#include "ugeforge/tensor.hpp"
#include "ugeforge/trajectory.hpp"
