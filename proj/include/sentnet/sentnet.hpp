#pragma once

#include "sentnet/autodiff.hpp"
#include "sentnet/checkpoint.hpp"
#include "sentnet/data.hpp"
#include "sentnet/gradcheck.hpp"
#include "sentnet/layers.hpp"
#include "sentnet/metrics.hpp"
#include "sentnet/models.hpp"
#include "sentnet/random.hpp"
#include "sentnet/tensor.hpp"
#include "sentnet/training.hpp"
