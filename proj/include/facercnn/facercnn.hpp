#pragma once

#include "facercnn/checkpoint.hpp"
#include "facercnn/config.hpp"
#include "facercnn/detector.hpp"
#include "facercnn/eval.hpp"
#include "facercnn/geometry.hpp"
#include "facercnn/layers.hpp"
#include "facercnn/losses.hpp"
#include "facercnn/matching.hpp"
#include "facercnn/model.hpp"
#include "facercnn/parallel.hpp"
#include "facercnn/pyramid.hpp"
#include "facercnn/synthdata.hpp"
#include "facercnn/tensor.hpp"
