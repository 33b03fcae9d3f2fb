#pragma once

// Umbrella header: the whole library in one include.
#include "mars/checkpoint.hpp"
#include "mars/dataset.hpp"
#include "mars/eval.hpp"
#include "mars/grad_check.hpp"
#include "mars/image.hpp"
#include "mars/model.hpp"
#include "mars/objectives.hpp"
#include "mars/optimizer.hpp"
#include "mars/tensor.hpp"
#include "mars/tokenize.hpp"
#include "mars/training.hpp"
