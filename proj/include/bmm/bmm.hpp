#pragma once

#include "bmm/error.hpp"
#include "bmm/tensor.hpp"
#include "bmm/rng.hpp"
#include "bmm/kernels.hpp"
#include "bmm/autodiff.hpp"
#include "bmm/grad_check.hpp"
#include "bmm/layers.hpp"
#include "bmm/model_spec.hpp"
#include "bmm/image.hpp"
#include "bmm/kv.hpp"
#include "bmm/models.hpp"
#include "bmm/dataflow.hpp"
#include "bmm/checkpoint_io.hpp"
#include "bmm/evaluate.hpp"
#include "bmm/baseline.hpp"
#include "bmm/rating.hpp"
