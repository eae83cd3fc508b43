#pragma once

#include "rpc/autodiff.hpp"
#include "rpc/checkpoint.hpp"
#include "rpc/config.hpp"
#include "rpc/dataset_io.hpp"
#include "rpc/error.hpp"
#include "rpc/eval.hpp"
#include "rpc/gradcheck.hpp"
#include "rpc/harness.hpp"
#include "rpc/losses.hpp"
#include "rpc/model.hpp"
#include "rpc/random.hpp"
#include "rpc/synthdata.hpp"
#include "rpc/tensor.hpp"
#include "rpc/trainer.hpp"
