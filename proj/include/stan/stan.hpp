#pragma once
// Umbrella header.

#include "stan/app.hpp"
#include "stan/backbone.hpp"
#include "stan/ca_gate.hpp"
#include "stan/config.hpp"
#include "stan/error.hpp"
#include "stan/gradcheck.hpp"
#include "stan/head.hpp"
#include "stan/io.hpp"
#include "stan/metrics.hpp"
#include "stan/model.hpp"
#include "stan/nn.hpp"
#include "stan/ops.hpp"
#include "stan/optim.hpp"
#include "stan/probe.hpp"
#include "stan/random.hpp"
#include "stan/sfso.hpp"
#include "stan/stfl.hpp"
#include "stan/synthetic.hpp"
#include "stan/tensor.hpp"
#include "stan/train.hpp"
