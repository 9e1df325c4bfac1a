#pragma once

#include "mimofan/autograd.hpp"
#include "mimofan/data_io.hpp"
#include "mimofan/errors.hpp"
#include "mimofan/gradcheck.hpp"
#include "mimofan/kernels.hpp"
#include "mimofan/loss_metrics.hpp"
#include "mimofan/network.hpp"
#include "mimofan/pyramid.hpp"
#include "mimofan/tensor.hpp"
#include "mimofan/training.hpp"
