#pragma once

#include "causalvln/diffcore/ops.hpp"
#include "causalvln/diffcore/optim.hpp"
#include "causalvln/diffcore/rng.hpp"
#include "causalvln/diffcore/tape.hpp"
#include "causalvln/diffcore/tensor.hpp"
