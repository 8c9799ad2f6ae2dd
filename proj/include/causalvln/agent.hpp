#pragma once

#include "causalvln/agent/blocks.hpp"
#include "causalvln/agent/model.hpp"
#include "causalvln/agent/train.hpp"
