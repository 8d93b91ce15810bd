#pragma once

#include "ermc/errors.hpp"
#include "ermc/model.hpp"
#include "ermc/moments.hpp"
#include "ermc/erlang.hpp"
#include "ermc/fit.hpp"
#include "ermc/checker.hpp"
#include "ermc/sim.hpp"
#include "ermc/cli.hpp"
