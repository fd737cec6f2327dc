#pragma once

#include "tcsmae/adam.hpp"
#include "tcsmae/checkpoint.hpp"
#include "tcsmae/dataset.hpp"
#include "tcsmae/error.hpp"
#include "tcsmae/eval.hpp"
#include "tcsmae/grid.hpp"
#include "tcsmae/imaging.hpp"
#include "tcsmae/io.hpp"
#include "tcsmae/log.hpp"
#include "tcsmae/losses.hpp"
#include "tcsmae/masking.hpp"
#include "tcsmae/model.hpp"
#include "tcsmae/params.hpp"
#include "tcsmae/phantom.hpp"
#include "tcsmae/rng.hpp"
#include "tcsmae/tensor.hpp"
#include "tcsmae/training.hpp"
