#pragma once

#include "alsim/alloop.hpp"
#include "alsim/bib.hpp"
#include "alsim/detections.hpp"
#include "alsim/error.hpp"
#include "alsim/eval.hpp"
#include "alsim/geometry.hpp"
#include "alsim/io.hpp"
#include "alsim/rng.hpp"
#include "alsim/strategies.hpp"
#include "alsim/synthetic.hpp"
#include "alsim/wsod_math.hpp"
