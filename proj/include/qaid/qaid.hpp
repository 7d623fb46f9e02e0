#pragma once

#include "qaid/corpus.hpp"
#include "qaid/encoder.hpp"
#include "qaid/error.hpp"
#include "qaid/index.hpp"
#include "qaid/infer.hpp"
#include "qaid/losses.hpp"
#include "qaid/rng.hpp"
#include "qaid/scoring.hpp"
#include "qaid/synthetic.hpp"
#include "qaid/tensor.hpp"
#include "qaid/textpipe.hpp"
#include "qaid/trainer.hpp"
