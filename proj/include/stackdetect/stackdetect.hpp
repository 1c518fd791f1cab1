#pragma once

#include "stackdetect/autograd.hpp"
#include "stackdetect/classifier.hpp"
#include "stackdetect/cli.hpp"
#include "stackdetect/corpus.hpp"
#include "stackdetect/encoder.hpp"
#include "stackdetect/ensemble.hpp"
#include "stackdetect/errors.hpp"
#include "stackdetect/gradcheck.hpp"
#include "stackdetect/io.hpp"
#include "stackdetect/matrix.hpp"
#include "stackdetect/metrics.hpp"
#include "stackdetect/optim.hpp"
#include "stackdetect/synthetic.hpp"
#include "stackdetect/tokenizer.hpp"
