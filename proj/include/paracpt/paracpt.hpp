#pragma once

#include "paracpt/common.hpp"
#include "paracpt/corpus.hpp"
#include "paracpt/filter.hpp"
#include "paracpt/formats.hpp"
#include "paracpt/tokenizer.hpp"
#include "paracpt/packing.hpp"
#include "paracpt/sft.hpp"
#include "paracpt/model.hpp"
#include "paracpt/optim.hpp"
#include "paracpt/decode.hpp"
#include "paracpt/trainer.hpp"
#include "paracpt/synthetic.hpp"
#include "paracpt/bleu.hpp"
#include "paracpt/experiment.hpp"
