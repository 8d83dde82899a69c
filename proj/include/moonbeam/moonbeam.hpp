#pragma once

#include "moonbeam/errors.hpp"
#include "moonbeam/midi_io.hpp"
#include "moonbeam/tokenizer.hpp"
#include "moonbeam/tensor.hpp"
#include "moonbeam/checkpoint.hpp"
#include "moonbeam/config.hpp"
#include "moonbeam/nn.hpp"
#include "moonbeam/fme_embedding.hpp"
#include "moonbeam/mra_attention.hpp"
#include "moonbeam/batch.hpp"
#include "moonbeam/model.hpp"
#include "moonbeam/train.hpp"
#include "moonbeam/generate.hpp"
