#pragma once

#include "config.hpp"
#include "corpus.hpp"
#include "error.hpp"
#include "eval.hpp"
#include "gradcheck.hpp"
#include "hash.hpp"
#include "instruct.hpp"
#include "jsonl.hpp"
#include "mcqa.hpp"
#include "mixer.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "tokenizer.hpp"
#include "train.hpp"
