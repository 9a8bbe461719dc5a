#pragma once

#include "phqfuse/audio.hpp"
#include "phqfuse/config.hpp"
#include "phqfuse/csv.hpp"
#include "phqfuse/data.hpp"
#include "phqfuse/error.hpp"
#include "phqfuse/eval.hpp"
#include "phqfuse/fixtures.hpp"
#include "phqfuse/fusion.hpp"
#include "phqfuse/generators.hpp"
#include "phqfuse/gradcheck.hpp"
#include "phqfuse/knowledge.hpp"
#include "phqfuse/lora.hpp"
#include "phqfuse/model.hpp"
#include "phqfuse/optim.hpp"
#include "phqfuse/pipeline.hpp"
#include "phqfuse/rng.hpp"
#include "phqfuse/tensor.hpp"
#include "phqfuse/tensor_io.hpp"
#include "phqfuse/text_codec.hpp"
#include "phqfuse/trainer.hpp"
