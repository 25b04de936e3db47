#pragma once

#include "coughvit/audio.hpp"
#include "coughvit/checkpoint.hpp"
#include "coughvit/config.hpp"
#include "coughvit/dataset.hpp"
#include "coughvit/error.hpp"
#include "coughvit/finetune.hpp"
#include "coughvit/gradcheck.hpp"
#include "coughvit/mae.hpp"
#include "coughvit/mel.hpp"
#include "coughvit/ops.hpp"
#include "coughvit/optim.hpp"
#include "coughvit/pipeline.hpp"
#include "coughvit/rng.hpp"
#include "coughvit/segmentation.hpp"
#include "coughvit/tensor.hpp"
#include "coughvit/vit.hpp"
