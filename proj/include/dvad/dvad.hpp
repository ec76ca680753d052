#pragma once

#include "dvad/adam.hpp"
#include "dvad/audio/dataset.hpp"
#include "dvad/audio/mel.hpp"
#include "dvad/audio/synth.hpp"
#include "dvad/audio/wav.hpp"
#include "dvad/distill/config.hpp"
#include "dvad/distill/losses.hpp"
#include "dvad/distill/trainer.hpp"
#include "dvad/error.hpp"
#include "dvad/eval/evaluate.hpp"
#include "dvad/eval/metrics.hpp"
#include "dvad/eval/report.hpp"
#include "dvad/model/config.hpp"
#include "dvad/model/model.hpp"
#include "dvad/model/profile.hpp"
#include "dvad/model/weights_io.hpp"
#include "dvad/ops.hpp"
#include "dvad/rng.hpp"
#include "dvad/spectrogram_set.hpp"
#include "dvad/tensor.hpp"
