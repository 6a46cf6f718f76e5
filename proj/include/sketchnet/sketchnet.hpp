#pragma once

#include "sketchnet/errors.hpp"
#include "sketchnet/codec.hpp"
#include "sketchnet/melody.hpp"
#include "sketchnet/abc.hpp"
#include "sketchnet/midi.hpp"
#include "sketchnet/score.hpp"
#include "sketchnet/corpus.hpp"
#include "sketchnet/synthetic.hpp"
#include "sketchnet/checkpoint.hpp"
#include "sketchnet/vae.hpp"
#include "sketchnet/inpainter.hpp"
#include "sketchnet/connector.hpp"
#include "sketchnet/pipeline.hpp"
#include "sketchnet/training.hpp"
#include "sketchnet/metrics.hpp"
#include "sketchnet/evaluation.hpp"
#include "sketchnet/service.hpp"
