#pragma once

#include "protoseg/bank.hpp"
#include "protoseg/calibrate.hpp"
#include "protoseg/embeddings.hpp"
#include "protoseg/formats.hpp"
#include "protoseg/mask_io.hpp"
#include "protoseg/metrics.hpp"
#include "protoseg/morph.hpp"
#include "protoseg/pipeline.hpp"
#include "protoseg/scorer.hpp"
#include "protoseg/synth.hpp"
#include "protoseg/tiler.hpp"
