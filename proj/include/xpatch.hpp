#pragma once

// Umbrella header.

#include "xpatch/bridges.hpp"
#include "xpatch/container.hpp"
#include "xpatch/controls.hpp"
#include "xpatch/crosscoder.hpp"
#include "xpatch/divergence.hpp"
#include "xpatch/error.hpp"
#include "xpatch/factorial.hpp"
#include "xpatch/geometry.hpp"
#include "xpatch/hash.hpp"
#include "xpatch/model.hpp"
#include "xpatch/pipeline.hpp"
#include "xpatch/records.hpp"
#include "xpatch/report.hpp"
#include "xpatch/rng.hpp"
#include "xpatch/runtime.hpp"
#include "xpatch/stats.hpp"
#include "xpatch/tokenizer.hpp"
#include "xpatch/toy.hpp"
