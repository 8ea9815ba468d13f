#pragma once

// Umbrella header.

#include "v3fusion/common.hpp"
#include "v3fusion/text.hpp"
#include "v3fusion/records.hpp"
#include "v3fusion/error_diversity.hpp"
#include "v3fusion/cka.hpp"
#include "v3fusion/pruning.hpp"
#include "v3fusion/fusion_mlp.hpp"
#include "v3fusion/uncertainty.hpp"
#include "v3fusion/eval_report.hpp"
#include "v3fusion/synth.hpp"
