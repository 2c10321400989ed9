// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "kbvq/baselines.hpp"
#include "kbvq/bcos.hpp"
#include "kbvq/bundle.hpp"
#include "kbvq/error.hpp"
#include "kbvq/idre.hpp"
#include "kbvq/matrix.hpp"
#include "kbvq/moesim.hpp"
#include "kbvq/numerics.hpp"
#include "kbvq/pipeline.hpp"
#include "kbvq/report.hpp"
#include "kbvq/rng.hpp"
#include "kbvq/tensor_file.hpp"
#include "kbvq/vq.hpp"
