// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "omnicast/backbone.hpp"
#include "omnicast/data.hpp"
#include "omnicast/error.hpp"
#include "omnicast/fft.hpp"
#include "omnicast/heads.hpp"
#include "omnicast/metrics.hpp"
#include "omnicast/nn.hpp"
#include "omnicast/octf.hpp"
#include "omnicast/ops.hpp"
#include "omnicast/optim.hpp"
#include "omnicast/parallel.hpp"
#include "omnicast/rng.hpp"
#include "omnicast/sampler.hpp"
#include "omnicast/tensor.hpp"
#include "omnicast/tokenizer.hpp"
#include "omnicast/training.hpp"
#include "omnicast/vae.hpp"
