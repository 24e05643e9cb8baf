// Copyright 2026 The rstpm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "rstpm/anomaly.hpp"
#include "rstpm/autograd.hpp"
#include "rstpm/backbones.hpp"
#include "rstpm/bundle.hpp"
#include "rstpm/data.hpp"
#include "rstpm/distill.hpp"
#include "rstpm/errors.hpp"
#include "rstpm/eval.hpp"
#include "rstpm/image_io.hpp"
#include "rstpm/kernels.hpp"
#include "rstpm/layers.hpp"
#include "rstpm/ops.hpp"
#include "rstpm/parameter.hpp"
#include "rstpm/pipeline.hpp"
#include "rstpm/pretrain.hpp"
#include "rstpm/sgd.hpp"
#include "rstpm/tensor.hpp"
