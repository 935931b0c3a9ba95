/* Copyright 2026 The HQOD Lab Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include "hqod/tensor.hpp"
#include "hqod/random.hpp"
#include "hqod/quantization.hpp"
#include "hqod/box.hpp"
#include "hqod/harmony_losses.hpp"
#include "hqod/detector.hpp"
#include "hqod/evaluation.hpp"
#include "hqod/optim.hpp"
#include "hqod/dataset.hpp"
#include "hqod/harness.hpp"
