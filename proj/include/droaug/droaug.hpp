// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "droaug/adversary.hpp"
#include "droaug/augment.hpp"
#include "droaug/autodiff.hpp"
#include "droaug/checkpoint.hpp"
#include "droaug/config.hpp"
#include "droaug/corruptions.hpp"
#include "droaug/data.hpp"
#include "droaug/data_io.hpp"
#include "droaug/errors.hpp"
#include "droaug/gradcheck.hpp"
#include "droaug/models.hpp"
#include "droaug/optim.hpp"
#include "droaug/report.hpp"
#include "droaug/rng.hpp"
#include "droaug/robust.hpp"
#include "droaug/tensor.hpp"
#include "droaug/train.hpp"
