// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "tierflow/common.hpp"
#include "tierflow/config.hpp"
#include "tierflow/fp16.hpp"
#include "tierflow/harness.hpp"
#include "tierflow/optimizer.hpp"
#include "tierflow/placement.hpp"
#include "tierflow/pool.hpp"
#include "tierflow/precision.hpp"
#include "tierflow/report.hpp"
#include "tierflow/scheduler.hpp"
#include "tierflow/tier.hpp"
#include "tierflow/tier_lock.hpp"
#include "tierflow/token_bucket.hpp"
#include "tierflow/trace.hpp"
