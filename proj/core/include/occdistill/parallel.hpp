// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace occdistill {

/// Worker count: OCCDISTILL_THREADS if set and positive, else hardware concurrency.
int default_thread_count();

/// Runs body(begin, end) over [0, n) split into contiguous chunks, one per worker.
/// Bodies must write only to slots they own; callers rely on this for results
/// that do not depend on the worker count.
void parallel_for(std::size_t n, int threads,
                  const std::function<void(std::size_t, std::size_t)>& body);

} // namespace occdistill
