#pragma once

#include <cstddef>
#include <functional>

namespace fi3det {

// Number of worker threads used by parallel_for. Defaults to the hardware
// concurrency, capped by the FI3DET_THREADS environment variable when set.
int worker_count();

// Runs fn(i) for i in [0, n). Work is split by index block; each index is
// processed exactly once and results must be written to per-index slots, so
// output never depends on the thread count. Runs inline when n is small or
// only one worker is available.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace fi3det
