#pragma once

#include <cstddef>
#include <functional>

namespace fanct {

/// Worker count used by parallel_for: the set_thread_count override if any,
/// else the FANCT_THREADS environment variable, else hardware concurrency.
unsigned thread_count();

/// Overrides the worker count (0 = back to automatic). The partition of work
/// is fixed regardless, so results never depend on this; it exists for
/// benchmarking and for tests that prove that claim.
void set_thread_count(unsigned n);

/// Runs fn(lo, hi) over a partition of [begin, end) into contiguous ranges.
/// The partition depends only on (end - begin), never on the worker count,
/// so per-range accumulators can be combined in index order and results stay
/// bitwise reproducible on any machine. With a single worker the ranges run
/// inline in order.
void parallel_for_ranges(std::size_t begin, std::size_t end,
                         const std::function<void(std::size_t, std::size_t)>& fn);

/// Element-wise convenience wrapper over parallel_for_ranges.
void parallel_for(std::size_t begin, std::size_t end,
                  const std::function<void(std::size_t)>& fn);

/// Fixed number of ranges used by parallel_for_ranges for sizeable loops.
inline constexpr std::size_t kRangeChunks = 32;

}  // namespace fanct
