// Fixed-partition parallel loops. Work is split into contiguous chunks whose
// boundaries depend only on the count and the configured thread count, so any
// per-chunk reduction done in chunk order is run-to-run identical.
#pragma once

#include <cstddef>
#include <functional>

namespace avatar {

/// Number of worker threads used by parallel_for. Defaults to the value of
/// AVATAR_THREADS if set, otherwise the hardware concurrency.
int thread_count();
void set_thread_count(int threads);

/// Number of chunks parallel_for will use for `count` items.
int chunk_count(std::size_t count);

/// Calls fn(chunk, begin, end) for each chunk of [0, count).
void parallel_for(std::size_t count,
                  const std::function<void(int chunk, std::size_t begin, std::size_t end)>& fn);

}  // namespace avatar
