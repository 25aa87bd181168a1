#pragma once

#include <cstddef>
#include <functional>

namespace fodpipe {

// Number of worker threads used by parallel_for. Defaults to FODPIPE_THREADS
// if set, otherwise std::thread::hardware_concurrency().
int thread_count();
void set_thread_count(int n);

// Calls body(begin, end) on disjoint contiguous chunks of [0, n). Chunks are
// statically assigned, so any reduction done per index is independent of the
// number of threads. Exceptions thrown by body are rethrown on the caller.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t min_chunk = 1);

}  // namespace fodpipe
