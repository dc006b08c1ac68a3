#pragma once

#include <cstddef>
#include <functional>

namespace routelab {

// Worker count: ROUTELAB_THREADS if set and positive, else hardware concurrency.
unsigned default_thread_count();

// Runs body(i) for i in [0, n) on up to `threads` workers. Each index is
// processed exactly once; the first exception thrown is rethrown after all
// workers stop.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& body);

}  // namespace routelab
