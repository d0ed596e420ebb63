#pragma once

#include <cstddef>
#include <functional>

namespace freesim {

// Worker count used by parallel_for. Defaults to FREESIM_THREADS, else hardware concurrency.
int thread_count();
void set_thread_count(int n);

// Runs fn(i) for i in [0, n) on up to thread_count() workers. fn must only write to
// state owned by index i so results do not depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace freesim
