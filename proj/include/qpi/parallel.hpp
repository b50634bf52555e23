#pragma once

#include <cstddef>
#include <functional>

namespace qpi {

// Worker cap: QPI_THREADS if set and positive, else hardware concurrency.
std::size_t worker_count();

// Runs fn(i) for i in [0, n). Each index must write only its own output slot,
// which keeps results independent of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace qpi
