#pragma once

#include <cstddef>
#include <functional>

namespace evsve {

// Worker count used by parallel loops; 0 or negative selects hardware concurrency.
void set_thread_count(int threads);
int thread_count();

// Runs body(begin, end) over contiguous chunks of [0, n). Chunk boundaries
// depend only on n and the chunk count, never on scheduling.
void parallel_chunks(std::size_t n, std::size_t chunks,
                     const std::function<void(std::size_t chunk, std::size_t begin, std::size_t end)>& body);

}  // namespace evsve
