#pragma once

#include <cstddef>
#include <functional>

namespace mudeep {

// Worker count used by batch-parallel kernels. 1 (the default) runs everything
// on the calling thread and gives bitwise-reproducible results.
void set_num_threads(std::size_t n);
std::size_t num_threads() noexcept;

// Reads MUDEEP_THREADS; returns `fallback` when unset or malformed.
std::size_t threads_from_env(std::size_t fallback);

// Keeps freed tensor storage in the heap for reuse. Training frees and
// reallocates the same large buffers every iteration; served by fresh mmaps
// they cost a page fault and a zero fill per page each time. No-op outside
// glibc.
void retain_freed_memory();

// Splits [0, n) into contiguous chunks, one per worker, and calls
// body(begin, end, worker) for each. Worker indices are dense in [0, workers).
// Returns the number of workers used.
std::size_t parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t, std::size_t)>& body);

}  // namespace mudeep
