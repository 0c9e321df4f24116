#pragma once

#include <cstddef>
#include <functional>

namespace ac3d {

/// Worker count: AC3D_THREADS when set and positive, else hardware concurrency.
std::size_t thread_count();

/// Runs fn(i) for i in [0, n) on up to thread_count() threads. Each index is
/// handled exactly once; callers write results by index so output order never
/// depends on scheduling. The first exception thrown is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// Keeps freed heap memory in the process instead of returning it to the OS.
/// Large short-lived activation buffers otherwise pay a page fault per page on
/// every allocation. Call once from main().
void tune_allocator();

}  // namespace ac3d
