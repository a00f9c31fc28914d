#pragma once

#include <cstddef>
#include <functional>

namespace editmf {

// Worker cap from EDITMF_THREADS (default 1, minimum 1).
std::size_t thread_count();

// Runs body(i) for i in [0, n). Each index must write only to its own output
// slot; callers reduce the slots in index order so results never depend on
// the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace editmf
