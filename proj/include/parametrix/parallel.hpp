#pragma once

#include <cstddef>
#include <functional>

namespace parametrix {

/// Runs body(i) for i in [0, count) on up to `threads` workers. Work is split into contiguous
/// blocks fixed by (count, threads); each index is processed exactly once and bodies write only to
/// their own slots, so results do not depend on the thread count.
void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& body);

/// Process-wide default worker count (the CLI's --threads). Starts at 1.
int default_threads();
void set_default_threads(int threads);

}  // namespace parametrix
