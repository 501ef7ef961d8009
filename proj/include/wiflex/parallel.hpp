#pragma once

#include <cstddef>
#include <functional>

namespace wiflex {

/// Worker count used by the heavier kernels (convolutions, attention).
/// Defaults to 1: every kernel runs sequentially unless raised explicitly.
void set_num_threads(unsigned n);
unsigned num_threads();

/// Runs fn(i) for i in [0, n). Work is split into contiguous chunks over
/// independent outputs, so results do not depend on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace wiflex
