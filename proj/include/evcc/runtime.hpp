#pragma once

#include "evcc/tensor.hpp"

namespace evcc {

/// Keeps large tensor buffers on the heap instead of fresh mmap regions, so
/// repeated allocation in the training loop does not page-fault. No-op off glibc.
void tune_allocator();

/// Value of EVCC_THREADS (default 1, minimum 1).
Index thread_cap();

}  // namespace evcc
