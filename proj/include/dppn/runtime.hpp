#pragma once
// Process-wide allocator tuning. Training allocates and frees multi-megabyte
// activation buffers every step; glibc's default mmap threshold hands those
// straight back to the kernel, so each step pays mmap + page-zero again.
// Raising the thresholds keeps the buffers on the heap for reuse.

#include <malloc.h>

namespace dppn::detail {

struct RuntimeTuner {
  RuntimeTuner() {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
  }
};

inline RuntimeTuner runtime_tuner_instance;

}  // namespace dppn::detail
