#pragma once

// Process-level allocator settings for the training tools.

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace diffult {

// Large activation buffers are freed and reallocated every step. Keeping them
// on the heap instead of fresh mmap pages avoids repeated page faults.
inline void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
  mallopt(M_TOP_PAD, 64 * 1024 * 1024);
#endif
}

}  // namespace diffult
