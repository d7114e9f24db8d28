#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace felicia::harness {

// Keeps freed training buffers in the heap instead of returning them to the kernel
// after every step. Affects speed only.
inline void retain_heap_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace felicia::harness
