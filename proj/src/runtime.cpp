#include "msattn/runtime.hpp"

#include <malloc.h>

namespace msattn {

void tune_allocator() {
  // Large activations are allocated and freed every step; keep them on the
  // heap instead of round-tripping through mmap and fresh page faults.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

}  // namespace msattn
