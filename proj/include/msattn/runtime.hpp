#pragma once

namespace msattn {

/// Process-wide malloc tuning for training workloads (glibc only). Call once at startup.
void tune_allocator();

}  // namespace msattn
