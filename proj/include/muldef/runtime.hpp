#pragma once

namespace muldef {

/// Process-wide setup for executables: thread count (0 keeps the OpenMP
/// default) and, on glibc, allocator thresholds that keep the large
/// per-batch activation buffers on the heap instead of fresh mmap pages,
/// which otherwise cost a page fault per 4 KiB on every forward pass.
void configure_runtime(int threads = 0);

}  // namespace muldef
