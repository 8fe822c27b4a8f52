#include "muldef/runtime.hpp"

#include <cstdlib>  // defines __GLIBC__ where applicable

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "muldef/kernels.hpp"

namespace muldef {

void configure_runtime(int threads) {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    if (threads > 0) kernels::set_num_threads(threads);
}

}  // namespace muldef
