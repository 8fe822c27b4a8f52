#pragma once

#include <cstddef>

namespace muldef::detail {

// out[i] = tanh(in[i]). Lives in its own translation unit so the compiler may
// call a SIMD libm variant; no finiteness checks happen in there.
void tanh_array(const float* in, float* out, std::size_t n);

}  // namespace muldef::detail
