#include "vmath.hpp"

#include <cmath>

namespace muldef::detail {

void tanh_array(const float* __restrict in, float* __restrict out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(in[i]);
}

}  // namespace muldef::detail
