#pragma once

// Register-tiled GEMM bodies used by the parallel kernels. Each output
// element is accumulated in an order fixed by the shapes alone, whatever
// row range a caller hands in, so any row partition gives identical bits.

#include <cstddef>
#include <cstring>

#include "muldef/tensor.hpp"

namespace muldef::kernels::detail {

using Vec = Scalar __attribute__((vector_size(64)));
inline constexpr std::size_t kLanes = sizeof(Vec) / sizeof(Scalar);

inline Vec load(const Scalar* p) {
    Vec v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

inline void store(Scalar* p, Vec v) { std::memcpy(p, &v, sizeof v); }

// R rows of C (+)= A * B with explicit leading dimensions.
template <std::size_t R>
void nn_tile(std::size_t n, std::size_t k, const Scalar* a, std::size_t lda, const Scalar* b, std::size_t ldb,
             Scalar* c, std::size_t ldc, bool accumulate) {
    std::size_t j = 0;
    for (; j + 2 * kLanes <= n; j += 2 * kLanes) {
        Vec acc[R][2];
        for (std::size_t r = 0; r < R; ++r) {
            acc[r][0] = accumulate ? load(c + r * ldc + j) : Vec{};
            acc[r][1] = accumulate ? load(c + r * ldc + j + kLanes) : Vec{};
        }
        for (std::size_t p = 0; p < k; ++p) {
            const Vec b0 = load(b + p * ldb + j);
            const Vec b1 = load(b + p * ldb + j + kLanes);
            for (std::size_t r = 0; r < R; ++r) {
                const Scalar av = a[r * lda + p];
                acc[r][0] += av * b0;
                acc[r][1] += av * b1;
            }
        }
        for (std::size_t r = 0; r < R; ++r) {
            store(c + r * ldc + j, acc[r][0]);
            store(c + r * ldc + j + kLanes, acc[r][1]);
        }
    }
    for (; j + kLanes <= n; j += kLanes) {
        Vec acc[R];
        for (std::size_t r = 0; r < R; ++r) acc[r] = accumulate ? load(c + r * ldc + j) : Vec{};
        for (std::size_t p = 0; p < k; ++p) {
            const Vec b0 = load(b + p * ldb + j);
            for (std::size_t r = 0; r < R; ++r) acc[r] += a[r * lda + p] * b0;
        }
        for (std::size_t r = 0; r < R; ++r) store(c + r * ldc + j, acc[r]);
    }
    for (; j < n; ++j) {
        for (std::size_t r = 0; r < R; ++r) {
            Scalar s = accumulate ? c[r * ldc + j] : Scalar(0);
            for (std::size_t p = 0; p < k; ++p) s += a[r * lda + p] * b[p * ldb + j];
            c[r * ldc + j] = s;
        }
    }
}

// Rows [i0, i1) of C[., n] (+)= A[., k] * B[k, n].
inline void gemm_nn_rows(std::size_t i0, std::size_t i1, std::size_t n, std::size_t k, const Scalar* a,
                         std::size_t lda, const Scalar* b, std::size_t ldb, Scalar* c, std::size_t ldc,
                         bool accumulate) {
    std::size_t i = i0;
    for (; i + 6 <= i1; i += 6) nn_tile<6>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate);
    switch (i1 - i) {
        case 5: nn_tile<5>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate); break;
        case 4: nn_tile<4>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate); break;
        case 3: nn_tile<3>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate); break;
        case 2: nn_tile<2>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate); break;
        case 1: nn_tile<1>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate); break;
        default: break;
    }
}

// Sum of a[p]*b[p] with a fixed accumulation order.
inline Scalar dot(const Scalar* a, const Scalar* b, std::size_t k) {
    Vec acc0{}, acc1{};
    std::size_t p = 0;
    for (; p + 2 * kLanes <= k; p += 2 * kLanes) {
        acc0 += load(a + p) * load(b + p);
        acc1 += load(a + p + kLanes) * load(b + p + kLanes);
    }
    for (; p + kLanes <= k; p += kLanes) acc0 += load(a + p) * load(b + p);
    acc0 += acc1;
    Scalar s = 0;
    for (std::size_t l = 0; l < kLanes; ++l) s += acc0[l];
    for (; p < k; ++p) s += a[p] * b[p];
    return s;
}

// Rows [i0, i1) of C[., n] (+)= A[., k] * B[n, k]^T as dot products; used
// when n is too narrow for the tiled path.
inline void gemm_nt_rows(std::size_t i0, std::size_t i1, std::size_t n, std::size_t k, const Scalar* a,
                         std::size_t lda, const Scalar* b, std::size_t ldb, Scalar* c, std::size_t ldc,
                         bool accumulate) {
    for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const Scalar s = dot(a + i * lda, b + j * ldb, k);
            c[i * ldc + j] = accumulate ? c[i * ldc + j] + s : s;
        }
}

// dst[cols, rows] = src[rows, cols]^T
inline void transpose(std::size_t rows, std::size_t cols, const Scalar* src, Scalar* dst) {
    constexpr std::size_t B = 16;
    for (std::size_t i0 = 0; i0 < rows; i0 += B)
        for (std::size_t j0 = 0; j0 < cols; j0 += B)
            for (std::size_t i = i0; i < std::min(rows, i0 + B); ++i)
                for (std::size_t j = j0; j < std::min(cols, j0 + B); ++j) dst[j * rows + i] = src[i * cols + j];
}

}  // namespace muldef::kernels::detail
