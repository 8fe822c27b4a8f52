#pragma once

// Compute kernels behind the layers. Two implementations share one
// signature set:
//   serial::   straightforward loops, kept as the reference for tests
//   parallel:: OpenMP and SIMD register tiles, direct convolution when the
//              channel counts fill whole vectors and im2col otherwise;
//              what the layers call
// Every parallel kernel partitions work along fixed boundaries that do not
// depend on the thread count, so results are reproducible for any
// OMP_NUM_THREADS.

#include <cstddef>
#include <cstdint>

#include "muldef/tensor.hpp"

namespace muldef::kernels {

struct ConvGeometry {
    std::size_t in_channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
    std::size_t out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
    std::size_t patch() const { return in_channels * kernel * kernel; }
    std::size_t in_size() const { return in_channels * height * width; }
    std::size_t out_size() const { return out_channels * out_height() * out_width(); }
};

struct PoolGeometry {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t window = 2;
    std::size_t stride = 2;

    std::size_t out_height() const { return (height - window) / stride + 1; }
    std::size_t out_width() const { return (width - window) / stride + 1; }
    std::size_t in_size() const { return channels * height * width; }
    std::size_t out_size() const { return channels * out_height() * out_width(); }
};

namespace serial {

// Matrix products over row-major buffers; C is m x n.
//   gemm_nn: C (+)= A[m,k] * B[k,n]
//   gemm_nt: C (+)= A[m,k] * B[n,k]^T
//   gemm_tn: C (+)= A[k,m]^T * B[k,n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const Scalar* a, const Scalar* b, Scalar* c,
             bool accumulate);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const Scalar* a, const Scalar* b, Scalar* c,
             bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const Scalar* a, const Scalar* b, Scalar* c,
             bool accumulate);

// Weights are [out_channels, in_channels, k, k]; activations NCHW.
void conv2d_forward(const ConvGeometry& g, std::size_t batch, const Scalar* in, const Scalar* weight,
                    const Scalar* bias, Scalar* out);
// din, dweight and dbias may each be null; non-null outputs are overwritten.
void conv2d_backward(const ConvGeometry& g, std::size_t batch, const Scalar* in, const Scalar* weight,
                     const Scalar* dout, Scalar* din, Scalar* dweight, Scalar* dbias);

void maxpool_forward(const PoolGeometry& g, std::size_t batch, const Scalar* in, Scalar* out,
                     std::uint32_t* argmax);
void maxpool_backward(const PoolGeometry& g, std::size_t batch, const Scalar* dout, const std::uint32_t* argmax,
                      Scalar* din);

}  // namespace serial

namespace parallel {

// Same contracts as serial::.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const Scalar* a, const Scalar* b, Scalar* c,
             bool accumulate);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const Scalar* a, const Scalar* b, Scalar* c,
             bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const Scalar* a, const Scalar* b, Scalar* c,
             bool accumulate);

void conv2d_forward(const ConvGeometry& g, std::size_t batch, const Scalar* in, const Scalar* weight,
                    const Scalar* bias, Scalar* out);
void conv2d_backward(const ConvGeometry& g, std::size_t batch, const Scalar* in, const Scalar* weight,
                     const Scalar* dout, Scalar* din, Scalar* dweight, Scalar* dbias);

void maxpool_forward(const PoolGeometry& g, std::size_t batch, const Scalar* in, Scalar* out,
                     std::uint32_t* argmax);
void maxpool_backward(const PoolGeometry& g, std::size_t batch, const Scalar* dout, const std::uint32_t* argmax,
                      Scalar* din);

}  // namespace parallel

/// Threads used by the parallel kernels (0 = OpenMP default).
void set_num_threads(int n);
int num_threads();

}  // namespace muldef::kernels
