#include <algorithm>
#include <limits>

#include "muldef/kernels.hpp"

namespace muldef::kernels::serial {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const Scalar* a, const Scalar* b, Scalar* c,
             bool accumulate) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            Scalar s = 0;
            for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            c[i * n + j] = accumulate ? c[i * n + j] + s : s;
        }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const Scalar* a, const Scalar* b, Scalar* c,
             bool accumulate) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            Scalar s = 0;
            for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
            c[i * n + j] = accumulate ? c[i * n + j] + s : s;
        }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const Scalar* a, const Scalar* b, Scalar* c,
             bool accumulate) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            Scalar s = 0;
            for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[p * n + j];
            c[i * n + j] = accumulate ? c[i * n + j] + s : s;
        }
}

// Direct convolution: the textbook seven-deep loop, no lowering.
void conv2d_forward(const ConvGeometry& g, std::size_t batch, const Scalar* in, const Scalar* weight,
                    const Scalar* bias, Scalar* out) {
    const std::size_t oh_n = g.out_height(), ow_n = g.out_width();
    for (std::size_t b = 0; b < batch; ++b) {
        const Scalar* x = in + b * g.in_size();
        Scalar* y = out + b * g.out_size();
        for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
            for (std::size_t oh = 0; oh < oh_n; ++oh) {
                for (std::size_t ow = 0; ow < ow_n; ++ow) {
                    Scalar s = bias ? bias[oc] : Scalar(0);
                    for (std::size_t ic = 0; ic < g.in_channels; ++ic) {
                        for (std::size_t kh = 0; kh < g.kernel; ++kh) {
                            const std::ptrdiff_t ih = std::ptrdiff_t(oh * g.stride + kh) - std::ptrdiff_t(g.padding);
                            if (ih < 0 || ih >= std::ptrdiff_t(g.height)) continue;
                            for (std::size_t kw = 0; kw < g.kernel; ++kw) {
                                const std::ptrdiff_t iw =
                                    std::ptrdiff_t(ow * g.stride + kw) - std::ptrdiff_t(g.padding);
                                if (iw < 0 || iw >= std::ptrdiff_t(g.width)) continue;
                                s += x[(ic * g.height + ih) * g.width + iw] *
                                     weight[((oc * g.in_channels + ic) * g.kernel + kh) * g.kernel + kw];
                            }
                        }
                    }
                    y[(oc * oh_n + oh) * ow_n + ow] = s;
                }
            }
        }
    }
}

void conv2d_backward(const ConvGeometry& g, std::size_t batch, const Scalar* in, const Scalar* weight,
                     const Scalar* dout, Scalar* din, Scalar* dweight, Scalar* dbias) {
    const std::size_t oh_n = g.out_height(), ow_n = g.out_width();
    if (din) std::fill(din, din + batch * g.in_size(), Scalar(0));
    if (dweight) std::fill(dweight, dweight + g.out_channels * g.patch(), Scalar(0));
    if (dbias) std::fill(dbias, dbias + g.out_channels, Scalar(0));
    for (std::size_t b = 0; b < batch; ++b) {
        const Scalar* x = in + b * g.in_size();
        const Scalar* dy = dout + b * g.out_size();
        Scalar* dx = din ? din + b * g.in_size() : nullptr;
        for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
            for (std::size_t oh = 0; oh < oh_n; ++oh) {
                for (std::size_t ow = 0; ow < ow_n; ++ow) {
                    const Scalar gy = dy[(oc * oh_n + oh) * ow_n + ow];
                    if (dbias) dbias[oc] += gy;
                    for (std::size_t ic = 0; ic < g.in_channels; ++ic) {
                        for (std::size_t kh = 0; kh < g.kernel; ++kh) {
                            const std::ptrdiff_t ih = std::ptrdiff_t(oh * g.stride + kh) - std::ptrdiff_t(g.padding);
                            if (ih < 0 || ih >= std::ptrdiff_t(g.height)) continue;
                            for (std::size_t kw = 0; kw < g.kernel; ++kw) {
                                const std::ptrdiff_t iw =
                                    std::ptrdiff_t(ow * g.stride + kw) - std::ptrdiff_t(g.padding);
                                if (iw < 0 || iw >= std::ptrdiff_t(g.width)) continue;
                                const std::size_t xi = (ic * g.height + ih) * g.width + iw;
                                const std::size_t wi = ((oc * g.in_channels + ic) * g.kernel + kh) * g.kernel + kw;
                                if (dweight) dweight[wi] += gy * x[xi];
                                if (dx) dx[xi] += gy * weight[wi];
                            }
                        }
                    }
                }
            }
        }
    }
}

void maxpool_forward(const PoolGeometry& g, std::size_t batch, const Scalar* in, Scalar* out,
                     std::uint32_t* argmax) {
    const std::size_t oh_n = g.out_height(), ow_n = g.out_width();
    const std::size_t planes = batch * g.channels;
    for (std::size_t plane = 0; plane < planes; ++plane) {
        const Scalar* x = in + plane * g.height * g.width;
        for (std::size_t oh = 0; oh < oh_n; ++oh) {
            for (std::size_t ow = 0; ow < ow_n; ++ow) {
                Scalar best = -std::numeric_limits<Scalar>::infinity();
                std::uint32_t best_i = 0;
                for (std::size_t kh = 0; kh < g.window; ++kh) {
                    for (std::size_t kw = 0; kw < g.window; ++kw) {
                        const std::size_t i = (oh * g.stride + kh) * g.width + ow * g.stride + kw;
                        if (x[i] > best) {
                            best = x[i];
                            best_i = static_cast<std::uint32_t>(i);
                        }
                    }
                }
                const std::size_t o = (plane * oh_n + oh) * ow_n + ow;
                out[o] = best;
                argmax[o] = best_i;
            }
        }
    }
}

void maxpool_backward(const PoolGeometry& g, std::size_t batch, const Scalar* dout, const std::uint32_t* argmax,
                      Scalar* din) {
    const std::size_t out_plane = g.out_height() * g.out_width();
    const std::size_t in_plane = g.height * g.width;
    const std::size_t planes = batch * g.channels;
    std::fill(din, din + planes * in_plane, Scalar(0));
    for (std::size_t plane = 0; plane < planes; ++plane)
        for (std::size_t o = 0; o < out_plane; ++o)
            din[plane * in_plane + argmax[plane * out_plane + o]] += dout[plane * out_plane + o];
}

}  // namespace muldef::kernels::serial
