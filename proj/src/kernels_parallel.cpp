#include <omp.h>

#include <algorithm>
#include <limits>
#include <vector>

#include "gemm_tile.hpp"
#include "muldef/kernels.hpp"

namespace muldef::kernels {

void set_num_threads(int n) {
    if (n > 0) omp_set_num_threads(n);
}

int num_threads() { return omp_get_max_threads(); }

namespace parallel {

namespace {

// Below this many multiply-adds a GEMM stays on the calling thread.
constexpr std::size_t kParallelWork = 1 << 15;

// Samples per im2col chunk. Depends only on the geometry, never on the
// thread count, so chunk-ordered reductions are reproducible.
std::size_t chunk_samples(const ConvGeometry& g) {
    const std::size_t pixels = g.out_height() * g.out_width();
    return std::max<std::size_t>(1, (512 + pixels - 1) / pixels);
}

// Convolution lowering goes through a zero-padded copy of each sample so
// that every patch element is a plain gather: table[r * pixels + q] is the
// padded-image offset feeding patch row r at output pixel q.
struct Lowering {
    std::size_t padded_h, padded_w, pixels;
    std::vector<std::uint32_t> table;

    explicit Lowering(const ConvGeometry& g)
        : padded_h(g.height + 2 * g.padding), padded_w(g.width + 2 * g.padding),
          pixels(g.out_height() * g.out_width()), table(g.patch() * pixels) {
        const std::size_t ow_n = g.out_width();
        for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t kh = 0; kh < g.kernel; ++kh)
                for (std::size_t kw = 0; kw < g.kernel; ++kw) {
                    const std::size_t r = (c * g.kernel + kh) * g.kernel + kw;
                    for (std::size_t q = 0; q < pixels; ++q) {
                        const std::size_t oh = q / ow_n, ow = q % ow_n;
                        table[r * pixels + q] = static_cast<std::uint32_t>(
                            (c * padded_h + oh * g.stride + kh) * padded_w + ow * g.stride + kw);
                    }
                }
    }

    std::size_t padded_size(const ConvGeometry& g) const { return g.in_channels * padded_h * padded_w; }

    void pad(const ConvGeometry& g, const Scalar* x, Scalar* padded) const {
        std::fill(padded, padded + padded_size(g), Scalar(0));
        for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t h = 0; h < g.height; ++h)
                std::copy(x + (c * g.height + h) * g.width, x + (c * g.height + h + 1) * g.width,
                          padded + (c * padded_h + h + g.padding) * padded_w + g.padding);
    }

    void crop(const ConvGeometry& g, const Scalar* padded, Scalar* x) const {
        for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t h = 0; h < g.height; ++h) {
                const Scalar* src = padded + (c * padded_h + h + g.padding) * padded_w + g.padding;
                std::copy(src, src + g.width, x + (c * g.height + h) * g.width);
            }
    }

    void im2col(const ConvGeometry& g, const Scalar* padded, Scalar* col, std::size_t ld, std::size_t offset) const {
        const std::size_t rows = g.patch();
        for (std::size_t r = 0; r < rows; ++r) {
            const std::uint32_t* idx = table.data() + r * pixels;
            Scalar* dst = col + r * ld + offset;
            for (std::size_t q = 0; q < pixels; ++q) dst[q] = padded[idx[q]];
        }
    }

    // Accumulates into `padded`, which the caller zeroes.
    void col2im(const ConvGeometry& g, const Scalar* col, std::size_t ld, std::size_t offset, Scalar* padded) const {
        const std::size_t rows = g.patch();
        for (std::size_t r = 0; r < rows; ++r) {
            const std::uint32_t* idx = table.data() + r * pixels;
            const Scalar* src = col + r * ld + offset;
            for (std::size_t q = 0; q < pixels; ++q) padded[idx[q]] += src[q];
        }
    }
};

}  // namespace

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const Scalar* a, const Scalar* b, Scalar* c,
             bool accumulate) {
    // Row blocks of 4 keep the tiling identical for every thread count.
    const std::size_t blocks = (m + 3) / 4;
    const bool par = m * n * k >= kParallelWork && blocks > 1;
#pragma omp parallel for schedule(static) if (par)
    for (std::size_t blk = 0; blk < blocks; ++blk)
        detail::gemm_nn_rows(blk * 4, std::min(m, blk * 4 + 4), n, k, a, k, b, n, c, n, accumulate);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const Scalar* a, const Scalar* b, Scalar* c,
             bool accumulate) {
    if (n < 2 * detail::kLanes) {
        const bool par = m * n * k >= kParallelWork && m > 1;
#pragma omp parallel for schedule(static) if (par)
        for (std::size_t i = 0; i < m; ++i) detail::gemm_nt_rows(i, i + 1, n, k, a, k, b, k, c, n, accumulate);
        return;
    }
    std::vector<Scalar> bt(n * k);
    detail::transpose(n, k, b, bt.data());
    gemm_nn(m, n, k, a, bt.data(), c, accumulate);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const Scalar* a, const Scalar* b, Scalar* c,
             bool accumulate) {
    std::vector<Scalar> at(m * k);
    detail::transpose(k, m, a, at.data());
    gemm_nn(m, n, k, at.data(), b, c, accumulate);
}

namespace {

// Direct convolution with output (or input) channels in vector lanes; used
// whenever the channel count is a multiple of the lane count. Output pixels
// are processed kPix at a time so each weight load feeds kPix FMAs.
constexpr std::size_t kPix = 8;

struct Direct {
    std::size_t padded_h, padded_w, pixels, pixels_pad;
    std::vector<std::uint32_t> base;  // padded offset of each output pixel's window corner
    std::vector<std::uint32_t> roff;  // padded offset of each patch row within a window

    explicit Direct(const ConvGeometry& g)
        : padded_h(g.height + 2 * g.padding), padded_w(g.width + 2 * g.padding),
          pixels(g.out_height() * g.out_width()), pixels_pad((pixels + kPix - 1) / kPix * kPix),
          base(pixels_pad), roff(g.patch()) {
        const std::size_t ow_n = g.out_width();
        for (std::size_t q = 0; q < pixels_pad; ++q) {
            const std::size_t qq = std::min(q, pixels - 1);  // tail rows repeat the last pixel
            base[q] = static_cast<std::uint32_t>((qq / ow_n) * g.stride * padded_w + (qq % ow_n) * g.stride);
        }
        for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t kh = 0; kh < g.kernel; ++kh)
                for (std::size_t kw = 0; kw < g.kernel; ++kw)
                    roff[(c * g.kernel + kh) * g.kernel + kw] =
                        static_cast<std::uint32_t>((c * padded_h + kh) * padded_w + kw);
    }
};

// outT[q, M] for kPix consecutive pixels starting at q0; wr is [K, M].
void direct_forward_block(const Direct& d, std::size_t K, std::size_t M, const Scalar* padded, const Scalar* wr,
                          std::size_t q0, Scalar* outT) {
    using detail::Vec, detail::kLanes;
    const std::uint32_t* base = d.base.data() + q0;
    for (std::size_t v = 0; v < M; v += kLanes) {
        Vec acc[kPix] = {};
        for (std::size_t r = 0; r < K; ++r) {
            const Vec w = detail::load(wr + r * M + v);
            const Scalar* x = padded + d.roff[r];
            for (std::size_t p = 0; p < kPix; ++p) acc[p] += x[base[p]] * w;
        }
        for (std::size_t p = 0; p < kPix; ++p) detail::store(outT + (q0 + p) * M + v, acc[p]);
    }
}

void direct_forward(const ConvGeometry& g, std::size_t batch, const Scalar* in, const Scalar* weight,
                    const Scalar* bias, Scalar* out) {
    const std::size_t K = g.patch(), M = g.out_channels;
    const Direct d(g);
    const Lowering low(g);
    std::vector<Scalar> wr(K * M);
    detail::transpose(M, K, weight, wr.data());

#pragma omp parallel
    {
        std::vector<Scalar> padded(low.padded_size(g)), outT(d.pixels_pad * M);
#pragma omp for schedule(static)
        for (std::size_t s = 0; s < batch; ++s) {
            low.pad(g, in + s * g.in_size(), padded.data());
            for (std::size_t q0 = 0; q0 < d.pixels_pad; q0 += kPix)
                direct_forward_block(d, K, M, padded.data(), wr.data(), q0, outT.data());
            Scalar* y = out + s * g.out_size();
            for (std::size_t oc = 0; oc < M; ++oc) {
                const Scalar bv = bias ? bias[oc] : Scalar(0);
                for (std::size_t q = 0; q < d.pixels; ++q) y[oc * d.pixels + q] = outT[q * M + oc] + bv;
            }
        }
    }
}

// Input gradient as a gather: each input pixel sums over the output pixels
// whose windows cover it, with input channels in vector lanes.
void direct_input_grad(const ConvGeometry& g, std::size_t batch, const Scalar* weight, const Scalar* dout,
                       Scalar* din) {
    using detail::Vec, detail::kLanes;
    const std::size_t C = g.in_channels, M = g.out_channels, kk_n = g.kernel * g.kernel;
    const std::size_t oh_n = g.out_height(), ow_n = g.out_width(), pixels = oh_n * ow_n;
    const std::size_t in_pixels = g.height * g.width;

    // Taps of input pixel i: tap_kk / tap_q over [tap_ptr[i], tap_ptr[i + 1]).
    std::vector<std::uint32_t> tap_ptr(in_pixels + 1, 0), tap_kk, tap_q;
    for (std::size_t ih = 0; ih < g.height; ++ih)
        for (std::size_t iw = 0; iw < g.width; ++iw) {
            for (std::size_t kh = 0; kh < g.kernel; ++kh) {
                const std::ptrdiff_t th = static_cast<std::ptrdiff_t>(ih + g.padding) - static_cast<std::ptrdiff_t>(kh);
                if (th < 0 || th % static_cast<std::ptrdiff_t>(g.stride) != 0) continue;
                const std::size_t oh = static_cast<std::size_t>(th) / g.stride;
                if (oh >= oh_n) continue;
                for (std::size_t kw = 0; kw < g.kernel; ++kw) {
                    const std::ptrdiff_t tw =
                        static_cast<std::ptrdiff_t>(iw + g.padding) - static_cast<std::ptrdiff_t>(kw);
                    if (tw < 0 || tw % static_cast<std::ptrdiff_t>(g.stride) != 0) continue;
                    const std::size_t ow = static_cast<std::size_t>(tw) / g.stride;
                    if (ow >= ow_n) continue;
                    tap_kk.push_back(static_cast<std::uint32_t>(kh * g.kernel + kw));
                    tap_q.push_back(static_cast<std::uint32_t>(oh * ow_n + ow));
                }
            }
            tap_ptr[ih * g.width + iw + 1] = static_cast<std::uint32_t>(tap_kk.size());
        }

    // wg[(kk * M + oc) * C + c] = weight[oc, c, kk]
    std::vector<Scalar> wg(kk_n * M * C);
    for (std::size_t oc = 0; oc < M; ++oc)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t kk = 0; kk < kk_n; ++kk) wg[(kk * M + oc) * C + c] = weight[(oc * C + c) * kk_n + kk];

#pragma omp parallel
    {
        std::vector<Scalar> dinT(in_pixels * C);
#pragma omp for schedule(static)
        for (std::size_t s = 0; s < batch; ++s) {
            const Scalar* dy = dout + s * g.out_size();
            for (std::size_t i = 0; i < in_pixels; ++i) {
                for (std::size_t v = 0; v < C; v += kLanes) {
                    // Four partial sums over oc break the FMA dependency chain.
                    Vec acc[4] = {};
                    for (std::uint32_t t = tap_ptr[i]; t < tap_ptr[i + 1]; ++t) {
                        const Scalar* dq = dy + tap_q[t];
                        const Scalar* wk = wg.data() + tap_kk[t] * M * C + v;
                        std::size_t oc = 0;
                        for (; oc + 4 <= M; oc += 4)
                            for (std::size_t u = 0; u < 4; ++u)
                                acc[u] += dq[(oc + u) * pixels] * detail::load(wk + (oc + u) * C);
                        for (; oc < M; ++oc) acc[0] += dq[oc * pixels] * detail::load(wk + oc * C);
                    }
                    detail::store(dinT.data() + i * C + v, (acc[0] + acc[1]) + (acc[2] + acc[3]));
                }
            }
            Scalar* dx = din + s * g.in_size();
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < in_pixels; ++i) dx[c * in_pixels + i] = dinT[i * C + c];
        }
    }
}

// Weight gradient with output channels in lanes. Partial sums per fixed
// sample chunk are added in chunk order afterwards.
void direct_weight_grad(const ConvGeometry& g, std::size_t batch, const Scalar* in, const Scalar* dout,
                        Scalar* dweight) {
    using detail::Vec, detail::kLanes;
    const std::size_t K = g.patch(), M = g.out_channels;
    const Direct d(g);
    const Lowering low(g);
    const std::size_t pixels = d.pixels;
    const std::size_t group = chunk_samples(g);
    const std::size_t chunks = (batch + group - 1) / group;
    std::vector<Scalar> parts(chunks * K * M, Scalar(0));

#pragma omp parallel
    {
        std::vector<Scalar> padded(low.padded_size(g)), dyT(pixels * M);
#pragma omp for schedule(static)
        for (std::size_t chunk = 0; chunk < chunks; ++chunk) {
            Scalar* part = parts.data() + chunk * K * M;  // [K, M]
            for (std::size_t s = chunk * group; s < std::min(batch, (chunk + 1) * group); ++s) {
                low.pad(g, in + s * g.in_size(), padded.data());
                const Scalar* dy = dout + s * g.out_size();
                for (std::size_t oc = 0; oc < M; ++oc)
                    for (std::size_t q = 0; q < pixels; ++q) dyT[q * M + oc] = dy[oc * pixels + q];
                for (std::size_t r = 0; r < K; ++r) {
                    const Scalar* x = padded.data() + d.roff[r];
                    for (std::size_t v = 0; v < M; v += kLanes) {
                        Vec acc[4] = {};
                        std::size_t q = 0;
                        for (; q + 4 <= pixels; q += 4)
                            for (std::size_t u = 0; u < 4; ++u)
                                acc[u] += x[d.base[q + u]] * detail::load(dyT.data() + (q + u) * M + v);
                        for (; q < pixels; ++q) acc[0] += x[d.base[q]] * detail::load(dyT.data() + q * M + v);
                        Scalar* dst = part + r * M + v;
                        detail::store(dst, detail::load(dst) + ((acc[0] + acc[1]) + (acc[2] + acc[3])));
                    }
                }
            }
        }
    }

    std::vector<Scalar> total(K * M, Scalar(0));
    for (std::size_t chunk = 0; chunk < chunks; ++chunk)
        for (std::size_t i = 0; i < K * M; ++i) total[i] += parts[chunk * K * M + i];
    detail::transpose(K, M, total.data(), dweight);
}

void lowered_forward(const ConvGeometry& g, std::size_t batch, const Scalar* in, const Scalar* weight,
                     const Scalar* bias, Scalar* out) {
    const std::size_t pixels = g.out_height() * g.out_width();
    const std::size_t group = chunk_samples(g);
    const std::size_t chunks = (batch + group - 1) / group;
    const std::size_t K = g.patch(), M = g.out_channels;
    const Lowering low(g);

#pragma omp parallel
    {
        std::vector<Scalar> col(K * group * pixels), res(M * group * pixels), padded(low.padded_size(g));
#pragma omp for schedule(static)
        for (std::size_t chunk = 0; chunk < chunks; ++chunk) {
            const std::size_t first = chunk * group;
            const std::size_t count = std::min(group, batch - first);
            const std::size_t ld = count * pixels;
            for (std::size_t s = 0; s < count; ++s) {
                low.pad(g, in + (first + s) * g.in_size(), padded.data());
                low.im2col(g, padded.data(), col.data(), ld, s * pixels);
            }
            detail::gemm_nn_rows(0, M, ld, K, weight, K, col.data(), ld, res.data(), ld, false);
            for (std::size_t s = 0; s < count; ++s) {
                Scalar* y = out + (first + s) * g.out_size();
                for (std::size_t oc = 0; oc < M; ++oc) {
                    const Scalar bv = bias ? bias[oc] : Scalar(0);
                    const Scalar* src = res.data() + oc * ld + s * pixels;
                    Scalar* dst = y + oc * pixels;
                    for (std::size_t p = 0; p < pixels; ++p) dst[p] = src[p] + bv;
                }
            }
        }
    }
}

void lowered_backward(const ConvGeometry& g, std::size_t batch, const Scalar* in, const Scalar* weight,
                      const Scalar* dout, Scalar* din, Scalar* dweight, Scalar* dbias) {
    const std::size_t pixels = g.out_height() * g.out_width();
    const std::size_t group = chunk_samples(g);
    const std::size_t chunks = (batch + group - 1) / group;
    const std::size_t K = g.patch(), M = g.out_channels;
    const Lowering low(g);

    std::vector<Scalar> dw_parts(dweight ? chunks * M * K : 0);
    std::vector<Scalar> db_parts(dbias ? chunks * M : 0);
    std::vector<Scalar> wt(din ? K * M : 0);
    if (din) detail::transpose(M, K, weight, wt.data());

#pragma omp parallel
    {
        std::vector<Scalar> col(dweight ? K * group * pixels : 0), colt(col.size());
        std::vector<Scalar> dcol(din ? K * group * pixels : 0);
        std::vector<Scalar> dy(M * group * pixels), padded(low.padded_size(g));
#pragma omp for schedule(static)
        for (std::size_t chunk = 0; chunk < chunks; ++chunk) {
            const std::size_t first = chunk * group;
            const std::size_t count = std::min(group, batch - first);
            const std::size_t ld = count * pixels;
            for (std::size_t s = 0; s < count; ++s) {
                const Scalar* src = dout + (first + s) * g.out_size();
                for (std::size_t oc = 0; oc < M; ++oc)
                    std::copy(src + oc * pixels, src + (oc + 1) * pixels, dy.data() + oc * ld + s * pixels);
            }
            if (dweight) {
                for (std::size_t s = 0; s < count; ++s) {
                    low.pad(g, in + (first + s) * g.in_size(), padded.data());
                    low.im2col(g, padded.data(), col.data(), ld, s * pixels);
                }
                Scalar* part = dw_parts.data() + chunk * M * K;
                if (K < 2 * detail::kLanes) {
                    detail::gemm_nt_rows(0, M, K, ld, dy.data(), ld, col.data(), ld, part, K, false);
                } else {
                    detail::transpose(K, ld, col.data(), colt.data());
                    detail::gemm_nn_rows(0, M, K, ld, dy.data(), ld, colt.data(), K, part, K, false);
                }
            }
            if (dbias) {
                Scalar* part = db_parts.data() + chunk * M;
                for (std::size_t oc = 0; oc < M; ++oc) {
                    Scalar s = 0;
                    const Scalar* row = dy.data() + oc * ld;
                    for (std::size_t j = 0; j < ld; ++j) s += row[j];
                    part[oc] = s;
                }
            }
            if (din) {
                detail::gemm_nn_rows(0, K, ld, M, wt.data(), M, dy.data(), ld, dcol.data(), ld, false);
                for (std::size_t s = 0; s < count; ++s) {
                    std::fill(padded.begin(), padded.end(), Scalar(0));
                    low.col2im(g, dcol.data(), ld, s * pixels, padded.data());
                    low.crop(g, padded.data(), din + (first + s) * g.in_size());
                }
            }
        }
    }

    if (dweight) {
        std::fill(dweight, dweight + M * K, Scalar(0));
        for (std::size_t chunk = 0; chunk < chunks; ++chunk) {
            const Scalar* part = dw_parts.data() + chunk * M * K;
            for (std::size_t i = 0; i < M * K; ++i) dweight[i] += part[i];
        }
    }
    if (dbias) {
        std::fill(dbias, dbias + M, Scalar(0));
        for (std::size_t chunk = 0; chunk < chunks; ++chunk)
            for (std::size_t oc = 0; oc < M; ++oc) dbias[oc] += db_parts[chunk * M + oc];
    }
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::size_t batch, const Scalar* in, const Scalar* weight,
                    const Scalar* bias, Scalar* out) {
    if (g.out_channels % detail::kLanes == 0)
        direct_forward(g, batch, in, weight, bias, out);
    else
        lowered_forward(g, batch, in, weight, bias, out);
}

void conv2d_backward(const ConvGeometry& g, std::size_t batch, const Scalar* in, const Scalar* weight,
                     const Scalar* dout, Scalar* din, Scalar* dweight, Scalar* dbias) {
    const bool direct_din = din && g.in_channels % detail::kLanes == 0;
    const bool direct_dw = dweight && g.out_channels % detail::kLanes == 0;
    if (direct_din) direct_input_grad(g, batch, weight, dout, din);
    if (direct_dw) direct_weight_grad(g, batch, in, dout, dweight);
    if ((din && !direct_din) || (dweight && !direct_dw) || dbias)
        lowered_backward(g, batch, in, weight, dout, direct_din ? nullptr : din, direct_dw ? nullptr : dweight, dbias);
}

void maxpool_forward(const PoolGeometry& g, std::size_t batch, const Scalar* in, Scalar* out,
                     std::uint32_t* argmax) {
    const std::size_t oh_n = g.out_height(), ow_n = g.out_width();
    const std::size_t planes = batch * g.channels;
#pragma omp parallel for schedule(static)
    for (std::size_t plane = 0; plane < planes; ++plane) {
        const Scalar* x = in + plane * g.height * g.width;
        for (std::size_t oh = 0; oh < oh_n; ++oh) {
            for (std::size_t ow = 0; ow < ow_n; ++ow) {
                Scalar best = -std::numeric_limits<Scalar>::infinity();
                std::uint32_t best_i = 0;
                for (std::size_t kh = 0; kh < g.window; ++kh) {
                    const std::size_t base = (oh * g.stride + kh) * g.width + ow * g.stride;
                    for (std::size_t kw = 0; kw < g.window; ++kw) {
                        if (x[base + kw] > best) {
                            best = x[base + kw];
                            best_i = static_cast<std::uint32_t>(base + kw);
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
#pragma omp parallel for schedule(static)
    for (std::size_t plane = 0; plane < planes; ++plane) {
        Scalar* dx = din + plane * in_plane;
        std::fill(dx, dx + in_plane, Scalar(0));
        for (std::size_t o = 0; o < out_plane; ++o) dx[argmax[plane * out_plane + o]] += dout[plane * out_plane + o];
    }
}

}  // namespace parallel
}  // namespace muldef::kernels
