// Serial reference kernels against the parallel ones on the shapes the
// desk-scale MNIST network runs.

#include <benchmark/benchmark.h>

#include <vector>

#include "muldef/kernels.hpp"
#include "muldef/rng.hpp"

namespace k = muldef::kernels;
using muldef::Scalar;

namespace {

std::vector<Scalar> filled(std::size_t n, std::uint64_t seed) {
    muldef::Rng rng = muldef::make_rng(seed);
    std::vector<Scalar> v(n);
    for (auto& x : v) x = static_cast<Scalar>(static_cast<double>(rng() >> 40) * 0x1.0p-24 - 0.5);
    return v;
}

template <bool Parallel>
void gemm_nn(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = filled(n * n, 1), b = filled(n * n, 2);
    std::vector<Scalar> c(n * n);
    for (auto _ : state) {
        if constexpr (Parallel)
            k::parallel::gemm_nn(n, n, n, a.data(), b.data(), c.data(), false);
        else
            k::serial::gemm_nn(n, n, n, a.data(), b.data(), c.data(), false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

// mnist-desk layers: 1->16 on 28x28 and 16->16 on 13x13, 3x3 kernels, stride 2.
k::ConvGeometry geometry(int layer) {
    return layer == 1 ? k::ConvGeometry{1, 28, 28, 16, 3, 2, 0} : k::ConvGeometry{16, 13, 13, 16, 3, 2, 0};
}

template <bool Parallel>
void conv_forward(benchmark::State& state) {
    const auto g = geometry(static_cast<int>(state.range(0)));
    const std::size_t batch = 64;
    const auto in = filled(batch * g.in_size(), 3), w = filled(g.out_channels * g.patch(), 4),
               bias = filled(g.out_channels, 5);
    std::vector<Scalar> out(batch * g.out_size());
    for (auto _ : state) {
        if constexpr (Parallel)
            k::parallel::conv2d_forward(g, batch, in.data(), w.data(), bias.data(), out.data());
        else
            k::serial::conv2d_forward(g, batch, in.data(), w.data(), bias.data(), out.data());
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}

template <bool Parallel>
void conv_backward(benchmark::State& state) {
    const auto g = geometry(static_cast<int>(state.range(0)));
    const std::size_t batch = 64;
    const auto in = filled(batch * g.in_size(), 6), w = filled(g.out_channels * g.patch(), 7),
               dout = filled(batch * g.out_size(), 8);
    std::vector<Scalar> din(batch * g.in_size()), dw(g.out_channels * g.patch()), db(g.out_channels);
    for (auto _ : state) {
        if constexpr (Parallel)
            k::parallel::conv2d_backward(g, batch, in.data(), w.data(), dout.data(), din.data(), dw.data(), db.data());
        else
            k::serial::conv2d_backward(g, batch, in.data(), w.data(), dout.data(), din.data(), dw.data(), db.data());
        benchmark::DoNotOptimize(din.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}

}  // namespace

BENCHMARK(gemm_nn<false>)->Name("gemm_nn/serial")->Arg(64)->Arg(256);
BENCHMARK(gemm_nn<true>)->Name("gemm_nn/parallel")->Arg(64)->Arg(256);
BENCHMARK(conv_forward<false>)->Name("conv2d_forward/serial")->Arg(1)->Arg(2);
BENCHMARK(conv_forward<true>)->Name("conv2d_forward/parallel")->Arg(1)->Arg(2);
BENCHMARK(conv_backward<false>)->Name("conv2d_backward/serial")->Arg(1)->Arg(2);
BENCHMARK(conv_backward<true>)->Name("conv2d_backward/parallel")->Arg(1)->Arg(2);

BENCHMARK_MAIN();
