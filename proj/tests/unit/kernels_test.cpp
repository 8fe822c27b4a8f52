#include <doctest.h>

#include <cmath>
#include <vector>

#include "muldef/kernels.hpp"
#include "muldef/rng.hpp"

using namespace muldef;
namespace k = muldef::kernels;

namespace {

std::vector<Scalar> random_vec(std::size_t n, std::uint64_t seed) {
    Rng rng = make_rng(seed);
    std::vector<Scalar> v(n);
    for (auto& x : v) x = static_cast<Scalar>(static_cast<double>(rng() >> 11) * 0x1.0p-53 * 2.0 - 1.0);
    return v;
}

void check_close(const std::vector<Scalar>& a, const std::vector<Scalar>& b) {
    REQUIRE(a.size() == b.size());
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(double(a[i]) - double(b[i])) / std::max(1.0, std::abs(double(b[i]))));
    CHECK(worst < 1e-4);
}

// Runs `f` at one and at four threads and requires identical bits.
template <class F>
void check_thread_invariant(F f) {
    const int saved = k::num_threads();
    k::set_num_threads(1);
    const auto one = f();
    k::set_num_threads(4);
    const auto four = f();
    k::set_num_threads(saved);
    CHECK(one == four);
}

}  // namespace

TEST_CASE("parallel gemm variants agree with the serial reference") {
    for (auto [m, n, kk] : std::vector<std::array<std::size_t, 3>>{{1, 1, 1}, {5, 7, 3}, {13, 40, 29}, {64, 100, 200}, {3, 9, 600}}) {
        CAPTURE(m);
        CAPTURE(n);
        CAPTURE(kk);
        const auto a = random_vec(m * kk, 1), b = random_vec(kk * n, 2), bt = random_vec(n * kk, 3),
                   at = random_vec(kk * m, 4);
        for (bool acc : {false, true}) {
            auto c0 = random_vec(m * n, 5), c1 = c0;
            k::serial::gemm_nn(m, n, kk, a.data(), b.data(), c0.data(), acc);
            k::parallel::gemm_nn(m, n, kk, a.data(), b.data(), c1.data(), acc);
            check_close(c1, c0);
            c0 = random_vec(m * n, 6), c1 = c0;
            k::serial::gemm_nt(m, n, kk, a.data(), bt.data(), c0.data(), acc);
            k::parallel::gemm_nt(m, n, kk, a.data(), bt.data(), c1.data(), acc);
            check_close(c1, c0);
            c0 = random_vec(m * n, 7), c1 = c0;
            k::serial::gemm_tn(m, n, kk, at.data(), b.data(), c0.data(), acc);
            k::parallel::gemm_tn(m, n, kk, at.data(), b.data(), c1.data(), acc);
            check_close(c1, c0);
        }
        check_thread_invariant([&] {
            std::vector<Scalar> c(m * n);
            k::parallel::gemm_nn(m, n, kk, a.data(), b.data(), c.data(), false);
            return c;
        });
    }
}

TEST_CASE("parallel convolution agrees with the direct serial convolution") {
    const std::vector<k::ConvGeometry> cases{
        {1, 28, 28, 16, 3, 2, 1}, {16, 14, 14, 16, 3, 2, 1}, {3, 8, 9, 5, 3, 1, 1},
        {2, 7, 7, 3, 5, 1, 0},    {1, 28, 28, 4, 8, 2, 3},   {3, 6, 5, 2, 2, 3, 2},
        {16, 9, 7, 32, 3, 1, 2},  {32, 5, 6, 48, 2, 2, 0},   {16, 11, 10, 16, 4, 3, 1}};
    for (const auto& g : cases) {
        CAPTURE(g.in_channels);
        CAPTURE(g.kernel);
        CAPTURE(g.stride);
        const std::size_t batch = 13;
        const auto x = random_vec(batch * g.in_size(), 11), w = random_vec(g.out_channels * g.patch(), 12),
                   b = random_vec(g.out_channels, 13), dy = random_vec(batch * g.out_size(), 14);
        std::vector<Scalar> y0(batch * g.out_size()), y1(y0.size());
        k::serial::conv2d_forward(g, batch, x.data(), w.data(), b.data(), y0.data());
        k::parallel::conv2d_forward(g, batch, x.data(), w.data(), b.data(), y1.data());
        check_close(y1, y0);
        check_thread_invariant([&] {
            std::vector<Scalar> y(y0.size());
            k::parallel::conv2d_forward(g, batch, x.data(), w.data(), b.data(), y.data());
            return y;
        });

        std::vector<Scalar> dx0(x.size()), dx1(x.size()), dw0(w.size()), dw1(w.size()), db0(b.size()), db1(b.size());
        k::serial::conv2d_backward(g, batch, x.data(), w.data(), dy.data(), dx0.data(), dw0.data(), db0.data());
        k::parallel::conv2d_backward(g, batch, x.data(), w.data(), dy.data(), dx1.data(), dw1.data(), db1.data());
        check_close(dx1, dx0);
        check_close(dw1, dw0);
        check_close(db1, db0);

        check_thread_invariant([&] {
            std::vector<Scalar> dx(x.size()), dw(w.size()), db(b.size());
            k::parallel::conv2d_backward(g, batch, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
            dx.insert(dx.end(), dw.begin(), dw.end());
            dx.insert(dx.end(), db.begin(), db.end());
            return dx;
        });
    }
}

TEST_CASE("parallel max pooling agrees with the serial reference") {
    const k::PoolGeometry g{3, 9, 8, 2, 2};
    const std::size_t batch = 5;
    const auto x = random_vec(batch * g.in_size(), 21), dy = random_vec(batch * g.out_size(), 22);
    std::vector<Scalar> y0(batch * g.out_size()), y1(y0.size()), dx0(x.size()), dx1(x.size());
    std::vector<std::uint32_t> a0(y0.size()), a1(y0.size());
    k::serial::maxpool_forward(g, batch, x.data(), y0.data(), a0.data());
    k::parallel::maxpool_forward(g, batch, x.data(), y1.data(), a1.data());
    CHECK(y0 == y1);
    CHECK(a0 == a1);
    k::serial::maxpool_backward(g, batch, dy.data(), a0.data(), dx0.data());
    k::parallel::maxpool_backward(g, batch, dy.data(), a1.data(), dx1.data());
    CHECK(dx0 == dx1);
}
