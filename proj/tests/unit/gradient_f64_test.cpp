#include <doctest.h>

#include "../support/gradcheck.hpp"
#include "muldef/muldef.hpp"

static_assert(sizeof(muldef::Scalar) == 8, "gradient checks need the double-precision build");

TEST_CASE("every layer kind matches central finite differences") {
    for (const auto& kind : gradcheck::kinds()) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            CAPTURE(kind);
            CAPTURE(seed);
            CHECK(gradcheck::check(gradcheck::make_instance(kind, seed)) < 1e-3);
        }
    }
}

TEST_CASE("input gradient of a constant-output network is zero") {
    using namespace muldef;
    Network net(NetworkSpec{{3}, {DenseSpec{3, 4}, ReluSpec{}, DenseSpec{4, 2}}}, "const");
    net.params()[3][0] = 2.0;  // output bias only
    const Tensor x({2, 3}, std::vector<Scalar>{1, -2, 3, 0.5, 0.25, -1});
    const auto out = backward(net, x, std::vector<int>{0, 1});
    for (Scalar g : out.grads.input_grad.data()) CHECK(g == 0.0);
}

TEST_CASE("hand-computed two-layer forward pass") {
    using namespace muldef;
    // h = relu(W1 x + b1), z = W2 h + b2 on x = [1, 0]
    Network net(NetworkSpec{{2}, {DenseSpec{2, 2}, ReluSpec{}, DenseSpec{2, 2}, SoftmaxSpec{}}}, "hand");
    auto p = net.params();
    p[0] = Tensor({2, 2}, std::vector<Scalar>{0.5, -1.0, -2.0, 3.0});
    p[1] = Tensor({2}, std::vector<Scalar>{0.1, 0.2});
    p[2] = Tensor({2, 2}, std::vector<Scalar>{1.0, 2.0, -1.0, 0.5});
    p[3] = Tensor({2}, std::vector<Scalar>{0.0, -0.3});
    const auto out = forward(net, Tensor({1, 2}, std::vector<Scalar>{1.0, 0.0}));
    // h = relu([0.6, -1.8]) = [0.6, 0]; z = [0.6, -0.9]
    CHECK(out.logits[0] == doctest::Approx(0.6));
    CHECK(out.logits[1] == doctest::Approx(-0.9));
    const double e = std::exp(1.5);
    CHECK(out.probs[0] == doctest::Approx(e / (1 + e)));
    CHECK(out.probs[1] == doctest::Approx(1 / (1 + e)));
}

TEST_CASE("merged model input gradient matches finite differences") {
    using namespace muldef;
    const NetworkSpec spec{{5}, {DenseSpec{5, 6}, ReluSpec{}, DenseSpec{6, 3}}};
    std::vector<Network> nets;
    for (std::uint64_t s = 0; s < 3; ++s) {
        nets.push_back(Network::initialized(spec, "m" + std::to_string(s), 40 + s));
        for (auto& b : nets.back().params()[1].data()) b = 0.05 * static_cast<double>(s + 1);
    }
    std::vector<const Network*> ptrs;
    for (const auto& n : nets) ptrs.push_back(&n);
    for (MergeRule rule : {MergeRule::mean_probabilities, MergeRule::mean_logits}) {
        const MergedModel merged(ptrs, rule);
        Rng rng = make_rng(7);
        for (int inst = 0; inst < 20; ++inst) {
            Tensor x({2, 5});
            for (auto& v : x.data()) v = gradcheck::uniform(rng, 0.0, 1.0);
            const std::vector<int> labels{inst % 3, (inst + 1) % 3};
            const auto loss = [&](const Tensor& in) { return softmax_cross_entropy(merged.logits(in), labels, nullptr); };
            const Tensor g = merged.input_gradient(x, [&](const Tensor& z, Tensor& dz) {
                softmax_cross_entropy(z, labels, &dz);
            });
            double worst = 0;
            for (std::size_t i = 0; i < x.size(); ++i) {
                Tensor hi = x, lo = x;
                hi[i] += 1e-6;
                lo[i] -= 1e-6;
                const double fd = (loss(hi) - loss(lo)) / 2e-6;
                worst = std::max(worst, std::abs(fd - g[i]) / std::max(1e-6, std::abs(fd) + std::abs(g[i])));
            }
            CAPTURE(merge_rule_name(rule));
            CHECK(worst < 1e-3);
        }
    }
}
