#pragma once

// Central finite-difference oracle for Network gradients. Intended for the
// double-precision build; each instance is a tiny network around one layer
// kind with a cross-entropy loss on top.

#include <cmath>
#include <string>
#include <vector>

#include "muldef/network.hpp"
#include "muldef/rng.hpp"

namespace gradcheck {

using namespace muldef;

inline const std::vector<std::string>& kinds() {
    static const std::vector<std::string> k{"dense", "conv2d", "relu", "maxpool2d", "dropout", "flatten", "softmax"};
    return k;
}

struct Instance {
    Network net;
    Tensor input;
    std::vector<int> labels;
    Mode mode = Mode::eval;
    std::uint64_t dropout_seed = 0;
};

inline double uniform(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng() % (hi - lo + 1); }

inline Instance make_instance(const std::string& kind, std::uint64_t seed) {
    Rng rng = make_rng(seed, 0x9c);
    const std::size_t n = pick(rng, 1, 3), k = pick(rng, 2, 4);
    NetworkSpec spec;
    Instance inst;
    if (kind == "dense" || kind == "relu" || kind == "dropout" || kind == "softmax") {
        const std::size_t d = pick(rng, 3, 7);
        spec.input_shape = {d};
        if (kind == "relu") spec.layers.push_back(ReluSpec{});
        if (kind == "dropout") {
            spec.layers.push_back(DropoutSpec{uniform(rng, 0.4, 0.9)});
            inst.mode = Mode::train;
            inst.dropout_seed = rng();
        }
        spec.layers.push_back(DenseSpec{d, k});
        if (kind == "dense") spec.layers.push_back(DenseSpec{k, k});
        if (kind == "softmax") spec.layers.push_back(SoftmaxSpec{});
    } else {
        const std::size_t c = pick(rng, 1, 3), h = pick(rng, 4, 7), w = pick(rng, 4, 7);
        spec.input_shape = {c, h, w};
        if (kind == "conv2d") {
            Conv2dSpec conv{c, pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 2), pick(rng, 0, 1)};
            spec.layers.push_back(conv);
        } else if (kind == "maxpool2d") {
            spec.layers.push_back(MaxPool2dSpec{pick(rng, 2, 3), pick(rng, 1, 2)});
        }
        spec.layers.push_back(FlattenSpec{});
        const auto shapes = spec.layer_shapes();
        spec.layers.push_back(DenseSpec{shapes.back()[0], k});
    }
    inst.net = Network::initialized(spec, kind, rng());
    // Nonzero biases so that no unit sits exactly at a kink by construction.
    for (std::size_t i = 1; i < inst.net.params().size(); i += 2)
        for (auto& v : inst.net.params()[i].data()) v = uniform(rng, -0.5, 0.5);

    Shape shape{n};
    shape.insert(shape.end(), spec.input_shape.begin(), spec.input_shape.end());
    inst.input = Tensor(shape);
    if (kind == "maxpool2d") {
        // Distinct values at least 0.01 apart keep every pooling window's
        // winner stable under a 1e-4 probe.
        const auto perm = random_permutation(inst.input.size(), rng);
        for (std::size_t i = 0; i < perm.size(); ++i)
            inst.input[i] = 0.01 * static_cast<double>(perm[i]) + uniform(rng, 0.0, 0.001);
    } else {
        for (auto& v : inst.input.data()) {
            const double mag = uniform(rng, 0.05, 1.0);
            v = (rng() & 1) ? mag : -mag;
        }
    }
    inst.labels.resize(n);
    for (auto& y : inst.labels) y = static_cast<int>(rng() % k);
    return inst;
}

inline double loss_at(const Instance& inst, const Tensor& input) {
    Rng rng = make_rng(inst.dropout_seed);
    const Tensor logits = inst.net.run(input, inst.mode, &rng, nullptr);
    const Tensor probs = softmax_rows(logits);
    double total = 0.0;
    const std::size_t k = probs.row_size();
    for (std::size_t r = 0; r < inst.labels.size(); ++r)
        total -= std::log(static_cast<double>(probs[r * k + static_cast<std::size_t>(inst.labels[r])]));
    return total / static_cast<double>(inst.labels.size());
}

inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
        na += analytic[i] * analytic[i];
        nn += numeric[i] * numeric[i];
    }
    const double scale = std::max(std::sqrt(na), std::sqrt(nn));
    return scale < 1e-12 ? std::sqrt(diff) : std::sqrt(diff) / scale;
}

/// Worst norm-wise relative error over the input gradient and every
/// parameter tensor of one instance.
inline double check(Instance inst, double step = 1e-4) {
    Rng rng = make_rng(inst.dropout_seed);
    Tape tape;
    const Tensor logits = inst.net.run(inst.input, inst.mode, &rng, &tape);
    Tensor dlogits;
    softmax_cross_entropy(logits, inst.labels, &dlogits);
    std::vector<Tensor> pgrads;
    const Tensor dinput = inst.net.backprop(tape, dlogits, &pgrads);

    const auto probe = [&](Tensor& target, const Tensor& analytic, const Tensor& input_ref) {
        std::vector<double> a(analytic.data().begin(), analytic.data().end()), num(target.size());
        for (std::size_t i = 0; i < target.size(); ++i) {
            const Scalar saved = target[i];
            target[i] = saved + step;
            const double up = loss_at(inst, input_ref);
            target[i] = saved - step;
            const double down = loss_at(inst, input_ref);
            target[i] = saved;
            num[i] = (up - down) / (2 * step);
        }
        return relative_error(a, num);
    };

    Tensor input = inst.input;
    double worst = probe(input, dinput, input);
    for (std::size_t p = 0; p < pgrads.size(); ++p) worst = std::max(worst, probe(inst.net.params()[p], pgrads[p], input));
    return worst;
}

}  // namespace gradcheck
