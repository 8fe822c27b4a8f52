#include "muldef/arch.hpp"

namespace muldef {

namespace {

NetworkSpec mnist_desk() {
    return {{1, 28, 28},
            {Conv2dSpec{1, 16, 3, 2, 1}, ReluSpec{}, Conv2dSpec{16, 16, 3, 2, 1}, ReluSpec{}, FlattenSpec{},
             DenseSpec{16 * 7 * 7, 128}, ReluSpec{}, DenseSpec{128, 10}, SoftmaxSpec{}}};
}

NetworkSpec mnist_full() {
    // 28 -> 14 (k8 s2 p3) -> 5 (k6 s2) -> 1 (k5 s1)
    return {{1, 28, 28},
            {Conv2dSpec{1, 64, 8, 2, 3}, ReluSpec{}, Conv2dSpec{64, 64, 6, 2, 0}, ReluSpec{},
             Conv2dSpec{64, 64, 5, 1, 0}, ReluSpec{}, FlattenSpec{}, DenseSpec{64, 10}, SoftmaxSpec{}}};
}

NetworkSpec cifar_full() {
    const double keep = 0.75, l2 = 1e-4;
    return {{3, 32, 32},
            {Conv2dSpec{3, 64, 3, 1, 1}, ReluSpec{}, Conv2dSpec{64, 64, 3, 1, 1}, ReluSpec{}, MaxPool2dSpec{2, 2},
             DropoutSpec{keep}, Conv2dSpec{64, 128, 3, 1, 1}, ReluSpec{}, Conv2dSpec{128, 128, 3, 1, 1}, ReluSpec{},
             MaxPool2dSpec{2, 2}, DropoutSpec{keep}, FlattenSpec{}, DenseSpec{128 * 8 * 8, 256, l2}, ReluSpec{},
             DropoutSpec{keep}, DenseSpec{256, 256, l2}, ReluSpec{}, DropoutSpec{keep}, DenseSpec{256, 10},
             SoftmaxSpec{}}};
}

NetworkSpec mlp(Shape input, std::size_t in) {
    return {std::move(input),
            {FlattenSpec{}, DenseSpec{in, 200}, ReluSpec{}, DenseSpec{200, 200}, ReluSpec{}, DenseSpec{200, 10},
             SoftmaxSpec{}}};
}

}  // namespace

NetworkSpec named_architecture(const std::string& name) {
    if (name == "mnist-desk") return mnist_desk();
    if (name == "mnist-full") return mnist_full();
    if (name == "cifar-full") return cifar_full();
    if (name == "mnist-mlp") return mlp({1, 28, 28}, 784);
    if (name == "cifar-mlp") return mlp({3, 32, 32}, 3072);
    throw ArgumentError("unknown architecture '" + name + "'");
}

std::vector<std::string> architecture_names() {
    return {"mnist-desk", "mnist-full", "cifar-full", "mnist-mlp", "cifar-mlp"};
}

}  // namespace muldef
