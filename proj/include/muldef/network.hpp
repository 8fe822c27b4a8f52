#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "muldef/rng.hpp"
#include "muldef/tensor.hpp"

namespace muldef {

struct DenseSpec {
    std::size_t in = 0;
    std::size_t out = 0;
    double l2 = 0.0;  // weight penalty l2 * sum(W^2), applied during training only
    friend bool operator==(const DenseSpec&, const DenseSpec&) = default;
};

struct Conv2dSpec {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 0;
    friend bool operator==(const Conv2dSpec&, const Conv2dSpec&) = default;
};

struct ReluSpec {
    friend bool operator==(const ReluSpec&, const ReluSpec&) = default;
};

struct MaxPool2dSpec {
    std::size_t window = 2;
    std::size_t stride = 2;
    friend bool operator==(const MaxPool2dSpec&, const MaxPool2dSpec&) = default;
};

struct DropoutSpec {
    double keep_prob = 1.0;
    friend bool operator==(const DropoutSpec&, const DropoutSpec&) = default;
};

struct FlattenSpec {
    friend bool operator==(const FlattenSpec&, const FlattenSpec&) = default;
};

struct SoftmaxSpec {
    friend bool operator==(const SoftmaxSpec&, const SoftmaxSpec&) = default;
};

using LayerSpec = std::variant<DenseSpec, Conv2dSpec, ReluSpec, MaxPool2dSpec, DropoutSpec, FlattenSpec, SoftmaxSpec>;

std::string layer_kind(const LayerSpec& layer);

/// Per-sample input shape plus the ordered layer stack.
struct NetworkSpec {
    Shape input_shape;
    std::vector<LayerSpec> layers;

    /// shapes[i] is the per-sample input shape of layer i; shapes.back() is
    /// the output. Throws ShapeError naming the first incompatible layer.
    std::vector<Shape> layer_shapes() const;
    std::size_t num_classes() const;
    void validate() const { (void)layer_shapes(); }

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

enum class Mode { eval, train };

/// Activations recorded by a forward pass for the backward pass.
struct Tape {
    std::vector<Tensor> inputs;                   // input of each executed layer
    std::vector<std::vector<std::uint32_t>> argmax;  // maxpool switches
    std::vector<Tensor> masks;                    // dropout masks (train mode)
};

/// Called with a batch of logits; writes dL/dlogits (same shape).
using LogitGradFn = std::function<void(const Tensor& logits, Tensor& dlogits)>;

/// Anything that maps a batch to class logits and can pull a gradient on
/// those logits back to its input. Attacks only see this interface.
class Classifier {
public:
    virtual ~Classifier() = default;

    virtual const std::string& id() const = 0;
    virtual const Shape& input_shape() const = 0;
    virtual std::size_t num_classes() const = 0;

    virtual Tensor logits(const Tensor& batch) const = 0;
    virtual Tensor probabilities(const Tensor& batch) const;

    /// Gradient of L w.r.t. `batch`, where `upstream` supplies dL/dlogits.
    /// The logits seen by `upstream` are copied to `logits_out` if given.
    virtual Tensor input_gradient(const Tensor& batch, const LogitGradFn& upstream,
                                  Tensor* logits_out = nullptr) const = 0;
};

class Network : public Classifier {
public:
    Network() = default;
    /// All parameters zero. Throws ShapeError if `spec` is inconsistent.
    Network(NetworkSpec spec, std::string id);

    /// Fan-in scaled uniform initialization (He range ahead of a relu,
    /// LeCun range otherwise), biases zero.
    static Network initialized(NetworkSpec spec, std::string id, std::uint64_t seed);
    void initialize(std::uint64_t seed);

    const NetworkSpec& spec() const noexcept { return spec_; }
    const std::string& id() const override { return id_; }
    void set_id(std::string id) { id_ = std::move(id); }
    const Shape& input_shape() const override { return spec_.input_shape; }
    std::size_t num_classes() const override { return num_classes_; }

    /// Weight then bias for every dense and conv2d layer, in layer order.
    std::span<Tensor> params() noexcept { return params_; }
    std::span<const Tensor> params() const noexcept { return params_; }
    /// Layer index owning params()[i].
    std::size_t param_layer(std::size_t i) const { return param_owner_.at(i); }
    std::size_t parameter_count() const;

    /// Runs every layer except a trailing softmax and returns logits.
    /// `rng` is required in train mode when the network has dropout.
    Tensor run(const Tensor& batch, Mode mode, Rng* rng, Tape* tape) const;

    /// Reverse pass from dL/dlogits. Writes parameter gradients (overwriting)
    /// when `param_grads` is non-null; returns dL/dinput.
    Tensor backprop(const Tape& tape, const Tensor& dlogits, std::vector<Tensor>* param_grads) const;

    Tensor logits(const Tensor& batch) const override;
    Tensor input_gradient(const Tensor& batch, const LogitGradFn& upstream, Tensor* logits_out = nullptr) const override;

    friend bool operator==(const Network& a, const Network& b) {
        return a.id_ == b.id_ && a.spec_ == b.spec_ && a.params_ == b.params_;
    }

private:
    void check_batch(const Tensor& batch) const;
    // With check_layers every layer's output is tested so the error can name
    // it; the public entry points only test the result and rerun on failure.
    Tensor run_impl(const Tensor& batch, Mode mode, Rng* rng, Tape* tape, bool check_layers) const;
    Tensor backprop_impl(const Tape& tape, const Tensor& dlogits, std::vector<Tensor>* param_grads,
                         bool check_layers) const;

    NetworkSpec spec_;
    std::string id_;
    std::vector<Shape> shapes_;
    std::size_t num_classes_ = 0;
    std::size_t executed_layers_ = 0;          // layers before a trailing softmax
    std::vector<Tensor> params_;
    std::vector<std::size_t> param_owner_;
    std::vector<std::size_t> first_param_;     // per layer; npos when none
};

struct ForwardOutput {
    Tensor probs;
    Tensor logits;
};

struct Gradients {
    std::vector<Tensor> params;
    Tensor input_grad;
};

struct BackwardOutput {
    double loss = 0.0;  // mean cross-entropy over the batch
    Gradients grads;
};

ForwardOutput forward(const Network& net, const Tensor& batch);
BackwardOutput backward(const Network& net, const Tensor& batch, std::span<const int> labels);

/// Row-wise softmax of a [n, k] tensor (max-shifted).
Tensor softmax_rows(const Tensor& logits);

/// Mean cross-entropy of softmax(logits) against labels; fills dL/dlogits
/// when `dlogits` is non-null (resized to match). Throws ArgumentError on out-of-range labels.
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* dlogits);

/// Index of the largest entry; ties resolve to the lowest index.
std::size_t argmax(std::span<const Scalar> values);

/// Argmax class per row of `batch` under `model`.
std::vector<int> predict(const Classifier& model, const Tensor& batch);

}  // namespace muldef
