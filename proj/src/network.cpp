#include "muldef/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "muldef/kernels.hpp"

namespace muldef {

namespace {

constexpr std::size_t kNoParam = std::numeric_limits<std::size_t>::max();

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::string layer_label(std::size_t index, const LayerSpec& layer) {
    return "layer " + std::to_string(index) + " (" + layer_kind(layer) + ")";
}

kernels::ConvGeometry conv_geometry(const Conv2dSpec& c, const Shape& in) {
    return {c.in_channels, in[1], in[2], c.out_channels, c.kernel, c.stride, c.padding};
}

kernels::PoolGeometry pool_geometry(const MaxPool2dSpec& p, const Shape& in) {
    return {in[0], in[1], in[2], p.window, p.stride};
}

Shape with_batch(std::size_t n, const Shape& sample) {
    Shape s{n};
    s.insert(s.end(), sample.begin(), sample.end());
    return s;
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

std::string layer_kind(const LayerSpec& layer) {
    return std::visit(Overloaded{[](const DenseSpec&) { return "dense"; },
                                 [](const Conv2dSpec&) { return "conv2d"; },
                                 [](const ReluSpec&) { return "relu"; },
                                 [](const MaxPool2dSpec&) { return "maxpool2d"; },
                                 [](const DropoutSpec&) { return "dropout"; },
                                 [](const FlattenSpec&) { return "flatten"; },
                                 [](const SoftmaxSpec&) { return "softmax"; }},
                      layer);
}

std::vector<Shape> NetworkSpec::layer_shapes() const {
    if (input_shape.empty() || shape_size(input_shape) == 0)
        throw ShapeError("network input shape must be nonempty with positive dimensions");
    for (auto d : input_shape)
        if (d == 0) throw ShapeError("network input shape has a zero dimension: " + shape_str(input_shape));

    std::vector<Shape> shapes{input_shape};
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const Shape& in = shapes.back();
        const auto fail = [&](const std::string& why) {
            throw ShapeError(layer_label(i, layers[i]) + ": " + why + " (input " + shape_str(in) + ")");
        };
        Shape out = std::visit(
            Overloaded{
                [&](const DenseSpec& d) -> Shape {
                    if (d.in == 0 || d.out == 0) fail("widths must be positive");
                    if (in.size() != 1 || in[0] != d.in) fail("expects input [" + std::to_string(d.in) + "]");
                    if (!(d.l2 >= 0.0)) fail("l2 must be nonnegative");
                    return {d.out};
                },
                [&](const Conv2dSpec& c) -> Shape {
                    if (c.in_channels == 0 || c.out_channels == 0 || c.kernel == 0 || c.stride == 0)
                        fail("channels, kernel and stride must be positive");
                    if (in.size() != 3 || in[0] != c.in_channels)
                        fail("expects input [" + std::to_string(c.in_channels) + ",H,W]");
                    if (in[1] + 2 * c.padding < c.kernel || in[2] + 2 * c.padding < c.kernel)
                        fail("kernel larger than padded input");
                    const auto g = conv_geometry(c, in);
                    return {c.out_channels, g.out_height(), g.out_width()};
                },
                [&](const ReluSpec&) -> Shape { return in; },
                [&](const MaxPool2dSpec& p) -> Shape {
                    if (p.window == 0 || p.stride == 0) fail("window and stride must be positive");
                    if (in.size() != 3) fail("expects input [C,H,W]");
                    if (in[1] < p.window || in[2] < p.window) fail("window larger than input");
                    const auto g = pool_geometry(p, in);
                    return {in[0], g.out_height(), g.out_width()};
                },
                [&](const DropoutSpec& d) -> Shape {
                    if (!(d.keep_prob > 0.0 && d.keep_prob <= 1.0)) fail("keep probability must be in (0,1]");
                    return in;
                },
                [&](const FlattenSpec&) -> Shape { return {shape_size(in)}; },
                [&](const SoftmaxSpec&) -> Shape {
                    if (i + 1 != layers.size()) fail("softmax may only be the final layer");
                    if (in.size() != 1) fail("expects a flat input");
                    return in;
                }},
            layers[i]);
        shapes.push_back(std::move(out));
    }
    if (shapes.back().size() != 1)
        throw ShapeError("network output must be flat, got " + shape_str(shapes.back()));
    return shapes;
}

std::size_t NetworkSpec::num_classes() const { return layer_shapes().back()[0]; }

Tensor Classifier::probabilities(const Tensor& batch) const { return softmax_rows(logits(batch)); }

Network::Network(NetworkSpec spec, std::string id) : spec_(std::move(spec)), id_(std::move(id)) {
    shapes_ = spec_.layer_shapes();
    num_classes_ = shapes_.back()[0];
    executed_layers_ = spec_.layers.size();
    if (!spec_.layers.empty() && std::holds_alternative<SoftmaxSpec>(spec_.layers.back())) --executed_layers_;

    first_param_.assign(spec_.layers.size(), kNoParam);
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        if (const auto* d = std::get_if<DenseSpec>(&spec_.layers[i])) {
            first_param_[i] = params_.size();
            params_.emplace_back(Shape{d->out, d->in});
            params_.emplace_back(Shape{d->out});
            param_owner_.insert(param_owner_.end(), {i, i});
        } else if (const auto* c = std::get_if<Conv2dSpec>(&spec_.layers[i])) {
            first_param_[i] = params_.size();
            params_.emplace_back(Shape{c->out_channels, c->in_channels, c->kernel, c->kernel});
            params_.emplace_back(Shape{c->out_channels});
            param_owner_.insert(param_owner_.end(), {i, i});
        }
    }
}

Network Network::initialized(NetworkSpec spec, std::string id, std::uint64_t seed) {
    Network net(std::move(spec), std::move(id));
    net.initialize(seed);
    return net;
}

void Network::initialize(std::uint64_t seed) {
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        if (first_param_[i] == kNoParam) continue;
        std::size_t fan_in = 0;
        if (const auto* d = std::get_if<DenseSpec>(&spec_.layers[i]))
            fan_in = d->in;
        else if (const auto* c = std::get_if<Conv2dSpec>(&spec_.layers[i]))
            fan_in = c->in_channels * c->kernel * c->kernel;

        bool feeds_relu = false;
        for (std::size_t j = i + 1; j < spec_.layers.size(); ++j) {
            if (std::holds_alternative<DropoutSpec>(spec_.layers[j])) continue;
            feeds_relu = std::holds_alternative<ReluSpec>(spec_.layers[j]);
            break;
        }
        const double limit = std::sqrt((feeds_relu ? 6.0 : 3.0) / static_cast<double>(fan_in));
        Rng rng = make_rng(seed, i);
        for (auto& w : params_[first_param_[i]].data()) w = static_cast<Scalar>((2.0 * uniform01(rng) - 1.0) * limit);
        params_[first_param_[i] + 1].fill(Scalar(0));
    }
}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
}

void Network::check_batch(const Tensor& batch) const {
    const Shape& s = batch.shape();
    const bool ok = s.size() == spec_.input_shape.size() + 1 &&
                    std::equal(spec_.input_shape.begin(), spec_.input_shape.end(), s.begin() + 1);
    if (!ok) {
        const std::string where = spec_.layers.empty() ? std::string("network input")
                                                       : layer_label(0, spec_.layers.front());
        throw ShapeError(where + ": expects batch [n]+" + shape_str(spec_.input_shape) + ", got " + shape_str(s));
    }
}

Tensor Network::run(const Tensor& batch, Mode mode, Rng* rng, Tape* tape) const {
    check_batch(batch);
    const Rng saved = rng ? *rng : Rng{};
    Tensor out = run_impl(batch, mode, rng, tape, false);
    if (out.all_finite()) return out;
    Rng again = saved;
    run_impl(batch, mode, rng ? &again : nullptr, nullptr, true);
    throw NumericError("non-finite logits");  // unreachable unless a layer is nondeterministic
}

Tensor Network::run_impl(const Tensor& batch, Mode mode, Rng* rng, Tape* tape, bool check_layers) const {
    const std::size_t n = batch.dim(0);
    if (tape) {
        tape->inputs.assign(executed_layers_, Tensor{});
        tape->argmax.assign(executed_layers_, {});
        tape->masks.assign(executed_layers_, Tensor{});
    }

    Tensor cur = batch;
    for (std::size_t i = 0; i < executed_layers_; ++i) {
        const Shape& in_shape = shapes_[i];
        const Shape out_shape = with_batch(n, shapes_[i + 1]);
        Tensor out;
        bool keep_input = true;  // layers whose backward pass reads their input
        std::visit(
            Overloaded{
                [&](const DenseSpec& d) {
                    const Tensor& w = params_[first_param_[i]];
                    const Tensor& b = params_[first_param_[i] + 1];
                    out = Tensor(out_shape);
                    kernels::parallel::gemm_nt(n, d.out, d.in, cur.ptr(), w.ptr(), out.ptr(), false);
                    for (std::size_t r = 0; r < n; ++r) {
                        Scalar* row = out.ptr() + r * d.out;
                        for (std::size_t j = 0; j < d.out; ++j) row[j] += b[j];
                    }
                },
                [&](const Conv2dSpec& c) {
                    out = Tensor(out_shape);
                    kernels::parallel::conv2d_forward(conv_geometry(c, in_shape), n, cur.ptr(),
                                                      params_[first_param_[i]].ptr(),
                                                      params_[first_param_[i] + 1].ptr(), out.ptr());
                },
                [&](const ReluSpec&) {
                    out = Tensor(out_shape);
                    const Scalar* x = cur.ptr();
                    Scalar* y = out.ptr();
                    const std::size_t total = cur.size();
#pragma omp parallel for schedule(static) if (total > (1u << 16))
                    for (std::size_t j = 0; j < total; ++j) y[j] = x[j] > Scalar(0) ? x[j] : Scalar(0);
                },
                [&](const MaxPool2dSpec& p) {
                    const auto g = pool_geometry(p, in_shape);
                    out = Tensor(out_shape);
                    keep_input = false;
                    std::vector<std::uint32_t> switches(out.size());
                    kernels::parallel::maxpool_forward(g, n, cur.ptr(), out.ptr(), switches.data());
                    if (tape) tape->argmax[i] = std::move(switches);
                },
                [&](const DropoutSpec& d) {
                    keep_input = false;
                    if (mode == Mode::eval || d.keep_prob >= 1.0) {
                        out = Tensor(out_shape, std::move(cur.storage()));
                        return;
                    }
                    out = Tensor(out_shape);
                    if (!rng) throw ArgumentError(layer_label(i, spec_.layers[i]) + ": train mode requires an rng");
                    Tensor mask(out.shape());
                    const Scalar scale = Scalar(1.0 / d.keep_prob);
                    for (auto& m : mask.data()) m = uniform01(*rng) < d.keep_prob ? scale : Scalar(0);
                    for (std::size_t j = 0; j < out.size(); ++j) out[j] = cur[j] * mask[j];
                    if (tape) tape->masks[i] = std::move(mask);
                },
                [&](const FlattenSpec&) {
                    keep_input = false;
                    out = Tensor(out_shape, std::move(cur.storage()));
                },
                [&](const SoftmaxSpec&) {}},
            spec_.layers[i]);

        if (check_layers && !out.all_finite())
            throw NumericError(layer_label(i, spec_.layers[i]) + ": produced non-finite activations");
        if (tape && keep_input) tape->inputs[i] = std::move(cur);
        cur = std::move(out);
    }
    return cur;
}

Tensor Network::backprop(const Tape& tape, const Tensor& dlogits, std::vector<Tensor>* param_grads) const {
    Tensor dx = backprop_impl(tape, dlogits, param_grads, false);
    if (dx.all_finite()) return dx;
    backprop_impl(tape, dlogits, param_grads, true);
    throw NumericError("non-finite input gradient");
}

Tensor Network::backprop_impl(const Tape& tape, const Tensor& dlogits, std::vector<Tensor>* param_grads,
                              bool check_layers) const {
    if (tape.inputs.size() != executed_layers_) throw ArgumentError("tape does not belong to this network");
    const std::size_t n = dlogits.dim(0);
    if (param_grads) {
        param_grads->clear();
        for (const auto& p : params_) param_grads->emplace_back(p.shape());
    }

    Tensor grad = dlogits;
    for (std::size_t idx = executed_layers_; idx-- > 0;) {
        const Tensor& in = tape.inputs[idx];
        const Shape& in_shape = shapes_[idx];
        const Shape din_shape = with_batch(n, in_shape);
        Tensor din;
        std::visit(
            Overloaded{
                [&](const DenseSpec& d) {
                    const Tensor& w = params_[first_param_[idx]];
                    if (param_grads) {
                        Tensor& dw = (*param_grads)[first_param_[idx]];
                        Tensor& db = (*param_grads)[first_param_[idx] + 1];
                        kernels::parallel::gemm_tn(d.out, d.in, n, grad.ptr(), in.ptr(), dw.ptr(), false);
                        for (std::size_t r = 0; r < n; ++r)
                            for (std::size_t j = 0; j < d.out; ++j) db[j] += grad[r * d.out + j];
                    }
                    din = Tensor(din_shape);
                    kernels::parallel::gemm_nn(n, d.in, d.out, grad.ptr(), w.ptr(), din.ptr(), false);
                },
                [&](const Conv2dSpec& c) {
                    Scalar* dw = param_grads ? (*param_grads)[first_param_[idx]].ptr() : nullptr;
                    Scalar* db = param_grads ? (*param_grads)[first_param_[idx] + 1].ptr() : nullptr;
                    din = Tensor(din_shape);
                    kernels::parallel::conv2d_backward(conv_geometry(c, in_shape), n, in.ptr(),
                                                       params_[first_param_[idx]].ptr(), grad.ptr(), din.ptr(), dw,
                                                       db);
                },
                [&](const ReluSpec&) {
                    din = Tensor(din_shape);
                    const Scalar* x = in.ptr();
                    const Scalar* g = grad.ptr();
                    Scalar* dx = din.ptr();
                    const std::size_t total = din.size();
                    for (std::size_t j = 0; j < total; ++j) dx[j] = x[j] > Scalar(0) ? g[j] : Scalar(0);
                },
                [&](const MaxPool2dSpec& p) {
                    din = Tensor(din_shape);
                    kernels::parallel::maxpool_backward(pool_geometry(p, in_shape), n, grad.ptr(),
                                                        tape.argmax[idx].data(), din.ptr());
                },
                [&](const DropoutSpec&) {
                    const Tensor& mask = tape.masks[idx];
                    if (mask.empty()) {
                        din = Tensor(din_shape, std::move(grad.storage()));
                    } else {
                        din = Tensor(din_shape);
                        for (std::size_t j = 0; j < din.size(); ++j) din[j] = grad[j] * mask[j];
                    }
                },
                [&](const FlattenSpec&) { din = Tensor(din_shape, std::move(grad.storage())); },
                [&](const SoftmaxSpec&) {}},
            spec_.layers[idx]);
        if (check_layers && !din.all_finite())
            throw NumericError(layer_label(idx, spec_.layers[idx]) + ": non-finite gradient");
        grad = std::move(din);
    }
    return grad;
}

Tensor Network::logits(const Tensor& batch) const { return run(batch, Mode::eval, nullptr, nullptr); }

Tensor Network::input_gradient(const Tensor& batch, const LogitGradFn& upstream, Tensor* logits_out) const {
    Tape tape;
    Tensor z = run(batch, Mode::eval, nullptr, &tape);
    Tensor dz(z.shape());
    upstream(z, dz);
    Tensor dx = backprop(tape, dz, nullptr);
    if (logits_out) *logits_out = std::move(z);
    return dx;
}

ForwardOutput forward(const Network& net, const Tensor& batch) {
    ForwardOutput out;
    out.logits = net.logits(batch);
    out.probs = softmax_rows(out.logits);
    return out;
}

BackwardOutput backward(const Network& net, const Tensor& batch, std::span<const int> labels) {
    if (labels.size() != batch.dim(0))
        throw ArgumentError("backward: " + std::to_string(labels.size()) + " labels for a batch of " +
                            std::to_string(batch.dim(0)));
    Tape tape;
    Tensor z = net.run(batch, Mode::eval, nullptr, &tape);
    Tensor dz(z.shape());
    BackwardOutput out;
    out.loss = softmax_cross_entropy(z, labels, &dz);
    if (!std::isfinite(out.loss)) throw NumericError("backward: non-finite loss");
    out.grads.input_grad = net.backprop(tape, dz, &out.grads.params);
    return out;
}

Tensor softmax_rows(const Tensor& logits) {
    Tensor out(logits.shape());
    const std::size_t n = logits.dim(0), k = logits.row_size();
    for (std::size_t r = 0; r < n; ++r) {
        const Scalar* z = logits.ptr() + r * k;
        Scalar* p = out.ptr() + r * k;
        const Scalar m = *std::max_element(z, z + k);
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(z[j] - m));
        for (std::size_t j = 0; j < k; ++j) p[j] = static_cast<Scalar>(std::exp(static_cast<double>(z[j] - m)) / sum);
    }
    return out;
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* dlogits) {
    const std::size_t n = logits.dim(0), k = logits.row_size();
    if (labels.size() != n) throw ArgumentError("cross-entropy: label count does not match batch");
    if (dlogits && dlogits->shape() != logits.shape()) *dlogits = Tensor(logits.shape());
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const int y = labels[r];
        if (y < 0 || static_cast<std::size_t>(y) >= k)
            throw ArgumentError("label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
        const Scalar* z = logits.ptr() + r * k;
        const double m = *std::max_element(z, z + k);
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - m);
        const double lse = m + std::log(sum);
        total += lse - z[y];
        if (dlogits) {
            Scalar* d = dlogits->ptr() + r * k;
            for (std::size_t j = 0; j < k; ++j) {
                const double p = std::exp(z[j] - lse);
                d[j] = static_cast<Scalar>((p - (static_cast<int>(j) == y ? 1.0 : 0.0)) / static_cast<double>(n));
            }
        }
    }
    return total / static_cast<double>(n);
}

std::size_t argmax(std::span<const Scalar> values) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < values.size(); ++j)
        if (values[j] > values[best]) best = j;
    return best;
}

std::vector<int> predict(const Classifier& model, const Tensor& batch) {
    const Tensor z = model.logits(batch);
    std::vector<int> out(z.dim(0));
    for (std::size_t r = 0; r < out.size(); ++r) out[r] = static_cast<int>(argmax(z.row(r)));
    return out;
}

}  // namespace muldef
