#include "muldef/train.hpp"

#include <cmath>
#include <limits>

#include "muldef/rng.hpp"

namespace muldef {

void TrainConfig::validate() const {
    const auto& o = optimizer;
    if (!(o.learning_rate > 0.0)) throw ConfigError("train.learning_rate", "must be positive");
    if (o.kind == OptimizerKind::adam) {
        if (!(o.beta1 >= 0.0 && o.beta1 < 1.0)) throw ConfigError("train.beta1", "must be in [0,1)");
        if (!(o.beta2 >= 0.0 && o.beta2 < 1.0)) throw ConfigError("train.beta2", "must be in [0,1)");
        if (!(o.epsilon > 0.0)) throw ConfigError("train.epsilon", "must be positive");
    }
    if (batch_size == 0) throw ConfigError("train.batch_size", "must be positive");
    if (max_epochs == 0) throw ConfigError("train.max_epochs", "must be positive");
    if (!(early_stop_min_delta >= 0.0)) throw ConfigError("train.early_stop_min_delta", "must be nonnegative");
    if (early_stop_patience == 0) throw ConfigError("train.early_stop_patience", "must be at least 1");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
        throw ConfigError("train.validation_fraction", "must be in (0,1)");
}

std::string stop_reason_name(StopReason reason) {
    return reason == StopReason::early_stop ? "early_stop" : "max_epochs";
}

EarlyStopping::EarlyStopping(double min_delta, std::size_t patience)
    : min_delta_(min_delta), patience_(patience), best_(std::numeric_limits<double>::infinity()) {
    if (patience_ == 0) throw ArgumentError("early stopping patience must be at least 1");
}

bool EarlyStopping::update(double val_loss) {
    if (std::isinf(best_) || best_ - val_loss >= min_delta_)
        stale_ = 0;
    else
        ++stale_;
    best_ = std::min(best_, val_loss);
    return stale_ >= patience_;
}

namespace {

class Optimizer {
public:
    Optimizer(const OptimizerConfig& cfg, std::span<const Tensor> params) : cfg_(cfg) {
        if (cfg_.kind == OptimizerKind::adam) {
            for (const auto& p : params) {
                m_.emplace_back(p.size(), 0.0);
                v_.emplace_back(p.size(), 0.0);
            }
        }
    }

    void step(std::span<Tensor> params, const std::vector<Tensor>& grads) {
        ++t_;
        if (cfg_.kind == OptimizerKind::sgd) {
            const Scalar lr = static_cast<Scalar>(cfg_.learning_rate);
            for (std::size_t i = 0; i < params.size(); ++i) {
                Scalar* p = params[i].ptr();
                const Scalar* g = grads[i].ptr();
                for (std::size_t j = 0; j < params[i].size(); ++j) p[j] -= lr * g[j];
            }
            return;
        }
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        const double lr_t = cfg_.learning_rate * std::sqrt(1.0 - std::pow(b2, double(t_))) /
                            (1.0 - std::pow(b1, double(t_)));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Scalar* p = params[i].ptr();
            const Scalar* g = grads[i].ptr();
            double* m = m_[i].data();
            double* v = v_[i].data();
            for (std::size_t j = 0; j < params[i].size(); ++j) {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * double(g[j]) * g[j];
                p[j] -= static_cast<Scalar>(lr_t * m[j] / (std::sqrt(v[j]) + cfg_.epsilon));
            }
        }
    }

private:
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

}  // namespace

TrainedReport train(Network& net, const Dataset& train_set, const TrainConfig& cfg) {
    cfg.validate();
    if (train_set.empty()) throw ArgumentError("train: empty dataset");
    if (train_set.sample_shape() != net.input_shape())
        throw ShapeError("train: dataset samples " + shape_str(train_set.sample_shape()) + " but network expects " +
                         shape_str(net.input_shape()));
    auto [fit, val] = split_validation(train_set, cfg.validation_fraction, cfg.rng_seed);
    if (cfg.batch_size > fit.size())
        throw ArgumentError("train: batch_size " + std::to_string(cfg.batch_size) + " exceeds training-set size " +
                            std::to_string(fit.size()));

    // Dense layers with an l2 coefficient get 2*l2*W added to dW.
    std::vector<double> l2(net.params().size(), 0.0);
    for (std::size_t i = 0; i < l2.size(); i += 2)
        if (const auto* d = std::get_if<DenseSpec>(&net.spec().layers[net.param_layer(i)])) l2[i] = d->l2;

    Optimizer opt(cfg.optimizer, net.params());
    Rng order_rng = make_rng(cfg.rng_seed, 1);
    Rng dropout_rng = make_rng(cfg.rng_seed, 2);
    EarlyStopping stopper(cfg.early_stop_min_delta, cfg.early_stop_patience);
    TrainedReport report;
    std::vector<Tensor> grads;
    Tensor dlogits;

    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const auto order = random_permutation(fit.size(), order_rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
            const std::size_t count = std::min(cfg.batch_size, order.size() - first);
            std::span<const std::size_t> idx(order.data() + first, count);
            const Tensor batch = fit.batch(idx);
            const auto labels = fit.batch_labels(idx);
            Tape tape;
            const Tensor logits = net.run(batch, Mode::train, &dropout_rng, &tape);
            loss_sum += softmax_cross_entropy(logits, labels, &dlogits);
            net.backprop(tape, dlogits, &grads);
            for (std::size_t i = 0; i < grads.size(); ++i) {
                if (l2[i] == 0.0) continue;
                const Scalar k = static_cast<Scalar>(2.0 * l2[i]);
                const Scalar* w = net.params()[i].ptr();
                Scalar* g = grads[i].ptr();
                for (std::size_t j = 0; j < grads[i].size(); ++j) g[j] += k * w[j];
            }
            opt.step(net.params(), grads);
            ++batches;
        }
        const double val_loss = mean_loss(net, val);
        if (!std::isfinite(val_loss)) throw NumericError("train: validation loss is not finite");
        report.train_losses.push_back(loss_sum / static_cast<double>(batches));
        report.val_losses.push_back(val_loss);
        report.epochs_run = epoch + 1;
        if (stopper.update(val_loss)) {
            report.stop_reason = StopReason::early_stop;
            break;
        }
    }
    report.final_train_loss = report.train_losses.back();
    report.final_val_loss = report.val_losses.back();
    return report;
}

double mean_loss(const Network& net, const Dataset& set, std::size_t batch_size) {
    if (set.empty()) throw ArgumentError("mean_loss: empty dataset");
    double total = 0.0;
    for (std::size_t first = 0; first < set.size(); first += batch_size) {
        const std::size_t count = std::min(batch_size, set.size() - first);
        const Tensor logits = net.logits(set.batch(first, count));
        std::span<const int> labels(set.labels().data() + first, count);
        total += softmax_cross_entropy(logits, labels, nullptr) * static_cast<double>(count);
    }
    return total / static_cast<double>(set.size());
}

double accuracy(const Classifier& model, const Dataset& set, std::size_t batch_size) {
    if (set.empty()) throw ArgumentError("accuracy: empty dataset");
    std::size_t correct = 0;
    for (std::size_t first = 0; first < set.size(); first += batch_size) {
        const std::size_t count = std::min(batch_size, set.size() - first);
        const auto pred = predict(model, set.batch(first, count));
        for (std::size_t i = 0; i < count; ++i) correct += pred[i] == set.label(first + i);
    }
    return static_cast<double>(correct) / static_cast<double>(set.size());
}

}  // namespace muldef
