#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "muldef/data.hpp"
#include "muldef/network.hpp"

namespace muldef {

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adam;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-7;
    friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct TrainConfig {
    OptimizerConfig optimizer;
    std::size_t batch_size = 64;
    std::size_t max_epochs = 10;
    double early_stop_min_delta = 0.001;
    std::size_t early_stop_patience = 5;
    std::uint64_t rng_seed = 0;
    double validation_fraction = 0.1;

    /// Throws ConfigError naming the first bad field.
    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

enum class StopReason { max_epochs, early_stop };
std::string stop_reason_name(StopReason reason);

struct TrainedReport {
    std::size_t epochs_run = 0;
    double final_train_loss = 0.0;
    double final_val_loss = 0.0;
    StopReason stop_reason = StopReason::max_epochs;
    std::vector<double> train_losses;  // per epoch, mean minibatch cross-entropy
    std::vector<double> val_losses;
};

/// An epoch improves when its validation loss is at least `min_delta` below
/// the lowest loss seen so far. Training stops once `patience` consecutive
/// epochs fail to improve.
class EarlyStopping {
public:
    EarlyStopping(double min_delta, std::size_t patience);

    /// Records one epoch; returns true when training should stop.
    bool update(double val_loss);
    double best() const noexcept { return best_; }
    std::size_t stale_epochs() const noexcept { return stale_; }

private:
    double min_delta_;
    std::size_t patience_;
    double best_;
    std::size_t stale_ = 0;
};

/// Trains `net` in place. The validation part is carved from `train_set`.
TrainedReport train(Network& net, const Dataset& train_set, const TrainConfig& cfg);

/// Mean cross-entropy in eval mode.
double mean_loss(const Network& net, const Dataset& set, std::size_t batch_size = 500);

/// Fraction of samples whose argmax class equals the label.
double accuracy(const Classifier& model, const Dataset& set, std::size_t batch_size = 500);

}  // namespace muldef
