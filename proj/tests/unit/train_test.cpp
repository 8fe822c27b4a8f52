#include <doctest.h>

#include "muldef/arch.hpp"
#include "muldef/error.hpp"
#include "muldef/format.hpp"
#include "muldef/train.hpp"

using namespace muldef;

namespace {

NetworkSpec blob_net(std::size_t dim, std::size_t classes) {
    return NetworkSpec{{dim}, {DenseSpec{dim, 16}, ReluSpec{}, DenseSpec{16, classes}}};
}

}  // namespace

TEST_CASE("early stopping compares against the running minimum") {
    EarlyStopping es(0.1, 2);
    CHECK_FALSE(es.update(1.0));
    CHECK_FALSE(es.update(0.95));  // not 0.1 below 1.0, but becomes the best
    CHECK(es.stale_epochs() == 1);
    CHECK(es.best() == doctest::Approx(0.95));
    CHECK_FALSE(es.update(0.8));  // 0.15 below the best resets
    CHECK(es.stale_epochs() == 0);
    CHECK_FALSE(es.update(0.75));
    CHECK(es.update(0.7));

    // Slow drift never improves by min_delta in one step.
    EarlyStopping drift(0.001, 5);
    const double trace[] = {1.00, 0.9995, 0.9992, 0.9991, 0.9990, 0.9989};
    for (int i = 0; i < 5; ++i) CHECK_FALSE(drift.update(trace[i]));
    CHECK(drift.update(trace[5]));
}

TEST_CASE("training on separable blobs reaches high accuracy and is deterministic") {
    const auto data = synth_blobs(3, 100, 5, 0.05, 3);
    TrainConfig cfg;
    cfg.max_epochs = 20;
    cfg.batch_size = 16;
    cfg.optimizer.learning_rate = 0.01;
    cfg.rng_seed = 9;
    Network a = Network::initialized(blob_net(5, 3), "a", 1);
    Network b = Network::initialized(blob_net(5, 3), "a", 1);
    const auto ra = train(a, data, cfg);
    train(b, data, cfg);
    CHECK(accuracy(a, data) > 0.95);
    CHECK(save_network(a) == save_network(b));
    CHECK(ra.epochs_run == ra.train_losses.size());
    CHECK(ra.val_losses.size() == ra.train_losses.size());
    CHECK(ra.train_losses.back() < ra.train_losses.front());
}

TEST_CASE("plain SGD also learns") {
    const auto data = synth_blobs(2, 80, 4, 0.05, 4);
    TrainConfig cfg;
    cfg.optimizer.kind = OptimizerKind::sgd;
    cfg.optimizer.learning_rate = 0.1;
    cfg.max_epochs = 30;
    Network n = Network::initialized(blob_net(4, 2), "s", 2);
    train(n, data, cfg);
    CHECK(accuracy(n, data) > 0.95);
}

TEST_CASE("train config validation names the field") {
    TrainConfig cfg;
    cfg.batch_size = 0;
    try {
        cfg.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.field().find("batch_size") != std::string::npos);
    }
    cfg = {};
    cfg.optimizer.learning_rate = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("named architectures resolve") {
    for (const auto& name : architecture_names()) {
        CAPTURE(name);
        const auto spec = named_architecture(name);
        CHECK_NOTHROW(spec.validate());
        CHECK(spec.num_classes() == 10);
    }
    CHECK_THROWS_AS(named_architecture("nope"), ArgumentError);
    const auto desk = named_architecture("mnist-desk");
    CHECK(desk.input_shape == Shape{1, 28, 28});
}
