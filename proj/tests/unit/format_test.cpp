#include <doctest.h>

#include <filesystem>

#include "muldef/arch.hpp"
#include "muldef/error.hpp"
#include "muldef/format.hpp"

using namespace muldef;

TEST_CASE("model files round-trip byte for byte") {
    const Network net = Network::initialized(named_architecture("mnist-desk"), "T", 5);
    const auto bytes = save_network(net);
    const Network back = load_network(bytes);
    CHECK(back.spec() == net.spec());
    CHECK(back.id() == "T");
    CHECK(save_network(back) == bytes);
    // Stored as float32; the float build is exact.
    if constexpr (sizeof(Scalar) == 4) CHECK(back == net);

    const auto path = std::filesystem::temp_directory_path() / "muldef_format_test.bin";
    save_network_file(net, path);
    CHECK(read_bytes(path) == bytes);
    CHECK(load_network_file(path).spec() == net.spec());
    std::filesystem::remove(path);
}

TEST_CASE("corrupt model files are rejected") {
    const Network net = Network::initialized(NetworkSpec{{3}, {DenseSpec{3, 2}}}, "n", 1);
    auto bytes = save_network(net);
    auto bad = bytes;
    bad[0] ^= 0xff;
    CHECK_THROWS_AS(load_network(bad), FormatError);
    auto cut = bytes;
    cut.resize(cut.size() - 4);
    CHECK_THROWS_AS(load_network(cut), FormatError);
    CHECK_THROWS_AS(load_network(std::span<const std::uint8_t>(bytes.data(), 10)), FormatError);
}

TEST_CASE("spec and train config JSON round-trip") {
    for (const auto& name : architecture_names()) {
        const auto spec = named_architecture(name);
        CHECK(spec_from_json(spec_to_json(spec)) == spec);
    }
    TrainConfig cfg;
    cfg.optimizer.kind = OptimizerKind::sgd;
    cfg.optimizer.learning_rate = 0.125;
    cfg.rng_seed = 0xfedcba9876543210ULL;
    cfg.max_epochs = 3;
    CHECK(train_config_from_json(train_config_to_json(cfg)) == cfg);
}
