#include <doctest.h>

#include <filesystem>

#include "muldef/cli.hpp"
#include "muldef/error.hpp"

using namespace muldef;
using namespace muldef::cli;

namespace {

ConfigError config_error(const std::string& yaml) {
    try {
        parse_config(yaml, Scale::desk);
    } catch (const ConfigError& e) {
        return e;
    }
    FAIL("expected ConfigError");
    return ConfigError("", "");
}

const char* kBlobs = R"(seed: 4
repeats: 1
dataset: {source: blobs, train_size: 400, test_size: 100, blob_dim: 8}
architecture:
  input_shape: [8]
  layers: [{kind: dense, in: 8, out: 16}, {kind: relu}, {kind: dense, in: 16, out: 10}]
train: {max_epochs: 3, learning_rate: 0.01}
attack: {kind: fgsm, eps: 0.2}
generator: {num_additional: 2, aug_fraction: 0.2}
eval: {draws: 3}
)";

}  // namespace

TEST_CASE("every preset validates at both scales") {
    for (const auto& name : preset_names())
        for (Scale s : {Scale::desk, Scale::full}) {
            CAPTURE(name);
            CHECK_NOTHROW(preset_config(name, s).validate());
        }
    const auto cw = preset_config("mnist-cw-wb", Scale::desk);
    CHECK(std::get<CwConfig>(cw.attack).confidence == 0.01);
    CHECK(std::get<CwConfig>(cw.attack).max_iterations == 300);
    CHECK(cw.eval.direct);
    const auto bb = preset_config("mnist-cw-bb", Scale::desk);
    CHECK(std::get<CwConfig>(*bb.eval.blackbox_attack).confidence == 10.0);
    CHECK(std::get<FgsmConfig>(preset_config("cifar-fgsm-wb", Scale::desk).attack).eps == 0.05);
    CHECK(preset_config("cifar-fgsm-wb", Scale::desk).generator.aug_fraction == 0.25);
    CHECK_THROWS_AS(preset_config("mnist-pgd-wb", Scale::desk), ConfigError);
}

TEST_CASE("negative eps is rejected with field and line") {
    const auto e = config_error("preset: mnist-fgsm-wb\nattack:\n  kind: fgsm\n  eps: -0.1\n");
    CHECK(e.field() == "attack.eps");
    CHECK(e.line() == 4);
}

TEST_CASE("config errors point at the offending line") {
    CHECK(config_error("seed: 1\ntrain:\n  max_epochs: 0\n").field() == "train.max_epochs");
    CHECK(config_error("seed: 1\ntrain:\n  max_epochs: 0\n").line() == 3);
    const auto unknown = config_error("seed: 1\ngenerator:\n  num_additonal: 3\n");
    CHECK(unknown.field() == "generator.num_additonal");
    CHECK(unknown.line() == 3);
    CHECK(config_error("repeats: -2\n").line() == 1);
    CHECK(config_error("eval:\n  draws: lots\n").field() == "eval.draws");
    CHECK(config_error("preset: nope\n").field() == "preset");
    CHECK(config_error("attack: {kind: fgsm}\neval:\n  direct: true\n").field() == "eval.direct");
    CHECK(config_error("architecture: cifar-mlp\n").field() == "architecture");
    CHECK(config_error("a: [1, 2\n").line() >= 1);
}

TEST_CASE("seeds are materialized and overridable") {
    const auto a = parse_config("seed: 7\n", Scale::desk);
    const auto b = parse_config("seed: 7\n", Scale::desk);
    CHECK(config_to_json(a) == config_to_json(b));
    CHECK(a.init_seed != a.train.rng_seed);
    const auto c = parse_config("seed: 7\ninit_seed: 99\n", Scale::desk);
    CHECK(c.init_seed == 99);
    CHECK(c.train.rng_seed == a.train.rng_seed);
    auto d = c;
    override_seed(d, 7);
    CHECK(d.init_seed == a.init_seed);
    const auto r1 = for_repeat(a, 1);
    CHECK(r1.dataset.seed == a.dataset.seed);
    CHECK(r1.init_seed != a.init_seed);
    CHECK(for_repeat(a, 0).init_seed == a.init_seed);
}

TEST_CASE("train is byte-reproducible and repro writes target and defense rows") {
    const auto cfg = parse_config(kBlobs, Scale::desk);
    const auto base = std::filesystem::temp_directory_path() / "muldef_cli_test";
    std::filesystem::remove_all(base);
    const auto m1 = cmd_train(cfg, base / "a");
    const auto m2 = cmd_train(cfg, base / "b");
    CHECK(read_bytes(m1) == read_bytes(m2));

    const auto report = cmd_repro(cfg, base / "repro");
    CHECK_NOTHROW(report.find("T", "T", "whitebox"));
    CHECK_NOTHROW(report.min_over_sets("defense", "whitebox"));
    CHECK(std::filesystem::exists(base / "repro" / "repeat_0" / "family" / "manifest.json"));
    const auto again = cmd_repro(cfg, base / "repro2");
    CHECK(again.rows == report.rows);
    for (const char* f : {"results.csv", "summary.txt", "config.json"})
        CHECK(read_bytes(base / "repro" / f) == read_bytes(base / "repro2" / f));
    CHECK(read_bytes(base / "repro" / "repeat_0" / "family" / "model_02.bin") ==
          read_bytes(base / "repro2" / "repeat_0" / "family" / "model_02.bin"));
    std::filesystem::remove_all(base);
}

TEST_CASE("shipped example configs parse and validate") {
    std::size_t seen = 0;
    for (const auto& entry : std::filesystem::directory_iterator(MULDEF_CONFIG_DIR)) {
        if (entry.path().extension() != ".yaml") continue;
        CAPTURE(entry.path().string());
        CHECK_NOTHROW(load_config(entry.path(), Scale::desk).validate());
        ++seen;
    }
    CHECK(seen >= 3);
}
