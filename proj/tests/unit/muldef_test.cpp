#include <doctest.h>

#include <filesystem>

#include "muldef/error.hpp"
#include "muldef/format.hpp"
#include "muldef/muldef.hpp"
#include "muldef/rng.hpp"

using namespace muldef;

namespace {

struct Toy {
    Dataset train_set = synth_blobs(4, 60, 10, 0.12, 21);
    Dataset test_set = synth_blobs(4, 20, 10, 0.12, 21).with_name("test", Split::test);
    Network seed;
    GeneratorConfig gen;

    Toy() {
        TrainConfig tc;
        tc.max_epochs = 8;
        tc.batch_size = 16;
        tc.optimizer.learning_rate = 0.01;
        seed = Network::initialized(NetworkSpec{{10}, {DenseSpec{10, 24}, ReluSpec{}, DenseSpec{24, 4}}}, "T", 3);
        train(seed, train_set, tc);
        gen.num_additional = 3;
        gen.aug_fraction = 0.25;
        FgsmConfig fg;
        fg.eps = 0.15;
        gen.attack = fg;
        gen.train = tc;
        gen.rng_seed = 77;
    }
};

const Toy& toy() {
    static const Toy t;
    return t;
}

const ModelFamily& toy_family() {
    static const ModelFamily fam = generate_family(toy().seed, toy().train_set, toy().gen);
    return fam;
}

}  // namespace

TEST_CASE("selection is uniform: chi-square over 1e5 draws and 5 models") {
    ModelFamily fam;
    for (int i = 0; i < 5; ++i) fam.models.push_back(Network(NetworkSpec{{2}, {DenseSpec{2, 2}}}, "m" + std::to_string(i)));
    for (std::uint64_t selection_seed : {0ULL, 1ULL, 0xdeadbeefULL}) {
        const MuldefClassifier clf(fam, selection_seed);
        std::vector<double> counts(5, 0.0);
        const std::size_t draws = 100000;
        for (std::uint64_t d = 0; d < draws; ++d) counts[clf.select_model(d)] += 1;
        double chi2 = 0;
        for (double c : counts) chi2 += (c - draws / 5.0) * (c - draws / 5.0) / (draws / 5.0);
        CAPTURE(selection_seed);
        CHECK(chi2 < 13.277);  // chi-square 0.99 quantile, 4 degrees of freedom
    }
}

TEST_CASE("composed training sets follow the two solutions") {
    const auto orig = synth_blobs(2, 10, 3, 0.1, 1);
    std::vector<AdversarialSet> adv;
    for (int s = 0; s < 3; ++s) {
        AdversarialSet a;
        a.source_model_id = s == 0 ? "T" : "M" + std::to_string(s);
        a.sample_shape = {3};
        a.num_classes = 2;
        const std::size_t n = 4 + s;
        a.pixels.assign(n * 3, 0.5f);
        a.labels.assign(n, s % 2);
        a.origin.assign(n, 0);
        a.failed.assign(n, 0);
        adv.push_back(a);
    }
    const auto s1 = compose_training_set(orig, adv, Solution::solution1, 3);
    CHECK(s1.data.size() == 20 + 6);
    REQUIRE(s1.blocks.size() == 2);
    CHECK(s1.blocks[1] == TrainingBlock{"M2", 20, 6});
    const auto s2 = compose_training_set(orig, adv, Solution::solution2, 3);
    CHECK(s2.data.size() == 20 + 4 + 5 + 6);
    CHECK(s2.blocks.size() == 4);
    CHECK(s2.blocks[2] == TrainingBlock{"M1", 24, 5});
    CHECK(compose_training_set(orig, adv, Solution::solution1, 1).data.size() ==
          compose_training_set(orig, adv, Solution::solution2, 1).data.size());
    CHECK_THROWS_AS(compose_training_set(orig, adv, Solution::solution2, 4), ArgumentError);
}

TEST_CASE("generated family has the expected structure") {
    const auto& fam = toy_family();
    REQUIRE(fam.size() == 4);
    CHECK_NOTHROW(fam.check());
    CHECK(fam.models[0] == toy().seed);
    CHECK(fam.models[2].id() == "M2");
    CHECK(fam.adv_sets.size() == 4);
    CHECK(fam.adv_sets[3].source_model_id == "M3");
    CHECK(fam.adv_sets[0].size() == 60);  // 0.25 * 240
    CHECK(fam.compositions[2].size() == 4);  // original + three sets under solution 2
    CHECK(fam.convergence_trace.size() == 4);
    for (const auto& m : fam.models) CHECK(m.spec() == toy().seed.spec());
    // adversarial examples come from training samples
    for (const auto& a : fam.adv_sets)
        for (std::size_t e = 0; e < a.size(); ++e) CHECK(a.labels[e] == toy().train_set.label(a.origin[e]));

    const auto again = generate_family(toy().seed, toy().train_set, toy().gen);
    for (std::size_t i = 0; i < fam.size(); ++i) CHECK(save_network(again.models[i]) == save_network(fam.models[i]));

    const auto pre = fam.prefix(1);
    CHECK(pre.size() == 2);
    CHECK(pre.adv_sets.size() == 2);
    CHECK(pre.models[1] == fam.models[1]);
}

TEST_CASE("invalid generator configs are rejected before any work") {
    GeneratorConfig g = toy().gen;
    g.aug_fraction = 0.0;
    CHECK_THROWS_AS(generate_family(toy().seed, toy().train_set, g), ConfigError);
    g = toy().gen;
    FgsmConfig bad;
    bad.eps = -0.1;
    g.attack = bad;
    CHECK_THROWS_AS(generate_family(toy().seed, toy().train_set, g), ConfigError);
    CHECK(generator_from_json(generator_to_json(toy().gen)) == toy().gen);
}

TEST_CASE("classify_batch matches classify and the oracle keeps drawing") {
    const MuldefClassifier clf(toy_family(), 5);
    const Tensor batch = toy().test_set.batch(0, 30);
    const auto labels = clf.classify_batch(batch, 1000);
    for (std::size_t r = 0; r < 30; ++r) {
        const Tensor one = toy().test_set.batch(r, 1);
        CHECK(labels[r] == clf.classify(one, 1000 + r));
    }
    const LabelOracle o = clf.oracle(1000);
    CHECK(o(batch) == labels);
    CHECK(o(batch) == clf.classify_batch(batch, 1030));
    CHECK(o.queries() == 60);
}

TEST_CASE("merged model of identical members equals the single model") {
    const Network& t = toy().seed;
    const MergedModel merged({&t, &t, &t});
    const Tensor x = toy().test_set.batch(0, 8);
    const Tensor p = merged.probabilities(x), q = t.probabilities(x);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i] == doctest::Approx(q[i]).epsilon(1e-5));
    const MergedModel ml({&t, &t}, MergeRule::mean_logits);
    const Tensor a = ml.logits(x), b = t.logits(x);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-5));
}

TEST_CASE("family persistence round-trips") {
    const auto dir = std::filesystem::temp_directory_path() / "muldef_family_test";
    std::filesystem::remove_all(dir);
    save_family(toy_family(), dir);
    const ModelFamily back = load_family(dir);
    REQUIRE(back.size() == toy_family().size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(save_network(back.models[i]) == save_network(toy_family().models[i]));
        CHECK(save_adversarial_set(back.adv_sets[i]) == save_adversarial_set(toy_family().adv_sets[i]));
    }
    CHECK(back.generator == toy_family().generator);
    CHECK(back.compositions == toy_family().compositions);
    CHECK(back.convergence_trace == toy_family().convergence_trace);
    std::filesystem::remove(dir / "model_01.bin");
    CHECK_THROWS(load_family(dir));
    std::filesystem::remove_all(dir);
}
