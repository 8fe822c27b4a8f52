#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "muldef/attacks.hpp"
#include "muldef/data.hpp"
#include "muldef/error.hpp"
#include "muldef/network.hpp"
#include "muldef/train.hpp"

namespace muldef {

/// solution1 trains M_i on the original set plus the adversarial examples of
/// M_{i-1} only; solution2 adds those of every earlier model.
enum class Solution { solution1, solution2 };
std::string solution_name(Solution s);
Solution parse_solution(const std::string& s);

struct ConvergenceStop {
    bool enabled = false;
    double min_delta = 0.005;
    friend bool operator==(const ConvergenceStop&, const ConvergenceStop&) = default;
};

struct GeneratorConfig {
    std::size_t num_additional = 4;  // p
    Solution solution = Solution::solution2;
    // Adversarial examples per source model, as a fraction of the original
    // training set (0.15 for MNIST, 0.25 for CIFAR-10).
    double aug_fraction = 0.15;
    AttackConfig attack = FgsmConfig{};
    TrainConfig train;
    std::uint64_t rng_seed = 0;
    ConvergenceStop convergence_stop;
    // Start each M_i from T's weights instead of a fresh initialization.
    bool warm_start = false;

    /// Throws ConfigError; `train_size` is |original training set|.
    void validate(std::size_t train_size) const;
    std::size_t adv_set_size(std::size_t train_size) const;
    friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

json generator_to_json(const GeneratorConfig& cfg);
GeneratorConfig generator_from_json(const json& j);

/// One contiguous run of a composed training set. `source` is "original"
/// or the id of the model the adversarial examples were generated against.
struct TrainingBlock {
    std::string source;
    std::size_t offset = 0;
    std::size_t size = 0;
    friend bool operator==(const TrainingBlock&, const TrainingBlock&) = default;
};

struct ComposedSet {
    Dataset data;
    std::vector<TrainingBlock> blocks;
};

/// Training set of M_i (i >= 1) given the adversarial sets of models
/// 0..i-1 in construction order.
ComposedSet compose_training_set(const Dataset& original, std::span<const AdversarialSet> adv_sets,
                                 Solution solution, std::size_t i);

struct ModelFamily {
    std::vector<Network> models;           // T, M_1, ..., M_p
    std::vector<AdversarialSet> adv_sets;  // Adv_T, Adv_M1, ..., Adv_Mp
    GeneratorConfig generator;
    std::vector<TrainedReport> reports;            // M_1..M_p
    std::vector<std::vector<TrainingBlock>> compositions;  // M_1..M_p
    // Defense expected accuracy on the newest adversarial set after each
    // round, T alone first. Filled whether or not the stop is enabled.
    std::vector<double> convergence_trace;

    std::size_t size() const noexcept { return models.size(); }
    /// Architecture homogeneity and adv-set ownership; throws Error.
    void check() const;
    /// The first p + 1 models with their sets; valid because construction is
    /// sequential and each round only depends on earlier rounds.
    ModelFamily prefix(std::size_t p) const;
};

/// Carries whatever was built before a round failed.
class GenerationError : public Error {
public:
    GenerationError(const std::string& what, ModelFamily partial, std::size_t round)
        : Error(what), partial_(std::make_shared<ModelFamily>(std::move(partial))), round_(round) {}
    const ModelFamily& partial() const noexcept { return *partial_; }
    std::size_t round() const noexcept { return round_; }

private:
    std::shared_ptr<ModelFamily> partial_;
    std::size_t round_;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Builds [T, M_1, ..., M_p]. `seed` must already be trained on `train_set`.
ModelFamily generate_family(const Network& seed, const Dataset& train_set, const GeneratorConfig& cfg,
                            const ProgressFn& progress = {});

/// Defense D: every query is answered by one member picked uniformly from
/// (selection_seed, draw_index). Holds a reference; the family must outlive it.
class MuldefClassifier {
public:
    MuldefClassifier(const ModelFamily& family, std::uint64_t selection_seed);

    std::size_t size() const noexcept { return family_->size(); }
    const Network& member(std::size_t i) const { return family_->models.at(i); }
    const ModelFamily& family() const noexcept { return *family_; }
    std::uint64_t selection_seed() const noexcept { return seed_; }
    const Shape& input_shape() const { return member(0).input_shape(); }
    std::size_t num_classes() const { return member(0).num_classes(); }

    std::size_t select_model(std::uint64_t draw_index) const noexcept;
    /// `x` is one sample (sample shape, or a batch of one).
    int classify(const Tensor& x, std::uint64_t draw_index) const;
    /// Row r is answered with draw index first_draw + r.
    std::vector<int> classify_batch(const Tensor& batch, std::uint64_t first_draw) const;

    /// Label-only access for the black-box attack. Successive batches keep
    /// consuming fresh draw indices starting at `first_draw`.
    LabelOracle oracle(std::uint64_t first_draw = 0) const;

private:
    const ModelFamily* family_;
    std::uint64_t seed_;
};

enum class MergeRule { mean_probabilities, mean_logits };
std::string merge_rule_name(MergeRule rule);
MergeRule parse_merge_rule(const std::string& s);

/// The family as one differentiable model, for the direct attack. Under
/// mean_probabilities the logits are log of the averaged member
/// probabilities; under mean_logits they are the averaged member logits.
/// Holds references to the members.
class MergedModel : public Classifier {
public:
    MergedModel(std::vector<const Network*> members, MergeRule rule = MergeRule::mean_probabilities,
                std::string id = "merged");
    explicit MergedModel(const ModelFamily& family, MergeRule rule = MergeRule::mean_probabilities);

    const std::string& id() const override { return id_; }
    const Shape& input_shape() const override { return members_.front()->input_shape(); }
    std::size_t num_classes() const override { return members_.front()->num_classes(); }
    MergeRule rule() const noexcept { return rule_; }

    Tensor logits(const Tensor& batch) const override;
    Tensor probabilities(const Tensor& batch) const override;
    Tensor input_gradient(const Tensor& batch, const LogitGradFn& upstream,
                          Tensor* logits_out = nullptr) const override;

private:
    std::vector<const Network*> members_;
    MergeRule rule_;
    std::string id_;
};

/// Directory with manifest.json, model_XX.bin and adv_XX.bin per member.
void save_family(const ModelFamily& family, const std::filesystem::path& dir);
ModelFamily load_family(const std::filesystem::path& dir);

}  // namespace muldef
