#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <variant>
#include <vector>

#include "muldef/data.hpp"
#include "muldef/format.hpp"
#include "muldef/network.hpp"
#include "muldef/train.hpp"

namespace muldef {

struct FgsmConfig {
    double eps = 0.3;
    double clip_min = 0.0;
    double clip_max = 1.0;
    // More than one iteration takes eps/iterations steps and projects back
    // onto the eps-ball; the attack proper is a single step.
    std::size_t iterations = 1;

    void validate() const;
    friend bool operator==(const FgsmConfig&, const FgsmConfig&) = default;
};

enum class CwOptimizer { gd, adam };

struct CwConfig {
    double confidence = 0.01;
    std::size_t max_iterations = 300;
    double c_init = 1.0;
    std::size_t binary_search_steps = 5;
    double step_size = 0.01;
    double clip_min = 0.0;
    double clip_max = 1.0;
    // Every max_iterations/10 steps, stop an example whose loss has not
    // dropped by 0.01% since the previous check.
    bool abort_early = true;
    std::size_t batch_size = 100;
    // Update rule in tanh space: Adam (beta1 0.9, beta2 0.999, eps 1e-8)
    // with step_size as learning rate, or plain gradient descent. Plain
    // descent stalls on pixels pinned near the box edges, where tanh'
    // vanishes, and leaves some examples unbroken.
    CwOptimizer optimizer = CwOptimizer::adam;

    void validate() const;
    friend bool operator==(const CwConfig&, const CwConfig&) = default;
};

using AttackConfig = std::variant<FgsmConfig, CwConfig>;

/// "fgsm" or "cw".
std::string attack_name(const AttackConfig& attack);
double attack_clip_min(const AttackConfig& attack);
double attack_clip_max(const AttackConfig& attack);
void validate_attack(const AttackConfig& attack);

enum class Scenario { whitebox, blackbox };
std::string scenario_name(Scenario s);
Scenario parse_scenario(const std::string& s);

struct AdversarialSet {
    std::string source_model_id;
    AttackConfig attack;
    Scenario scenario = Scenario::whitebox;
    std::uint64_t seed = 0;
    Shape sample_shape;
    std::size_t num_classes = 0;
    std::vector<Scalar> pixels;         // size() * sample_size, row-major
    std::vector<int> labels;            // labels of the originating normals
    std::vector<std::size_t> origin;    // index of the originating normal
    std::vector<std::uint8_t> failed;   // C&W found no adversarial candidate
    std::vector<std::string> diagnostics;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t sample_size() const { return shape_size(sample_shape); }
    std::size_t failures() const;
    /// Pixels and labels as a Dataset (for training and evaluation).
    Dataset as_dataset(const std::string& name = "adv") const;

    friend bool operator==(const AdversarialSet&, const AdversarialSet&) = default;
};

json attack_to_json(const AttackConfig& attack);
AttackConfig attack_from_json(const json& j);

std::vector<std::uint8_t> save_adversarial_set(const AdversarialSet& set);
AdversarialSet load_adversarial_set(std::span<const std::uint8_t> bytes);
void save_adversarial_set_file(const AdversarialSet& set, const std::filesystem::path& path);
AdversarialSet load_adversarial_set_file(const std::filesystem::path& path);

/// x' = clip(x + eps * sign(grad_x J(x, l)), clip_min, clip_max), sign(0) = 0.
AdversarialSet fgsm(const Classifier& model, const Dataset& normals, const FgsmConfig& cfg);

/// Untargeted Carlini-Wagner L2 with a tanh box and binary search on c.
AdversarialSet cw_l2(const Classifier& model, const Dataset& normals, const CwConfig& cfg);

AdversarialSet run_attack(const Classifier& model, const Dataset& normals, const AttackConfig& attack);

/// Label-only access to a model; counts every labelled input.
class LabelOracle {
public:
    using Fn = std::function<std::vector<int>(const Tensor& batch)>;
    explicit LabelOracle(Fn fn) : fn_(std::move(fn)) {}
    static LabelOracle of(const Classifier& model);

    std::vector<int> operator()(const Tensor& batch) const;
    std::size_t queries() const noexcept { return queries_; }

private:
    Fn fn_;
    mutable std::size_t queries_ = 0;
};

/// S ∪ {clip(x + lambda * sign(grad_x Z(x)[label(x)]))}, new points
/// labelled by the oracle. The labels already stored in `set` are taken as
/// the oracle's answers for its points.
Dataset jacobian_augment(const Network& sub, const Dataset& set, const LabelOracle& oracle, double lambda,
                         double clip_min = 0.0, double clip_max = 1.0);

struct SubstituteConfig {
    std::size_t holdout_size = 150;
    std::size_t augmentation_epochs = 5;
    double lambda = 0.1;
    NetworkSpec substitute_spec;
    TrainConfig train;
    std::uint64_t seed = 0;

    void validate() const;
};

struct BlackboxResult {
    AdversarialSet adv;
    Network substitute;
    std::vector<std::size_t> set_sizes;  // substitute set size per round, holdout first
    std::size_t oracle_queries = 0;
    std::vector<std::size_t> holdout_indices;  // into the holdout pool
};

/// Draws the holdout from `holdout_pool`, grows it by Jacobian augmentation
/// while training a substitute on oracle labels, then runs `attack`
/// white-box against the substitute on `normals`.
BlackboxResult blackbox_attack(const LabelOracle& target, const SubstituteConfig& cfg, const AttackConfig& attack,
                               const Dataset& holdout_pool, const Dataset& normals);

}  // namespace muldef
