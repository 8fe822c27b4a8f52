#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "muldef/attacks.hpp"
#include "muldef/format.hpp"
#include "muldef/muldef.hpp"

namespace muldef {

struct AdvAccuracy {
    double monte_carlo = 0.0;
    std::optional<double> exact;  // defense only: mean of member accuracies
    std::size_t n = 0;            // examples
    std::size_t draws = 1;        // selections per example

    /// Binomial standard error of the Monte-Carlo estimate around `exact`.
    double standard_error() const;
};

/// Fraction of `adv` classified as the label of its originating normal.
AdvAccuracy adversarial_accuracy(const Classifier& clf, const AdversarialSet& adv);
/// Draw indices are derived from `seed`; each example is classified `draws` times.
AdvAccuracy adversarial_accuracy(const MuldefClassifier& clf, const AdversarialSet& adv, std::size_t draws,
                                 std::uint64_t seed);
/// Same measures on clean data.
AdvAccuracy set_accuracy(const MuldefClassifier& clf, const Dataset& set, std::size_t draws, std::uint64_t seed);

/// One CSV row. `classifier` is a member id, "defense" (exact expectation)
/// or "defense_mc"; `adv_source` is the model the set was generated
/// against, "merged", "substitute", or "clean" for the unperturbed set.
struct EvalRow {
    std::string classifier;
    std::string adv_source;
    std::string attack;    // fgsm, cw, none
    std::string scenario;  // whitebox, blackbox, clean
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    std::size_t n = 0;
    friend bool operator==(const EvalRow&, const EvalRow&) = default;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    json config = json::object();  // everything needed to replay
    std::vector<std::pair<std::string, double>> timings;  // seconds; kept out of the deterministic files

    void append(const EvalReport& other);
    /// Accuracy of the first row matching all given fields; throws if absent.
    double find(std::string_view classifier, std::string_view adv_source, std::string_view scenario) const;
    /// Minimum over adversarial sources of `classifier` in `scenario`.
    double min_over_sets(std::string_view classifier, std::string_view scenario) const;
    /// Checks the accuracy range invariant; throws Error.
    void check() const;
};

/// Test accuracy of every member and of the defense (exact and Monte Carlo).
EvalReport clean_eval(const MuldefClassifier& defense, const Dataset& test_set, std::size_t draws,
                      std::uint64_t seed);

/// Indirect attack: one adversarial set per member, then every member and
/// the defense on every set. `sets_out` receives the generated sets.
EvalReport indirect_attack_eval(const MuldefClassifier& defense, const AttackConfig& attack, const Dataset& test_set,
                                std::size_t draws, std::uint64_t seed,
                                std::vector<AdversarialSet>* sets_out = nullptr);

/// Direct attack: C&W against the merged model; the defense and each member
/// are then measured on that set. FGSM is rejected.
EvalReport direct_attack_eval(const MuldefClassifier& defense, const CwConfig& cw, const Dataset& test_set,
                              std::size_t draws, std::uint64_t seed,
                              MergeRule rule = MergeRule::mean_probabilities);

/// A family built against one attack, measured under another (indirect,
/// plus direct when the second attack is C&W).
EvalReport cross_attack_eval(const MuldefClassifier& defense, const AttackConfig& attacked_by,
                             const Dataset& test_set, std::size_t draws, std::uint64_t seed,
                             MergeRule rule = MergeRule::mean_probabilities);

struct BlackboxEval {
    EvalReport report;
    std::vector<std::size_t> set_sizes;  // substitute training set per round
    std::size_t oracle_queries = 0;
};

/// Substitute attack with `target` as label oracle; the target's accuracy
/// on the transferred set is reported under classifier `target.id()`.
BlackboxEval blackbox_eval(const Network& target, const SubstituteConfig& sub, const AttackConfig& attack,
                           const Dataset& holdout_pool, const Dataset& test_set, std::uint64_t seed);
/// Same with the randomized defense as oracle and as the evaluated model.
BlackboxEval blackbox_eval(const MuldefClassifier& defense, const SubstituteConfig& sub, const AttackConfig& attack,
                           const Dataset& holdout_pool, const Dataset& test_set, std::size_t draws,
                           std::uint64_t seed);

struct AugmentationPoint {
    double fraction = 0.0;
    double retrained_self_accuracy = 0.0;  // (a) retrained T on its own new adversarial set
    double separate_model_accuracy = 0.0;  // (b) fresh D on an independent Adv_T
};

/// For each fraction: (a) retrain T from its own initialization on
/// train ∪ Adv_T' and attack it again; (b) train a fresh model D on the
/// same augmented set and measure it on Adv_T built from `test_set`.
std::vector<AugmentationPoint> sweep_augmentation(const Network& target, std::uint64_t target_init_seed,
                                                  const Dataset& train_set, const Dataset& test_set,
                                                  const AttackConfig& attack, const TrainConfig& train_cfg,
                                                  std::span<const double> fractions, std::uint64_t seed,
                                                  const ProgressFn& progress = {});

struct FamilySizePoint {
    std::size_t size = 0;                 // models in the family, p + 1
    double min_indirect = 0.0;            // min over member sets of the defense expectation
    std::optional<double> direct;         // C&W only, when requested
};

/// Builds one family of the largest size and evaluates its prefixes; the
/// per-member adversarial test sets do not depend on family size.
std::vector<FamilySizePoint> sweep_family_size(const Network& seed, const Dataset& train_set,
                                               const Dataset& test_set, const GeneratorConfig& generator,
                                               std::span<const std::size_t> sizes, bool with_direct,
                                               std::uint64_t seed_value, const ProgressFn& progress = {});

/// Shortest round-trip decimal.
std::string format_double(double v);

inline constexpr std::string_view kCsvHeader = "classifier,adv_source,attack,scenario,seed,accuracy,n";
std::string to_csv(const std::vector<EvalRow>& rows);
std::vector<EvalRow> parse_csv(std::string_view text);

/// Writes summary.txt, config.json and results.csv (deterministic under
/// fixed seeds) plus timings.log under `dir`.
void emit_report(const EvalReport& report, const std::filesystem::path& dir);

/// 64-bit FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_digest(const json& j);

}  // namespace muldef
