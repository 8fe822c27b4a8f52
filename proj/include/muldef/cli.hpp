#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "muldef/eval.hpp"

namespace muldef::cli {

enum class Scale { desk, full };
std::string scale_name(Scale s);
Scale parse_scale(const std::string& s);

struct DatasetConfig {
    std::string source = "mnist";  // mnist, cifar10 or blobs
    std::filesystem::path dir;     // empty: $MULDEF_DATA_DIR
    std::size_t train_size = 12000;  // 0 keeps the whole split
    std::size_t test_size = 2000;
    std::size_t blob_dim = 16;       // blobs only
    std::uint64_t seed = 0;
};

struct EvalPlan {
    bool clean = true;
    bool indirect = true;
    bool direct = false;    // C&W only
    bool blackbox = false;
    std::vector<AttackConfig> cross;
    std::optional<AttackConfig> blackbox_attack;  // defaults to the main attack
    std::size_t draws = 10;
    std::size_t max_examples = 0;  // evaluation subset of the test split; 0 = all
    MergeRule merge_rule = MergeRule::mean_probabilities;
    std::string substitute_architecture = "mnist-mlp";
    SubstituteConfig substitute;  // spec filled from substitute_architecture
    std::vector<double> augmentation_sweep;
    std::vector<std::size_t> family_size_sweep;
    std::uint64_t selection_seed = 0;
    std::uint64_t seed = 0;
};

struct ExperimentConfig {
    std::string preset;  // informational; empty for hand-written configs
    Scale scale = Scale::desk;
    DatasetConfig dataset;
    std::string architecture = "mnist-desk";  // "inline" when given as a layer list
    NetworkSpec spec;
    TrainConfig train;
    std::uint64_t init_seed = 0;
    AttackConfig attack = FgsmConfig{};
    GeneratorConfig generator;  // attack and train mirror the fields above
    EvalPlan eval;
    std::size_t repeats = 3;
    std::uint64_t seed = 0;  // master seed every other seed derives from

    /// Throws ConfigError naming the first bad field.
    void validate() const;
};

std::vector<std::string> preset_names();
/// Throws ConfigError for unknown names.
ExperimentConfig preset_config(const std::string& name, Scale scale);

/// Defaults (or the named `preset:`) overlaid with the YAML document.
/// Unset seeds derive from the master seed. Errors carry the YAML line.
ExperimentConfig parse_config(std::string_view yaml, Scale scale);
ExperimentConfig load_config(const std::filesystem::path& path, Scale scale);

/// Sets the master seed and rederives every component seed from it.
void override_seed(ExperimentConfig& cfg, std::uint64_t seed);
/// Seeds of repeat r: unchanged for r = 0, derive_seed(s, r) otherwise.
ExperimentConfig for_repeat(const ExperimentConfig& cfg, std::size_t r);

/// Everything needed to replay, with defaults materialized. No output paths.
json config_to_json(const ExperimentConfig& cfg);

struct Splits {
    Dataset train;
    Dataset test;
};
Splits load_splits(const DatasetConfig& d);

using Log = ProgressFn;

/// Writes model_T.bin and train_report.json under `out`; returns the model path.
std::filesystem::path cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out, const Log& log = {});
/// Attacks the model on the evaluation subset; returns the adversarial-set path.
std::filesystem::path cmd_attack(const ExperimentConfig& cfg, const std::filesystem::path& model,
                                 const std::filesystem::path& out, const Log& log = {});
/// Builds the family from a trained target; returns the family directory.
std::filesystem::path cmd_defend(const ExperimentConfig& cfg, const std::filesystem::path& model,
                                 const std::filesystem::path& out, const Log& log = {});
/// Runs the evaluation plan and emits the report under `out`.
EvalReport cmd_eval(const ExperimentConfig& cfg, const std::filesystem::path& family_dir,
                    const std::filesystem::path& out, const Log& log = {});
/// train, defend and eval for every repeat under out/repeat_<r>, plus a
/// combined report in `out`.
EvalReport cmd_repro(const ExperimentConfig& cfg, const std::filesystem::path& out, const Log& log = {});

/// Full command line; returns the process exit status.
int run(int argc, char** argv);

}  // namespace muldef::cli
