#include "muldef/cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <yaml-cpp/yaml.h>

#include "muldef/arch.hpp"
#include "muldef/error.hpp"
#include "muldef/rng.hpp"
#include "muldef/runtime.hpp"

namespace muldef::cli {

namespace {

// Seed streams under the master seed.
enum SeedStream : std::uint64_t { kDataset = 1, kInit, kTrain, kGenerator, kSelection, kEval, kSubstitute };

// Re-raises a ConfigError from a component validator under the field name
// the config file uses.
template <class F>
void renamed(F&& f, std::initializer_list<std::string_view> from, const std::string& to) {
    try {
        f();
    } catch (const ConfigError& e) {
        std::string field = e.field();
        for (auto p : from)
            if (field.rfind(p, 0) == 0) {
                field = to + field.substr(p.size());
                break;
            }
        const std::string prefix = "config: " + e.field() + ": ";
        std::string msg = e.what();
        if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
        throw ConfigError(field, msg);
    }
}

Shape dataset_shape(const DatasetConfig& d) {
    if (d.source == "mnist") return {1, 28, 28};
    if (d.source == "cifar10") return {3, 32, 32};
    return {d.blob_dim};
}

void sync(ExperimentConfig& cfg) {
    cfg.generator.attack = cfg.attack;
    cfg.generator.train = cfg.train;
}

}  // namespace

std::string scale_name(Scale s) { return s == Scale::desk ? "desk" : "full"; }

Scale parse_scale(const std::string& s) {
    if (s == "desk") return Scale::desk;
    if (s == "full") return Scale::full;
    throw ConfigError("scale", "unknown scale '" + s + "' (expected desk or full)");
}

void ExperimentConfig::validate() const {
    static const std::set<std::string> sources{"mnist", "cifar10", "blobs"};
    if (!sources.count(dataset.source))
        throw ConfigError("dataset.source", "unknown source '" + dataset.source + "' (expected mnist, cifar10 or blobs)");
    if (dataset.source == "blobs" && (dataset.blob_dim == 0 || dataset.train_size < 10 || dataset.test_size < 10))
        throw ConfigError("dataset", "blobs need blob_dim >= 1 and at least 10 train and test samples");
    if (repeats == 0) throw ConfigError("repeats", "must be at least 1");
    try {
        spec.validate();
    } catch (const ShapeError& e) {
        throw ConfigError("architecture", e.what());
    }
    if (spec.input_shape != dataset_shape(dataset))
        throw ConfigError("architecture", "expects input " + shape_str(spec.input_shape) + " but " + dataset.source +
                                              " samples are " + shape_str(dataset_shape(dataset)));
    renamed([&] { train.validate(); }, {"train."}, "train.");
    renamed([&] { validate_attack(attack); }, {"fgsm.", "cw."}, "attack.");
    std::size_t train_size = dataset.train_size;
    if (train_size == 0) train_size = dataset.source == "cifar10" ? 50000 : 60000;
    renamed([&] { generator.validate(train_size); }, {"generator."}, "generator.");
    if (eval.draws == 0) throw ConfigError("eval.draws", "must be at least 1");
    if (eval.direct && !std::holds_alternative<CwConfig>(attack))
        throw ConfigError("eval.direct", "the direct attack needs a cw attack");
    for (std::size_t i = 0; i < eval.cross.size(); ++i)
        renamed([&] { validate_attack(eval.cross[i]); }, {"fgsm.", "cw."}, "eval.cross[" + std::to_string(i) + "].");
    if (eval.blackbox_attack)
        renamed([&] { validate_attack(*eval.blackbox_attack); }, {"fgsm.", "cw."}, "eval.blackbox_attack.");
    if (eval.blackbox) {
        renamed([&] { eval.substitute.validate(); }, {"substitute."}, "eval.substitute.");
        renamed([&] { eval.substitute.train.validate(); }, {"train."}, "eval.substitute.train.");
        if (eval.substitute.substitute_spec.input_shape != spec.input_shape)
            throw ConfigError("eval.substitute.architecture", "input shape differs from the target's");
    }
    for (double f : eval.augmentation_sweep)
        if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("eval.sweeps.augmentation", "fractions must be in [0,1]");
    for (std::size_t s : eval.family_size_sweep)
        if (s == 0) throw ConfigError("eval.sweeps.family_size", "sizes must be at least 1");
}

std::vector<std::string> preset_names() {
    return {"mnist-fgsm-wb", "mnist-cw-wb", "cifar-fgsm-wb", "cifar-cw-wb", "mnist-fgsm-bb", "mnist-cw-bb"};
}

ExperimentConfig preset_config(const std::string& name, Scale scale) {
    const auto names = preset_names();
    if (std::find(names.begin(), names.end(), name) == names.end()) {
        std::string list;
        for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
        throw ConfigError("preset", "unknown preset '" + name + "' (known: " + list + ")");
    }
    const bool cifar = name.rfind("cifar", 0) == 0;
    const bool cw = name.find("-cw-") != std::string::npos;
    const bool bb = name.size() > 3 && name.substr(name.size() - 3) == "-bb";
    const bool desk = scale == Scale::desk;

    ExperimentConfig cfg;
    cfg.preset = name;
    cfg.scale = scale;
    cfg.dataset.source = cifar ? "cifar10" : "mnist";
    cfg.dataset.train_size = desk ? (cifar ? 10000 : 12000) : 0;
    cfg.dataset.test_size = desk ? 2000 : 0;
    cfg.architecture = cifar ? "cifar-full" : (desk ? "mnist-desk" : "mnist-full");
    cfg.spec = named_architecture(cfg.architecture);
    cfg.train.max_epochs = cifar ? 50 : 10;
    if (cw) {
        CwConfig c;
        c.confidence = 0.01;
        c.max_iterations = cifar ? 100 : 300;
        cfg.attack = c;
    } else {
        FgsmConfig f;
        f.eps = cifar ? 0.05 : 0.3;
        cfg.attack = f;
    }
    cfg.generator.num_additional = 4;
    cfg.generator.solution = Solution::solution2;
    cfg.generator.aug_fraction = cifar ? 0.25 : 0.15;
    cfg.eval.direct = cw && !bb;
    cfg.eval.indirect = !bb;
    cfg.eval.blackbox = bb;
    if (bb && cw) {
        CwConfig c = std::get<CwConfig>(cfg.attack);
        c.confidence = cifar ? 30.0 : 10.0;
        cfg.eval.blackbox_attack = c;
    }
    cfg.eval.substitute_architecture = cifar ? "cifar-mlp" : "mnist-mlp";
    cfg.eval.substitute.substitute_spec = named_architecture(cfg.eval.substitute_architecture);
    // C&W costs tens of milliseconds per example on a laptop core.
    cfg.eval.max_examples = desk && cw ? 500 : 0;
    override_seed(cfg, 0);
    sync(cfg);
    return cfg;
}

void override_seed(ExperimentConfig& cfg, std::uint64_t seed) {
    cfg.seed = seed;
    cfg.dataset.seed = derive_seed(seed, kDataset);
    cfg.init_seed = derive_seed(seed, kInit);
    cfg.train.rng_seed = derive_seed(seed, kTrain);
    cfg.generator.rng_seed = derive_seed(seed, kGenerator);
    cfg.eval.selection_seed = derive_seed(seed, kSelection);
    cfg.eval.seed = derive_seed(seed, kEval);
    cfg.eval.substitute.seed = derive_seed(seed, kSubstitute);
    sync(cfg);
}

ExperimentConfig for_repeat(const ExperimentConfig& cfg, std::size_t r) {
    ExperimentConfig c = cfg;
    if (r == 0) return c;
    // The corpus stays fixed; models, draws and samples vary.
    for (std::uint64_t* s : {&c.seed, &c.init_seed, &c.train.rng_seed, &c.generator.rng_seed, &c.eval.selection_seed,
                             &c.eval.seed, &c.eval.substitute.seed})
        *s = derive_seed(*s, r);
    sync(c);
    return c;
}

json config_to_json(const ExperimentConfig& cfg) {
    json cross = json::array();
    for (const auto& a : cfg.eval.cross) cross.push_back(attack_to_json(a));
    return {{"preset", cfg.preset},
            {"scale", scale_name(cfg.scale)},
            {"seed", cfg.seed},
            {"repeats", cfg.repeats},
            {"dataset",
             {{"source", cfg.dataset.source},
              {"dir", cfg.dataset.dir.string()},
              {"train_size", cfg.dataset.train_size},
              {"test_size", cfg.dataset.test_size},
              {"blob_dim", cfg.dataset.blob_dim},
              {"seed", cfg.dataset.seed}}},
            {"architecture", cfg.architecture},
            {"spec", spec_to_json(cfg.spec)},
            {"train", train_config_to_json(cfg.train)},
            {"init_seed", cfg.init_seed},
            {"attack", attack_to_json(cfg.attack)},
            {"generator", generator_to_json(cfg.generator)},
            {"eval",
             {{"clean", cfg.eval.clean},
              {"indirect", cfg.eval.indirect},
              {"direct", cfg.eval.direct},
              {"blackbox", cfg.eval.blackbox},
              {"cross", cross},
              {"blackbox_attack", cfg.eval.blackbox_attack ? attack_to_json(*cfg.eval.blackbox_attack) : json()},
              {"draws", cfg.eval.draws},
              {"max_examples", cfg.eval.max_examples},
              {"merge_rule", merge_rule_name(cfg.eval.merge_rule)},
              {"substitute",
               {{"architecture", cfg.eval.substitute_architecture},
                {"holdout_size", cfg.eval.substitute.holdout_size},
                {"augmentation_epochs", cfg.eval.substitute.augmentation_epochs},
                {"lambda", cfg.eval.substitute.lambda},
                {"seed", cfg.eval.substitute.seed},
                {"train", train_config_to_json(cfg.eval.substitute.train)}}},
              {"sweeps", {{"augmentation", cfg.eval.augmentation_sweep}, {"family_size", cfg.eval.family_size_sweep}}},
              {"selection_seed", cfg.eval.selection_seed},
              {"seed", cfg.eval.seed}}}};
}

// ---------------------------------------------------------------------------
// YAML

namespace {

int line_of(const YAML::Node& n) {
    const auto m = n.Mark();
    return m.is_null() ? 0 : m.line + 1;
}

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

class Reader {
public:
    std::map<std::string, int> lines;
    std::set<std::string> seeds_given;

    void keys(const YAML::Node& map, const std::string& path, std::initializer_list<std::string_view> allowed) {
        if (!map.IsMap()) throw ConfigError(path.empty() ? "document" : path, "expected a mapping", line_of(map));
        for (const auto& kv : map) {
            const auto key = kv.first.as<std::string>();
            if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
                throw ConfigError(join(path, key), "unknown key", line_of(kv.first));
            lines[join(path, key)] = line_of(kv.second);
        }
    }

    template <class T>
    bool get(const YAML::Node& map, const char* key, const std::string& path, T& out) {
        const YAML::Node n = map[key];
        if (!n) return false;
        const std::string field = join(path, key);
        if (!n.IsScalar()) throw ConfigError(field, "expected a scalar", line_of(n));
        if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
            if (!n.Scalar().empty() && n.Scalar()[0] == '-')
                throw ConfigError(field, "must be a nonnegative integer", line_of(n));
        }
        try {
            out = n.as<T>();
        } catch (const YAML::Exception&) {
            throw ConfigError(field, "cannot read '" + n.Scalar() + "' as " + type_name<T>(), line_of(n));
        }
        return true;
    }

    void seed(const YAML::Node& map, const char* key, const std::string& path, std::uint64_t& out) {
        if (get(map, key, path, out)) seeds_given.insert(join(path, key));
    }

    template <class T>
    void list(const YAML::Node& map, const char* key, const std::string& path, std::vector<T>& out) {
        const YAML::Node n = map[key];
        if (!n) return;
        const std::string field = join(path, key);
        if (!n.IsSequence()) throw ConfigError(field, "expected a list", line_of(n));
        out.clear();
        for (std::size_t i = 0; i < n.size(); ++i) {
            if constexpr (std::is_unsigned_v<T>) {
                if (!n[i].Scalar().empty() && n[i].Scalar()[0] == '-')
                    throw ConfigError(field, "entries must be nonnegative", line_of(n[i]));
            }
            try {
                out.push_back(n[i].as<T>());
            } catch (const YAML::Exception&) {
                throw ConfigError(field, "cannot read entry " + std::to_string(i) + " as " + type_name<T>(),
                                  line_of(n[i]));
            }
        }
    }

    void train(const YAML::Node& n, const std::string& path, TrainConfig& t, bool seed_allowed) {
        keys(n, path,
             {"optimizer", "learning_rate", "beta1", "beta2", "epsilon", "batch_size", "max_epochs",
              "early_stop_min_delta", "early_stop_patience", "validation_fraction", "seed"});
        std::string opt;
        if (get(n, "optimizer", path, opt)) {
            if (opt == "adam")
                t.optimizer.kind = OptimizerKind::adam;
            else if (opt == "sgd")
                t.optimizer.kind = OptimizerKind::sgd;
            else
                throw ConfigError(join(path, "optimizer"), "expected adam or sgd", line_of(n["optimizer"]));
        }
        get(n, "learning_rate", path, t.optimizer.learning_rate);
        get(n, "beta1", path, t.optimizer.beta1);
        get(n, "beta2", path, t.optimizer.beta2);
        get(n, "epsilon", path, t.optimizer.epsilon);
        get(n, "batch_size", path, t.batch_size);
        get(n, "max_epochs", path, t.max_epochs);
        get(n, "early_stop_min_delta", path, t.early_stop_min_delta);
        get(n, "early_stop_patience", path, t.early_stop_patience);
        get(n, "validation_fraction", path, t.validation_fraction);
        if (n["seed"] && !seed_allowed)
            throw ConfigError(join(path, "seed"), "per-round seeds derive from the substitute seed", line_of(n["seed"]));
        seed(n, "seed", path, t.rng_seed);
    }

    AttackConfig attack(const YAML::Node& n, const std::string& path, const AttackConfig& base) {
        if (!n.IsMap()) throw ConfigError(path, "expected a mapping", line_of(n));
        std::string kind = attack_name(base);
        get(n, "kind", path, kind);
        if (kind == "fgsm") {
            keys(n, path, {"kind", "eps", "clip_min", "clip_max", "iterations"});
            FgsmConfig f = std::holds_alternative<FgsmConfig>(base) ? std::get<FgsmConfig>(base) : FgsmConfig{};
            get(n, "eps", path, f.eps);
            get(n, "clip_min", path, f.clip_min);
            get(n, "clip_max", path, f.clip_max);
            get(n, "iterations", path, f.iterations);
            return f;
        }
        if (kind == "cw") {
            keys(n, path,
                 {"kind", "confidence", "max_iterations", "c_init", "binary_search_steps", "step_size", "clip_min",
                  "clip_max", "abort_early", "batch_size", "optimizer"});
            CwConfig c = std::holds_alternative<CwConfig>(base) ? std::get<CwConfig>(base) : CwConfig{};
            get(n, "confidence", path, c.confidence);
            get(n, "max_iterations", path, c.max_iterations);
            get(n, "c_init", path, c.c_init);
            get(n, "binary_search_steps", path, c.binary_search_steps);
            get(n, "step_size", path, c.step_size);
            get(n, "clip_min", path, c.clip_min);
            get(n, "clip_max", path, c.clip_max);
            get(n, "abort_early", path, c.abort_early);
            get(n, "batch_size", path, c.batch_size);
            std::string opt;
            if (get(n, "optimizer", path, opt)) {
                if (opt == "adam")
                    c.optimizer = CwOptimizer::adam;
                else if (opt == "gd")
                    c.optimizer = CwOptimizer::gd;
                else
                    throw ConfigError(join(path, "optimizer"), "expected adam or gd", line_of(n["optimizer"]));
            }
            return c;
        }
        throw ConfigError(join(path, "kind"), "unknown attack '" + kind + "' (expected fgsm or cw)",
                          line_of(n["kind"] ? n["kind"] : n));
    }

    NetworkSpec architecture(const YAML::Node& n, const std::string& path, std::string& name) {
        if (n.IsScalar()) {
            name = n.Scalar();
            try {
                return named_architecture(name);
            } catch (const ArgumentError& e) {
                throw ConfigError(path, e.what(), line_of(n));
            }
        }
        if (!n.IsMap()) throw ConfigError(path, "expected a name or {input_shape, layers}", line_of(n));
        name = "inline";
        try {
            return spec_from_json(to_json(n));
        } catch (const Error& e) {
            throw ConfigError(path, e.what(), line_of(n));
        }
    }

private:
    template <class T>
    static std::string type_name() {
        if constexpr (std::is_same_v<T, bool>) return "true/false";
        else if constexpr (std::is_same_v<T, std::string>) return "text";
        else if constexpr (std::is_floating_point_v<T>) return "a number";
        else return "an integer";
    }

    static json to_json(const YAML::Node& n) {
        if (n.IsMap()) {
            json j = json::object();
            for (const auto& kv : n) j[kv.first.as<std::string>()] = to_json(kv.second);
            return j;
        }
        if (n.IsSequence()) {
            json j = json::array();
            for (const auto& v : n) j.push_back(to_json(v));
            return j;
        }
        if (n.IsNull()) return nullptr;
        const std::string& s = n.Scalar();
        if (n.Tag() != "!") {  // unquoted: try numbers and booleans
            std::uint64_t u;
            double d;
            bool b;
            if (YAML::convert<std::uint64_t>::decode(n, u) && s.find_first_of(".eE") == std::string::npos) return u;
            if (YAML::convert<double>::decode(n, d)) return d;
            if (YAML::convert<bool>::decode(n, b)) return b;
        }
        return s;
    }
};

}  // namespace

ExperimentConfig parse_config(std::string_view text, Scale scale) {
    YAML::Node doc;
    try {
        doc = YAML::Load(std::string(text));
    } catch (const YAML::ParserException& e) {
        throw ConfigError("document", e.msg, e.mark.line + 1);
    }
    if (!doc || doc.IsNull()) doc = YAML::Node(YAML::NodeType::Map);

    Reader r;
    r.keys(doc, "", {"preset", "seed", "repeats", "dataset", "architecture", "train", "init_seed", "attack", "generator", "eval"});

    ExperimentConfig cfg;
    std::string preset;
    if (r.get(doc, "preset", "", preset)) {
        try {
            cfg = preset_config(preset, scale);
        } catch (const ConfigError& e) {
            throw ConfigError("preset", "unknown preset '" + preset + "'", line_of(doc["preset"]));
        }
    } else {
        cfg.scale = scale;
        cfg.spec = named_architecture(cfg.architecture);
        cfg.eval.substitute.substitute_spec = named_architecture(cfg.eval.substitute_architecture);
    }
    r.get(doc, "seed", "", cfg.seed);
    r.get(doc, "repeats", "", cfg.repeats);

    if (const auto d = doc["dataset"]) {
        r.keys(d, "dataset", {"source", "dir", "train_size", "test_size", "blob_dim", "seed"});
        r.get(d, "source", "dataset", cfg.dataset.source);
        std::string dir;
        if (r.get(d, "dir", "dataset", dir)) cfg.dataset.dir = dir;
        r.get(d, "train_size", "dataset", cfg.dataset.train_size);
        r.get(d, "test_size", "dataset", cfg.dataset.test_size);
        r.get(d, "blob_dim", "dataset", cfg.dataset.blob_dim);
        r.seed(d, "seed", "dataset", cfg.dataset.seed);
    }
    if (const auto a = doc["architecture"]) cfg.spec = r.architecture(a, "architecture", cfg.architecture);
    if (const auto t = doc["train"]) r.train(t, "train", cfg.train, true);
    r.seed(doc, "init_seed", "", cfg.init_seed);
    if (const auto a = doc["attack"]) cfg.attack = r.attack(a, "attack", cfg.attack);

    if (const auto g = doc["generator"]) {
        r.keys(g, "generator", {"num_additional", "solution", "aug_fraction", "seed", "warm_start", "convergence_stop"});
        r.get(g, "num_additional", "generator", cfg.generator.num_additional);
        std::string sol;
        if (r.get(g, "solution", "generator", sol)) {
            try {
                cfg.generator.solution = parse_solution(sol);
            } catch (const ArgumentError& e) {
                throw ConfigError("generator.solution", e.what(), line_of(g["solution"]));
            }
        }
        r.get(g, "aug_fraction", "generator", cfg.generator.aug_fraction);
        r.seed(g, "seed", "generator", cfg.generator.rng_seed);
        r.get(g, "warm_start", "generator", cfg.generator.warm_start);
        if (const auto c = g["convergence_stop"]) {
            r.keys(c, "generator.convergence_stop", {"enabled", "min_delta"});
            r.get(c, "enabled", "generator.convergence_stop", cfg.generator.convergence_stop.enabled);
            r.get(c, "min_delta", "generator.convergence_stop", cfg.generator.convergence_stop.min_delta);
        }
    }

    if (const auto e = doc["eval"]) {
        auto& ev = cfg.eval;
        r.keys(e, "eval",
               {"clean", "indirect", "direct", "blackbox", "cross", "blackbox_attack", "draws", "max_examples",
                "merge_rule", "substitute", "sweeps", "selection_seed", "seed"});
        r.get(e, "clean", "eval", ev.clean);
        r.get(e, "indirect", "eval", ev.indirect);
        r.get(e, "direct", "eval", ev.direct);
        r.get(e, "blackbox", "eval", ev.blackbox);
        if (const auto c = e["cross"]) {
            if (!c.IsSequence()) throw ConfigError("eval.cross", "expected a list of attacks", line_of(c));
            ev.cross.clear();
            for (std::size_t i = 0; i < c.size(); ++i)
                ev.cross.push_back(r.attack(c[i], "eval.cross[" + std::to_string(i) + "]", FgsmConfig{}));
        }
        if (const auto b = e["blackbox_attack"])
            ev.blackbox_attack = r.attack(b, "eval.blackbox_attack", ev.blackbox_attack.value_or(cfg.attack));
        r.get(e, "draws", "eval", ev.draws);
        r.get(e, "max_examples", "eval", ev.max_examples);
        std::string rule;
        if (r.get(e, "merge_rule", "eval", rule)) {
            try {
                ev.merge_rule = parse_merge_rule(rule);
            } catch (const ArgumentError& x) {
                throw ConfigError("eval.merge_rule", x.what(), line_of(e["merge_rule"]));
            }
        }
        if (const auto s = e["substitute"]) {
            const std::string p = "eval.substitute";
            r.keys(s, p, {"architecture", "holdout_size", "augmentation_epochs", "lambda", "seed", "train"});
            if (const auto a = s["architecture"])
                ev.substitute.substitute_spec = r.architecture(a, p + ".architecture", ev.substitute_architecture);
            r.get(s, "holdout_size", p, ev.substitute.holdout_size);
            r.get(s, "augmentation_epochs", p, ev.substitute.augmentation_epochs);
            r.get(s, "lambda", p, ev.substitute.lambda);
            r.seed(s, "seed", p, ev.substitute.seed);
            if (const auto t = s["train"]) r.train(t, p + ".train", ev.substitute.train, false);
        }
        if (const auto s = e["sweeps"]) {
            r.keys(s, "eval.sweeps", {"augmentation", "family_size"});
            r.list(s, "augmentation", "eval.sweeps", ev.augmentation_sweep);
            r.list(s, "family_size", "eval.sweeps", ev.family_size_sweep);
        }
        r.seed(e, "selection_seed", "eval", ev.selection_seed);
        r.seed(e, "seed", "eval", ev.seed);
    }

    // Materialize every seed the document left out.
    const auto fill = [&](const char* path, std::uint64_t& s, SeedStream stream) {
        if (!r.seeds_given.count(path)) s = derive_seed(cfg.seed, stream);
    };
    fill("dataset.seed", cfg.dataset.seed, kDataset);
    fill("init_seed", cfg.init_seed, kInit);
    fill("train.seed", cfg.train.rng_seed, kTrain);
    fill("generator.seed", cfg.generator.rng_seed, kGenerator);
    fill("eval.selection_seed", cfg.eval.selection_seed, kSelection);
    fill("eval.seed", cfg.eval.seed, kEval);
    fill("eval.substitute.seed", cfg.eval.substitute.seed, kSubstitute);
    sync(cfg);

    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        // Longest recorded prefix of the field gives the line.
        std::string field = e.field();
        int line = 0;
        for (std::string p = field; !p.empty();) {
            if (auto it = r.lines.find(p); it != r.lines.end()) {
                line = it->second;
                break;
            }
            const auto cut = p.find_last_of(".[");
            p = cut == std::string::npos ? std::string() : p.substr(0, cut);
        }
        const std::string prefix = "config: " + field + ": ";
        std::string msg = e.what();
        if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
        throw ConfigError(field, msg, line);
    }
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path, Scale scale) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), scale);
}

// ---------------------------------------------------------------------------
// Commands

Splits load_splits(const DatasetConfig& d) {
    Splits s;
    if (d.source == "blobs") {
        const std::size_t total = d.train_size + d.test_size;
        const auto all = synth_blobs(10, (total + 9) / 10, d.blob_dim, 0.15, d.seed);
        auto [tr, te] = split_validation(all, static_cast<double>(d.test_size) / static_cast<double>(all.size()),
                                         derive_seed(d.seed, 1));
        s.train = tr.with_name("blobs-train", Split::train);
        s.test = te.with_name("blobs-test", Split::test);
    } else {
        std::filesystem::path dir = d.dir;
        if (dir.empty()) {
            const char* env = std::getenv("MULDEF_DATA_DIR");
            if (!env || !*env) throw ConfigError("dataset.dir", "not set and MULDEF_DATA_DIR is unset");
            dir = env;
        }
        if (std::filesystem::is_directory(dir / d.source)) dir /= d.source;
        if (d.source == "mnist") {
            s.train = load_mnist(dir, Split::train);
            s.test = load_mnist(dir, Split::test);
        } else {
            if (std::filesystem::is_directory(dir / "cifar-10-batches-bin")) dir /= "cifar-10-batches-bin";
            std::vector<std::filesystem::path> train_files;
            for (int i = 1; i <= 5; ++i) train_files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
            const std::filesystem::path test_files[] = {dir / "test_batch.bin"};
            s.train = load_cifar_binary(train_files, "cifar10-train", Split::train);
            s.test = load_cifar_binary(test_files, "cifar10-test", Split::test);
        }
        if (d.train_size > 0 && d.train_size < s.train.size())
            s.train = sample_subset(s.train, d.train_size, derive_seed(d.seed, 1));
        if (d.test_size > 0 && d.test_size < s.test.size())
            s.test = sample_subset(s.test, d.test_size, derive_seed(d.seed, 2));
    }
    return s;
}

namespace {

Dataset evaluation_subset(const ExperimentConfig& cfg, const Dataset& test) {
    if (cfg.eval.max_examples == 0 || cfg.eval.max_examples >= test.size()) return test;
    return sample_subset(test, cfg.eval.max_examples, derive_seed(cfg.dataset.seed, 3));
}

void say(const Log& log, const std::string& msg) {
    if (log) log(msg);
}

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
    return buf;
}

}  // namespace

std::filesystem::path cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out, const Log& log) {
    const Splits s = load_splits(cfg.dataset);
    Network net = Network::initialized(cfg.spec, "T", cfg.init_seed);
    const auto report = train(net, s.train, cfg.train);
    const double acc = accuracy(net, s.test);
    say(log, "trained T: " + std::to_string(report.epochs_run) + " epochs (" + stop_reason_name(report.stop_reason) +
                 "), test accuracy " + pct(acc));
    std::filesystem::create_directories(out);
    const auto path = out / "model_T.bin";
    save_network_file(net, path);
    json r = {{"epochs_run", report.epochs_run},
              {"stop_reason", stop_reason_name(report.stop_reason)},
              {"train_losses", report.train_losses},
              {"val_losses", report.val_losses},
              {"test_accuracy", acc},
              {"train_size", s.train.size()},
              {"test_size", s.test.size()}};
    write_text(out / "train_report.json", r.dump(2) + "\n");
    return path;
}

std::filesystem::path cmd_attack(const ExperimentConfig& cfg, const std::filesystem::path& model,
                                 const std::filesystem::path& out, const Log& log) {
    const Network net = load_network_file(model);
    const Splits s = load_splits(cfg.dataset);
    const Dataset normals = evaluation_subset(cfg, s.test);
    const AdversarialSet adv = run_attack(net, normals, cfg.attack);
    say(log, attack_name(cfg.attack) + " against " + net.id() + ": adversarial accuracy " +
                 pct(adversarial_accuracy(net, adv).monte_carlo) + " on " + std::to_string(adv.size()) + " examples");
    std::filesystem::create_directories(out);
    const auto path = out / ("adv_" + net.id() + ".bin");
    save_adversarial_set_file(adv, path);
    return path;
}

std::filesystem::path cmd_defend(const ExperimentConfig& cfg, const std::filesystem::path& model,
                                 const std::filesystem::path& out, const Log& log) {
    const Network seed = load_network_file(model);
    if (seed.spec() != cfg.spec) throw ConfigError("architecture", "does not match the model in " + model.string());
    const Splits s = load_splits(cfg.dataset);
    const auto dir = out / "family";
    try {
        const ModelFamily fam = generate_family(seed, s.train, cfg.generator, log);
        save_family(fam, dir);
    } catch (const GenerationError& e) {
        save_family(e.partial(), out / "family.partial");
        throw;
    }
    return dir;
}

EvalReport cmd_eval(const ExperimentConfig& cfg, const std::filesystem::path& family_dir,
                    const std::filesystem::path& out, const Log& log) {
    const ModelFamily fam = load_family(family_dir);
    const Splits s = load_splits(cfg.dataset);
    const Dataset evalset = evaluation_subset(cfg, s.test);
    const MuldefClassifier clf(fam, cfg.eval.selection_seed);
    const auto& ev = cfg.eval;
    const std::uint64_t seed = ev.seed;

    EvalReport report;
    if (ev.clean) report.append(clean_eval(clf, s.test, ev.draws, seed));
    if (ev.indirect) {
        report.append(indirect_attack_eval(clf, cfg.attack, evalset, ev.draws, seed));
        say(log, "indirect: target " + pct(report.find("T", "T", "whitebox")) + ", defense minimum " +
                     pct(report.min_over_sets("defense", "whitebox")));
    }
    if (ev.direct) {
        report.append(direct_attack_eval(clf, std::get<CwConfig>(cfg.attack), evalset, ev.draws, seed, ev.merge_rule));
        say(log, "direct: defense " + pct(report.find("defense", "merged", "whitebox")));
    }
    if (ev.blackbox) {
        const AttackConfig attack = ev.blackbox_attack.value_or(cfg.attack);
        SubstituteConfig sub = ev.substitute;
        auto target = blackbox_eval(fam.models[0], sub, attack, s.test, evalset, seed);
        auto defended = blackbox_eval(clf, sub, attack, s.test, evalset, ev.draws, seed);
        report.append(target.report);
        report.append(defended.report);
        say(log, "blackbox: target " + pct(report.find("T", "substitute", "blackbox")) + ", defense " +
                     pct(report.find("defense", "substitute", "blackbox")));
    }
    for (const auto& b : ev.cross) {
        EvalReport cross = cross_attack_eval(clf, b, evalset, ev.draws, seed, ev.merge_rule);
        for (auto& row : cross.rows) row.scenario = "cross_" + row.scenario;
        report.rows.insert(report.rows.end(), cross.rows.begin(), cross.rows.end());
        report.timings.insert(report.timings.end(), cross.timings.begin(), cross.timings.end());
    }
    report.config["experiment"] = config_to_json(cfg);
    emit_report(report, out);

    if (!ev.augmentation_sweep.empty()) {
        const auto pts = sweep_augmentation(fam.models[0], cfg.init_seed, s.train, evalset, cfg.attack, cfg.train,
                                            ev.augmentation_sweep, derive_seed(seed, 9), log);
        std::string csv = "fraction,retrained_self_accuracy,separate_model_accuracy\n";
        for (const auto& p : pts)
            csv += format_double(p.fraction) + ',' + format_double(p.retrained_self_accuracy) + ',' +
                   format_double(p.separate_model_accuracy) + '\n';
        write_text(out / "sweep_augmentation.csv", csv);
    }
    if (!ev.family_size_sweep.empty()) {
        const bool direct = ev.direct && std::holds_alternative<CwConfig>(cfg.attack);
        const auto pts = sweep_family_size(fam.models[0], s.train, evalset, cfg.generator, ev.family_size_sweep,
                                           direct, ev.selection_seed, log);
        std::string csv = "size,min_indirect,direct\n";
        for (const auto& p : pts)
            csv += std::to_string(p.size) + ',' + format_double(p.min_indirect) + ',' +
                   (p.direct ? format_double(*p.direct) : std::string()) + '\n';
        write_text(out / "sweep_family_size.csv", csv);
    }
    return report;
}

EvalReport cmd_repro(const ExperimentConfig& cfg, const std::filesystem::path& out, const Log& log) {
    EvalReport combined;
    json repeats = json::array();
    for (std::size_t r = 0; r < cfg.repeats; ++r) {
        const ExperimentConfig rc = for_repeat(cfg, r);
        const auto dir = out / ("repeat_" + std::to_string(r));
        say(log, "repeat " + std::to_string(r) + " (seed " + std::to_string(rc.seed) + ")");
        const auto model = cmd_train(rc, dir, log);
        const auto family = cmd_defend(rc, model, dir, log);
        EvalReport rep = cmd_eval(rc, family, dir / "report", log);
        combined.rows.insert(combined.rows.end(), rep.rows.begin(), rep.rows.end());
        for (auto& [label, secs] : rep.timings) combined.timings.push_back({"repeat " + std::to_string(r) + ": " + label, secs});
        repeats.push_back(config_to_json(rc));
    }
    combined.config["experiment"] = config_to_json(cfg);
    combined.config["repeats"] = repeats;
    emit_report(combined, out);
    return combined;
}

// ---------------------------------------------------------------------------
// Command line

int run(int argc, char** argv) {
    CLI::App app{"Multi-model adversarial defense experiments"};
    app.require_subcommand(1);
    app.fallthrough();
    int threads = 0;
    std::string scale = "desk";
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> repeats;
    app.add_option("--threads", threads, "Worker threads (0: all cores)")->check(CLI::NonNegativeNumber);
    app.add_option("--scale", scale, "desk or full")->check(CLI::IsMember({"desk", "full"}));
    app.add_option("--seed", seed, "Master seed; overrides every seed in the config");
    app.add_option("--repeats", repeats, "Repetitions of the experiment")->check(CLI::PositiveNumber);

    std::string config_path, preset, out, model, family;
    const auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "YAML experiment config");
        sub->add_option("--preset", preset, "Named preset instead of a config file");
        sub->add_option("--out", out, "Output directory")->required();
    };
    auto* train_cmd = app.add_subcommand("train", "Train the target model");
    common(train_cmd);
    auto* attack_cmd = app.add_subcommand("attack", "Generate adversarial test examples against a model");
    common(attack_cmd);
    attack_cmd->add_option("--model", model, "Model file")->required();
    auto* defend_cmd = app.add_subcommand("defend", "Build the model family from a trained target");
    common(defend_cmd);
    defend_cmd->add_option("--model", model, "Model file")->required();
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a model family");
    common(eval_cmd);
    eval_cmd->add_option("--family", family, "Family directory")->required();
    auto* repro_cmd = app.add_subcommand("repro", "Train, defend and evaluate a preset end to end");
    common(repro_cmd);
    repro_cmd->add_option("name", preset, "Preset name");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    const auto start = std::chrono::steady_clock::now();
    const Log log = [&](const std::string& msg) {
        const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::fprintf(stderr, "[%8.1fs] %s\n", t, msg.c_str());
    };
    try {
        configure_runtime(threads);
        const Scale sc = parse_scale(scale);
        if (!config_path.empty() && !preset.empty()) throw ConfigError("config", "give either --config or a preset, not both");
        if (config_path.empty() && preset.empty()) throw ConfigError("config", "need --config or a preset");
        ExperimentConfig cfg = config_path.empty() ? preset_config(preset, sc) : load_config(config_path, sc);
        if (seed) override_seed(cfg, *seed);
        if (repeats) cfg.repeats = *repeats;
        cfg.validate();

        if (train_cmd->parsed()) {
            std::printf("%s\n", cmd_train(cfg, out, log).c_str());
        } else if (attack_cmd->parsed()) {
            if (!std::filesystem::exists(model)) throw ArgumentError("missing model file " + model);
            std::printf("%s\n", cmd_attack(cfg, model, out, log).c_str());
        } else if (defend_cmd->parsed()) {
            if (!std::filesystem::exists(model)) throw ArgumentError("missing model file " + model);
            std::printf("%s\n", cmd_defend(cfg, model, out, log).c_str());
        } else if (eval_cmd->parsed()) {
            if (!std::filesystem::is_directory(family)) throw ArgumentError("missing family directory " + family);
            cmd_eval(cfg, family, out, log);
            std::printf("%s\n", (std::filesystem::path(out) / "summary.txt").c_str());
        } else {
            cmd_repro(cfg, out, log);
            std::printf("%s\n", (std::filesystem::path(out) / "summary.txt").c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "muldef: error: %s\n", e.what());
        return 1;
    }
    return 0;
}

}  // namespace muldef::cli
