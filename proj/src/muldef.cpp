#include "muldef/muldef.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <unordered_set>

#include "muldef/format.hpp"
#include "muldef/rng.hpp"

namespace muldef {

namespace {

// Seed streams under GeneratorConfig::rng_seed; each is split again per round.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kTrainStream = 2;
constexpr std::uint64_t kSampleStream = 3;

std::uint64_t round_seed(std::uint64_t seed, std::uint64_t stream, std::size_t round) {
    return derive_seed(derive_seed(seed, stream), round);
}

std::string numbered(const char* stem, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%02zu.bin", stem, i);
    return buf;
}

json report_to_json(const TrainedReport& r) {
    return {{"epochs_run", r.epochs_run},
            {"final_train_loss", r.final_train_loss},
            {"final_val_loss", r.final_val_loss},
            {"stop_reason", stop_reason_name(r.stop_reason)},
            {"train_losses", r.train_losses},
            {"val_losses", r.val_losses}};
}

TrainedReport report_from_json(const json& j) {
    TrainedReport r;
    r.epochs_run = j.at("epochs_run");
    r.final_train_loss = j.at("final_train_loss");
    r.final_val_loss = j.at("final_val_loss");
    r.stop_reason = j.at("stop_reason").get<std::string>() == stop_reason_name(StopReason::early_stop)
                        ? StopReason::early_stop
                        : StopReason::max_epochs;
    r.train_losses = j.at("train_losses").get<std::vector<double>>();
    r.val_losses = j.at("val_losses").get<std::vector<double>>();
    return r;
}

std::vector<double> log_softmax_row(const Scalar* z, std::size_t k) {
    double top = z[0];
    for (std::size_t j = 1; j < k; ++j) top = std::max(top, static_cast<double>(z[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(z[j]) - top);
    const double lse = top + std::log(sum);
    std::vector<double> out(k);
    for (std::size_t j = 0; j < k; ++j) out[j] = static_cast<double>(z[j]) - lse;
    return out;
}

}  // namespace

std::string solution_name(Solution s) { return s == Solution::solution1 ? "solution1" : "solution2"; }

Solution parse_solution(const std::string& s) {
    if (s == "solution1") return Solution::solution1;
    if (s == "solution2") return Solution::solution2;
    throw ArgumentError("unknown solution '" + s + "' (expected solution1 or solution2)");
}

std::size_t GeneratorConfig::adv_set_size(std::size_t train_size) const {
    return static_cast<std::size_t>(std::llround(aug_fraction * static_cast<double>(train_size)));
}

void GeneratorConfig::validate(std::size_t train_size) const {
    if (!(aug_fraction > 0.0 && aug_fraction <= 1.0))
        throw ConfigError("generator.aug_fraction", "must be in (0, 1]");
    if (adv_set_size(train_size) < 1)
        throw ConfigError("generator.aug_fraction",
                          "yields no adversarial examples for " + std::to_string(train_size) + " training samples");
    if (!(convergence_stop.min_delta >= 0.0 && std::isfinite(convergence_stop.min_delta)))
        throw ConfigError("generator.convergence_stop.min_delta", "must be a finite nonnegative number");
    validate_attack(attack);
    train.validate();
}

json generator_to_json(const GeneratorConfig& cfg) {
    return {{"num_additional", cfg.num_additional},
            {"solution", solution_name(cfg.solution)},
            {"aug_fraction", cfg.aug_fraction},
            {"attack", attack_to_json(cfg.attack)},
            {"train", train_config_to_json(cfg.train)},
            {"rng_seed", cfg.rng_seed},
            {"convergence_stop", {{"enabled", cfg.convergence_stop.enabled}, {"min_delta", cfg.convergence_stop.min_delta}}},
            {"warm_start", cfg.warm_start}};
}

GeneratorConfig generator_from_json(const json& j) {
    GeneratorConfig cfg;
    try {
        cfg.num_additional = j.at("num_additional");
        cfg.solution = parse_solution(j.at("solution"));
        cfg.aug_fraction = j.at("aug_fraction");
        cfg.attack = attack_from_json(j.at("attack"));
        cfg.train = train_config_from_json(j.at("train"));
        cfg.rng_seed = j.at("rng_seed");
        cfg.convergence_stop.enabled = j.at("convergence_stop").at("enabled");
        cfg.convergence_stop.min_delta = j.at("convergence_stop").at("min_delta");
        cfg.warm_start = j.at("warm_start");
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed generator config: ") + e.what());
    }
    return cfg;
}

ComposedSet compose_training_set(const Dataset& original, std::span<const AdversarialSet> adv_sets,
                                 Solution solution, std::size_t i) {
    if (i == 0) throw ArgumentError("compose_training_set: round 0 is the seed model");
    if (adv_sets.size() < i)
        throw ArgumentError("compose_training_set: round " + std::to_string(i) + " needs " + std::to_string(i) +
                            " adversarial sets, have " + std::to_string(adv_sets.size()));
    const std::size_t first = solution == Solution::solution1 ? i - 1 : 0;

    std::vector<Dataset> adv;
    for (std::size_t s = first; s < i; ++s) adv.push_back(adv_sets[s].as_dataset(adv_sets[s].source_model_id));
    std::vector<const Dataset*> parts{&original};
    for (const auto& d : adv) parts.push_back(&d);

    ComposedSet out;
    out.blocks.push_back({"original", 0, original.size()});
    std::size_t offset = original.size();
    for (std::size_t s = first; s < i; ++s) {
        out.blocks.push_back({adv_sets[s].source_model_id, offset, adv_sets[s].size()});
        offset += adv_sets[s].size();
    }
    out.data = Dataset::concat(parts, original.name() + "+adv", Split::train);
    return out;
}

void ModelFamily::check() const {
    if (models.empty()) throw Error("model family is empty");
    if (adv_sets.size() > models.size()) throw Error("model family has more adversarial sets than models");
    std::unordered_set<std::string> ids;
    for (std::size_t i = 0; i < models.size(); ++i) {
        if (!(models[i].spec() == models[0].spec()))
            throw Error("family member " + models[i].id() + " does not share the seed model's architecture");
        if (!ids.insert(models[i].id()).second) throw Error("duplicate family member id " + models[i].id());
    }
    for (std::size_t i = 0; i < adv_sets.size(); ++i)
        if (adv_sets[i].source_model_id != models[i].id())
            throw Error("adversarial set " + std::to_string(i) + " comes from " + adv_sets[i].source_model_id +
                        ", expected " + models[i].id());
}

ModelFamily ModelFamily::prefix(std::size_t p) const {
    if (p + 1 > models.size() || p + 1 > adv_sets.size())
        throw ArgumentError("family prefix of " + std::to_string(p + 1) + " members from a family of " +
                            std::to_string(models.size()));
    ModelFamily out;
    out.models.assign(models.begin(), models.begin() + static_cast<std::ptrdiff_t>(p + 1));
    out.adv_sets.assign(adv_sets.begin(), adv_sets.begin() + static_cast<std::ptrdiff_t>(p + 1));
    out.generator = generator;
    out.generator.num_additional = p;
    out.reports.assign(reports.begin(), reports.begin() + static_cast<std::ptrdiff_t>(std::min(p, reports.size())));
    out.compositions.assign(compositions.begin(),
                            compositions.begin() + static_cast<std::ptrdiff_t>(std::min(p, compositions.size())));
    out.convergence_trace.assign(
        convergence_trace.begin(),
        convergence_trace.begin() + static_cast<std::ptrdiff_t>(std::min(p + 1, convergence_trace.size())));
    return out;
}

ModelFamily generate_family(const Network& seed, const Dataset& train_set, const GeneratorConfig& cfg,
                            const ProgressFn& progress) {
    cfg.validate(train_set.size());
    if (seed.input_shape() != train_set.sample_shape())
        throw ShapeError("generate_family: seed model expects " + shape_str(seed.input_shape()) +
                         " but the training set holds " + shape_str(train_set.sample_shape()));
    const auto log = [&](const std::string& msg) {
        if (progress) progress(msg);
    };
    const auto clock = [] { return std::chrono::steady_clock::now(); };
    const auto secs = [](auto t0, auto t1) { return std::to_string(std::chrono::duration<double>(t1 - t0).count()); };

    ModelFamily fam;
    fam.generator = cfg;
    fam.models.push_back(seed);
    const std::size_t n_adv = cfg.adv_set_size(train_set.size());

    // Adversarial examples against model i, from a per-round training sample.
    const auto make_adv = [&](std::size_t i) {
        const std::uint64_t s = round_seed(cfg.rng_seed, kSampleStream, i);
        const auto idx = sample_indices(train_set, n_adv, s);
        const auto t0 = clock();
        AdversarialSet adv = run_attack(fam.models[i], train_set.subset(idx), cfg.attack);
        adv.seed = s;
        for (auto& o : adv.origin) o = idx[o];
        log("adv set for " + fam.models[i].id() + ": " + std::to_string(adv.size()) + " examples, " +
            std::to_string(adv.failures()) + " failed, " + secs(t0, clock()) + " s");
        return adv;
    };
    // Defense expected accuracy on the newest set, members so far.
    const auto newest_accuracy = [&] {
        const Dataset d = fam.adv_sets.back().as_dataset();
        double sum = 0.0;
        for (const auto& m : fam.models) sum += accuracy(m, d);
        return sum / static_cast<double>(fam.models.size());
    };

    try {
        fam.adv_sets.push_back(make_adv(0));
    } catch (const Error& e) {
        throw GenerationError(std::string("adversarial set for the seed model failed: ") + e.what(), fam, 0);
    }
    fam.convergence_trace.push_back(newest_accuracy());

    for (std::size_t i = 1; i <= cfg.num_additional; ++i) {
        const std::string id = "M" + std::to_string(i);
        try {
            ComposedSet composed = compose_training_set(train_set, fam.adv_sets, cfg.solution, i);
            Network m = cfg.warm_start ? seed : Network::initialized(seed.spec(), id, round_seed(cfg.rng_seed, kInitStream, i));
            m.set_id(id);
            TrainConfig tc = cfg.train;
            tc.rng_seed = round_seed(cfg.rng_seed, kTrainStream, i);
            const auto t0 = clock();
            TrainedReport report = train(m, composed.data, tc);
            log("trained " + id + " on " + std::to_string(composed.data.size()) + " examples, " +
                std::to_string(report.epochs_run) + " epochs, " + secs(t0, clock()) + " s");
            fam.models.push_back(std::move(m));
            fam.reports.push_back(std::move(report));
            fam.compositions.push_back(std::move(composed.blocks));
        } catch (const Error& e) {
            throw GenerationError("training " + id + " failed: " + e.what(), fam, i);
        }
        try {
            fam.adv_sets.push_back(make_adv(i));
        } catch (const Error& e) {
            throw GenerationError("adversarial set for " + id + " failed: " + e.what(), fam, i);
        }
        const double acc = newest_accuracy();
        const double change = std::abs(acc - fam.convergence_trace.back());
        fam.convergence_trace.push_back(acc);
        if (cfg.convergence_stop.enabled && change < cfg.convergence_stop.min_delta) {
            log("converged after " + id + " (change " + std::to_string(change) + ")");
            break;
        }
    }
    return fam;
}

MuldefClassifier::MuldefClassifier(const ModelFamily& family, std::uint64_t selection_seed)
    : family_(&family), seed_(selection_seed) {
    if (family.models.empty()) throw ArgumentError("MuldefClassifier needs a nonempty family");
}

std::size_t MuldefClassifier::select_model(std::uint64_t draw_index) const noexcept {
    return bounded_index(mix64(derive_seed(seed_, draw_index)), size());
}

int MuldefClassifier::classify(const Tensor& x, std::uint64_t draw_index) const {
    Shape one{1};
    one.insert(one.end(), input_shape().begin(), input_shape().end());
    if (x.shape() != input_shape() && x.shape() != one)
        throw ShapeError("classify: input of shape " + shape_str(x.shape()) + ", expected " + shape_str(input_shape()));
    const Tensor batch = x.reshaped(one);
    return predict(member(select_model(draw_index)), batch).front();
}

std::vector<int> MuldefClassifier::classify_batch(const Tensor& batch, std::uint64_t first_draw) const {
    if (batch.rank() < 1) throw ShapeError("classify_batch: scalar input");
    const std::size_t n = batch.dim(0);
    const std::size_t d = shape_size(input_shape());
    if (batch.size() != n * d)
        throw ShapeError("classify_batch: batch of shape " + shape_str(batch.shape()) + " for input shape " +
                         shape_str(input_shape()));
    std::vector<std::vector<std::size_t>> rows(size());
    for (std::size_t r = 0; r < n; ++r) rows[select_model(first_draw + r)].push_back(r);

    std::vector<int> labels(n, 0);
    for (std::size_t m = 0; m < size(); ++m) {
        if (rows[m].empty()) continue;
        Shape shape = batch.shape();
        shape[0] = rows[m].size();
        Tensor sub(shape);
        for (std::size_t i = 0; i < rows[m].size(); ++i)
            std::copy(batch.ptr() + rows[m][i] * d, batch.ptr() + (rows[m][i] + 1) * d, sub.ptr() + i * d);
        const auto got = predict(member(m), sub);
        for (std::size_t i = 0; i < rows[m].size(); ++i) labels[rows[m][i]] = got[i];
    }
    return labels;
}

LabelOracle MuldefClassifier::oracle(std::uint64_t first_draw) const {
    auto next = std::make_shared<std::uint64_t>(first_draw);
    return LabelOracle([clf = *this, next](const Tensor& batch) {
        auto labels = clf.classify_batch(batch, *next);
        *next += batch.dim(0);
        return labels;
    });
}

std::string merge_rule_name(MergeRule rule) {
    return rule == MergeRule::mean_probabilities ? "mean_probabilities" : "mean_logits";
}

MergeRule parse_merge_rule(const std::string& s) {
    if (s == "mean_probabilities") return MergeRule::mean_probabilities;
    if (s == "mean_logits") return MergeRule::mean_logits;
    throw ArgumentError("unknown merge rule '" + s + "' (expected mean_probabilities or mean_logits)");
}

MergedModel::MergedModel(std::vector<const Network*> members, MergeRule rule, std::string id)
    : members_(std::move(members)), rule_(rule), id_(std::move(id)) {
    if (members_.empty()) throw ArgumentError("MergedModel needs at least one member");
    for (const auto* m : members_)
        if (m->input_shape() != members_.front()->input_shape() ||
            m->num_classes() != members_.front()->num_classes())
            throw ShapeError("MergedModel members disagree on input shape or class count");
}

namespace {

std::vector<const Network*> member_pointers(const ModelFamily& family) {
    std::vector<const Network*> out;
    for (const auto& m : family.models) out.push_back(&m);
    return out;
}

}  // namespace

MergedModel::MergedModel(const ModelFamily& family, MergeRule rule)
    : MergedModel(member_pointers(family), rule, "merged") {}

Tensor MergedModel::logits(const Tensor& batch) const {
    std::vector<Tensor> zs;
    for (const auto* m : members_) zs.push_back(m->logits(batch));
    const std::size_t n = zs.front().dim(0), k = zs.front().dim(1);
    const double count = static_cast<double>(members_.size());
    Tensor out({n, k});
    for (std::size_t r = 0; r < n; ++r) {
        if (rule_ == MergeRule::mean_logits) {
            for (std::size_t j = 0; j < k; ++j) {
                double s = 0.0;
                for (const auto& z : zs) s += z[r * k + j];
                out[r * k + j] = static_cast<Scalar>(s / count);
            }
            continue;
        }
        // log mean_m p_m = logsumexp_m(log p_m) - log count
        std::vector<std::vector<double>> lp;
        for (const auto& z : zs) lp.push_back(log_softmax_row(z.ptr() + r * k, k));
        for (std::size_t j = 0; j < k; ++j) {
            double top = lp[0][j];
            for (const auto& l : lp) top = std::max(top, l[j]);
            double s = 0.0;
            for (const auto& l : lp) s += std::exp(l[j] - top);
            out[r * k + j] = static_cast<Scalar>(top + std::log(s) - std::log(count));
        }
    }
    return out;
}

Tensor MergedModel::probabilities(const Tensor& batch) const {
    if (rule_ == MergeRule::mean_logits) return softmax_rows(logits(batch));
    Tensor out;
    for (const auto* m : members_) {
        const Tensor p = m->probabilities(batch);
        if (out.empty())
            out = p;
        else
            for (std::size_t i = 0; i < p.size(); ++i) out[i] += p[i];
    }
    const Scalar inv = Scalar(1) / static_cast<Scalar>(members_.size());
    for (auto& v : out.data()) v *= inv;
    return out;
}

Tensor MergedModel::input_gradient(const Tensor& batch, const LogitGradFn& upstream, Tensor* logits_out) const {
    const std::size_t count = members_.size();
    std::vector<Tape> tapes(count);
    std::vector<Tensor> zs;
    for (std::size_t m = 0; m < count; ++m) zs.push_back(members_[m]->run(batch, Mode::eval, nullptr, &tapes[m]));
    const std::size_t n = zs.front().dim(0), k = zs.front().dim(1);

    // Combined logits, plus per member the log-probabilities they came from.
    Tensor combined({n, k});
    std::vector<std::vector<double>> lp(count, std::vector<double>(n * k));
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t m = 0; m < count; ++m) {
            const auto row = log_softmax_row(zs[m].ptr() + r * k, k);
            std::copy(row.begin(), row.end(), lp[m].begin() + static_cast<std::ptrdiff_t>(r * k));
        }
        for (std::size_t j = 0; j < k; ++j) {
            if (rule_ == MergeRule::mean_logits) {
                double s = 0.0;
                for (std::size_t m = 0; m < count; ++m) s += zs[m][r * k + j];
                combined[r * k + j] = static_cast<Scalar>(s / static_cast<double>(count));
                continue;
            }
            double top = lp[0][r * k + j];
            for (std::size_t m = 1; m < count; ++m) top = std::max(top, lp[m][r * k + j]);
            double s = 0.0;
            for (std::size_t m = 0; m < count; ++m) s += std::exp(lp[m][r * k + j] - top);
            combined[r * k + j] = static_cast<Scalar>(top + std::log(s) - std::log(static_cast<double>(count)));
        }
    }

    Tensor du(combined.shape());
    upstream(combined, du);
    if (du.shape() != combined.shape()) throw ShapeError("merged input_gradient: upstream changed the gradient shape");

    Tensor dx;
    for (std::size_t m = 0; m < count; ++m) {
        Tensor dz({n, k});
        for (std::size_t r = 0; r < n; ++r) {
            if (rule_ == MergeRule::mean_logits) {
                for (std::size_t j = 0; j < k; ++j)
                    dz[r * k + j] = static_cast<Scalar>(du[r * k + j] / static_cast<double>(count));
                continue;
            }
            // With L = log mean_m p_m and w_m = p_m / (count * mean p), the
            // gradient on member logits is w_m*u - p_m * <w_m, u>.
            double dot = 0.0;
            std::vector<double> w(k);
            for (std::size_t j = 0; j < k; ++j) {
                w[j] = std::exp(lp[m][r * k + j] - std::log(static_cast<double>(count)) - combined[r * k + j]);
                dot += w[j] * du[r * k + j];
            }
            for (std::size_t j = 0; j < k; ++j) {
                const double p = std::exp(lp[m][r * k + j]);
                dz[r * k + j] = static_cast<Scalar>(w[j] * du[r * k + j] - p * dot);
            }
        }
        Tensor g = members_[m]->backprop(tapes[m], dz, nullptr);
        if (dx.empty())
            dx = std::move(g);
        else
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
    }
    if (logits_out) *logits_out = std::move(combined);
    return dx;
}

void save_family(const ModelFamily& family, const std::filesystem::path& dir) {
    family.check();
    std::filesystem::create_directories(dir);
    json manifest = {{"kind", "muldef_family"}, {"version", kFormatVersion}};
    manifest["generator"] = generator_to_json(family.generator);
    json models = json::array(), sets = json::array(), reports = json::array(), comps = json::array();
    for (std::size_t i = 0; i < family.models.size(); ++i) {
        save_network_file(family.models[i], dir / numbered("model", i));
        models.push_back({{"id", family.models[i].id()}, {"file", numbered("model", i)}});
    }
    for (std::size_t i = 0; i < family.adv_sets.size(); ++i) {
        save_adversarial_set_file(family.adv_sets[i], dir / numbered("adv", i));
        sets.push_back({{"source", family.adv_sets[i].source_model_id}, {"file", numbered("adv", i)}});
    }
    for (const auto& r : family.reports) reports.push_back(report_to_json(r));
    for (const auto& blocks : family.compositions) {
        json c = json::array();
        for (const auto& b : blocks) c.push_back({{"source", b.source}, {"offset", b.offset}, {"size", b.size}});
        comps.push_back(c);
    }
    manifest["models"] = models;
    manifest["adv_sets"] = sets;
    manifest["reports"] = reports;
    manifest["compositions"] = comps;
    manifest["convergence_trace"] = family.convergence_trace;
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

ModelFamily load_family(const std::filesystem::path& dir) {
    const auto bytes = read_bytes(dir / "manifest.json");
    ModelFamily fam;
    try {
        const json manifest = json::parse(bytes.begin(), bytes.end());
        if (manifest.at("kind") != "muldef_family") throw FormatError("manifest is not a model family");
        if (manifest.at("version").get<std::uint32_t>() != kFormatVersion)
            throw FormatError("unsupported family manifest version");
        fam.generator = generator_from_json(manifest.at("generator"));
        for (const auto& m : manifest.at("models")) {
            fam.models.push_back(load_network_file(dir / m.at("file").get<std::string>()));
            if (fam.models.back().id() != m.at("id").get<std::string>())
                throw FormatError("model file " + m.at("file").get<std::string>() + " holds a different id");
        }
        for (const auto& s : manifest.at("adv_sets"))
            fam.adv_sets.push_back(load_adversarial_set_file(dir / s.at("file").get<std::string>()));
        for (const auto& r : manifest.at("reports")) fam.reports.push_back(report_from_json(r));
        for (const auto& c : manifest.at("compositions")) {
            std::vector<TrainingBlock> blocks;
            for (const auto& b : c) blocks.push_back({b.at("source"), b.at("offset"), b.at("size")});
            fam.compositions.push_back(std::move(blocks));
        }
        fam.convergence_trace = manifest.at("convergence_trace").get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed family manifest: ") + e.what());
    }
    fam.check();
    return fam;
}

}  // namespace muldef
