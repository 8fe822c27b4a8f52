#include "muldef/eval.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <cstdio>
#include <sstream>

#include "muldef/rng.hpp"

namespace muldef {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Predictions of every member on every sample; the members are
// deterministic, so a draw only has to pick a row of this table.
std::vector<std::vector<int>> member_predictions(const MuldefClassifier& clf, const Dataset& set) {
    std::vector<std::vector<int>> out;
    for (std::size_t m = 0; m < clf.size(); ++m) {
        std::vector<int> pred;
        pred.reserve(set.size());
        for (std::size_t first = 0; first < set.size(); first += 500) {
            const auto got = predict(clf.member(m), set.batch(first, std::min<std::size_t>(500, set.size() - first)));
            pred.insert(pred.end(), got.begin(), got.end());
        }
        out.push_back(std::move(pred));
    }
    return out;
}

AdvAccuracy defense_accuracy(const MuldefClassifier& clf, const Dataset& set, std::size_t draws, std::uint64_t seed) {
    if (set.empty()) throw ArgumentError("accuracy of an empty set");
    if (draws < 1) throw ArgumentError("draws must be at least 1");
    const auto pred = member_predictions(clf, set);
    const std::size_t n = set.size();

    double exact = 0.0;
    for (const auto& p : pred) {
        std::size_t ok = 0;
        for (std::size_t e = 0; e < n; ++e) ok += p[e] == set.label(e);
        exact += static_cast<double>(ok) / static_cast<double>(n);
    }
    exact /= static_cast<double>(clf.size());

    // Draw t for example e uses index first + t*n + e, the same index
    // classify_batch would use for row e of the t-th pass.
    const std::uint64_t first = mix64(seed);
    std::size_t ok = 0;
    for (std::size_t t = 0; t < draws; ++t)
        for (std::size_t e = 0; e < n; ++e) ok += pred[clf.select_model(first + t * n + e)][e] == set.label(e);

    AdvAccuracy out;
    out.monte_carlo = static_cast<double>(ok) / static_cast<double>(n * draws);
    out.exact = exact;
    out.n = n;
    out.draws = draws;
    return out;
}

EvalRow row(std::string classifier, std::string source, std::string attack, std::string scenario, std::uint64_t seed,
            double accuracy, std::size_t n) {
    return {std::move(classifier), std::move(source), std::move(attack), std::move(scenario), seed, accuracy, n};
}

void add_defense_rows(EvalReport& report, const AdvAccuracy& a, const std::string& source, const std::string& attack,
                      const std::string& scenario, std::uint64_t seed) {
    report.rows.push_back(row("defense", source, attack, scenario, seed, *a.exact, a.n));
    report.rows.push_back(row("defense_mc", source, attack, scenario, seed, a.monte_carlo, a.n));
}

// Every member and the defense on one set.
void add_set_rows(EvalReport& report, const MuldefClassifier& clf, const AdversarialSet& adv,
                  const std::string& source, const std::string& scenario, std::size_t draws, std::uint64_t seed) {
    const Dataset d = adv.as_dataset();
    const std::string attack = attack_name(adv.attack);
    for (std::size_t m = 0; m < clf.size(); ++m)
        report.rows.push_back(row(clf.member(m).id(), source, attack, scenario, seed, accuracy(clf.member(m), d), d.size()));
    add_defense_rows(report, defense_accuracy(clf, d, draws, seed), source, attack, scenario, seed);
}

json defense_config(const MuldefClassifier& clf, std::size_t draws, std::uint64_t seed) {
    json members = json::array();
    for (std::size_t m = 0; m < clf.size(); ++m) members.push_back(clf.member(m).id());
    return {{"members", members},
            {"generator", generator_to_json(clf.family().generator)},
            {"selection_seed", clf.selection_seed()},
            {"draws", draws},
            {"seed", seed}};
}

}  // namespace

double AdvAccuracy::standard_error() const {
    const double e = exact.value_or(monte_carlo);
    return std::sqrt(e * (1.0 - e) / static_cast<double>(n * draws));
}

AdvAccuracy adversarial_accuracy(const Classifier& clf, const AdversarialSet& adv) {
    if (adv.size() == 0) throw ArgumentError("accuracy of an empty adversarial set");
    AdvAccuracy out;
    out.monte_carlo = accuracy(clf, adv.as_dataset());
    out.n = adv.size();
    return out;
}

AdvAccuracy adversarial_accuracy(const MuldefClassifier& clf, const AdversarialSet& adv, std::size_t draws,
                                 std::uint64_t seed) {
    if (adv.size() == 0) throw ArgumentError("accuracy of an empty adversarial set");
    return defense_accuracy(clf, adv.as_dataset(), draws, seed);
}

AdvAccuracy set_accuracy(const MuldefClassifier& clf, const Dataset& set, std::size_t draws, std::uint64_t seed) {
    return defense_accuracy(clf, set, draws, seed);
}

void EvalReport::append(const EvalReport& other) {
    rows.insert(rows.end(), other.rows.begin(), other.rows.end());
    for (const auto& [k, v] : other.config.items()) config[k] = v;
    timings.insert(timings.end(), other.timings.begin(), other.timings.end());
}

double EvalReport::find(std::string_view classifier, std::string_view adv_source, std::string_view scenario) const {
    for (const auto& r : rows)
        if (r.classifier == classifier && r.adv_source == adv_source && r.scenario == scenario) return r.accuracy;
    throw ArgumentError("no report row for " + std::string(classifier) + " on " + std::string(adv_source) + " (" +
                        std::string(scenario) + ")");
}

double EvalReport::min_over_sets(std::string_view classifier, std::string_view scenario) const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& r : rows)
        if (r.classifier == classifier && r.scenario == scenario) best = std::min(best, r.accuracy);
    if (!std::isfinite(best))
        throw ArgumentError("no report rows for " + std::string(classifier) + " (" + std::string(scenario) + ")");
    return best;
}

void EvalReport::check() const {
    for (const auto& r : rows)
        if (!(r.accuracy >= 0.0 && r.accuracy <= 1.0))
            throw Error("accuracy " + format_double(r.accuracy) + " outside [0,1] for " + r.classifier + " on " +
                        r.adv_source);
}

EvalReport clean_eval(const MuldefClassifier& defense, const Dataset& test_set, std::size_t draws, std::uint64_t seed) {
    EvalReport report;
    for (std::size_t m = 0; m < defense.size(); ++m)
        report.rows.push_back(row(defense.member(m).id(), "clean", "none", "clean", seed,
                                  accuracy(defense.member(m), test_set), test_set.size()));
    add_defense_rows(report, defense_accuracy(defense, test_set, draws, seed), "clean", "none", "clean", seed);
    report.config["defense"] = defense_config(defense, draws, seed);
    report.config["test_set"] = {{"name", test_set.name()}, {"n", test_set.size()}};
    return report;
}

EvalReport indirect_attack_eval(const MuldefClassifier& defense, const AttackConfig& attack, const Dataset& test_set,
                                std::size_t draws, std::uint64_t seed, std::vector<AdversarialSet>* sets_out) {
    EvalReport report;
    for (std::size_t i = 0; i < defense.size(); ++i) {
        const Network& source = defense.member(i);
        const auto t0 = Clock::now();
        AdversarialSet adv = run_attack(source, test_set, attack);
        report.timings.push_back({"indirect " + attack_name(attack) + " on " + source.id(), seconds_since(t0)});
        add_set_rows(report, defense, adv, source.id(), "whitebox", draws, seed);
        if (sets_out) sets_out->push_back(std::move(adv));
    }
    report.config["defense"] = defense_config(defense, draws, seed);
    report.config["indirect_attack"] = attack_to_json(attack);
    report.config["test_set"] = {{"name", test_set.name()}, {"n", test_set.size()}};
    return report;
}

EvalReport direct_attack_eval(const MuldefClassifier& defense, const CwConfig& cw, const Dataset& test_set,
                              std::size_t draws, std::uint64_t seed, MergeRule rule) {
    EvalReport report;
    const MergedModel merged(defense.family(), rule);
    const auto t0 = Clock::now();
    const AdversarialSet adv = cw_l2(merged, test_set, cw);
    report.timings.push_back({"direct cw on merged", seconds_since(t0)});
    add_set_rows(report, defense, adv, "merged", "whitebox", draws, seed);
    report.config["defense"] = defense_config(defense, draws, seed);
    report.config["direct_attack"] = attack_to_json(cw);
    report.config["merge_rule"] = merge_rule_name(rule);
    report.config["test_set"] = {{"name", test_set.name()}, {"n", test_set.size()}};
    return report;
}

EvalReport cross_attack_eval(const MuldefClassifier& defense, const AttackConfig& attacked_by, const Dataset& test_set,
                             std::size_t draws, std::uint64_t seed, MergeRule rule) {
    EvalReport report = indirect_attack_eval(defense, attacked_by, test_set, draws, seed);
    if (const auto* cw = std::get_if<CwConfig>(&attacked_by))
        report.append(direct_attack_eval(defense, *cw, test_set, draws, seed, rule));
    report.config["cross"] = {{"built_with", attack_to_json(defense.family().generator.attack)},
                              {"attacked_by", attack_to_json(attacked_by)}};
    return report;
}

BlackboxEval blackbox_eval(const Network& target, const SubstituteConfig& sub, const AttackConfig& attack,
                           const Dataset& holdout_pool, const Dataset& test_set, std::uint64_t seed) {
    const auto t0 = Clock::now();
    const LabelOracle oracle = LabelOracle::of(target);
    BlackboxResult res = blackbox_attack(oracle, sub, attack, holdout_pool, test_set);
    BlackboxEval out;
    out.report.timings.push_back({"blackbox " + attack_name(attack) + " against " + target.id(), seconds_since(t0)});
    out.report.rows.push_back(row(target.id(), "substitute", attack_name(attack), "blackbox", seed,
                                  adversarial_accuracy(target, res.adv).monte_carlo, res.adv.size()));
    out.report.config["blackbox"] = {{"target", target.id()},
                                     {"attack", attack_to_json(attack)},
                                     {"holdout_size", sub.holdout_size},
                                     {"augmentation_epochs", sub.augmentation_epochs},
                                     {"lambda", sub.lambda},
                                     {"substitute_seed", sub.seed},
                                     {"substitute_spec", spec_to_json(sub.substitute_spec)}};
    out.set_sizes = res.set_sizes;
    out.oracle_queries = res.oracle_queries;
    return out;
}

BlackboxEval blackbox_eval(const MuldefClassifier& defense, const SubstituteConfig& sub, const AttackConfig& attack,
                           const Dataset& holdout_pool, const Dataset& test_set, std::size_t draws,
                           std::uint64_t seed) {
    const auto t0 = Clock::now();
    // Oracle draws come from a stream disjoint from the evaluation draws.
    const LabelOracle oracle = defense.oracle(mix64(derive_seed(seed, 0xb1ac)));
    BlackboxResult res = blackbox_attack(oracle, sub, attack, holdout_pool, test_set);
    BlackboxEval out;
    out.report.timings.push_back({"blackbox " + attack_name(attack) + " against defense", seconds_since(t0)});
    add_set_rows(out.report, defense, res.adv, "substitute", "blackbox", draws, seed);
    out.report.config["blackbox_defense"] = {{"defense", defense_config(defense, draws, seed)},
                                             {"attack", attack_to_json(attack)},
                                             {"holdout_size", sub.holdout_size},
                                             {"augmentation_epochs", sub.augmentation_epochs},
                                             {"lambda", sub.lambda},
                                             {"substitute_seed", sub.seed},
                                             {"substitute_spec", spec_to_json(sub.substitute_spec)}};
    out.set_sizes = res.set_sizes;
    out.oracle_queries = res.oracle_queries;
    return out;
}

std::vector<AugmentationPoint> sweep_augmentation(const Network& target, std::uint64_t target_init_seed,
                                                  const Dataset& train_set, const Dataset& test_set,
                                                  const AttackConfig& attack, const TrainConfig& train_cfg,
                                                  std::span<const double> fractions, std::uint64_t seed,
                                                  const ProgressFn& progress) {
    const Dataset adv_t = run_attack(target, test_set, attack).as_dataset("adv_T");
    std::vector<AugmentationPoint> out;
    for (std::size_t k = 0; k < fractions.size(); ++k) {
        const double f = fractions[k];
        if (!(f >= 0.0 && f <= 1.0)) throw ArgumentError("augmentation fraction must be in [0,1]");
        const auto n_aug = static_cast<std::size_t>(std::llround(f * static_cast<double>(train_set.size())));
        Dataset augmented = train_set;
        if (n_aug > 0) {
            const Dataset sample = sample_subset(train_set, n_aug, derive_seed(seed, 2 * k));
            const Dataset adv = run_attack(target, sample, attack).as_dataset("adv_T'");
            const Dataset* parts[] = {&train_set, &adv};
            augmented = Dataset::concat(parts, train_set.name() + "+adv", Split::train);
        }

        AugmentationPoint p;
        p.fraction = f;
        Network retrained = Network::initialized(target.spec(), target.id(), target_init_seed);
        train(retrained, augmented, train_cfg);
        p.retrained_self_accuracy = accuracy(retrained, run_attack(retrained, test_set, attack).as_dataset());

        Network d = Network::initialized(target.spec(), "D", derive_seed(seed, 2 * k + 1));
        TrainConfig dc = train_cfg;
        dc.rng_seed = derive_seed(train_cfg.rng_seed, 2 * k + 1);
        train(d, augmented, dc);
        p.separate_model_accuracy = accuracy(d, adv_t);
        if (progress)
            progress("fraction " + format_double(f) + ": retrained T " + format_double(p.retrained_self_accuracy) +
                     ", D " + format_double(p.separate_model_accuracy));
        out.push_back(p);
    }
    return out;
}

std::vector<FamilySizePoint> sweep_family_size(const Network& seed, const Dataset& train_set,
                                               const Dataset& test_set, const GeneratorConfig& generator,
                                               std::span<const std::size_t> sizes, bool with_direct,
                                               std::uint64_t seed_value, const ProgressFn& progress) {
    if (sizes.empty()) return {};
    const std::size_t largest = *std::max_element(sizes.begin(), sizes.end());
    if (largest < 1) throw ArgumentError("family sizes must be at least 1");
    GeneratorConfig g = generator;
    g.num_additional = largest - 1;
    g.convergence_stop.enabled = false;
    const ModelFamily fam = generate_family(seed, train_set, g, progress);

    // acc[j][i]: member j on member i's adversarial test set.
    std::vector<std::vector<double>> acc(fam.size(), std::vector<double>(fam.size()));
    for (std::size_t i = 0; i < fam.size(); ++i) {
        const Dataset adv = run_attack(fam.models[i], test_set, g.attack).as_dataset();
        for (std::size_t j = 0; j < fam.size(); ++j) acc[j][i] = accuracy(fam.models[j], adv);
    }

    std::vector<FamilySizePoint> out;
    for (std::size_t s : sizes) {
        if (s < 1) throw ArgumentError("family sizes must be at least 1");
        FamilySizePoint p;
        p.size = s;
        p.min_indirect = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < s; ++i) {
            double mean = 0.0;
            for (std::size_t j = 0; j < s; ++j) mean += acc[j][i];
            p.min_indirect = std::min(p.min_indirect, mean / static_cast<double>(s));
        }
        if (with_direct) {
            const auto* cw = std::get_if<CwConfig>(&g.attack);
            if (!cw) throw ArgumentError("the direct attack needs a C&W generator attack");
            const ModelFamily pre = fam.prefix(s - 1);
            const MuldefClassifier clf(pre, seed_value);
            const AdversarialSet adv = cw_l2(MergedModel(pre), test_set, *cw);
            p.direct = *defense_accuracy(clf, adv.as_dataset(), 1, seed_value).exact;
        }
        if (progress) progress("family size " + std::to_string(s) + ": min indirect " + format_double(p.min_indirect));
        out.push_back(p);
    }
    return out;
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string to_csv(const std::vector<EvalRow>& rows) {
    const auto field = [](const std::string& s) -> const std::string& {
        if (s.find_first_of(",\"\n\r") != std::string::npos)
            throw ArgumentError("CSV field '" + s + "' contains a separator or quote");
        return s;
    };
    std::string out(kCsvHeader);
    out += '\n';
    for (const auto& r : rows) {
        out += field(r.classifier) + ',' + field(r.adv_source) + ',' + field(r.attack) + ',' + field(r.scenario) + ',' +
               std::to_string(r.seed) + ',' + format_double(r.accuracy) + ',' + std::to_string(r.n) + '\n';
    }
    return out;
}

std::vector<EvalRow> parse_csv(std::string_view text) {
    std::vector<EvalRow> rows;
    std::size_t line_no = 0;
    bool header = true;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (header) {
            if (line != kCsvHeader) throw FormatError("results CSV: unexpected header '" + std::string(line) + "'");
            header = false;
            continue;
        }
        if (line.empty()) continue;
        std::vector<std::string_view> f;
        for (std::size_t pos = 0;;) {
            const auto comma = line.find(',', pos);
            f.push_back(line.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
            if (comma == std::string_view::npos) break;
            pos = comma + 1;
        }
        const auto bad = [&](const std::string& what) {
            return FormatError("results CSV line " + std::to_string(line_no) + ": " + what);
        };
        if (f.size() != 7) throw bad("expected 7 fields, got " + std::to_string(f.size()));
        EvalRow r{std::string(f[0]), std::string(f[1]), std::string(f[2]), std::string(f[3]), 0, 0.0, 0};
        const auto parse = [&](std::string_view s, auto& out, const char* name) {
            const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
            if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw bad(std::string("bad ") + name);
        };
        parse(f[4], r.seed, "seed");
        parse(f[5], r.accuracy, "accuracy");
        parse(f[6], r.n, "n");
        rows.push_back(std::move(r));
    }
    if (header) throw FormatError("results CSV: missing header");
    return rows;
}

std::string config_digest(const json& j) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : j.dump()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void emit_report(const EvalReport& report, const std::filesystem::path& dir) {
    report.check();
    std::filesystem::create_directories(dir);
    write_text(dir / "results.csv", to_csv(report.rows));
    write_text(dir / "config.json", report.config.dump(2) + "\n");

    // Per classifier and scenario: mean and minimum over adversarial sources.
    std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
    for (const auto& r : report.rows) groups[{r.scenario, r.classifier}].push_back(r.accuracy);
    std::ostringstream s;
    s << "config_digest: " << config_digest(report.config) << "\n";
    s << "rows: " << report.rows.size() << "\n";
    s << "scenario,classifier,sets,mean,min\n";
    for (const auto& [key, values] : groups) {
        double sum = 0.0, lo = 1.0;
        for (double v : values) {
            sum += v;
            lo = std::min(lo, v);
        }
        s << key.first << ',' << key.second << ',' << values.size() << ','
          << format_double(sum / static_cast<double>(values.size())) << ',' << format_double(lo) << "\n";
    }
    write_text(dir / "summary.txt", s.str());

    std::ostringstream t;
    for (const auto& [label, secs] : report.timings) t << label << '\t' << format_double(secs) << "\n";
    write_text(dir / "timings.log", t.str());
}

}  // namespace muldef
