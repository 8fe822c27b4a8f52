// Desk-scale acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.
//
// Environment:
//   MULDEF_DATA_DIR               directory holding mnist/ (required)
//   MULDEF_ACCEPT_SEEDS           repeats for the FGSM experiments (default 3)
//   MULDEF_ACCEPT_CW_SEEDS        repeats that also build a C&W family (default 1)
//   MULDEF_ACCEPT_CW_EXAMPLES     test examples per C&W evaluation set (default 200)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "muldef/cli.hpp"
#include "muldef/error.hpp"
#include "muldef/runtime.hpp"

using namespace muldef;
namespace fs = std::filesystem;

namespace {

const auto t_start = std::chrono::steady_clock::now();

void progress(const std::string& msg) {
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    std::fprintf(stderr, "[%7.1fs] %s\n", t, msg.c_str());
}

std::size_t env_size(const char* name, std::size_t fallback) {
    const char* v = std::getenv(name);
    if (!v || !*v) return fallback;
    return static_cast<std::size_t>(std::stoull(v));
}

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
    return buf;
}

std::string pts(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%+.2f pts", 100.0 * v);
    return buf;
}

double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string list(const std::vector<double>& v) {
    std::string out;
    for (double x : v) out += (out.empty() ? "" : " ") + pct(x);
    return "[" + out + "]";
}

struct Verdict {
    bool pass = true;
    std::string detail;
};

std::map<int, Verdict> verdicts;

void record(int id, bool pass, const std::string& detail) {
    auto& v = verdicts[id];
    v.pass = v.pass && pass;
    v.detail += (v.detail.empty() ? "" : "; ") + detail;
}

// Monte-Carlo rows against their exact counterparts (criterion 9).
struct McCheck {
    std::size_t sets = 0;
    std::size_t within = 0;
    double worst_z = 0.0;
};
McCheck mc;

void check_mc(const EvalReport& report, std::size_t draws) {
    for (const auto& r : report.rows) {
        if (r.classifier != "defense") continue;
        for (const auto& m : report.rows) {
            if (m.classifier != "defense_mc" || m.adv_source != r.adv_source || m.scenario != r.scenario ||
                m.attack != r.attack)
                continue;
            const double se = std::sqrt(r.accuracy * (1 - r.accuracy) / static_cast<double>(r.n * draws));
            const double diff = std::abs(m.accuracy - r.accuracy);
            ++mc.sets;
            if (diff <= 3 * se + 1e-12) ++mc.within;
            if (se > 0) mc.worst_z = std::max(mc.worst_z, diff / se);
            break;
        }
    }
}

constexpr std::size_t kDraws = 10;

// Accuracy of family member j on the adversarial set generated against member i.
std::vector<std::vector<double>> member_matrix(const EvalReport& report, const ModelFamily& fam) {
    std::vector<std::vector<double>> acc(fam.size(), std::vector<double>(fam.size()));
    for (std::size_t j = 0; j < fam.size(); ++j)
        for (std::size_t i = 0; i < fam.size(); ++i)
            acc[j][i] = report.find(fam.models[j].id(), fam.models[i].id(), "whitebox");
    return acc;
}

double clean_band_gap(const ModelFamily& fam, const MuldefClassifier& clf, const Dataset& test) {
    const double t = accuracy(fam.models[0], test);
    double worst = 0.0;
    for (const auto& m : fam.models) worst = std::max(worst, std::abs(accuracy(m, test) - t));
    return std::max(worst, std::abs(*set_accuracy(clf, test, 1, 0).exact - t));
}

bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
    std::vector<fs::path> fa, fb;
    for (const auto& e : fs::recursive_directory_iterator(a))
        if (e.is_regular_file() && e.path().filename() != "timings.log") fa.push_back(fs::relative(e.path(), a));
    for (const auto& e : fs::recursive_directory_iterator(b))
        if (e.is_regular_file() && e.path().filename() != "timings.log") fb.push_back(fs::relative(e.path(), b));
    std::sort(fa.begin(), fa.end());
    std::sort(fb.begin(), fb.end());
    if (fa != fb) {
        why = "file lists differ";
        return false;
    }
    for (const auto& f : fa)
        if (read_bytes(a / f) != read_bytes(b / f)) {
            why = f.string() + " differs";
            return false;
        }
    why = std::to_string(fa.size()) + " files identical";
    return true;
}

}  // namespace

int main() {
    configure_runtime();
    const std::size_t seeds = std::max<std::size_t>(1, env_size("MULDEF_ACCEPT_SEEDS", 3));
    const std::size_t cw_seeds = std::min(seeds, env_size("MULDEF_ACCEPT_CW_SEEDS", 1));
    const std::size_t cw_examples = env_size("MULDEF_ACCEPT_CW_EXAMPLES", 200);

    // 1. gradient oracle, in the double-precision build
    {
        const std::string cmd = std::string(MULDEF_GRADCHECK_BIN) + " --test-case='every layer kind*' --no-intro >/dev/null 2>&1";
        const int rc = std::system(cmd.c_str());
        record(1, rc == 0, "7 layer kinds x 20 instances, parameter and input gradients, rel err < 1e-3 (f64 build, exit " +
                               std::to_string(rc) + ")");
    }

    const char* data = std::getenv("MULDEF_DATA_DIR");
    if (!data || !*data || !fs::exists(data)) {
        std::printf("MULDEF_DATA_DIR is not set or missing; criteria 2-12 cannot run\n");
        for (int id = 2; id <= 12; ++id) record(id, false, "no dataset");
    } else {
        const cli::ExperimentConfig base = cli::preset_config("mnist-fgsm-wb", cli::Scale::desk);
        const cli::Splits splits = cli::load_splits(base.dataset);
        const Dataset cw_test = sample_subset(splits.test, std::min(cw_examples, splits.test.size()),
                                              derive_seed(base.dataset.seed, 3));
        progress("corpus " + std::to_string(splits.train.size()) + "/" + std::to_string(splits.test.size()) +
                 ", C&W subset " + std::to_string(cw_test.size()));
        const FgsmConfig fg = std::get<FgsmConfig>(base.attack);
        const CwConfig cw = std::get<CwConfig>(cli::preset_config("mnist-cw-wb", cli::Scale::desk).attack);

        std::vector<double> clean_t, fgsm_t, cw_t, def_min, gain4, sol1, sol2, def_direct, gain5, bb_t, wb_t, bb_d,
            cross_def, gain11, band;
        std::vector<std::vector<std::vector<double>>> matrices;
        std::vector<std::size_t> final_sizes;

        for (std::size_t s = 0; s < seeds; ++s) {
            const cli::ExperimentConfig cfg = cli::for_repeat(base, s);
            progress("seed " + std::to_string(s));

            // 2. clean accuracy
            Network t = Network::initialized(cfg.spec, "T", cfg.init_seed);
            train(t, splits.train, cfg.train);
            clean_t.push_back(accuracy(t, splits.test));
            progress("T test accuracy " + pct(clean_t.back()));

            // 3. undefended white-box
            fgsm_t.push_back(accuracy(t, fgsm(t, splits.test, fg).as_dataset()));
            cw_t.push_back(accuracy(t, cw_l2(t, cw_test, cw).as_dataset()));
            progress("T under FGSM " + pct(fgsm_t.back()) + ", under C&W " + pct(cw_t.back()));

            // 4, 6, 7, 9: 5-model solution-2 family built with FGSM
            GeneratorConfig gen = cfg.generator;
            const ModelFamily fam = generate_family(t, splits.train, gen, progress);
            const MuldefClassifier clf(fam, cfg.eval.selection_seed);
            const EvalReport ind = indirect_attack_eval(clf, fg, splits.test, kDraws, cfg.eval.seed);
            check_mc(ind, kDraws);
            const EvalReport clean = clean_eval(clf, splits.test, kDraws, cfg.eval.seed);
            check_mc(clean, kDraws);
            def_min.push_back(ind.min_over_sets("defense", "whitebox"));
            gain4.push_back(def_min.back() - fgsm_t.back());
            matrices.push_back(member_matrix(ind, fam));
            band.push_back(clean_band_gap(fam, clf, splits.test));
            progress("FGSM family: defense minimum " + pct(def_min.back()));

            // 8. solution 1 vs solution 2 at p = 3
            {
                GeneratorConfig g1 = gen;
                g1.num_additional = 3;
                g1.solution = Solution::solution1;
                const ModelFamily f1 = generate_family(t, splits.train, g1, progress);
                const ModelFamily f2 = fam.prefix(3);
                const MuldefClassifier c1(f1, cfg.eval.selection_seed), c2(f2, cfg.eval.selection_seed);
                sol1.push_back(indirect_attack_eval(c1, fg, splits.test, 1, cfg.eval.seed).min_over_sets("defense", "whitebox"));
                sol2.push_back(indirect_attack_eval(c2, fg, splits.test, 1, cfg.eval.seed).min_over_sets("defense", "whitebox"));
                progress("p=3: solution1 " + pct(sol1.back()) + ", solution2 " + pct(sol2.back()));
            }

            // 10. black-box
            {
                SubstituteConfig sub = cfg.eval.substitute;
                const BlackboxEval bt = blackbox_eval(t, sub, fg, splits.test, splits.test, cfg.eval.seed);
                const BlackboxEval bd = blackbox_eval(clf, sub, fg, splits.test, splits.test, kDraws, cfg.eval.seed);
                check_mc(bd.report, kDraws);
                final_sizes.push_back(bt.set_sizes.back());
                final_sizes.push_back(bd.set_sizes.back());
                bb_t.push_back(bt.report.find("T", "substitute", "blackbox"));
                wb_t.push_back(fgsm_t.back());
                bb_d.push_back(bd.report.find("defense", "substitute", "blackbox"));
                progress("black-box FGSM: target " + pct(bb_t.back()) + ", defense " + pct(bb_d.back()));
            }

            // 11. FGSM-built defense under C&W, indirect and direct
            {
                const EvalReport ci = indirect_attack_eval(clf, cw, cw_test, kDraws, cfg.eval.seed);
                const EvalReport cd = direct_attack_eval(clf, cw, cw_test, kDraws, cfg.eval.seed);
                check_mc(ci, kDraws);
                check_mc(cd, kDraws);
                const double worst = std::min(ci.min_over_sets("defense", "whitebox"), cd.find("defense", "merged", "whitebox"));
                cross_def.push_back(worst);
                gain11.push_back(worst - cw_t.back());
                progress("FGSM-built defense under C&W: " + pct(worst));
            }

            // 5. C&W-built family, direct attack on the merged model
            if (s < cw_seeds) {
                GeneratorConfig gc = gen;
                gc.attack = cw;
                const ModelFamily cfam = generate_family(t, splits.train, gc, progress);
                const MuldefClassifier cclf(cfam, cfg.eval.selection_seed);
                const EvalReport cd = direct_attack_eval(cclf, cw, cw_test, kDraws, cfg.eval.seed);
                check_mc(cd, kDraws);
                def_direct.push_back(cd.find("defense", "merged", "whitebox"));
                gain5.push_back(def_direct.back() - cw_t.back());
                band.push_back(clean_band_gap(cfam, cclf, splits.test));
                progress("C&W family, direct: " + pct(def_direct.back()));
            }
        }

        record(2, mean(clean_t) >= 0.96, "T test accuracy " + list(clean_t) + ", need >= 96%");
        record(3, mean(fgsm_t) <= 0.25, "FGSM eps 0.3: " + list(fgsm_t) + " need <= 25%");
        record(3, mean(cw_t) <= 0.05, "C&W conf 0.01 / 300 it: " + list(cw_t) + " need <= 5%");
        record(4, mean(gain4) >= 0.25,
               "defense min " + list(def_min) + " vs target " + list(fgsm_t) + ", mean gain " + pts(mean(gain4)) +
                   ", need >= +25");
        record(5, !gain5.empty() && mean(gain5) >= 0.30,
               "direct C&W on merged C&W-built family " + list(def_direct) + " vs target " + pct(mean(cw_t)) +
                   ", gain " + pts(mean(gain5)) + ", need >= +30 (" + std::to_string(gain5.size()) + " seed(s))");
        record(6, *std::max_element(band.begin(), band.end()) <= 0.03,
               "largest member/defense gap to T " + pts(*std::max_element(band.begin(), band.end())) + ", need <= 3");

        // 7. ordering, averaged over seeds
        {
            const std::size_t n = matrices.front().size();
            std::vector<std::vector<double>> avg(n, std::vector<double>(n, 0.0));
            for (const auto& m : matrices)
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t i = 0; i < n; ++i) avg[j][i] += m[j][i] / static_cast<double>(matrices.size());
            bool own_min = true, later_higher = true;
            std::string detail;
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j)
                    if (avg[j][i] < avg[i][i]) own_min = false;
                if (i + 1 < n) {
                    double later = 0;
                    for (std::size_t j = i + 1; j < n; ++j) later += avg[j][i];
                    later /= static_cast<double>(n - i - 1);
                    if (!(later > avg[i][i])) later_higher = false;
                    detail += (detail.empty() ? "" : ", ") + std::string("set ") + std::to_string(i) + ": own " +
                              pct(avg[i][i]) + " later " + pct(later);
                }
            }
            record(7, own_min, std::string("(a) own set is the minimum: ") + (own_min ? "yes" : "no"));
            record(7, later_higher, "(b) later models higher: " + detail);
        }

        record(8, mean(sol2) >= mean(sol1), "solution2 " + list(sol2) + " vs solution1 " + list(sol1));

        // 9. selector statistics
        {
            ModelFamily five;
            for (int i = 0; i < 5; ++i) five.models.push_back(Network(NetworkSpec{{1}, {DenseSpec{1, 2}}}, "m" + std::to_string(i)));
            const MuldefClassifier clf(five, base.eval.selection_seed);
            std::vector<double> counts(5, 0.0);
            for (std::uint64_t d = 0; d < 100000; ++d) counts[clf.select_model(d)] += 1;
            double chi2 = 0;
            for (double c : counts) chi2 += (c - 20000.0) * (c - 20000.0) / 20000.0;
            char buf[64];
            std::snprintf(buf, sizeof buf, "chi-square %.3f (critical 13.277)", chi2);
            record(9, chi2 < 13.277, buf);
            std::snprintf(buf, sizeof buf, "MC within 3 SE on %zu/%zu sets (worst %.2f SE)", mc.within, mc.sets, mc.worst_z);
            record(9, mc.sets > 0 && mc.within == mc.sets, buf);
        }

        const bool sizes_ok = std::all_of(final_sizes.begin(), final_sizes.end(), [](std::size_t n) { return n == 4800; });
        record(10, sizes_ok, "substitute set after 5 augmentation epochs " + std::to_string(final_sizes.front()) +
                                 (sizes_ok ? " in every run" : " (not 4800 in every run)"));
        record(10, mean(bb_t) > mean(wb_t), "target black-box " + list(bb_t) + " vs white-box " + list(wb_t));
        record(10, mean(bb_d) >= mean(bb_t) - 0.02, "defense black-box " + list(bb_d) + " vs target " + list(bb_t));
        record(11, mean(gain11) >= 0.20,
               "FGSM-built defense under C&W " + list(cross_def) + " vs target " + list(cw_t) + ", gain " +
                   pts(mean(gain11)) + ", need >= +20");

        // 12. determinism of the full pipeline
        {
            cli::ExperimentConfig rc = base;
            rc.repeats = 1;
            const fs::path dir = fs::temp_directory_path() / "muldef_acceptance_repro";
            fs::remove_all(dir);
            cli::cmd_repro(rc, dir / "a", progress);
            cli::cmd_repro(rc, dir / "b", progress);
            std::string why;
            const bool same = same_tree(dir / "a", dir / "b", why);
            record(12, same, "mnist-fgsm-wb repro twice: " + why);
            fs::remove_all(dir);
        }
    }

    static const char* names[] = {"",
                                  "gradient oracle",
                                  "clean accuracy",
                                  "undefended vulnerability",
                                  "defense gain, indirect",
                                  "defense gain, direct",
                                  "clean-accuracy preservation",
                                  "ordering properties",
                                  "solution comparison",
                                  "selector statistics",
                                  "black-box pipeline",
                                  "cross-attack",
                                  "determinism"};
    int failed = 0;
    for (int id = 1; id <= 12; ++id) {
        const auto& v = verdicts[id];
        std::printf("criterion %2d %-28s %s  %s\n", id, names[id], v.pass ? "PASS" : "FAIL", v.detail.c_str());
        failed += !v.pass;
    }
    std::printf("%d of 12 criteria passed (%zu seeds, %zu C&W-family seeds, %zu C&W test examples)\n", 12 - failed,
                seeds, cw_seeds, cw_examples);
    return failed == 0 ? 0 : 1;
}
