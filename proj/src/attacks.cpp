#include "muldef/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "muldef/format.hpp"
#include "muldef/rng.hpp"
#include "vmath.hpp"

namespace muldef {

void FgsmConfig::validate() const {
    if (!(clip_min < clip_max)) throw ConfigError("fgsm.clip_min", "must be below clip_max");
    if (!(eps >= 0.0)) throw ConfigError("fgsm.eps", "must be nonnegative");
    if (eps > clip_max - clip_min) throw ConfigError("fgsm.eps", "exceeds the pixel range");
    if (iterations == 0) throw ConfigError("fgsm.iterations", "must be at least 1");
}

void CwConfig::validate() const {
    if (!(confidence >= 0.0)) throw ConfigError("cw.confidence", "must be nonnegative");
    if (max_iterations == 0) throw ConfigError("cw.max_iterations", "must be at least 1");
    if (!(c_init > 0.0)) throw ConfigError("cw.c_init", "must be positive");
    if (!(step_size > 0.0)) throw ConfigError("cw.step_size", "must be positive");
    if (!(clip_min < clip_max)) throw ConfigError("cw.clip_min", "must be below clip_max");
    if (batch_size == 0) throw ConfigError("cw.batch_size", "must be positive");
}

std::string attack_name(const AttackConfig& attack) {
    return std::holds_alternative<FgsmConfig>(attack) ? "fgsm" : "cw";
}

double attack_clip_min(const AttackConfig& attack) {
    return std::visit([](const auto& a) { return a.clip_min; }, attack);
}

double attack_clip_max(const AttackConfig& attack) {
    return std::visit([](const auto& a) { return a.clip_max; }, attack);
}

void validate_attack(const AttackConfig& attack) {
    std::visit([](const auto& a) { a.validate(); }, attack);
}

std::string scenario_name(Scenario s) { return s == Scenario::blackbox ? "blackbox" : "whitebox"; }

Scenario parse_scenario(const std::string& s) {
    if (s == "whitebox") return Scenario::whitebox;
    if (s == "blackbox") return Scenario::blackbox;
    throw FormatError("unknown scenario '" + s + "'");
}

std::size_t AdversarialSet::failures() const {
    return static_cast<std::size_t>(std::count(failed.begin(), failed.end(), std::uint8_t{1}));
}

Dataset AdversarialSet::as_dataset(const std::string& name) const {
    return Dataset(name, Split::train, num_classes, sample_shape, pixels, labels);
}

json attack_to_json(const AttackConfig& attack) {
    if (const auto* f = std::get_if<FgsmConfig>(&attack))
        return {{"kind", "fgsm"}, {"eps", f->eps}, {"clip_min", f->clip_min}, {"clip_max", f->clip_max},
                {"iterations", f->iterations}};
    const auto& c = std::get<CwConfig>(attack);
    return {{"kind", "cw"},
            {"confidence", c.confidence},
            {"max_iterations", c.max_iterations},
            {"c_init", c.c_init},
            {"binary_search_steps", c.binary_search_steps},
            {"step_size", c.step_size},
            {"clip_min", c.clip_min},
            {"clip_max", c.clip_max},
            {"abort_early", c.abort_early},
            {"batch_size", c.batch_size},
            {"optimizer", c.optimizer == CwOptimizer::adam ? "adam" : "gd"}};
}

AttackConfig attack_from_json(const json& j) {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "fgsm")
        return FgsmConfig{j.at("eps"), j.at("clip_min"), j.at("clip_max"), j.at("iterations")};
    if (kind == "cw")
        return CwConfig{j.at("confidence"),
                        j.at("max_iterations"),
                        j.at("c_init"),
                        j.at("binary_search_steps"),
                        j.at("step_size"),
                        j.at("clip_min"),
                        j.at("clip_max"),
                        j.at("abort_early"),
                        j.at("batch_size"),
                        j.at("optimizer").get<std::string>() == "adam" ? CwOptimizer::adam : CwOptimizer::gd};
    throw FormatError("unknown attack kind '" + kind + "'");
}

namespace {

AdversarialSet empty_set(const Classifier& model, const Dataset& normals, const AttackConfig& attack) {
    if (normals.sample_shape() != model.input_shape())
        throw ShapeError("attack: normals have shape " + shape_str(normals.sample_shape()) + " but model " +
                         model.id() + " expects " + shape_str(model.input_shape()));
    AdversarialSet out;
    out.source_model_id = model.id();
    out.attack = attack;
    out.sample_shape = normals.sample_shape();
    out.num_classes = normals.num_classes();
    out.pixels = normals.all_pixels();
    out.labels = normals.labels();
    out.origin.resize(normals.size());
    for (std::size_t i = 0; i < normals.size(); ++i) out.origin[i] = i;
    out.failed.assign(normals.size(), 0);
    return out;
}

Scalar sign_of(Scalar v) { return v > 0 ? Scalar(1) : (v < 0 ? Scalar(-1) : Scalar(0)); }

// dJ/dlogits of softmax cross-entropy (unscaled: only its sign pattern
// through the network matters to callers using sign()).
LogitGradFn cross_entropy_upstream(std::span<const int> labels) {
    return [labels](const Tensor& logits, Tensor& dlogits) { softmax_cross_entropy(logits, labels, &dlogits); };
}

constexpr std::size_t kFgsmBatch = 256;

}  // namespace

std::vector<std::uint8_t> save_adversarial_set(const AdversarialSet& set) {
    const json header = {{"kind", "adversarial_set"},
                         {"source_model_id", set.source_model_id},
                         {"attack", attack_to_json(set.attack)},
                         {"scenario", scenario_name(set.scenario)},
                         {"seed", set.seed},
                         {"sample_shape", set.sample_shape},
                         {"num_classes", set.num_classes},
                         {"labels", set.labels},
                         {"origin", set.origin},
                         {"failed", set.failed},
                         {"diagnostics", set.diagnostics}};
    const std::span<const Scalar> blocks[] = {set.pixels};
    return write_container("MULDEFAX", header, blocks);
}

AdversarialSet load_adversarial_set(std::span<const std::uint8_t> bytes) {
    Container c = read_container(bytes, "MULDEFAX");
    AdversarialSet s;
    try {
        const json& h = c.header;
        s.source_model_id = h.at("source_model_id").get<std::string>();
        s.attack = attack_from_json(h.at("attack"));
        s.scenario = parse_scenario(h.at("scenario").get<std::string>());
        s.seed = h.at("seed").get<std::uint64_t>();
        s.sample_shape = h.at("sample_shape").get<Shape>();
        s.num_classes = h.at("num_classes").get<std::size_t>();
        s.labels = h.at("labels").get<std::vector<int>>();
        s.origin = h.at("origin").get<std::vector<std::size_t>>();
        s.failed = h.at("failed").get<std::vector<std::uint8_t>>();
        s.diagnostics = h.at("diagnostics").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed adversarial-set header: ") + e.what());
    }
    if (s.origin.size() != s.labels.size() || s.failed.size() != s.labels.size())
        throw FormatError("adversarial set: per-example arrays disagree in length");
    if (c.payload.size() != s.labels.size() * s.sample_size())
        throw ShapeError("adversarial set: payload holds " + std::to_string(c.payload.size()) + " floats, " +
                         std::to_string(s.labels.size()) + " examples of " + shape_str(s.sample_shape) + " need " +
                         std::to_string(s.labels.size() * s.sample_size()));
    s.pixels.assign(c.payload.begin(), c.payload.end());
    return s;
}

void save_adversarial_set_file(const AdversarialSet& set, const std::filesystem::path& path) {
    write_bytes(path, save_adversarial_set(set));
}

AdversarialSet load_adversarial_set_file(const std::filesystem::path& path) {
    return load_adversarial_set(read_bytes(path));
}

AdversarialSet fgsm(const Classifier& model, const Dataset& normals, const FgsmConfig& cfg) {
    cfg.validate();
    AdversarialSet out = empty_set(model, normals, cfg);
    const std::size_t d = normals.sample_size();
    const Scalar lo = static_cast<Scalar>(cfg.clip_min), hi = static_cast<Scalar>(cfg.clip_max);
    const Scalar eps = static_cast<Scalar>(cfg.eps);
    const Scalar step = static_cast<Scalar>(cfg.eps / static_cast<double>(cfg.iterations));
    if (cfg.eps == 0.0) return out;

    for (std::size_t first = 0; first < normals.size(); first += kFgsmBatch) {
        const std::size_t count = std::min(kFgsmBatch, normals.size() - first);
        const Tensor x0 = normals.batch(first, count);
        std::span<const int> labels(normals.labels().data() + first, count);
        Tensor x = x0;
        for (std::size_t it = 0; it < cfg.iterations; ++it) {
            const Tensor g = model.input_gradient(x, cross_entropy_upstream(labels));
            for (std::size_t i = 0; i < x.size(); ++i) {
                Scalar v = x[i] + step * sign_of(g[i]);
                if (cfg.iterations > 1) v = std::clamp(v, x0[i] - eps, x0[i] + eps);
                x[i] = std::clamp(v, lo, hi);
            }
        }
        std::copy(x.data().begin(), x.data().end(), out.pixels.begin() + static_cast<std::ptrdiff_t>(first * d));
    }
    return out;
}

AdversarialSet cw_l2(const Classifier& model, const Dataset& normals, const CwConfig& cfg) {
    cfg.validate();
    AdversarialSet out = empty_set(model, normals, cfg);
    const std::size_t d = normals.sample_size();
    const std::size_t k = model.num_classes();
    const double lo = cfg.clip_min, range = cfg.clip_max - cfg.clip_min;
    const double kappa = cfg.confidence;
    const std::size_t check_every = std::max<std::size_t>(1, cfg.max_iterations / 10);
    constexpr double kUpperUnset = 1e10;

    // Margin Z_y - max_{i != y} Z_i and the index attaining the max.
    const auto margin = [k](const Scalar* z, int y, std::size_t* other) {
        std::size_t best = y == 0 ? 1 : 0;
        for (std::size_t i = 0; i < k; ++i)
            if (static_cast<int>(i) != y && z[i] > z[best]) best = i;
        if (other) *other = best;
        return static_cast<double>(z[y]) - static_cast<double>(z[best]);
    };

    for (std::size_t first = 0; first < normals.size(); first += cfg.batch_size) {
        const std::size_t count = std::min(cfg.batch_size, normals.size() - first);
        const Tensor x0 = normals.batch(first, count);
        std::vector<int> y(normals.labels().begin() + static_cast<std::ptrdiff_t>(first),
                           normals.labels().begin() + static_cast<std::ptrdiff_t>(first + count));

        // Already misclassified beyond the margin: zero perturbation is optimal.
        std::vector<std::uint8_t> done(count, 0);
        {
            const Tensor z0 = model.logits(x0);
            for (std::size_t e = 0; e < count; ++e)
                if (margin(z0.ptr() + e * k, y[e], nullptr) < -kappa) done[e] = 1;
        }

        // Optimizer state is float: tanh then vectorizes, and the iterate is float anyway.
        std::vector<float> w0(count * d);
        for (std::size_t i = 0; i < w0.size(); ++i) {
            const double unit = (static_cast<double>(x0[i]) - lo) / range * 2.0 - 1.0;
            w0[i] = static_cast<float>(std::atanh(unit * 0.999999));
        }
        std::vector<float> tanh_w(count * d);
        const float flo = static_cast<float>(lo), half_range = static_cast<float>(range * 0.5);
        std::vector<double> c(count, cfg.c_init), lower(count, 0.0), upper(count, kUpperUnset);
        std::vector<double> best_l2(count, std::numeric_limits<double>::infinity());
        std::vector<Scalar> best_adv(count * d);
        std::vector<std::uint8_t> aborted(count, 0);

        const std::size_t rounds = std::max<std::size_t>(1, cfg.binary_search_steps);
        for (std::size_t round = 0; round < rounds; ++round) {
            std::vector<float> w = w0;
            std::vector<float> m1, m2;
            std::vector<std::size_t> steps(count, 0);
            if (cfg.optimizer == CwOptimizer::adam) {
                m1.assign(w.size(), 0.0f);
                m2.assign(w.size(), 0.0f);
            }
            std::vector<std::uint8_t> round_success(count, 0);
            std::vector<double> prev_loss(count, std::numeric_limits<double>::infinity());
            std::vector<std::size_t> active;
            for (std::size_t e = 0; e < count; ++e)
                if (!done[e] && !aborted[e]) active.push_back(e);

            for (std::size_t it = 0; it < cfg.max_iterations && !active.empty(); ++it) {
                const std::size_t na = active.size();
                Shape shape = x0.shape();
                shape[0] = na;
                Tensor xa(shape);
                for (std::size_t a = 0; a < na; ++a) {
                    const std::size_t e = active[a];
                    const float* we = w.data() + e * d;
                    float* te = tanh_w.data() + e * d;
                    Scalar* xe = xa.ptr() + a * d;
                    detail::tanh_array(we, te, d);
                    for (std::size_t j = 0; j < d; ++j) xe[j] = static_cast<Scalar>(flo + half_range * (te[j] + 1.0f));
                }
                std::vector<double> loss(na, 0.0);
                std::vector<std::uint8_t> keep(na, 1);
                // Gradient of c * max(Z_y - Z_other, -kappa) on the logits of rows
                // [row0, row0 + rows) of the active set.
                const auto objective = [&](std::size_t row0) {
                    return [&, row0](const Tensor& z, Tensor& dz) {
                        dz = Tensor(z.shape());
                        for (std::size_t r = 0; r < z.dim(0); ++r) {
                            const std::size_t a = row0 + r, e = active[a];
                            std::size_t other = 0;
                            const double m = margin(z.ptr() + r * k, y[e], &other);
                            if (m > -kappa) {
                                dz[r * k + static_cast<std::size_t>(y[e])] = static_cast<Scalar>(c[e]);
                                dz[r * k + other] = static_cast<Scalar>(-c[e]);
                            }
                            loss[a] = c[e] * std::max(m, -kappa);
                        }
                    };
                };
                Tensor gx, zl;
                try {
                    gx = model.input_gradient(xa, objective(0), &zl);
                } catch (const NumericError&) {
                    // Redo one example at a time to isolate the offender.
                    gx = Tensor(xa.shape());
                    zl = Tensor({na, k});
                    for (std::size_t a = 0; a < na; ++a) {
                        Shape one = shape;
                        one[0] = 1;
                        const Tensor xi(one, std::vector<Scalar>(xa.ptr() + a * d, xa.ptr() + (a + 1) * d));
                        try {
                            Tensor zi;
                            const Tensor gi = model.input_gradient(xi, objective(a), &zi);
                            std::copy(gi.data().begin(), gi.data().end(), gx.ptr() + a * d);
                            std::copy(zi.data().begin(), zi.data().end(), zl.ptr() + a * k);
                        } catch (const NumericError& err) {
                            aborted[active[a]] = 1;
                            keep[a] = 0;
                            out.diagnostics.push_back("example " + std::to_string(first + active[a]) +
                                                      ": aborted, " + err.what());
                        }
                    }
                }

                // Candidates are judged at the iterate the gradient was taken at.
                for (std::size_t a = 0; a < na; ++a) {
                    const std::size_t e = active[a];
                    if (!keep[a] || !(margin(zl.ptr() + a * k, y[e], nullptr) < -kappa)) continue;
                    double l2 = 0.0;
                    const Scalar* xp = xa.ptr() + a * d;
                    const Scalar* xo = x0.ptr() + e * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double diff = static_cast<double>(xp[j]) - static_cast<double>(xo[j]);
                        l2 += diff * diff;
                    }
                    round_success[e] = 1;
                    if (l2 < best_l2[e]) {
                        best_l2[e] = l2;
                        std::copy(xp, xp + d, best_adv.begin() + static_cast<std::ptrdiff_t>(e * d));
                    }
                }

                std::vector<std::size_t> next;
                for (std::size_t a = 0; a < na; ++a) {
                    const std::size_t e = active[a];
                    if (!keep[a]) continue;
                    const Scalar* xp = xa.ptr() + a * d;
                    const Scalar* xo = x0.ptr() + e * d;
                    const Scalar* gp = gx.ptr() + a * d;
                    const float* te = tanh_w.data() + e * d;
                    float* we = w.data() + e * d;
                    double dist = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double diff = static_cast<double>(xp[j]) - static_cast<double>(xo[j]);
                        dist += diff * diff;
                    }
                    // d/dw of (x' - x0)^2 + c f(x'), through x' = lo + range (tanh w + 1) / 2
                    const float lr = static_cast<float>(cfg.step_size);
                    if (cfg.optimizer == CwOptimizer::adam) {
                        const double t_step = static_cast<double>(++steps[e]);
                        const float inv_bias1 = static_cast<float>(1.0 / (1.0 - std::pow(0.9, t_step)));
                        const float inv_bias2 = static_cast<float>(1.0 / (1.0 - std::pow(0.999, t_step)));
                        float* m1e = m1.data() + e * d;
                        float* m2e = m2.data() + e * d;
                        for (std::size_t j = 0; j < d; ++j) {
                            const float g = (2.0f * static_cast<float>(xp[j] - xo[j]) + static_cast<float>(gp[j])) *
                                            half_range * (1.0f - te[j] * te[j]);
                            m1e[j] = 0.9f * m1e[j] + 0.1f * g;
                            m2e[j] = 0.999f * m2e[j] + 0.001f * g * g;
                            we[j] -= lr * (m1e[j] * inv_bias1) / (std::sqrt(m2e[j] * inv_bias2) + 1e-8f);
                        }
                    } else {
                        for (std::size_t j = 0; j < d; ++j) {
                            const float g = (2.0f * static_cast<float>(xp[j] - xo[j]) + static_cast<float>(gp[j])) *
                                            half_range * (1.0f - te[j] * te[j]);
                            we[j] -= lr * g;
                        }
                    }
                    bool finite = std::isfinite(loss[a]);
                    for (std::size_t j = 0; j < d; ++j) finite &= std::isfinite(we[j]);
                    const double total = dist + loss[a];
                    if (!finite || !std::isfinite(total)) {
                        aborted[e] = 1;
                        out.diagnostics.push_back("example " + std::to_string(first + e) +
                                                  ": aborted, non-finite objective");
                        continue;
                    }
                    if (cfg.abort_early && it % check_every == 0) {
                        if (total > prev_loss[e] * 0.9999) continue;
                        prev_loss[e] = total;
                    }
                    next.push_back(e);
                }
                active.swap(next);
            }

            for (std::size_t e = 0; e < count; ++e) {
                if (done[e] || aborted[e]) continue;
                if (round_success[e]) {
                    upper[e] = std::min(upper[e], c[e]);
                    if (upper[e] < kUpperUnset * 0.1) c[e] = (lower[e] + upper[e]) / 2.0;
                } else {
                    lower[e] = std::max(lower[e], c[e]);
                    if (upper[e] < kUpperUnset * 0.1)
                        c[e] = (lower[e] + upper[e]) / 2.0;
                    else
                        c[e] *= 10.0;
                }
            }
        }

        for (std::size_t e = 0; e < count; ++e) {
            const std::size_t row = first + e;
            if (done[e]) continue;  // unperturbed already
            if (std::isfinite(best_l2[e])) {
                std::copy(best_adv.begin() + static_cast<std::ptrdiff_t>(e * d),
                          best_adv.begin() + static_cast<std::ptrdiff_t>((e + 1) * d),
                          out.pixels.begin() + static_cast<std::ptrdiff_t>(row * d));
            } else {
                out.failed[row] = 1;
            }
        }
    }
    return out;
}

AdversarialSet run_attack(const Classifier& model, const Dataset& normals, const AttackConfig& attack) {
    if (const auto* f = std::get_if<FgsmConfig>(&attack)) return fgsm(model, normals, *f);
    return cw_l2(model, normals, std::get<CwConfig>(attack));
}

LabelOracle LabelOracle::of(const Classifier& model) {
    return LabelOracle([&model](const Tensor& batch) { return predict(model, batch); });
}

std::vector<int> LabelOracle::operator()(const Tensor& batch) const {
    auto labels = fn_(batch);
    if (labels.size() != batch.dim(0)) throw Error("label oracle returned the wrong number of labels");
    queries_ += labels.size();
    return labels;
}

Dataset jacobian_augment(const Network& sub, const Dataset& set, const LabelOracle& oracle, double lambda,
                         double clip_min, double clip_max) {
    if (set.empty()) throw ArgumentError("jacobian_augment: empty set");
    const std::size_t d = set.sample_size();
    const std::size_t k = sub.num_classes();
    std::vector<Scalar> pixels(set.all_pixels());
    std::vector<int> labels(set.labels());
    pixels.reserve(2 * pixels.size());
    labels.reserve(2 * labels.size());
    constexpr std::size_t kBatch = 256;
    for (std::size_t first = 0; first < set.size(); first += kBatch) {
        const std::size_t count = std::min(kBatch, set.size() - first);
        Tensor x = set.batch(first, count);
        const Tensor g = sub.input_gradient(x, [&](const Tensor& z, Tensor& dz) {
            dz = Tensor(z.shape());
            for (std::size_t r = 0; r < count; ++r) dz[r * k + static_cast<std::size_t>(set.label(first + r))] = 1;
        });
        for (std::size_t i = 0; i < x.size(); ++i)
            x[i] = std::clamp(static_cast<Scalar>(x[i] + static_cast<Scalar>(lambda) * sign_of(g[i])),
                              static_cast<Scalar>(clip_min), static_cast<Scalar>(clip_max));
        const auto fresh = oracle(x);
        pixels.insert(pixels.end(), x.data().begin(), x.data().end());
        labels.insert(labels.end(), fresh.begin(), fresh.end());
    }
    (void)d;
    return Dataset(set.name(), set.split(), set.num_classes(), set.sample_shape(), std::move(pixels),
                   std::move(labels));
}

void SubstituteConfig::validate() const {
    if (holdout_size == 0) throw ConfigError("substitute.holdout_size", "must be positive");
    if (!(lambda > 0.0)) throw ConfigError("substitute.lambda", "must be positive");
    substitute_spec.validate();
    train.validate();
}

BlackboxResult blackbox_attack(const LabelOracle& target, const SubstituteConfig& cfg, const AttackConfig& attack,
                               const Dataset& holdout_pool, const Dataset& normals) {
    cfg.validate();
    if (cfg.holdout_size > holdout_pool.size())
        throw ArgumentError("holdout_size " + std::to_string(cfg.holdout_size) + " exceeds the pool of " +
                            std::to_string(holdout_pool.size()));
    BlackboxResult result;
    const std::size_t queries_before = target.queries();
    result.holdout_indices = sample_indices(holdout_pool, cfg.holdout_size, derive_seed(cfg.seed, 1));
    Dataset holdout = holdout_pool.subset(result.holdout_indices, "substitute");
    const auto oracle_labels = target(holdout.batch(0, holdout.size()));
    Dataset set(holdout.name(), Split::train, holdout.num_classes(), holdout.sample_shape(), holdout.all_pixels(),
                oracle_labels);

    result.substitute = Network::initialized(cfg.substitute_spec, "substitute", derive_seed(cfg.seed, 2));
    const double clip_min = attack_clip_min(attack), clip_max = attack_clip_max(attack);
    result.set_sizes.push_back(set.size());
    for (std::size_t round = 0; round <= cfg.augmentation_epochs; ++round) {
        TrainConfig tc = cfg.train;
        tc.rng_seed = derive_seed(cfg.seed, 100 + round);
        const std::size_t fit = set.size() - static_cast<std::size_t>(std::llround(tc.validation_fraction * set.size()));
        tc.batch_size = std::min(tc.batch_size, std::max<std::size_t>(1, fit));
        train(result.substitute, set, tc);
        if (round == cfg.augmentation_epochs) break;
        set = jacobian_augment(result.substitute, set, target, cfg.lambda, clip_min, clip_max);
        result.set_sizes.push_back(set.size());
    }
    result.adv = run_attack(result.substitute, normals, attack);
    result.adv.scenario = Scenario::blackbox;
    result.adv.seed = cfg.seed;
    result.oracle_queries = target.queries() - queries_before;
    return result;
}

}  // namespace muldef
