#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "barack/ablation.hpp"
#include "barack/config.hpp"
#include "barack/dataset.hpp"
#include "barack/errors.hpp"
#include "barack/loss.hpp"
#include "barack/optim.hpp"
#include "barack/pipeline.hpp"
#include "barack/rng.hpp"

namespace barack {

// ---------------------------------------------------------------------------
// Tasks and splits
// ---------------------------------------------------------------------------

enum class TaskKind { spurious, rare_group, pointmass };

struct TaskSpec {
    TaskKind kind = TaskKind::spurious;
    std::size_t n_train = 4000;
    std::size_t n_val = 2000;
    std::size_t n_test = 20000;
    // spurious; the weak core signal keeps tiny-subset training well below
    // the full-data ceiling, the strong spurious signal makes Stage-1 group
    // prediction learnable from a handful of labels
    double rho = 0.95;
    double mu_core = 0.75;
    double mu_spur = 3.0;
    double class0_prior = 0.5;
    std::size_t noise_dims = 8;
    // rare_group
    int num_groups = 4;
    int rare_group = 0;
    double rare_frac = 0.1;
    // pointmass
    std::vector<double> priors = {0.1, 0.3, 0.3, 0.3};
};

inline TaskKind task_kind_from_string(const std::string& s) {
    if (s == "spurious") return TaskKind::spurious;
    if (s == "rare_group") return TaskKind::rare_group;
    if (s == "pointmass") return TaskKind::pointmass;
    throw ConfigError("unknown task kind: " + s);
}

inline const char* to_string(TaskKind k) {
    switch (k) {
        case TaskKind::spurious: return "spurious";
        case TaskKind::rare_group: return "rare_group";
        default: return "pointmass";
    }
}

/// Keys of the "task." section: kind, n_train, n_val, n_test, rho, mu_core,
/// mu_spur, class0_prior, noise_dims, num_groups, rare_group, rare_frac,
/// priors.
inline TaskSpec task_from_config(const Config& c) {
    TaskSpec t;
    t.kind = task_kind_from_string(c.get_str("kind", "spurious"));
    t.n_train = c.get_int("n_train", t.n_train);
    t.n_val = c.get_int("n_val", t.n_val);
    t.n_test = c.get_int("n_test", t.n_test);
    t.rho = c.get_double("rho", t.rho);
    t.mu_core = c.get_double("mu_core", t.mu_core);
    t.mu_spur = c.get_double("mu_spur", t.mu_spur);
    t.class0_prior = c.get_double("class0_prior", t.class0_prior);
    t.noise_dims = c.get_int("noise_dims", t.noise_dims);
    t.num_groups = static_cast<int>(c.get_int("num_groups", t.num_groups));
    t.rare_group = static_cast<int>(c.get_int("rare_group", t.rare_group));
    t.rare_frac = c.get_double("rare_frac", t.rare_frac);
    t.priors = c.get_double_list("priors", t.priors);
    return t;
}

/// Deterministic per-split generation. The test split is group-balanced
/// (rho = 0.5, rare_frac = 1, uniform priors) so its average metrics weight
/// the groups equally.
inline Dataset make_split(const TaskSpec& spec, SplitTag tag, std::uint64_t seed) {
    const std::uint64_t split_seed =
        Rng(seed, substream(streams::data, static_cast<std::uint64_t>(tag) + 1))
            .next_u64();
    const bool balanced = tag == SplitTag::test;
    const std::size_t n = tag == SplitTag::train ? spec.n_train
                          : tag == SplitTag::val ? spec.n_val
                                                 : spec.n_test;
    Dataset d;
    switch (spec.kind) {
        case TaskKind::spurious:
            d = gen_spurious(n, balanced ? 0.5 : spec.rho, spec.mu_core, spec.mu_spur,
                             spec.noise_dims, split_seed,
                             balanced ? 0.5 : spec.class0_prior);
            break;
        case TaskKind::rare_group:
            d = gen_rare_group(n, spec.num_groups, spec.rare_group,
                               balanced ? 1.0 : spec.rare_frac, split_seed,
                               spec.noise_dims);
            break;
        case TaskKind::pointmass: {
            std::vector<double> priors = spec.priors;
            if (balanced)
                priors.assign(spec.priors.size(), 1.0 / spec.priors.size());
            d = gen_pointmass(priors, n, split_seed);
            break;
        }
    }
    d.split_tag = tag;
    return d;
}

// ---------------------------------------------------------------------------
// Methods
// ---------------------------------------------------------------------------

enum class Method { erm, full_gdro, subset_gdro, barack, barack_ssl, flip_gdro };

inline Method method_from_string(const std::string& s) {
    if (s == "erm") return Method::erm;
    if (s == "full_gdro") return Method::full_gdro;
    if (s == "subset_gdro") return Method::subset_gdro;
    if (s == "barack") return Method::barack;
    if (s == "barack_ssl") return Method::barack_ssl;
    if (s == "flip_gdro") return Method::flip_gdro;
    throw ConfigError("unknown method: " + s);
}

inline const char* to_string(Method m) {
    switch (m) {
        case Method::erm: return "erm";
        case Method::full_gdro: return "full_gdro";
        case Method::subset_gdro: return "subset_gdro";
        case Method::barack: return "barack";
        case Method::barack_ssl: return "barack_ssl";
        default: return "flip_gdro";
    }
}

struct Hypers {
    double lr = 0.1;
    double adjustment_C = 0.0;
};

struct MethodConfig {
    ArchSpec arch{ArchKind::mlp1, 32};
    TrainConfig base;              // shared trainer settings (epochs, batch, ...)
    Stage1Config stage1;           // group-classifier settings (barack variants)
    PredictMode predict_mode = PredictMode::argmax;
    std::vector<double> lr_grid = {0.1};
    std::vector<double> adjustment_grid = {0.0, 2.0, 3.0};

    MethodConfig() {
        // zero epochs/batch mean "derive from the label budget at run time"
        stage1.arch = arch;
        stage1.train.epochs = 0;
        stage1.train.batch_size = 0;
        stage1.train.aug_sigma = 0.1;
    }
};

/// Keys: arch, hidden, lr, weight_decay, epochs, batch_size, eta_group,
/// eval_every, aug_sigma, lr_grid, adjustment_grid, predict,
/// stage1.epochs, stage1.lr, stage1.aug_sigma, stage1.use_class_input,
/// stage1.ssl, stage1.ssl_lambda, stage1.ssl_tau, stage1.ssl_sigma.
inline MethodConfig method_config_from_config(const Config& c) {
    MethodConfig mc;
    mc.arch.kind = arch_from_string(c.get_str("arch", "mlp1"));
    mc.arch.hidden = static_cast<int>(c.get_int("hidden", mc.arch.hidden));
    mc.base.lr = c.get_double("lr", mc.base.lr);
    mc.base.weight_decay = c.get_double("weight_decay", mc.base.weight_decay);
    mc.base.epochs = static_cast<int>(c.get_int("epochs", 60));
    mc.base.batch_size = static_cast<int>(c.get_int("batch_size", mc.base.batch_size));
    mc.base.eta_group = c.get_double("eta_group", mc.base.eta_group);
    mc.base.eval_every = static_cast<int>(c.get_int("eval_every", mc.base.eval_every));
    mc.base.aug_sigma = c.get_double("aug_sigma", mc.base.aug_sigma);
    mc.lr_grid = c.get_double_list("lr_grid", {mc.base.lr});
    mc.adjustment_grid = c.get_double_list("adjustment_grid", mc.adjustment_grid);
    const std::string predict = c.get_str("predict", "argmax");
    if (predict == "argmax")
        mc.predict_mode = PredictMode::argmax;
    else if (predict == "sampled")
        mc.predict_mode = PredictMode::sampled;
    else
        throw ConfigError("predict must be argmax or sampled");

    mc.stage1.arch = mc.arch;
    mc.stage1.train = mc.base;
    mc.stage1.train.epochs = static_cast<int>(c.get_int("stage1.epochs", 0));
    mc.stage1.train.batch_size = static_cast<int>(c.get_int("stage1.batch_size", 0));
    mc.stage1.train.lr = c.get_double("stage1.lr", mc.base.lr);
    mc.stage1.train.aug_sigma = c.get_double("stage1.aug_sigma", 0.1);
    mc.stage1.use_class_input = c.get_bool("stage1.use_class_input", true);
    if (c.get_bool("stage1.ssl", false)) {
        SSLConfig ssl;
        ssl.lambda_sup = c.get_double("stage1.ssl_lambda", ssl.lambda_sup);
        ssl.tau = c.get_double("stage1.ssl_tau", ssl.tau);
        ssl.sigma_aug = c.get_double("stage1.ssl_sigma", ssl.sigma_aug);
        mc.stage1.ssl = ssl;
    }
    return mc;
}

struct RunOutput {
    Method method = Method::erm;
    std::uint64_t seed = 0;
    Hypers chosen;
    MetricsReport val_report;   // group-labeled validation subset
    MetricsReport test_report;  // group-balanced test split, true groups
    ModelParams params;
    PseudoLabels pseudolabels;         // barack variants only
    ConfusionMatrix stage1_confusion;  // barack variants only (analysis output)
    Stage1Result stage1;               // barack variants only
    History train_history;
    History val_history;
};

namespace detail {

/// Fill in size-dependent Stage-1 defaults: epoch budget from the per-group
/// label count, batch capped at the labeled-set size.
inline Stage1Config resolve_stage1(Stage1Config cfg, const Dataset& train,
                                   const LabelMask& mask) {
    const std::size_t m_total = mask.labeled_train_idx.size();
    const std::size_t per_group = std::max<std::size_t>(1, m_total / train.num_groups);
    if (cfg.train.epochs == 0)
        cfg.train.epochs = stage1_epochs(static_cast<int>(per_group));
    if (cfg.train.batch_size == 0)
        cfg.train.batch_size = static_cast<int>(std::min<std::size_t>(128, m_total));
    return cfg;
}

} // namespace detail

/// Run one method at one seed, tuning (lr, adjustment) on the worst-group
/// accuracy of the group-labeled validation subset; ties keep the earliest
/// grid point. For BARACK variants Stage 1 runs once and only Stage 2 is
/// tuned. `flip_confusion` supplies the noise target for flip_gdro (taken
/// from the paired barack run); `forced` skips the grid entirely.
inline RunOutput run_method(Method method, const Dataset& train, const Dataset& val,
                            const Dataset& test, const LabelMask& mask,
                            const MethodConfig& mc, const LossConfig& loss,
                            std::uint64_t seed,
                            const ConfusionMatrix* flip_confusion = nullptr,
                            const std::optional<Hypers>& forced = std::nullopt) {
    RunOutput out;
    out.method = method;
    out.seed = seed;

    // per-method setup done once, shared across grid points
    std::vector<int> flat_groups;
    std::vector<int> noisy_groups;
    if (method == Method::erm) flat_groups.assign(train.n, 0);
    if (method == Method::flip_gdro) {
        if (flip_confusion == nullptr)
            throw ParameterError("run_method: flip_gdro needs a confusion matrix");
        noisy_groups = flip_to_confusion(train.group_labels, *flip_confusion, seed);
    }
    if (method == Method::barack || method == Method::barack_ssl) {
        Stage1Config s1 = detail::resolve_stage1(mc.stage1, train, mask);
        if (method == Method::barack_ssl && !s1.ssl) s1.ssl = SSLConfig{};
        if (method == Method::barack) s1.ssl.reset();
        out.stage1 = s1.ssl ? ssl_group_trainer(train, mask, s1, loss, seed)
                            : train_group_classifier(train, val, mask, s1, loss, seed);
        const ClassConditioning* cond = out.stage1.cond ? &*out.stage1.cond : nullptr;
        out.pseudolabels = predict_groups(out.stage1.params, cond, train, mask,
                                          mc.predict_mode, seed);
        out.stage1_confusion =
            confusion(out.pseudolabels.z_hat, train.group_labels, train.num_groups);
    }

    std::vector<Hypers> grid;
    if (forced) {
        grid.push_back(*forced);
    } else {
        for (double lr : mc.lr_grid)
            for (double C : mc.adjustment_grid) {
                grid.push_back({lr, C});
                // a single flat group makes the adjustment a no-op
                if (method == Method::erm) break;
            }
    }

    double best = -1.0;
    for (const Hypers& h : grid) {
        Stage2Config cfg2;
        cfg2.arch = mc.arch;
        cfg2.train = mc.base;
        cfg2.train.lr = h.lr;
        cfg2.train.adjustment_C = h.adjustment_C;

        RobustResult rr;
        switch (method) {
            case Method::erm:
                rr = train_robust(train, flat_groups, 1, {}, val, mask.labeled_val_idx,
                                  cfg2, loss, seed);
                break;
            case Method::full_gdro:
                rr = full_gdro(train, val, {}, cfg2, loss, seed);
                break;
            case Method::subset_gdro:
                rr = train_robust(train, train.group_labels, train.num_groups,
                                  mask.labeled_train_idx, val, mask.labeled_val_idx,
                                  cfg2, loss, seed);
                break;
            case Method::flip_gdro:
                rr = train_robust(train, noisy_groups, train.num_groups, {}, val,
                                  mask.labeled_val_idx, cfg2, loss, seed);
                break;
            case Method::barack:
            case Method::barack_ssl: {
                BarackConfig bc;
                bc.stage1 = mc.stage1;
                bc.stage2 = cfg2;
                bc.predict_mode = mc.predict_mode;
                const BarackResult br = barack_run(train, val, mask, bc, loss, seed,
                                                   &out.pseudolabels);
                rr = br.stage2;
                break;
            }
        }
        if (rr.best_val_worst_acc > best) {
            best = rr.best_val_worst_acc;
            out.chosen = h;
            out.val_report = rr.val_report;
            out.params = std::move(rr.params);
            out.train_history = std::move(rr.train_history);
            out.val_history = std::move(rr.val_history);
        }
    }

    const TrainSet test_ts = task_trainset(test, test.group_labels, test.num_groups);
    out.test_report = evaluate(out.params, test_ts, loss);
    return out;
}

/// Flat key=value metrics block, one run per stream.
inline void write_metrics_kv(const RunOutput& r, std::ostream& out) {
    char buf[160];
    auto put = [&](const char* key, double v) {
        std::snprintf(buf, sizeof buf, "%s = %.17g\n", key, v);
        out << buf;
    };
    out << "method = " << to_string(r.method) << '\n';
    out << "seed = " << r.seed << '\n';
    put("chosen_lr", r.chosen.lr);
    put("chosen_adjustment", r.chosen.adjustment_C);
    put("val_worst_group_acc", r.val_report.worst_group_acc);
    put("val_avg_acc", r.val_report.avg_acc);
    put("test_worst_group_acc", r.test_report.worst_group_acc);
    put("test_avg_acc", r.test_report.avg_acc);
    put("test_worst_group_loss", r.test_report.worst_group_loss);
    for (std::size_t g = 0; g < r.test_report.per_group_acc.size(); ++g) {
        std::snprintf(buf, sizeof buf, "test_group%zu_acc = %.17g\n", g,
                      r.test_report.per_group_acc[g]);
        out << buf;
    }
}

} // namespace barack
