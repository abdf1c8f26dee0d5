#pragma once

#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "barack/ablation.hpp"
#include "barack/dataset.hpp"
#include "barack/errors.hpp"
#include "barack/model.hpp"
#include "barack/optim.hpp"
#include "barack/rng.hpp"

namespace barack {

enum class PseudoSource : unsigned char { ground_truth, argmax_pred, sampled_pred };
enum class PredictMode { argmax, sampled };

struct PseudoLabels {
    std::vector<int> z_hat;
    std::vector<PseudoSource> source;
};

struct SSLConfig {
    double lambda_sup = 0.5;  // weight on the supervised (GDRO) term
    double tau = 0.95;        // confidence threshold for the consistency term
    double sigma_aug = 0.2;   // feature jitter used as augmentation
};

struct Stage1Config {
    TrainConfig train;
    ArchSpec arch;
    bool use_class_input = true;
    std::optional<SSLConfig> ssl;
};

struct Stage2Config {
    TrainConfig train;
    ArchSpec arch;
};

struct BarackConfig {
    Stage1Config stage1;
    Stage2Config stage2;
    PredictMode predict_mode = PredictMode::argmax;
};

/// Stage-1 epoch budget shrinks as the labeled set grows, keeping total
/// optimization work roughly constant: scale / (n_lab / 64).
inline int stage1_epochs(int n_lab_smallest_group, double scale = 100.0) {
    return std::max(1, static_cast<int>(std::lround(scale * 64.0 / n_lab_smallest_group)));
}

struct Stage1Result {
    ModelParams params;
    std::optional<ClassConditioning> cond;
    double best_val_worst_acc = 0.0;
    long best_step = 0;
    History train_history;
    History val_history;
};

namespace detail {

inline void record_val(History& h, long step, const MetricsReport& rep) {
    for (int g = 0; g < static_cast<int>(rep.per_group_acc.size()); ++g)
        if (rep.group_present[g])
            h.rows.push_back({step, "val", g, rep.per_group_loss[g],
                              rep.per_group_acc[g], 0.0});
}

} // namespace detail

/// Supervised Stage 1: GDRO on the group-labeled training rows, checkpoint
/// selected by worst-group accuracy on the group-labeled validation subset
/// (ties broken toward the earliest checkpoint).
inline Stage1Result train_group_classifier(const Dataset& train, const Dataset& val,
                                           const LabelMask& mask,
                                           const Stage1Config& cfg,
                                           const LossConfig& loss,
                                           std::uint64_t seed) {
    if (mask.labeled_train_idx.empty())
        throw EmptyDataset("train_group_classifier: empty group-labeled training set");
    if (mask.labeled_val_idx.empty())
        throw EmptyDataset("train_group_classifier: empty group-labeled validation set");

    const TrainSet d1 = group_trainset(train, mask.labeled_train_idx);
    const TrainSet d1v = group_trainset(val, mask.labeled_val_idx);

    Stage1Result out;
    if (cfg.use_class_input)
        out.cond = fit_conditioning(d1.cond_y, d1.targets, train.class_of_group,
                                    train.num_classes);
    const ClassConditioning* cond = cfg.use_class_input ? &*out.cond : nullptr;

    out.best_val_worst_acc = -1.0;
    auto hook = [&](long step, const ModelParams& params) {
        const MetricsReport rep = evaluate(params, d1v, loss, cond);
        detail::record_val(out.val_history, step, rep);
        if (rep.worst_group_acc > out.best_val_worst_acc) {
            out.best_val_worst_acc = rep.worst_group_acc;
            out.best_step = step;
            out.params = params;
        }
    };

    TrainResult res =
        gdro_train(d1, cfg.arch, cfg.train, loss, cond, seed, streams::stage1, hook);
    out.train_history = std::move(res.history);
    return out;
}

/// Semi-supervised Stage 1: GDRO-weighted supervised loss on D1 plus a
/// confidence-thresholded consistency loss on D2. Following the convention
/// that the final FixMatch-style model is used as-is, the *last* iterate is
/// returned and the validation subset is not consulted.
inline Stage1Result ssl_group_trainer(const Dataset& train, const LabelMask& mask,
                                      const Stage1Config& cfg, const LossConfig& loss,
                                      std::uint64_t seed) {
    if (mask.labeled_train_idx.empty())
        throw EmptyDataset("ssl_group_trainer: empty group-labeled training set");
    if (mask.unlabeled_train_idx.empty())
        throw EmptyDataset("ssl_group_trainer: empty group-unlabeled training set");
    if (!cfg.ssl) throw ParameterError("ssl_group_trainer: ssl config missing");

    const TrainSet d1 = group_trainset(train, mask.labeled_train_idx);
    const TrainSet d2 = group_trainset(train, mask.unlabeled_train_idx);

    Stage1Result out;
    if (cfg.use_class_input)
        out.cond = fit_conditioning(d1.cond_y, d1.targets, train.class_of_group,
                                    train.num_classes);
    const ClassConditioning* cond = cfg.use_class_input ? &*out.cond : nullptr;

    SslTerm term;
    term.unlabeled = &d2;
    term.lambda_sup = cfg.ssl->lambda_sup;
    term.tau = cfg.ssl->tau;
    term.sigma_aug = cfg.ssl->sigma_aug;

    TrainResult res = gdro_train(d1, cfg.arch, cfg.train, loss, cond, seed,
                                 streams::stage1, {}, &term);
    out.params = std::move(res.params);
    out.train_history = std::move(res.history);
    return out;
}

/// Pseudolabels for the whole training split: ground truth on labeled rows,
/// argmax (lowest index wins) or a seeded categorical draw elsewhere.
inline PseudoLabels predict_groups(const ModelParams& params,
                                   const ClassConditioning* cond, const Dataset& data,
                                   const LabelMask& mask, PredictMode mode,
                                   std::uint64_t seed) {
    PseudoLabels out;
    out.z_hat.assign(data.n, -1);
    out.source.assign(data.n, PseudoSource::argmax_pred);
    for (std::size_t i : mask.labeled_train_idx) {
        out.z_hat[i] = data.group_labels[i];
        out.source[i] = PseudoSource::ground_truth;
    }
    Rng rng(seed, streams::predict);
    for (std::size_t i = 0; i < data.n; ++i) {
        if (out.source[i] == PseudoSource::ground_truth) continue;
        const std::vector<double> probs =
            forward(params, data.row(i), cond, data.class_labels[i]);
        if (mode == PredictMode::argmax) {
            out.z_hat[i] = argmax(probs);
            out.source[i] = PseudoSource::argmax_pred;
        } else {
            out.z_hat[i] = static_cast<int>(rng.categorical(probs));
            out.source[i] = PseudoSource::sampled_pred;
        }
    }
    return out;
}

struct RobustResult {
    ModelParams params;
    GroupWeights weights;
    History train_history;
    History val_history;
    double best_val_worst_acc = 0.0;
    long best_step = 0;
    MetricsReport val_report; // of the selected checkpoint, on val_idx
};

/// Stage-2 style GDRO on the task labels with an externally supplied group
/// assignment, checkpoint-selected by worst-group accuracy on the given
/// validation rows (evaluated against their ground-truth groups). Shared by
/// BARACK stage 2, Full-GDRO and Subset-GDRO so that coinciding inputs give
/// bitwise-identical results.
inline RobustResult train_robust(const Dataset& train,
                                 std::span<const int> group_assignment, int num_groups,
                                 std::span<const std::size_t> train_idx,
                                 const Dataset& val,
                                 std::span<const std::size_t> val_idx,
                                 const Stage2Config& cfg, const LossConfig& loss,
                                 std::uint64_t seed) {
    const TrainSet ts = task_trainset(train, group_assignment, num_groups, train_idx);
    std::vector<std::size_t> all_val;
    if (val_idx.empty()) {
        all_val.resize(val.n);
        for (std::size_t i = 0; i < val.n; ++i) all_val[i] = i;
        val_idx = all_val;
    }
    const TrainSet vs = task_trainset(val, val.group_labels, val.num_groups, val_idx);

    RobustResult out;
    out.best_val_worst_acc = -1.0;
    auto hook = [&](long step, const ModelParams& params) {
        const MetricsReport rep = evaluate(params, vs, loss);
        detail::record_val(out.val_history, step, rep);
        if (rep.worst_group_acc > out.best_val_worst_acc) {
            out.best_val_worst_acc = rep.worst_group_acc;
            out.best_step = step;
            out.params = params;
            out.val_report = rep;
        }
    };
    TrainResult res =
        gdro_train(ts, cfg.arch, cfg.train, loss, nullptr, seed, streams::stage2, hook);
    out.weights = std::move(res.weights);
    out.train_history = std::move(res.history);
    return out;
}

struct BarackResult {
    ModelParams params;
    MetricsReport val_report;
    PseudoLabels pseudolabels;
    ConfusionMatrix stage1_confusion; // vs ground truth on train; analysis only
    Stage1Result stage1;
    RobustResult stage2;
    std::vector<int> remapped_groups; // old id -> stage-2 id (-1 if dropped)
};

/// The full two-stage pipeline. `injected` substitutes the Stage-1 + Predict
/// output (test hook for oracle pseudolabels); Stage 1 is skipped entirely
/// in that case and when every training row is group-labeled.
inline BarackResult barack_run(const Dataset& train, const Dataset& val,
                               const LabelMask& mask, const BarackConfig& cfg,
                               const LossConfig& loss, std::uint64_t seed,
                               const PseudoLabels* injected = nullptr) {
    if (mask.labeled_train_idx.empty())
        throw EmptyDataset("barack_run: mask has no group-labeled training rows");

    BarackResult out;
    if (injected != nullptr) {
        out.pseudolabels = *injected;
    } else if (mask.unlabeled_train_idx.empty()) {
        out.pseudolabels.z_hat.assign(train.group_labels.begin(), train.group_labels.end());
        out.pseudolabels.source.assign(train.n, PseudoSource::ground_truth);
    } else {
        out.stage1 = cfg.stage1.ssl
                         ? ssl_group_trainer(train, mask, cfg.stage1, loss, seed)
                         : train_group_classifier(train, val, mask, cfg.stage1, loss, seed);
        const ClassConditioning* cond = out.stage1.cond ? &*out.stage1.cond : nullptr;
        out.pseudolabels = predict_groups(out.stage1.params, cond, train, mask,
                                          cfg.predict_mode, seed);
    }
    out.stage1_confusion =
        confusion(out.pseudolabels.z_hat, train.group_labels, train.num_groups);

    // Stage 2 runs over the ground-truth group arity; pseudo-groups that
    // received no points are remapped out with a warning.
    std::vector<std::size_t> count(train.num_groups, 0);
    for (int z : out.pseudolabels.z_hat) ++count[z];
    out.remapped_groups.assign(train.num_groups, -1);
    int next_id = 0;
    for (int g = 0; g < train.num_groups; ++g)
        if (count[g] > 0) out.remapped_groups[g] = next_id++;
    std::vector<int> stage2_groups(train.n);
    for (std::size_t i = 0; i < train.n; ++i)
        stage2_groups[i] = out.remapped_groups[out.pseudolabels.z_hat[i]];
    if (next_id < train.num_groups)
        std::fprintf(stderr,
                     "barack_run: warning: %d pseudo-group(s) received no points and "
                     "were remapped out of stage 2\n",
                     train.num_groups - next_id);

    out.stage2 = train_robust(train, stage2_groups, next_id, {}, val,
                              mask.labeled_val_idx, cfg.stage2, loss, seed);
    out.params = out.stage2.params;
    out.val_report = out.stage2.val_report;
    return out;
}

struct SubsetResult {
    ModelParams params;
    MetricsReport val_report;
    std::size_t train_size = 0;
    RobustResult detail;
};

/// GDRO restricted to the group-labeled training subset, validated on the
/// group-labeled validation subset.
inline SubsetResult subset_gdro(const Dataset& train, const Dataset& val,
                                const LabelMask& mask, const Stage2Config& cfg,
                                const LossConfig& loss, std::uint64_t seed) {
    SubsetResult out;
    out.train_size = mask.labeled_train_idx.size();
    out.detail = train_robust(train, train.group_labels, train.num_groups,
                              mask.labeled_train_idx, val, mask.labeled_val_idx, cfg,
                              loss, seed);
    out.params = out.detail.params;
    out.val_report = out.detail.val_report;
    return out;
}

/// GDRO with all ground-truth group labels; the approximate upper bound.
inline RobustResult full_gdro(const Dataset& train, const Dataset& val,
                              std::span<const std::size_t> val_idx,
                              const Stage2Config& cfg, const LossConfig& loss,
                              std::uint64_t seed) {
    return train_robust(train, train.group_labels, train.num_groups, {}, val, val_idx,
                        cfg, loss, seed);
}

/// Mask in which every train and validation row is group-labeled (m = n).
inline LabelMask full_mask(const Dataset& train, const Dataset& val) {
    LabelMask mask;
    mask.labeled_train_idx.resize(train.n);
    for (std::size_t i = 0; i < train.n; ++i) mask.labeled_train_idx[i] = i;
    mask.labeled_val_idx.resize(val.n);
    for (std::size_t i = 0; i < val.n; ++i) mask.labeled_val_idx[i] = i;
    return mask;
}

/// Pseudolabel file: "index, z_true, z_hat, source".
inline void save_pseudolabels_csv(const PseudoLabels& pl,
                                  std::span<const int> z_true, std::ostream& out) {
    out << "index,z_true,z_hat,source\n";
    for (std::size_t i = 0; i < pl.z_hat.size(); ++i) {
        const char* src = pl.source[i] == PseudoSource::ground_truth ? "ground_truth"
                          : pl.source[i] == PseudoSource::argmax_pred ? "argmax"
                                                                      : "sampled";
        out << i << ',' << z_true[i] << ',' << pl.z_hat[i] << ',' << src << '\n';
    }
}

} // namespace barack
