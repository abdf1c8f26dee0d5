#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "barack/dataset.hpp"
#include "barack/errors.hpp"
#include "barack/loss.hpp"
#include "barack/model.hpp"
#include "barack/rng.hpp"

namespace barack {

/// Point on the group simplex; the inner maximizer's iterate.
struct GroupWeights {
    std::vector<double> w;

    void check() const {
        double total = 0.0;
        for (double v : w) {
            if (v < 0.0) throw ParameterError("GroupWeights: negative entry");
            total += v;
        }
        if (std::abs(total - 1.0) > 1e-9)
            throw ParameterError("GroupWeights: not normalized");
    }
};

/// Exponentiated-gradient ascent step on the simplex:
/// w[g] <- w[g] * exp(eta * losses[g]), renormalized. Invariant to adding a
/// constant to all losses.
inline void exp_gradient_update(GroupWeights& gw, std::span<const double> losses,
                                double eta) {
    if (losses.size() != gw.w.size())
        throw ShapeError("exp_gradient_update: length mismatch");
    double mx = -std::numeric_limits<double>::infinity();
    for (double l : losses) mx = std::max(mx, l);
    double total = 0.0;
    for (std::size_t g = 0; g < gw.w.size(); ++g) {
        gw.w[g] *= std::exp(eta * (losses[g] - mx));
        total += gw.w[g];
    }
    for (auto& v : gw.w) v /= total;
#ifndef NDEBUG
    gw.check();
#endif
}

enum class Sampling { iid, uniform_per_group };

struct TrainConfig {
    double lr = 0.1;
    double weight_decay = 0.0;
    int epochs = 10;
    int batch_size = 64;
    double eta_group = 0.01;      // exponentiated-gradient step
    double adjustment_C = 0.0;    // C / sqrt(n_g) group adjustment
    Sampling sampling = Sampling::uniform_per_group;
    std::uint64_t seed = 0;
    int eval_every = 50;          // steps between eval-hook calls
    double aug_sigma = 0.0;       // Gaussian feature jitter on training batches
};

struct MetricsReport {
    std::vector<double> per_group_loss;
    std::vector<double> per_group_acc;
    std::vector<bool> group_present;
    double worst_group_loss = 0.0;
    double worst_group_acc = 0.0;
    double avg_acc = 0.0;
    double avg_loss = 0.0;
    double reweighted_avg_acc = 0.0;

    bool operator==(const MetricsReport&) const = default;
};

/// A materialized training view: rows, prediction targets, group assignment,
/// and (for class-conditioned models) the class fed to the conditioning.
struct TrainSet {
    std::size_t n = 0;
    std::size_t dim = 0;
    std::vector<double> x;
    std::vector<int> targets; // in [0, arity)
    std::vector<int> groups;  // in [0, num_groups)
    std::vector<int> cond_y;
    int arity = 0;
    int num_groups = 0;

    std::span<const double> row(std::size_t i) const { return {x.data() + i * dim, dim}; }
};

/// View of the task (class prediction) problem, with an externally supplied
/// group assignment (ground truth or pseudolabels).
inline TrainSet task_trainset(const Dataset& d, std::span<const int> group_assignment,
                              int num_groups, std::span<const std::size_t> idx = {}) {
    if (group_assignment.size() != d.n)
        throw ShapeError("task_trainset: group assignment length mismatch");
    TrainSet t;
    t.dim = d.dim;
    t.arity = d.num_classes;
    t.num_groups = num_groups;
    auto push = [&](std::size_t i) {
        const auto r = d.row(i);
        t.x.insert(t.x.end(), r.begin(), r.end());
        t.targets.push_back(d.class_labels[i]);
        if (group_assignment[i] < 0 || group_assignment[i] >= num_groups)
            throw LabelRange("task_trainset: group assignment out of range");
        t.groups.push_back(group_assignment[i]);
    };
    if (idx.empty())
        for (std::size_t i = 0; i < d.n; ++i) push(i);
    else
        for (std::size_t i : idx) push(i);
    t.n = t.targets.size();
    return t;
}

/// View of the group prediction problem on (a subset of) a dataset: targets
/// and groups are both the ground-truth group labels, cond_y the class.
inline TrainSet group_trainset(const Dataset& d, std::span<const std::size_t> idx = {}) {
    TrainSet t;
    t.dim = d.dim;
    t.arity = d.num_groups;
    t.num_groups = d.num_groups;
    auto push = [&](std::size_t i) {
        const auto r = d.row(i);
        t.x.insert(t.x.end(), r.begin(), r.end());
        t.targets.push_back(d.group_labels[i]);
        t.groups.push_back(d.group_labels[i]);
        t.cond_y.push_back(d.class_labels[i]);
    };
    if (idx.empty())
        for (std::size_t i = 0; i < d.n; ++i) push(i);
    else
        for (std::size_t i : idx) push(i);
    t.n = t.targets.size();
    return t;
}

struct HistoryRow {
    long step;
    std::string split;
    int group;
    double loss;
    double acc;
    double w;
};

struct History {
    std::vector<HistoryRow> rows;

    void write_csv(std::ostream& out) const {
        out << "step,split,group,loss,acc,w_g\n";
        char buf[128];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof buf, "%ld,%s,%d,%.17g,%.17g,%.17g\n", r.step,
                          r.split.c_str(), r.group, r.loss, r.acc, r.w);
            out << buf;
        }
    }
};

struct TrainResult {
    ModelParams params;
    GroupWeights weights;
    History history;
};

/// Consistency-regularization term for semi-supervised Stage-1 training:
/// confident clean-input predictions become hard targets for jittered copies.
struct SslTerm {
    const TrainSet* unlabeled = nullptr;
    double lambda_sup = 0.5;
    double tau = 0.95;
    double sigma_aug = 0.2;
};

using EvalHook = std::function<void(long step, const ModelParams& params)>;

namespace detail {

inline std::pair<double, bool> row_loss_correct(const ModelParams& p,
                                                const LossConfig& loss,
                                                std::span<const double> x, int target,
                                                const ClassConditioning* cond, int y) {
    const std::vector<double> probs = forward(p, x, cond, y);
    return {loss_value(loss, probs, target), argmax(probs) == target};
}

} // namespace detail

/// Minimax trainer for the worst-group objective. Per step: draw a batch
/// (uniform-per-group or iid, with replacement), update the group weights by
/// exponentiated gradient on the per-group batch losses plus C/sqrt(n_g), and
/// take one decoupled-weight-decay SGD step on sum_g w_g * Lhat_g. With
/// num_groups == 1 this reduces exactly to plain SGD on the average loss.
/// Deterministic given (cfg, seed, stream).
inline TrainResult gdro_train(const TrainSet& train, const ArchSpec& arch,
                              const TrainConfig& cfg, const LossConfig& loss,
                              const ClassConditioning* cond, std::uint64_t seed,
                              std::uint64_t stream, const EvalHook& hook = {},
                              const SslTerm* ssl = nullptr) {
    if (train.n == 0) throw EmptyDataset("gdro_train: empty training set");
    if (cfg.epochs < 1 || cfg.batch_size < 1)
        throw ParameterError("gdro_train: epochs and batch_size must be >= 1");
    const int G = train.num_groups;

    std::vector<std::vector<std::size_t>> by_group(G);
    for (std::size_t i = 0; i < train.n; ++i) by_group[train.groups[i]].push_back(i);
    if (cfg.sampling == Sampling::uniform_per_group)
        for (int g = 0; g < G; ++g)
            if (by_group[g].empty())
                throw EmptyGroup("gdro_train: group " + std::to_string(g) +
                                 " has no training points");

    std::vector<double> adjustment(G, 0.0);
    for (int g = 0; g < G; ++g)
        if (!by_group[g].empty())
            adjustment[g] = cfg.adjustment_C / std::sqrt(static_cast<double>(by_group[g].size()));

    Rng rng_init(seed, substream(stream, 0));
    Rng rng_batch(seed, substream(stream, 1));
    Rng rng_aug(seed, substream(stream, 2));
    Rng rng_unsup(seed, substream(stream, 3));
    Rng rng_unsup_aug(seed, substream(stream, 4));

    TrainResult res;
    res.params = init_params(arch, static_cast<int>(train.dim), train.arity, rng_init);
    res.weights.w.assign(G, 1.0 / G);

    const long steps_per_epoch =
        static_cast<long>((train.n + cfg.batch_size - 1) / cfg.batch_size);
    const long total_steps = steps_per_epoch * cfg.epochs;

    // running per-group stats between history records
    std::vector<double> acc_loss(G, 0.0), acc_correct(G, 0.0);
    std::vector<long> acc_count(G, 0);
    auto flush_history = [&](long step) {
        for (int g = 0; g < G; ++g) {
            if (acc_count[g] == 0) continue;
            res.history.rows.push_back({step, "train", g, acc_loss[g] / acc_count[g],
                                        acc_correct[g] / acc_count[g], res.weights.w[g]});
            acc_loss[g] = acc_correct[g] = 0.0;
            acc_count[g] = 0;
        }
    };

    if (hook) hook(0, res.params);

    bool ssl_hit_this_epoch = false;
    GradBatch batch, unsup_batch;
    std::vector<double> group_loss(G), group_count(G), effective(G);

    for (long step = 1; step <= total_steps; ++step) {
        batch.x.clear();
        batch.target.clear();
        batch.weight.clear();
        batch.cond_y.clear();
        std::vector<int> batch_group(cfg.batch_size);
        for (int b = 0; b < cfg.batch_size; ++b) {
            std::size_t i;
            if (cfg.sampling == Sampling::uniform_per_group) {
                const int g = static_cast<int>(rng_batch.uniform_int(G));
                i = by_group[g][rng_batch.uniform_int(by_group[g].size())];
            } else {
                i = rng_batch.uniform_int(train.n);
            }
            const auto r = train.row(i);
            batch.x.insert(batch.x.end(), r.begin(), r.end());
            if (cfg.aug_sigma > 0.0) {
                double* xb = batch.x.data() + batch.x.size() - train.dim;
                for (std::size_t j = 0; j < train.dim; ++j)
                    xb[j] += cfg.aug_sigma * rng_aug.normal();
            }
            batch.target.push_back(train.targets[i]);
            batch.weight.push_back(0.0);
            if (cond != nullptr) batch.cond_y.push_back(train.cond_y[i]);
            batch_group[b] = train.groups[i];
        }

        // per-group batch losses (on the possibly augmented inputs)
        std::fill(group_loss.begin(), group_loss.end(), 0.0);
        std::fill(group_count.begin(), group_count.end(), 0.0);
        for (int b = 0; b < cfg.batch_size; ++b) {
            std::span<const double> xb(batch.x.data() + b * train.dim, train.dim);
            const auto [l, correct] = detail::row_loss_correct(
                res.params, loss, xb, batch.target[b], cond,
                cond != nullptr ? batch.cond_y[b] : -1);
            const int g = batch_group[b];
            group_loss[g] += l;
            group_count[g] += 1.0;
            acc_loss[g] += l;
            acc_correct[g] += correct ? 1.0 : 0.0;
            ++acc_count[g];
        }
        double batch_mean = 0.0;
        for (int g = 0; g < G; ++g) {
            group_loss[g] = group_count[g] > 0 ? group_loss[g] / group_count[g] : 0.0;
            batch_mean += group_loss[g] * group_count[g];
        }
        batch_mean /= cfg.batch_size;
        if (!std::isfinite(batch_mean))
            throw Diverged("gdro_train: NaN loss at step " + std::to_string(step));

        for (int g = 0; g < G; ++g) effective[g] = group_loss[g] + adjustment[g];
        exp_gradient_update(res.weights, effective, cfg.eta_group);

        const double sup_scale = ssl != nullptr ? ssl->lambda_sup : 1.0;
        for (int b = 0; b < cfg.batch_size; ++b)
            batch.weight[b] =
                sup_scale * res.weights.w[batch_group[b]] / group_count[batch_group[b]];

        GradResult gr = grad(res.params, loss, batch, cond);

        if (ssl != nullptr) {
            const TrainSet& unl = *ssl->unlabeled;
            unsup_batch.x.clear();
            unsup_batch.target.clear();
            unsup_batch.weight.clear();
            unsup_batch.cond_y.clear();
            for (int b = 0; b < cfg.batch_size; ++b) {
                const std::size_t i = rng_unsup.uniform_int(unl.n);
                const int y = cond != nullptr ? unl.cond_y[i] : -1;
                const std::vector<double> probs = forward(res.params, unl.row(i), cond, y);
                const int pseudo = argmax(probs);
                const bool confident = probs[pseudo] >= ssl->tau;
                ssl_hit_this_epoch |= confident;
                const auto r = unl.row(i);
                unsup_batch.x.insert(unsup_batch.x.end(), r.begin(), r.end());
                double* xb = unsup_batch.x.data() + unsup_batch.x.size() - unl.dim;
                for (std::size_t j = 0; j < unl.dim; ++j)
                    xb[j] += ssl->sigma_aug * rng_unsup_aug.normal();
                unsup_batch.target.push_back(pseudo);
                unsup_batch.weight.push_back(
                    confident ? (1.0 - ssl->lambda_sup) / cfg.batch_size : 0.0);
                if (cond != nullptr) unsup_batch.cond_y.push_back(y);
            }
            GradResult gu = grad(res.params, loss, unsup_batch, cond);
            gr.grad.axpy(1.0, gu.grad);
        }

        if (cfg.weight_decay > 0.0) res.params.scale(1.0 - cfg.lr * cfg.weight_decay);
        res.params.axpy(-cfg.lr, gr.grad);

        const bool at_eval = step % cfg.eval_every == 0 || step == total_steps;
        if (at_eval) {
            flush_history(step);
            if (hook) hook(step, res.params);
        }
        if (ssl != nullptr && step % steps_per_epoch == 0) {
            if (!ssl_hit_this_epoch)
                std::fprintf(stderr,
                             "gdro_train: warning: no unlabeled point above tau for a "
                             "full epoch (step %ld)\n",
                             step);
            ssl_hit_this_epoch = false;
        }
    }
    return res;
}

/// Minibatch SGD on the average loss: the single-group case of gdro_train,
/// so histories line up exactly when comparing the two.
inline TrainResult erm_train(const TrainSet& train, const ArchSpec& arch,
                             TrainConfig cfg, const LossConfig& loss,
                             std::uint64_t seed, std::uint64_t stream,
                             const EvalHook& hook = {}) {
    TrainSet flat = train;
    flat.groups.assign(flat.n, 0);
    flat.num_groups = 1;
    return gdro_train(flat, arch, cfg, loss, nullptr, seed, stream, hook);
}

/// Exact per-group means over a split. Groups absent from the split are
/// flagged and excluded from the worst-group aggregates. reweighted_avg_acc
/// uses train_proportions when given (renormalized over present groups),
/// else equals avg_acc.
inline MetricsReport evaluate(const ModelParams& params, const TrainSet& data,
                              const LossConfig& loss,
                              const ClassConditioning* cond = nullptr,
                              std::span<const double> train_proportions = {}) {
    const int G = data.num_groups;
    MetricsReport rep;
    rep.per_group_loss.assign(G, std::numeric_limits<double>::quiet_NaN());
    rep.per_group_acc.assign(G, std::numeric_limits<double>::quiet_NaN());
    rep.group_present.assign(G, false);

    std::vector<double> loss_sum(G, 0.0), correct_sum(G, 0.0);
    std::vector<long> count(G, 0);
    double total_loss = 0.0, total_correct = 0.0;
    for (std::size_t i = 0; i < data.n; ++i) {
        const auto [l, correct] = detail::row_loss_correct(
            params, loss, data.row(i), data.targets[i], cond,
            cond != nullptr ? data.cond_y[i] : -1);
        const int g = data.groups[i];
        loss_sum[g] += l;
        correct_sum[g] += correct ? 1.0 : 0.0;
        ++count[g];
        total_loss += l;
        total_correct += correct ? 1.0 : 0.0;
    }
    rep.worst_group_loss = 0.0;
    rep.worst_group_acc = 1.0;
    for (int g = 0; g < G; ++g) {
        if (count[g] == 0) continue;
        rep.group_present[g] = true;
        rep.per_group_loss[g] = loss_sum[g] / count[g];
        rep.per_group_acc[g] = correct_sum[g] / count[g];
        rep.worst_group_loss = std::max(rep.worst_group_loss, rep.per_group_loss[g]);
        rep.worst_group_acc = std::min(rep.worst_group_acc, rep.per_group_acc[g]);
    }
    rep.avg_acc = data.n > 0 ? total_correct / data.n : 0.0;
    rep.avg_loss = data.n > 0 ? total_loss / data.n : 0.0;
    if (train_proportions.empty()) {
        rep.reweighted_avg_acc = rep.avg_acc;
    } else {
        if (train_proportions.size() != static_cast<std::size_t>(G))
            throw ShapeError("evaluate: train_proportions length mismatch");
        double num = 0.0, den = 0.0;
        for (int g = 0; g < G; ++g) {
            if (!rep.group_present[g]) continue;
            num += train_proportions[g] * rep.per_group_acc[g];
            den += train_proportions[g];
        }
        rep.reweighted_avg_acc = den > 0.0 ? num / den : 0.0;
    }
    return rep;
}

} // namespace barack
