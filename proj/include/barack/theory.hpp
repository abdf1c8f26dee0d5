#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "barack/dataset.hpp"
#include "barack/errors.hpp"
#include "barack/loss.hpp"
#include "barack/model.hpp"
#include "barack/optim.hpp"
#include "barack/pipeline.hpp"
#include "barack/rng.hpp"

namespace barack {

// ---------------------------------------------------------------------------
// Quadrature and closed-form minimax risks
// ---------------------------------------------------------------------------

namespace detail {

/// Nodes and weights for integral e^{-t^2} f(t) dt, by Newton iteration on
/// the normalized Hermite recurrence.
inline std::pair<std::vector<double>, std::vector<double>> gauss_hermite(int n) {
    std::vector<double> x(n), w(n);
    const int m = (n + 1) / 2;
    double z = 0.0;
    for (int i = 0; i < m; ++i) {
        if (i == 0)
            z = std::sqrt(2.0 * n + 1) - 1.85575 * std::pow(2.0 * n + 1, -1.0 / 6.0);
        else if (i == 1)
            z -= 1.14 * std::pow(static_cast<double>(n), 0.426) / z;
        else if (i == 2)
            z = 1.86 * z - 0.86 * x[0];
        else if (i == 3)
            z = 1.91 * z - 0.91 * x[1];
        else
            z = 2.0 * z - x[i - 2];
        double pp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p1 = 0.7511255444649425; // pi^{-1/4}
            double p2 = 0.0;
            for (int j = 0; j < n; ++j) {
                const double p3 = p2;
                p2 = p1;
                p1 = z * std::sqrt(2.0 / (j + 1)) * p2 -
                     std::sqrt(static_cast<double>(j) / (j + 1)) * p3;
            }
            pp = std::sqrt(2.0 * n) * p2;
            const double z1 = z;
            z = z1 - p1 / pp;
            if (std::abs(z - z1) <= 1e-14) break;
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    return {x, w};
}

inline double softplus(double a) {
    return std::max(a, 0.0) + std::log1p(std::exp(-std::abs(a)));
}

inline double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

/// Loss of a binary predictor that puts probability p_true on the true class.
inline double binary_loss(const LossConfig& cfg, double p_true) {
    if (cfg.kind == LossKind::truncated_ce) {
        if (p_true <= 0.0) return cfg.B;
        return std::min(-std::log(p_true), cfg.B);
    }
    const double d = 1.0 - p_true;
    return 2.0 * d * d;
}

} // namespace detail

/// The group-balanced Bayes class-1 probability for the spurious-feature
/// task; under a balanced group prior only the core coordinate is
/// informative, so p(y=1|x) = sigmoid(2 * mu_core * x[0]).
inline double spurious_bayes_prob1(double x0, double mu_core) {
    return detail::sigmoid(2.0 * mu_core * x0);
}

/// Minimax (worst-group) population risk on the spurious-feature task: the
/// balanced Bayes predictor equalizes the per-group risks, so the value is
/// a one-dimensional Gaussian expectation computed by quadrature.
inline double spurious_oracle_robust(double mu_core, const LossConfig& loss,
                                     int nodes = 80) {
    const auto [t, w] = detail::gauss_hermite(nodes);
    double s = 0.0;
    for (int i = 0; i < nodes; ++i) {
        const double u = mu_core + std::numbers::sqrt2 * t[i];
        const double p_true = detail::sigmoid(2.0 * mu_core * u);
        s += w[i] * detail::binary_loss(loss, p_true);
    }
    return s / std::sqrt(std::numbers::pi);
}

/// The group-balanced Bayes class probabilities for the circle-of-blobs task
/// at core coordinates (x0, x1): each class is an equal-weight mixture of
/// unit Gaussians at its blob centers.
inline void rare_group_bayes(double x0, double x1, int num_groups, double* probs2) {
    double log_s[2] = {-std::numeric_limits<double>::infinity(),
                       -std::numeric_limits<double>::infinity()};
    for (int g = 0; g < num_groups; ++g) {
        double mean[2];
        rare_group_mean(g, num_groups, mean);
        const double dx = x0 - mean[0], dy = x1 - mean[1];
        const double le = -(dx * dx + dy * dy) / 2.0;
        const int c = g < num_groups / 2 ? 0 : 1;
        const double hi = std::max(log_s[c], le);
        log_s[c] = hi + std::log(std::exp(log_s[c] - hi) + std::exp(le - hi));
    }
    const double hi = std::max(log_s[0], log_s[1]);
    const double z = hi + std::log(std::exp(log_s[0] - hi) + std::exp(log_s[1] - hi));
    probs2[0] = std::exp(log_s[0] - z);
    probs2[1] = std::exp(log_s[1] - z);
}

/// Minimax population risk on the circle-of-blobs task. Rotating the circle
/// by one slot permutes the groups and swaps the classes, so the balanced
/// Bayes predictor gives every group the same risk; it is computed for group
/// 0 by a tensor-product quadrature over the two core coordinates.
inline double rare_group_oracle_robust(int num_groups, const LossConfig& loss,
                                       int nodes = 60) {
    const auto [t, w] = detail::gauss_hermite(nodes);
    double mean[2];
    rare_group_mean(0, num_groups, mean);
    double s = 0.0;
    for (int i = 0; i < nodes; ++i)
        for (int j = 0; j < nodes; ++j) {
            const double x0 = mean[0] + std::numbers::sqrt2 * t[i];
            const double x1 = mean[1] + std::numbers::sqrt2 * t[j];
            double p[2];
            rare_group_bayes(x0, x1, num_groups, p);
            s += w[i] * w[j] * detail::binary_loss(loss, p[0]);
        }
    return s / std::numbers::pi;
}

/// Minimax risk when features carry no information: log k for cross-entropy
/// (capped by the truncation bound), (k-1)/k for the squared loss.
inline double pointmass_oracle_robust(int k, const LossConfig& loss) {
    if (k < 2) throw ParameterError("pointmass_oracle_robust: k must be >= 2");
    if (loss.kind == LossKind::truncated_ce)
        return std::min(std::log(static_cast<double>(k)), loss.B);
    const double d = 1.0 - 1.0 / k;
    return d * d + (k - 1) * (1.0 / k) * (1.0 / k);
}

// ---------------------------------------------------------------------------
// Point-mass gap experiment
// ---------------------------------------------------------------------------

struct PointmassResult {
    std::vector<double> erm_probs;
    std::vector<double> gdro_probs;
    double erm_worst_loss = 0.0;
    double gdro_worst_loss = 0.0;
    double ratio = 0.0;           // erm_worst_loss / gdro_worst_loss
    double bound = 0.0;           // log(1/q_min) / log(k)
};

/// Train ERM and GDRO on the pure label-frequency task, then read the worst
/// per-class population loss straight off the fitted probability vector
/// (every input is the zero vector, so the model is a single distribution).
inline PointmassResult pointmass_experiment(std::span<const double> priors,
                                            std::size_t n, const TrainConfig& erm_cfg,
                                            const TrainConfig& gdro_cfg,
                                            const LossConfig& loss,
                                            std::uint64_t seed) {
    const int k = static_cast<int>(priors.size());
    double q_min = 1.0;
    for (double p : priors) q_min = std::min(q_min, p);
    if (loss.kind == LossKind::truncated_ce && loss.B <= std::log(1.0 / q_min))
        throw ParameterError(
            "pointmass_experiment: truncation bound clips the rare-class loss");

    const Dataset d = gen_pointmass(priors, n, seed);
    const TrainSet ts = task_trainset(d, d.group_labels, k);
    const ArchSpec arch{ArchKind::linear, 0};

    const TrainResult erm =
        erm_train(ts, arch, erm_cfg, loss, seed, substream(streams::theory, 1));
    const TrainResult gdro = gdro_train(ts, arch, gdro_cfg, loss, nullptr, seed,
                                        substream(streams::theory, 2));

    const std::vector<double> zero(d.dim, 0.0);
    PointmassResult out;
    out.erm_probs = forward(erm.params, zero);
    out.gdro_probs = forward(gdro.params, zero);
    for (int g = 0; g < k; ++g) {
        out.erm_worst_loss = std::max(out.erm_worst_loss, loss_value(loss, out.erm_probs, g));
        out.gdro_worst_loss =
            std::max(out.gdro_worst_loss, loss_value(loss, out.gdro_probs, g));
    }
    out.ratio = out.erm_worst_loss / out.gdro_worst_loss;
    out.bound = std::log(1.0 / q_min) / std::log(static_cast<double>(k));
    return out;
}

// ---------------------------------------------------------------------------
// Perturbation (approximate-minimizer transfer) check
// ---------------------------------------------------------------------------

struct PerturbResult {
    std::size_t violations = 0;  // instances with gap > 2 eps + slack
    double max_gap = 0.0;        // largest gap seen in the random sweep
    double searched_gap = 0.0;   // largest gap found by adversarial sampling
    double eps = 0.0;
};

/// If fhat is uniformly within eps of f and theta_hat minimizes fhat, then
/// f(theta_hat) - min f <= 2 eps. Random tables check the bound holds
/// everywhere; adversarially biased tables check it is nearly tight.
inline PerturbResult perturb_check(std::size_t instances, std::size_t grid, double eps,
                                   std::uint64_t seed) {
    if (grid < 2) throw ParameterError("perturb_check: grid must be >= 2");
    if (eps <= 0.0) throw ParameterError("perturb_check: eps must be positive");
    PerturbResult out;
    out.eps = eps;
    Rng rng(seed, substream(streams::theory, 3));
    std::vector<double> f(grid), fhat(grid);

    auto gap_of = [&](bool adversarial) {
        double min_f = std::numeric_limits<double>::infinity();
        std::size_t argmin_fhat = 0;
        // In the adversarial mode one designated point sits near the top of
        // the [0, 2 eps] band and is perturbed down by eps, while every other
        // point is perturbed up; the designated point then minimizes fhat and
        // its transfer gap approaches the 2 eps ceiling.
        const std::size_t special = adversarial ? rng.uniform_int(grid) : grid;
        for (std::size_t j = 0; j < grid; ++j) {
            if (adversarial) {
                if (j == special) {
                    f[j] = 2.0 * eps * (1.0 - 0.1 * rng.uniform01());
                    fhat[j] = f[j] - eps;
                } else {
                    f[j] = 2.0 * eps * rng.uniform01();
                    fhat[j] = f[j] + eps;
                }
            } else {
                f[j] = rng.uniform01();
                fhat[j] = f[j] + eps * (2.0 * rng.uniform01() - 1.0);
            }
            min_f = std::min(min_f, f[j]);
            if (fhat[j] < fhat[argmin_fhat]) argmin_fhat = j;
        }
        return f[argmin_fhat] - min_f;
    };

    for (std::size_t i = 0; i < instances; ++i) {
        const double gap = gap_of(false);
        out.max_gap = std::max(out.max_gap, gap);
        if (gap > 2.0 * eps + 1e-12) ++out.violations;
    }
    for (std::size_t i = 0; i < instances; ++i) {
        const double gap = gap_of(true);
        if (gap <= 2.0 * eps + 1e-12)
            out.searched_gap = std::max(out.searched_gap, gap);
        else
            ++out.violations;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Coupling (conditional-resampling) check
// ---------------------------------------------------------------------------

struct CouplingResult {
    double max_diff = 0.0;             // P(x,y) * P(z|x,y) reconstruction
    double negative_control_diff = 0.0; // P(x,y) * P(z|x) reconstruction
    std::size_t skipped_groups = 0;
};

/// For losses that depend only on (x, y), replacing a joint P(x,y,z) by
/// P(x,y) * P(z|x,y) leaves every E[loss | z = g] unchanged. Verified by
/// exact enumeration on random finite joints; the negative control drops the
/// y-dependence of the conditional and must show a real discrepancy.
inline CouplingResult coupling_check(std::size_t instances, std::size_t nx,
                                     std::size_t ny, std::size_t nz,
                                     std::uint64_t seed) {
    CouplingResult out;
    Rng rng(seed, substream(streams::theory, 4));
    const std::size_t cells = nx * ny * nz;
    std::vector<double> p(cells), q(cells), qneg(cells), ell(nx * ny);
    auto idx = [&](std::size_t x, std::size_t y, std::size_t z) {
        return (x * ny + y) * nz + z;
    };

    for (std::size_t inst = 0; inst < instances; ++inst) {
        double total = 0.0;
        for (auto& v : p) {
            v = rng.uniform01() < 0.2 ? 0.0 : rng.uniform01();
            total += v;
        }
        if (total <= 0.0) {
            p[0] = total = 1.0;
        }
        for (auto& v : p) v /= total;
        for (auto& v : ell) v = rng.uniform01();

        // q(x,y,z) = p(x,y) * p(z|x,y); qneg(x,y,z) = p(x,y) * p(z|x)
        for (std::size_t x = 0; x < nx; ++x)
            for (std::size_t y = 0; y < ny; ++y) {
                double pxy = 0.0;
                for (std::size_t z = 0; z < nz; ++z) pxy += p[idx(x, y, z)];
                double px = 0.0;
                std::vector<double> pxz(nz, 0.0);
                for (std::size_t y2 = 0; y2 < ny; ++y2)
                    for (std::size_t z = 0; z < nz; ++z) {
                        px += p[idx(x, y2, z)];
                        pxz[z] += p[idx(x, y2, z)];
                    }
                for (std::size_t z = 0; z < nz; ++z) {
                    q[idx(x, y, z)] = pxy > 0.0 ? pxy * (p[idx(x, y, z)] / pxy) : 0.0;
                    qneg[idx(x, y, z)] = px > 0.0 ? pxy * (pxz[z] / px) : 0.0;
                }
            }

        auto cond_mean = [&](const std::vector<double>& joint, std::size_t z,
                             double& mean) {
            double mass = 0.0, acc = 0.0;
            for (std::size_t x = 0; x < nx; ++x)
                for (std::size_t y = 0; y < ny; ++y) {
                    mass += joint[idx(x, y, z)];
                    acc += joint[idx(x, y, z)] * ell[x * ny + y];
                }
            if (mass <= 0.0) return false;
            mean = acc / mass;
            return true;
        };

        for (std::size_t z = 0; z < nz; ++z) {
            double m_p = 0.0, m_q = 0.0, m_neg = 0.0;
            if (!cond_mean(p, z, m_p)) {
                ++out.skipped_groups;
                std::fprintf(stderr,
                             "coupling_check: warning: group %zu has zero marginal in "
                             "instance %zu, skipped\n",
                             z, inst);
                continue;
            }
            cond_mean(q, z, m_q);
            out.max_diff = std::max(out.max_diff, std::abs(m_p - m_q));
            if (cond_mean(qneg, z, m_neg))
                out.negative_control_diff =
                    std::max(out.negative_control_diff, std::abs(m_p - m_neg));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Excess-risk scaling
// ---------------------------------------------------------------------------

enum class ScalingTrainer { subset_gdro, erm, barack };

struct ScalingConfig {
    std::vector<std::size_t> sizes = {64, 128, 256, 512, 1024}; // labeled per group
    int trials = 16;
    ScalingTrainer trainer = ScalingTrainer::subset_gdro;
    ArchSpec arch{ArchKind::linear, 32};
    LossConfig loss;
    double mu_core = 1.0;
    double mu_spur = 2.0;
    std::size_t noise_dims = 8;
    int epochs = 200;
    int batch_size = 32;
    double lr_times_n = 2.5;    // per-run lr = lr_times_n / (4 * size)^lr_exponent
    double lr_exponent = 0.5;
    double eta_group = 0.05;
    std::size_t heldout_n = 100000;
    int bootstrap = 1000;
    std::uint64_t seed = 0;
};

struct ScalingResult {
    std::vector<std::size_t> sizes;
    std::vector<std::vector<double>> excess; // kept (positive) values per size
    std::vector<double> mean_excess;
    double slope = 0.0;
    double intercept = 0.0;
    double slope_lo = 0.0;       // bootstrap percentile interval
    double slope_hi = 0.0;
    std::size_t dropped = 0;
};

namespace detail {

inline std::pair<double, double> least_squares(std::span<const double> x,
                                               std::span<const double> y) {
    const std::size_t n = x.size();
    if (n < 2) throw ParameterError("least_squares: need at least 2 points");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    const double slope = sxy / sxx;
    return {slope, my - slope * mx};
}

} // namespace detail

/// Worst-group excess risk of a trained model as a function of the per-group
/// label budget, measured on a large group-balanced heldout sample against
/// the balanced Bayes predictor evaluated on the same rows (pairing cancels
/// most of the Monte Carlo error). Per-run learning rate scales as 1/n so
/// the optimizer's noise floor shrinks at the same sqrt(n) rate as the
/// statistical error. Fits log excess vs log n; the slope interval comes
/// from a bootstrap over trials within each size.
inline ScalingResult excess_risk_scaling(const ScalingConfig& cfg) {
    if (cfg.sizes.size() < 2)
        throw ParameterError("excess_risk_scaling: need at least 2 sizes");
    if (cfg.trials < 1) throw ParameterError("excess_risk_scaling: trials must be >= 1");

    Rng seed_seq(cfg.seed, streams::theory);
    const std::uint64_t heldout_seed = Rng(cfg.seed, streams::heldout).next_u64();
    const Dataset heldout = gen_spurious(cfg.heldout_n, 0.5, cfg.mu_core, cfg.mu_spur,
                                         cfg.noise_dims, heldout_seed);
    const TrainSet heldout_ts = task_trainset(heldout, heldout.group_labels, 4);

    // worst-group loss of the balanced Bayes predictor on the same rows
    std::vector<double> bayes_sum(4, 0.0);
    std::vector<long> bayes_count(4, 0);
    for (std::size_t i = 0; i < heldout.n; ++i) {
        const double p1 = spurious_bayes_prob1(heldout.row(i)[0], cfg.mu_core);
        const double p_true = heldout.class_labels[i] == 1 ? p1 : 1.0 - p1;
        bayes_sum[heldout.group_labels[i]] += detail::binary_loss(cfg.loss, p_true);
        ++bayes_count[heldout.group_labels[i]];
    }
    double bayes_worst = 0.0;
    for (int g = 0; g < 4; ++g)
        if (bayes_count[g] > 0)
            bayes_worst = std::max(bayes_worst, bayes_sum[g] / bayes_count[g]);

    ScalingResult out;
    out.sizes = cfg.sizes;
    out.excess.resize(cfg.sizes.size());

    for (std::size_t si = 0; si < cfg.sizes.size(); ++si) {
        const std::size_t size = cfg.sizes[si];
        const std::size_t n_sub = 4 * size;
        for (int trial = 0; trial < cfg.trials; ++trial) {
            const std::uint64_t run_seed = seed_seq.next_u64();
            const std::size_t pool = 10 * size + 400;
            const Dataset train = gen_spurious(pool, 0.5, cfg.mu_core, cfg.mu_spur,
                                               cfg.noise_dims, run_seed);
            const Dataset val = gen_spurious(pool, 0.5, cfg.mu_core, cfg.mu_spur,
                                             cfg.noise_dims, run_seed + 1);
            const LabelMask mask = sample_group_budget(train, val, size, run_seed);

            TrainConfig tc;
            tc.lr = cfg.lr_times_n /
                    std::pow(static_cast<double>(n_sub), cfg.lr_exponent);
            tc.epochs = cfg.epochs;
            tc.batch_size = cfg.batch_size;
            tc.eta_group = cfg.eta_group;
            tc.eval_every = 1 << 30;

            ModelParams params;
            if (cfg.trainer == ScalingTrainer::barack) {
                BarackConfig bc;
                bc.stage1.arch = cfg.arch;
                bc.stage1.train = tc;
                bc.stage1.train.lr = 0.05;
                bc.stage1.train.aug_sigma = 0.1;
                bc.stage2.arch = cfg.arch;
                bc.stage2.train = tc;
                params = barack_run(train, val, mask, bc, cfg.loss, run_seed).params;
            } else {
                const TrainSet ts = task_trainset(train, train.group_labels, 4,
                                                  mask.labeled_train_idx);
                const std::uint64_t stream = substream(streams::theory, 5);
                params = cfg.trainer == ScalingTrainer::erm
                             ? erm_train(ts, cfg.arch, tc, cfg.loss, run_seed, stream)
                                   .params
                             : gdro_train(ts, cfg.arch, tc, cfg.loss, nullptr,
                                          run_seed, stream)
                                   .params;
            }

            const MetricsReport rep = evaluate(params, heldout_ts, cfg.loss);
            const double excess = rep.worst_group_loss - bayes_worst;
            if (excess <= 0.0) {
                ++out.dropped;
                std::fprintf(stderr,
                             "excess_risk_scaling: warning: nonpositive excess %.3g "
                             "(size %zu trial %d), dropped\n",
                             excess, size, trial);
                continue;
            }
            out.excess[si].push_back(excess);
        }
        if (out.excess[si].empty())
            throw Diverged("excess_risk_scaling: all trials dropped at size " +
                           std::to_string(size));
    }

    auto fit = [&](const std::vector<std::vector<double>>& per_size) {
        std::vector<double> lx, ly;
        for (std::size_t si = 0; si < cfg.sizes.size(); ++si)
            for (double e : per_size[si]) {
                lx.push_back(std::log(4.0 * cfg.sizes[si]));
                ly.push_back(std::log(e));
            }
        return detail::least_squares(lx, ly);
    };

    const auto [slope, intercept] = fit(out.excess);
    out.slope = slope;
    out.intercept = intercept;
    out.mean_excess.resize(cfg.sizes.size());
    for (std::size_t si = 0; si < cfg.sizes.size(); ++si) {
        double s = 0.0;
        for (double e : out.excess[si]) s += e;
        out.mean_excess[si] = s / out.excess[si].size();
    }

    Rng boot(cfg.seed, substream(streams::theory, 9));
    std::vector<double> slopes(cfg.bootstrap);
    std::vector<std::vector<double>> resampled(cfg.sizes.size());
    for (int b = 0; b < cfg.bootstrap; ++b) {
        for (std::size_t si = 0; si < cfg.sizes.size(); ++si) {
            const auto& src = out.excess[si];
            resampled[si].resize(src.size());
            for (auto& v : resampled[si]) v = src[boot.uniform_int(src.size())];
        }
        slopes[b] = fit(resampled).first;
    }
    std::sort(slopes.begin(), slopes.end());
    out.slope_lo = slopes[static_cast<std::size_t>(0.025 * (cfg.bootstrap - 1))];
    out.slope_hi = slopes[static_cast<std::size_t>(0.975 * (cfg.bootstrap - 1))];
    return out;
}

} // namespace barack
