#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "barack/errors.hpp"

namespace barack {

enum class LossKind { truncated_ce, squared };

struct LossConfig {
    LossKind kind = LossKind::truncated_ce;
    double B = 30.0; // truncation bound; must be >= log(K) for any K in use
};

/// truncated_ce: min(-log p[target], B). squared: ||p - e_target||^2.
inline double loss_value(const LossConfig& cfg, std::span<const double> probs,
                         int target) {
    if (target < 0 || static_cast<std::size_t>(target) >= probs.size())
        throw LabelRange("loss_value: target out of range");
    if (cfg.kind == LossKind::truncated_ce) {
        const double p = probs[target];
        if (p <= 0.0) return cfg.B;
        return std::min(-std::log(p), cfg.B);
    }
    double out = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) {
        const double d = probs[k] - (static_cast<int>(k) == target ? 1.0 : 0.0);
        out += d * d;
    }
    return out;
}

/// dLoss/dprobs. For truncated cross-entropy the gradient is zero in the
/// truncated region; exactly at the kink the untruncated gradient is used.
inline std::vector<double> loss_grad_probs(const LossConfig& cfg,
                                           std::span<const double> probs,
                                           int target) {
    if (target < 0 || static_cast<std::size_t>(target) >= probs.size())
        throw LabelRange("loss_grad_probs: target out of range");
    std::vector<double> g(probs.size(), 0.0);
    if (cfg.kind == LossKind::truncated_ce) {
        const double p = probs[target];
        if (p <= 0.0 || -std::log(p) > cfg.B) return g;
        g[target] = -1.0 / p;
        return g;
    }
    for (std::size_t k = 0; k < probs.size(); ++k)
        g[k] = 2.0 * (probs[k] - (static_cast<int>(k) == target ? 1.0 : 0.0));
    return g;
}

/// Classification-error upper bound implied by a loss value. A
/// misclassified point has at most probability 1/2 on the true class, so
/// its truncated cross-entropy is at least log 2 and its squared loss at
/// least 1/2; dividing by those floors makes the bound hold pointwise for
/// every K >= 2. The result is a bound, not a probability, and may exceed 1.
inline double error_upper_bound(const LossConfig& cfg, double loss_value, int K) {
    if (K < 2) throw ParameterError("error_upper_bound: K must be >= 2");
    if (loss_value < 0.0) throw ParameterError("error_upper_bound: negative loss");
    if (cfg.kind == LossKind::truncated_ce) return loss_value / std::numbers::ln2;
    return loss_value * 2.0;
}

} // namespace barack
