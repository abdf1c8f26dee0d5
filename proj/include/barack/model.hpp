#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "barack/errors.hpp"
#include "barack/loss.hpp"
#include "barack/rng.hpp"

namespace barack {

enum class ArchKind { linear, mlp1 };

struct ArchSpec {
    ArchKind kind = ArchKind::linear;
    int hidden = 32; // mlp1 only
};

inline const char* to_string(ArchKind k) {
    return k == ArchKind::linear ? "linear" : "mlp1";
}

inline ArchKind arch_from_string(const std::string& s) {
    if (s == "linear") return ArchKind::linear;
    if (s == "mlp1") return ArchKind::mlp1;
    throw ParameterError("unknown arch kind: " + s);
}

/// Parameters of a linear-softmax (w2: K x d) or one-hidden-layer tanh
/// classifier (w1: h x d, w2: K x h). Value type; trainers mutate a private
/// copy. Doubles as the gradient container, since gradients share the shape.
struct ModelParams {
    ArchKind kind = ArchKind::linear;
    int input_dim = 0;
    int output_dim = 0;
    int hidden = 0;
    std::vector<double> w1, b1;
    std::vector<double> w2, b2;

    void axpy(double a, const ModelParams& g) {
        for (std::size_t i = 0; i < w1.size(); ++i) w1[i] += a * g.w1[i];
        for (std::size_t i = 0; i < b1.size(); ++i) b1[i] += a * g.b1[i];
        for (std::size_t i = 0; i < w2.size(); ++i) w2[i] += a * g.w2[i];
        for (std::size_t i = 0; i < b2.size(); ++i) b2[i] += a * g.b2[i];
    }

    void scale(double c) {
        for (auto& v : w1) v *= c;
        for (auto& v : b1) v *= c;
        for (auto& v : w2) v *= c;
        for (auto& v : b2) v *= c;
    }

    bool operator==(const ModelParams&) const = default;
};

inline ModelParams zeros_like(ArchKind kind, int input_dim, int output_dim, int hidden) {
    ModelParams p;
    p.kind = kind;
    p.input_dim = input_dim;
    p.output_dim = output_dim;
    if (kind == ArchKind::mlp1) {
        p.hidden = hidden;
        p.w1.assign(static_cast<std::size_t>(hidden) * input_dim, 0.0);
        p.b1.assign(hidden, 0.0);
        p.w2.assign(static_cast<std::size_t>(output_dim) * hidden, 0.0);
    } else {
        p.hidden = 0;
        p.w2.assign(static_cast<std::size_t>(output_dim) * input_dim, 0.0);
    }
    p.b2.assign(output_dim, 0.0);
    return p;
}

/// Biases zero, weights i.i.d. N(0, 1/fan_in).
inline ModelParams init_params(const ArchSpec& arch, int input_dim, int output_dim,
                               Rng& rng) {
    ModelParams p = zeros_like(arch.kind, input_dim, output_dim,
                               arch.kind == ArchKind::mlp1 ? arch.hidden : 0);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
    for (auto& v : p.w1) v = s1 * rng.normal();
    const double fan2 = p.kind == ArchKind::mlp1 ? p.hidden : input_dim;
    const double s2 = 1.0 / std::sqrt(fan2);
    for (auto& v : p.w2) v = s2 * rng.normal();
    return p;
}

/// Class-conditional group priors: prior_logits[y*G+g] = log P(z=g | y) on
/// D1, with -inf for groups of other classes. Added to the group logits
/// before the softmax, which both shifts within-class odds and zeroes the
/// probability of out-of-class groups.
struct ClassConditioning {
    int num_classes = 0;
    int num_groups = 0;
    std::vector<double> prior_logits; // C * G

    double at(int y, int g) const { return prior_logits[y * num_groups + g]; }
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Empirical P(z=g | y) on the group-labeled rows. A class with an in-class
/// zero-count group falls back to add-one smoothing over that class's groups
/// (so rare groups stay predictable); a class with no rows at all gets a
/// uniform prior over its groups.
inline ClassConditioning fit_conditioning(std::span<const int> class_labels,
                                          std::span<const int> group_labels,
                                          std::span<const int> class_of_group,
                                          int num_classes) {
    if (class_labels.empty())
        throw EmptyDataset("fit_conditioning: no group-labeled rows");
    const int G = static_cast<int>(class_of_group.size());
    ClassConditioning cond;
    cond.num_classes = num_classes;
    cond.num_groups = G;
    cond.prior_logits.assign(static_cast<std::size_t>(num_classes) * G, kNegInf);

    std::vector<std::size_t> group_count(G, 0), class_count(num_classes, 0);
    for (std::size_t i = 0; i < class_labels.size(); ++i) {
        ++group_count[group_labels[i]];
        ++class_count[class_labels[i]];
    }

    for (int y = 0; y < num_classes; ++y) {
        std::vector<int> members;
        for (int g = 0; g < G; ++g)
            if (class_of_group[g] == y) members.push_back(g);
        if (members.empty()) continue;
        bool any_zero = false;
        for (int g : members) any_zero |= group_count[g] == 0;
        const double ny = static_cast<double>(class_count[y]);
        for (int g : members) {
            double p;
            if (class_count[y] == 0)
                p = 1.0 / members.size();
            else if (any_zero)
                p = (group_count[g] + 1.0) / (ny + members.size());
            else
                p = group_count[g] / ny;
            cond.prior_logits[y * G + g] = std::log(p);
        }
    }
    return cond;
}

namespace detail {

/// logits -> probabilities, treating -inf logits as exact zeros.
inline void softmax_inplace(std::span<double> logits) {
    double mx = kNegInf;
    for (double v : logits) mx = std::max(mx, v);
    if (mx == kNegInf) throw DegenerateTarget("softmax: all logits masked");
    double total = 0.0;
    for (auto& v : logits) {
        v = v == kNegInf ? 0.0 : std::exp(v - mx);
        total += v;
    }
    for (auto& v : logits) v /= total;
}

inline void raw_logits(const ModelParams& p, std::span<const double> x,
                       std::vector<double>& hidden_out, std::vector<double>& logits) {
    if (x.size() != static_cast<std::size_t>(p.input_dim))
        throw ShapeError("forward: input dimension mismatch");
    logits.assign(p.output_dim, 0.0);
    if (p.kind == ArchKind::mlp1) {
        hidden_out.assign(p.hidden, 0.0);
        for (int h = 0; h < p.hidden; ++h) {
            double a = p.b1[h];
            const double* row = p.w1.data() + static_cast<std::size_t>(h) * p.input_dim;
            for (int j = 0; j < p.input_dim; ++j) a += row[j] * x[j];
            hidden_out[h] = std::tanh(a);
        }
        for (int k = 0; k < p.output_dim; ++k) {
            double a = p.b2[k];
            const double* row = p.w2.data() + static_cast<std::size_t>(k) * p.hidden;
            for (int h = 0; h < p.hidden; ++h) a += row[h] * hidden_out[h];
            logits[k] = a;
        }
    } else {
        for (int k = 0; k < p.output_dim; ++k) {
            double a = p.b2[k];
            const double* row = p.w2.data() + static_cast<std::size_t>(k) * p.input_dim;
            for (int j = 0; j < p.input_dim; ++j) a += row[j] * x[j];
            logits[k] = a;
        }
    }
}

} // namespace detail

/// Softmax probabilities; with conditioning, the class prior logits for y are
/// added first and masked coordinates come out exactly 0.
inline std::vector<double> forward(const ModelParams& p, std::span<const double> x,
                                   const ClassConditioning* cond = nullptr,
                                   int y = -1) {
    std::vector<double> hidden, logits;
    detail::raw_logits(p, x, hidden, logits);
    if (cond != nullptr) {
        if (p.output_dim != cond->num_groups)
            throw ShapeError("forward: conditioning arity mismatch");
        if (y < 0 || y >= cond->num_classes)
            throw LabelRange("forward: conditioning class out of range");
        for (int g = 0; g < p.output_dim; ++g) {
            const double prior = cond->at(y, g);
            logits[g] = prior == kNegInf ? kNegInf : logits[g] + prior;
        }
    }
    detail::softmax_inplace(logits);
    return logits;
}

/// One weighted training batch. Rows live in a flat buffer so augmented
/// copies do not alias the dataset. cond_y is ignored when cond is null.
struct GradBatch {
    std::vector<double> x;  // n * dim
    std::vector<int> target;
    std::vector<double> weight;
    std::vector<int> cond_y;

    std::size_t size() const { return target.size(); }
};

struct GradResult {
    ModelParams grad;
    double weighted_loss = 0.0;
};

/// Gradient of sum_i weight_i * loss(forward(x_i), target_i) in all
/// parameters. Masked coordinates carry zero probability and hence zero
/// gradient; a masked *target* is an error.
inline GradResult grad(const ModelParams& p, const LossConfig& loss,
                       const GradBatch& batch,
                       const ClassConditioning* cond = nullptr) {
    GradResult out;
    out.grad = zeros_like(p.kind, p.input_dim, p.output_dim, p.hidden);
    const std::size_t n = batch.size();
    std::vector<double> hidden, logits, dlogit(p.output_dim), dact;

    for (std::size_t i = 0; i < n; ++i) {
        const double w = batch.weight[i];
        if (!(w >= 0.0)) throw ParameterError("grad: weights must be finite and >= 0");
        std::span<const double> xi(batch.x.data() + i * p.input_dim, p.input_dim);
        const int t = batch.target[i];
        if (t < 0 || t >= p.output_dim) throw LabelRange("grad: target out of range");

        detail::raw_logits(p, xi, hidden, logits);
        if (cond != nullptr) {
            const int y = batch.cond_y[i];
            if (cond->at(y, t) == kNegInf)
                throw DegenerateTarget("grad: target group masked by conditioning");
            for (int g = 0; g < p.output_dim; ++g) {
                const double prior = cond->at(y, g);
                logits[g] = prior == kNegInf ? kNegInf : logits[g] + prior;
            }
        }
        detail::softmax_inplace(logits); // logits now holds probabilities
        out.weighted_loss += w * loss_value(loss, logits, t);
        if (w == 0.0) continue;

        const std::vector<double> v = loss_grad_probs(loss, logits, t);
        double pv = 0.0;
        for (int k = 0; k < p.output_dim; ++k) pv += logits[k] * v[k];
        for (int k = 0; k < p.output_dim; ++k)
            dlogit[k] = logits[k] * (v[k] - pv);

        if (p.kind == ArchKind::mlp1) {
            dact.assign(p.hidden, 0.0);
            for (int k = 0; k < p.output_dim; ++k) {
                const double d = w * dlogit[k];
                if (d == 0.0) continue;
                double* g2 = out.grad.w2.data() + static_cast<std::size_t>(k) * p.hidden;
                const double* row = p.w2.data() + static_cast<std::size_t>(k) * p.hidden;
                for (int h = 0; h < p.hidden; ++h) {
                    g2[h] += d * hidden[h];
                    dact[h] += d * row[h];
                }
                out.grad.b2[k] += d;
            }
            for (int h = 0; h < p.hidden; ++h) {
                const double da = dact[h] * (1.0 - hidden[h] * hidden[h]);
                if (da == 0.0) continue;
                double* g1 = out.grad.w1.data() + static_cast<std::size_t>(h) * p.input_dim;
                for (int j = 0; j < p.input_dim; ++j) g1[j] += da * xi[j];
                out.grad.b1[h] += da;
            }
        } else {
            for (int k = 0; k < p.output_dim; ++k) {
                const double d = w * dlogit[k];
                if (d == 0.0) continue;
                double* g2 = out.grad.w2.data() + static_cast<std::size_t>(k) * p.input_dim;
                for (int j = 0; j < p.input_dim; ++j) g2[j] += d * xi[j];
                out.grad.b2[k] += d;
            }
        }
    }
    return out;
}

/// Lowest index wins ties, everywhere.
inline int argmax(std::span<const double> v) {
    int best = 0;
    for (std::size_t k = 1; k < v.size(); ++k)
        if (v[k] > v[best]) best = static_cast<int>(k);
    return best;
}

// ---------------------------------------------------------------------------
// Checkpoints: same text-matrix format as datasets, with a kind header.
// ---------------------------------------------------------------------------

inline void save_params(const ModelParams& p, std::ostream& out) {
    out << "kind " << to_string(p.kind) << ' ' << p.input_dim << ' '
        << p.output_dim << ' ' << p.hidden << '\n';
    char buf[40];
    auto dump = [&](const std::vector<double>& v) {
        out << v.size();
        for (double x : v) {
            std::snprintf(buf, sizeof buf, "%.17g", x);
            out << ' ' << buf;
        }
        out << '\n';
    };
    dump(p.w1);
    dump(p.b1);
    dump(p.w2);
    dump(p.b2);
}

inline void save_params(const ModelParams& p, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    save_params(p, out);
}

inline ModelParams load_params(std::istream& in) {
    std::string tag, kind;
    ModelParams p;
    if (!(in >> tag >> kind >> p.input_dim >> p.output_dim >> p.hidden) || tag != "kind")
        throw SchemaError("checkpoint header malformed");
    p.kind = arch_from_string(kind);
    auto slurp = [&](std::vector<double>& v) {
        std::size_t n;
        if (!(in >> n)) throw SchemaError("checkpoint matrix truncated");
        v.resize(n);
        for (auto& x : v)
            if (!(in >> x)) throw SchemaError("checkpoint matrix truncated");
    };
    slurp(p.w1);
    slurp(p.b1);
    slurp(p.w2);
    slurp(p.b2);
    return p;
}

inline ModelParams load_params(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path);
    return load_params(in);
}

} // namespace barack
