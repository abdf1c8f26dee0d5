#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "barack/errors.hpp"
#include "barack/rng.hpp"

namespace barack {

enum class SplitTag { train, val, test };

inline const char* to_string(SplitTag t) {
    switch (t) {
        case SplitTag::train: return "train";
        case SplitTag::val: return "val";
        default: return "test";
    }
}

/// Row-major feature matrix with class labels, group labels and the
/// group-to-class map. Group labels are always populated by the generators;
/// which of them a method may look at is controlled by LabelMask.
struct Dataset {
    std::size_t n = 0;
    std::size_t dim = 0;
    int num_classes = 0;
    int num_groups = 0;
    std::vector<double> features;       // n * dim
    std::vector<int> class_labels;      // n
    std::vector<int> group_labels;      // n
    std::vector<int> class_of_group;    // num_groups
    SplitTag split_tag = SplitTag::train;

    std::span<const double> row(std::size_t i) const {
        return {features.data() + i * dim, dim};
    }

    void check() const {
        if (class_labels.size() != n || group_labels.size() != n ||
            features.size() != n * dim)
            throw ShapeError("Dataset: inconsistent field sizes");
        if (static_cast<int>(class_of_group.size()) != num_groups)
            throw ShapeError("Dataset: class_of_group size != num_groups");
        for (std::size_t i = 0; i < n; ++i) {
            if (class_labels[i] < 0 || class_labels[i] >= num_classes)
                throw LabelRange("Dataset: class label out of range");
            if (group_labels[i] < 0 || group_labels[i] >= num_groups)
                throw LabelRange("Dataset: group label out of range");
            if (class_of_group[group_labels[i]] != class_labels[i])
                throw LabelRange("Dataset: group does not match class_of_group");
        }
        for (int c : class_of_group)
            if (c < 0 || c >= num_classes)
                throw LabelRange("Dataset: class_of_group entry out of range");
    }
};

/// The D1/D2 partition of the training split plus the group-labeled
/// validation subset.
struct LabelMask {
    std::vector<std::size_t> labeled_train_idx;
    std::vector<std::size_t> unlabeled_train_idx;
    std::vector<std::size_t> labeled_val_idx;
};

struct GroupStats {
    std::vector<std::size_t> counts;
    std::vector<double> proportions;
    double q_min = 0.0;
};

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

/// Two classes x two environments. The environment agrees with the class with
/// probability rho, so rho close to 1 makes the spurious coordinate (mean
/// +-mu_spur, signed by environment) more predictive on the majority groups
/// than the core coordinate (mean +-mu_core, signed by class). Group index is
/// 2*y + e. class0_prior skews the class marginal (0.5 = balanced).
inline Dataset gen_spurious(std::size_t n, double rho, double mu_core, double mu_spur,
                            std::size_t noise_dims, std::uint64_t seed,
                            double class0_prior = 0.5) {
    if (rho < 0.0 || rho >= 1.0)
        throw ParameterError("gen_spurious: rho must be in [0,1)");
    if (class0_prior <= 0.0 || class0_prior >= 1.0)
        throw ParameterError("gen_spurious: class0_prior must be in (0,1)");

    Dataset d;
    d.n = n;
    d.dim = 2 + noise_dims;
    d.num_classes = 2;
    d.num_groups = 4;
    d.class_of_group = {0, 0, 1, 1};
    d.features.resize(n * d.dim);
    d.class_labels.resize(n);
    d.group_labels.resize(n);

    Rng rng(seed, streams::data);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = rng.uniform01() < class0_prior ? 0 : 1;
        const int e = rng.uniform01() < rho ? y : 1 - y;
        d.class_labels[i] = y;
        d.group_labels[i] = 2 * y + e;
        double* x = d.features.data() + i * d.dim;
        x[0] = (y == 1 ? mu_core : -mu_core) + rng.normal();
        x[1] = (e == 1 ? mu_spur : -mu_spur) + rng.normal();
        for (std::size_t j = 2; j < d.dim; ++j) x[j] = rng.normal();
    }
    return d;
}

/// Circle radius used by gen_rare_group: neighboring blob centers sit 2.2
/// apart so adjacent groups overlap moderately.
inline double rare_group_radius(int num_groups) {
    return 2.2 / (2.0 * std::sin(std::numbers::pi / num_groups));
}

/// Blob center for group g. Classes interleave around the circle so every
/// group borders the opposite class and underweighting any one group shifts
/// a decision boundary against it.
inline void rare_group_mean(int g, int num_groups, double* out2) {
    const int half = num_groups / 2;
    const int slot = g < half ? 2 * g : 2 * (g - half) + 1;
    const double theta = 2.0 * std::numbers::pi * slot / num_groups;
    const double r = rare_group_radius(num_groups);
    out2[0] = r * std::cos(theta);
    out2[1] = r * std::sin(theta);
}

/// Gaussian blobs with distinct means on a circle in 2 + noise_dims
/// dimensions; class = (group < num_groups/2 ? 0 : 1). Groups are drawn
/// uniformly, then rows of rare_group are thinned to rare_frac (so the
/// returned dataset has fewer than n rows when rare_frac < 1).
inline Dataset gen_rare_group(std::size_t n, int num_groups, int rare_group,
                              double rare_frac, std::uint64_t seed,
                              std::size_t noise_dims = 8) {
    if (num_groups < 2 || num_groups % 2 != 0)
        throw ParameterError("gen_rare_group: num_groups must be even and >= 2");
    if (rare_group < 0 || rare_group >= num_groups)
        throw ParameterError("gen_rare_group: rare_group out of range");
    if (rare_frac <= 0.0 || rare_frac > 1.0)
        throw ParameterError("gen_rare_group: rare_frac must be in (0,1]");

    Dataset d;
    d.dim = 2 + noise_dims;
    d.num_classes = 2;
    d.num_groups = num_groups;
    d.class_of_group.resize(num_groups);
    for (int g = 0; g < num_groups; ++g)
        d.class_of_group[g] = g < num_groups / 2 ? 0 : 1;

    Rng rng(seed, streams::data);
    for (std::size_t i = 0; i < n; ++i) {
        const int g = static_cast<int>(rng.uniform_int(num_groups));
        const double keep = rng.uniform01();
        double mean[2];
        rare_group_mean(g, num_groups, mean);
        double x0 = mean[0] + rng.normal();
        double x1 = mean[1] + rng.normal();
        std::vector<double> noise(noise_dims);
        for (auto& v : noise) v = rng.normal();
        // Draws above happen unconditionally so the kept rows do not depend
        // on rare_frac through the RNG position.
        if (g == rare_group && keep >= rare_frac) continue;
        d.class_labels.push_back(d.class_of_group[g]);
        d.group_labels.push_back(g);
        d.features.push_back(x0);
        d.features.push_back(x1);
        d.features.insert(d.features.end(), noise.begin(), noise.end());
    }
    d.n = d.class_labels.size();
    return d;
}

/// Every feature row is the zero vector; labels are i.i.d. from `priors` and
/// classes coincide with groups.
inline Dataset gen_pointmass(std::span<const double> priors, std::size_t n,
                             std::uint64_t seed) {
    double total = 0.0;
    for (double p : priors) {
        if (p <= 0.0) throw ParameterError("gen_pointmass: priors must be positive");
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw ParameterError("gen_pointmass: priors must sum to 1");

    const int k = static_cast<int>(priors.size());
    Dataset d;
    d.n = n;
    d.dim = 1;
    d.num_classes = k;
    d.num_groups = k;
    d.class_of_group.resize(k);
    for (int g = 0; g < k; ++g) d.class_of_group[g] = g;
    d.features.assign(n, 0.0);
    d.class_labels.resize(n);
    d.group_labels.resize(n);

    Rng rng(seed, streams::data);
    for (std::size_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(rng.categorical(priors));
        d.class_labels[i] = c;
        d.group_labels[i] = c;
    }
    return d;
}

// ---------------------------------------------------------------------------
// Budgets and stats
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::size_t> budget_draw(const Dataset& data, std::size_t budget,
                                            Rng& rng) {
    std::vector<std::vector<std::size_t>> by_group(data.num_groups);
    for (std::size_t i = 0; i < data.n; ++i)
        by_group[data.group_labels[i]].push_back(i);

    std::vector<std::size_t> picked;
    for (int g = 0; g < data.num_groups; ++g) {
        if (by_group[g].size() < budget)
            throw BudgetInfeasible("group " + std::to_string(g) + " has " +
                                   std::to_string(by_group[g].size()) +
                                   " rows, budget " + std::to_string(budget));
        for (std::size_t j : rng.sample_without_replacement(by_group[g].size(), budget))
            picked.push_back(by_group[g][j]);
    }
    std::sort(picked.begin(), picked.end());
    return picked;
}

} // namespace detail

/// Draw `budget` group-labeled points per group, independently in the train
/// and validation splits (separate RNG substreams of the same seed).
inline LabelMask sample_group_budget(const Dataset& train, const Dataset& val,
                                     std::size_t budget, std::uint64_t seed) {
    LabelMask mask;
    Rng rng_train(seed, streams::mask_train);
    Rng rng_val(seed, streams::mask_val);
    mask.labeled_train_idx = detail::budget_draw(train, budget, rng_train);
    mask.labeled_val_idx = detail::budget_draw(val, budget, rng_val);

    std::vector<char> labeled(train.n, 0);
    for (std::size_t i : mask.labeled_train_idx) labeled[i] = 1;
    for (std::size_t i = 0; i < train.n; ++i)
        if (!labeled[i]) mask.unlabeled_train_idx.push_back(i);
    return mask;
}

inline GroupStats group_stats(const Dataset& data) {
    if (data.n == 0) throw EmptyDataset("group_stats: empty dataset");
    GroupStats s;
    s.counts.assign(data.num_groups, 0);
    for (int g : data.group_labels) ++s.counts[g];
    s.proportions.resize(data.num_groups);
    s.q_min = 1.0;
    for (int g = 0; g < data.num_groups; ++g) {
        s.proportions[g] = static_cast<double>(s.counts[g]) / static_cast<double>(data.n);
        s.q_min = std::min(s.q_min, s.proportions[g]);
    }
    return s;
}

/// Group-proportion-weighted average of per-group values.
inline double reweighted_metric(std::span<const double> per_group_values,
                                std::span<const double> train_proportions) {
    if (per_group_values.size() != train_proportions.size())
        throw ShapeError("reweighted_metric: length mismatch");
    double out = 0.0;
    for (std::size_t g = 0; g < per_group_values.size(); ++g)
        out += train_proportions[g] * per_group_values[g];
    return out;
}

// ---------------------------------------------------------------------------
// Text serialization: "n d C G" header, one "x... y z" line per row, and a
// trailing "class_of_group ..." map line. 17 significant digits round-trip
// doubles exactly.
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& d, std::ostream& out) {
    out << d.n << ' ' << d.dim << ' ' << d.num_classes << ' ' << d.num_groups << '\n';
    char buf[40];
    for (std::size_t i = 0; i < d.n; ++i) {
        for (std::size_t j = 0; j < d.dim; ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", d.features[i * d.dim + j]);
            out << buf << ' ';
        }
        out << d.class_labels[i] << ' ' << d.group_labels[i] << '\n';
    }
    out << "class_of_group";
    for (int c : d.class_of_group) out << ' ' << c;
    out << '\n';
}

inline void save_dataset(const Dataset& d, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    save_dataset(d, out);
}

inline Dataset load_dataset(std::istream& in) {
    Dataset d;
    if (!(in >> d.n >> d.dim >> d.num_classes >> d.num_groups))
        throw SchemaError("dataset header malformed");
    d.features.resize(d.n * d.dim);
    d.class_labels.resize(d.n);
    d.group_labels.resize(d.n);
    for (std::size_t i = 0; i < d.n; ++i) {
        for (std::size_t j = 0; j < d.dim; ++j)
            if (!(in >> d.features[i * d.dim + j]))
                throw SchemaError("dataset row truncated");
        if (!(in >> d.class_labels[i] >> d.group_labels[i]))
            throw SchemaError("dataset row labels truncated");
    }
    std::string tag;
    if (!(in >> tag) || tag != "class_of_group")
        throw SchemaError("dataset missing class_of_group line");
    d.class_of_group.resize(d.num_groups);
    for (int g = 0; g < d.num_groups; ++g)
        if (!(in >> d.class_of_group[g]))
            throw SchemaError("class_of_group truncated");
    d.check();
    return d;
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path);
    return load_dataset(in);
}

} // namespace barack
