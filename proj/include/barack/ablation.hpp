#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "barack/errors.hpp"
#include "barack/rng.hpp"

namespace barack {

/// counts[t][p] = number of points with true group t and predicted group p.
struct ConfusionMatrix {
    int num_groups = 0;
    std::vector<std::size_t> counts; // G * G, row-major by true group

    std::size_t at(int t, int p) const { return counts[t * num_groups + p]; }
    std::size_t& at(int t, int p) { return counts[t * num_groups + p]; }

    std::size_t row_sum(int t) const {
        std::size_t s = 0;
        for (int p = 0; p < num_groups; ++p) s += at(t, p);
        return s;
    }

    /// Row-stochastic version; rows with no mass become uniform.
    std::vector<double> row_normalized() const {
        std::vector<double> out(counts.size());
        for (int t = 0; t < num_groups; ++t) {
            const double total = static_cast<double>(row_sum(t));
            for (int p = 0; p < num_groups; ++p)
                out[t * num_groups + p] =
                    total > 0.0 ? at(t, p) / total : 1.0 / num_groups;
        }
        return out;
    }
};

inline ConfusionMatrix confusion(std::span<const int> pred, std::span<const int> truth,
                                 int num_groups) {
    if (pred.size() != truth.size()) throw ShapeError("confusion: length mismatch");
    ConfusionMatrix cm;
    cm.num_groups = num_groups;
    cm.counts.assign(static_cast<std::size_t>(num_groups) * num_groups, 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (truth[i] < 0 || truth[i] >= num_groups || pred[i] < 0 || pred[i] >= num_groups)
            throw LabelRange("confusion: label out of range");
        ++cm.at(truth[i], pred[i]);
    }
    return cm;
}

namespace detail {

/// Apportion n slots to the probability row by largest-remainder rounding,
/// so the integer counts sum to n exactly.
inline std::vector<std::size_t> largest_remainder(std::span<const double> probs,
                                                  std::size_t n) {
    const std::size_t k = probs.size();
    std::vector<std::size_t> counts(k);
    std::vector<double> remainder(k);
    std::size_t assigned = 0;
    for (std::size_t j = 0; j < k; ++j) {
        const double exact = probs[j] * static_cast<double>(n);
        counts[j] = static_cast<std::size_t>(exact);
        remainder[j] = exact - static_cast<double>(counts[j]);
        assigned += counts[j];
    }
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return remainder[a] > remainder[b];
    });
    for (std::size_t j = 0; assigned < n; ++j, ++assigned) ++counts[order[j % k]];
    return counts;
}

} // namespace detail

/// Replace group labels with noise whose empirical confusion matrix equals
/// the largest-remainder rounding of the row-normalized target, exactly:
/// within each true group, the rounded number of points per predicted label
/// is selected uniformly without replacement. Group totals are preserved.
inline std::vector<int> flip_to_confusion(std::span<const int> truth,
                                          const ConfusionMatrix& target,
                                          std::uint64_t seed) {
    const int G = target.num_groups;
    const std::vector<double> rows = target.row_normalized();
    std::vector<std::vector<std::size_t>> by_group(G);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || truth[i] >= G)
            throw LabelRange("flip_to_confusion: label out of range");
        by_group[truth[i]].push_back(i);
    }

    std::vector<int> noisy(truth.begin(), truth.end());
    Rng rng(seed, streams::flips);
    for (int t = 0; t < G; ++t) {
        auto& members = by_group[t];
        if (members.empty()) continue;
        const std::vector<std::size_t> counts = detail::largest_remainder(
            std::span<const double>(rows.data() + t * G, G), members.size());
        // random order, then contiguous runs per predicted label
        const auto perm = rng.sample_without_replacement(members.size(), members.size());
        std::size_t pos = 0;
        for (int p = 0; p < G; ++p)
            for (std::size_t c = 0; c < counts[p]; ++c) noisy[members[perm[pos++]]] = p;
    }
    return noisy;
}

// CSV with a header row/column of group indices.
inline void save_confusion_csv(const ConfusionMatrix& cm, std::ostream& out) {
    out << "true\\pred";
    for (int p = 0; p < cm.num_groups; ++p) out << ',' << p;
    out << '\n';
    for (int t = 0; t < cm.num_groups; ++t) {
        out << t;
        for (int p = 0; p < cm.num_groups; ++p) out << ',' << cm.at(t, p);
        out << '\n';
    }
}

inline void save_confusion_csv(const ConfusionMatrix& cm, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    save_confusion_csv(cm, out);
}

inline ConfusionMatrix load_confusion_csv(std::istream& in) {
    std::string header;
    if (!std::getline(in, header)) throw SchemaError("confusion csv: empty");
    int G = 0;
    for (char c : header) G += c == ',';
    ConfusionMatrix cm;
    cm.num_groups = G;
    cm.counts.assign(static_cast<std::size_t>(G) * G, 0);
    for (int t = 0; t < G; ++t) {
        std::string line;
        if (!std::getline(in, line)) throw SchemaError("confusion csv: truncated");
        std::size_t pos = line.find(',');
        for (int p = 0; p < G; ++p) {
            if (pos == std::string::npos) throw SchemaError("confusion csv: short row");
            cm.at(t, p) = std::stoull(line.substr(pos + 1));
            pos = line.find(',', pos + 1);
        }
    }
    return cm;
}

inline ConfusionMatrix load_confusion_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path);
    return load_confusion_csv(in);
}

} // namespace barack
