#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rpc/error.hpp"
#include "rpc/synthdata.hpp"

namespace rpc {

using CountMatrix = std::vector<std::vector<std::int64_t>>;

/// Maximum-weight perfect matching on a square count matrix (Kuhn-Munkres
/// with potentials, O(n^3)). Returns perm with perm[row] = assigned column.
inline std::vector<int> hungarian_match(const CountMatrix& counts) {
    const std::size_t n = counts.size();
    for (const auto& r : counts) {
        if (r.size() != n) {
            throw DimensionError("hungarian_match: matrix is not square");
        }
        for (auto v : r) {
            if (v < 0) {
                throw ContractError("hungarian_match: negative count");
            }
        }
    }
    if (n == 0) {
        return {};
    }
    std::int64_t mx = 0;
    for (const auto& r : counts) {
        mx = std::max(mx, *std::max_element(r.begin(), r.end()));
    }
    // Minimize cost = mx - count. 1-based arrays as in the classic formulation.
    const std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
    std::vector<std::int64_t> u(n + 1), v(n + 1);
    std::vector<std::size_t> p(n + 1), way(n + 1);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<std::int64_t> minv(n + 1, inf);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = p[j0];
            std::int64_t delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) {
                    continue;
                }
                const std::int64_t cur = (mx - counts[i0 - 1][j - 1]) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> perm(n);
    for (std::size_t j = 1; j <= n; ++j) {
        perm[p[j] - 1] = static_cast<int>(j - 1);
    }
    return perm;
}

inline std::int64_t matched_count(const CountMatrix& counts, std::span<const int> perm) {
    std::int64_t s = 0;
    for (std::size_t i = 0; i < perm.size(); ++i) {
        s += counts[i][static_cast<std::size_t>(perm[i])];
    }
    return s;
}

struct ClusterAssignment {
    std::vector<int> predicted;
    std::vector<int> truth;
    std::vector<int> mapping;  // cluster -> class
};

struct GcdAccuracy {
    double all = 0.0;
    std::optional<double> old_acc;  // absent when no known-class samples
    std::optional<double> new_acc;  // absent when no novel-class samples
    std::size_t n_old = 0;
    std::size_t n_new = 0;
};

/// Solves one joint assignment between predicted clusters and true classes
/// over all samples.
inline ClusterAssignment assign_clusters(std::span<const int> predicted, std::span<const int> truth) {
    if (predicted.size() != truth.size()) {
        throw DimensionError("assign_clusters: prediction and truth lengths differ");
    }
    int k = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i] < 0 || truth[i] < 0) {
            throw ContractError("assign_clusters: negative id");
        }
        k = std::max({k, predicted[i] + 1, truth[i] + 1});
    }
    CountMatrix counts(static_cast<std::size_t>(k), std::vector<std::int64_t>(static_cast<std::size_t>(k), 0));
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        ++counts[static_cast<std::size_t>(predicted[i])][static_cast<std::size_t>(truth[i])];
    }
    return {{predicted.begin(), predicted.end()}, {truth.begin(), truth.end()}, hungarian_match(counts)};
}

/// All/Old/New accuracy under the joint mapping; Old and New are restricted to
/// known_mask true/false rows respectively.
inline GcdAccuracy gcd_accuracy(const ClusterAssignment& a, const std::vector<bool>& known_mask) {
    if (known_mask.size() != a.truth.size()) {
        throw DimensionError("gcd_accuracy: mask length differs");
    }
    std::size_t hit_all = 0, hit_old = 0, hit_new = 0;
    GcdAccuracy r;
    for (std::size_t i = 0; i < a.truth.size(); ++i) {
        const bool hit = a.mapping[static_cast<std::size_t>(a.predicted[i])] == a.truth[i];
        hit_all += hit;
        if (known_mask[i]) {
            ++r.n_old;
            hit_old += hit;
        } else {
            ++r.n_new;
            hit_new += hit;
        }
    }
    const std::size_t n = a.truth.size();
    r.all = n == 0 ? 0.0 : static_cast<double>(hit_all) / static_cast<double>(n);
    if (r.n_old > 0) {
        r.old_acc = static_cast<double>(hit_old) / static_cast<double>(r.n_old);
    }
    if (r.n_new > 0) {
        r.new_acc = static_cast<double>(hit_new) / static_cast<double>(r.n_new);
    }
    return r;
}

inline GcdAccuracy gcd_accuracy(std::span<const int> predicted, const EvalHandle& truth) {
    return gcd_accuracy(assign_clusters(predicted, truth.truth()), truth.known_mask());
}

/// The only path by which training code sees evaluation results: predictions
/// in, accuracies out.
using Evaluator = std::function<GcdAccuracy(std::span<const int>)>;

inline Evaluator make_evaluator(EvalHandle truth) {
    return [t = std::move(truth)](std::span<const int> predicted) { return gcd_accuracy(predicted, t); };
}

}  // namespace rpc
