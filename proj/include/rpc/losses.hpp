#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rpc/autodiff.hpp"
#include "rpc/error.hpp"
#include "rpc/model.hpp"
#include "rpc/random.hpp"
#include "rpc/synthdata.hpp"

namespace rpc {

struct LossWeights {
    double lambda = 0.35;   // supervised/unsupervised balance
    double epsilon = 1.0;   // mean-entropy regularizer weight
    double lambda1 = 0.5;   // alignment
    double lambda2 = 0.3;   // discovery
    double alpha = 0.3;     // embedding fusion
    double tau_s = 0.1;
    double tau_u = 0.07;
    double rho_id = 0.5;    // only used when the trainer runs with a fixed rho
    bool normalize_discover = true;           // trainer divides L_new by its detached pair mass
    bool discover_detach_similarity = true;   // s_ij as constant pair weights
    bool discover_detach_prototypes = false;  // fixed known-class reference frame in L_new

    void validate() const {
        if (!(lambda >= 0.0 && lambda <= 1.0)) {
            throw ConfigError("loss: lambda must lie in [0, 1]");
        }
        if (!(alpha >= 0.0 && alpha <= 1.0)) {
            throw ConfigError("loss: alpha must lie in [0, 1]");
        }
        if (!(epsilon >= 0.0 && lambda1 >= 0.0 && lambda2 >= 0.0)) {
            throw ConfigError("loss: epsilon, lambda1, lambda2 must be nonnegative");
        }
        if (!(tau_s > 0.0 && tau_u > 0.0)) {
            throw ConfigError("loss: temperatures must be positive");
        }
        if (!(rho_id >= 0.0 && rho_id <= 1.0)) {
            throw ConfigError("loss: rho_id must lie in [0, 1]");
        }
    }
};

// ---------------------------------------------------------------------------
// Representation losses
// ---------------------------------------------------------------------------

/// Self-supervised InfoNCE over the batch:
///   (1/|B|) sum_i -log( exp(zh_i . zt_i / tau) / sum_j exp(zh_j . zt_i / tau) ),
/// where the denominator runs over every j including i. Rows are expected to
/// be L2-normalized.
inline Var unsup_contrastive(const Var& z_hat, const Var& z_tilde, double tau_u) {
    require_positive_temperature(tau_u, "unsup_contrastive");
    if (z_hat.rows() < 2) {
        throw ContractError("unsup_contrastive: batch needs at least 2 rows");
    }
    require_same_shape(z_hat.value(), z_tilde.value(), "unsup_contrastive");
    Tape& t = z_hat.tape();
    const std::size_t n = z_hat.rows();
    // row i of (zt zh^T) holds zh_j . zt_i over j
    Var logp = log_softmax_rows(matmul_nt(z_tilde, z_hat), tau_u);
    Var diag = t.constant(Tensor::identity(n));
    return scale(sum(logp * diag), -1.0 / static_cast<double>(n));
}

/// Supervised contrastive loss over labeled rows. Positives of anchor i are
/// the other rows with the same label; the denominator runs over every row
/// n != i of the z_tilde view. Anchors without positives are skipped.
inline Var sup_contrastive(const Var& z_hat, const Var& z_tilde, std::span<const int> labels, double tau_s) {
    require_positive_temperature(tau_s, "sup_contrastive");
    require_same_shape(z_hat.value(), z_tilde.value(), "sup_contrastive");
    const std::size_t n = z_hat.rows();
    if (labels.size() != n) {
        throw DimensionError("sup_contrastive: label count differs from row count");
    }
    Tensor keep(n, n, 1.0);
    Tensor pos(n, n);
    std::size_t anchors = 0;
    for (std::size_t i = 0; i < n; ++i) {
        keep(i, i) = 0.0;
        std::size_t np = 0;
        for (std::size_t p = 0; p < n; ++p) {
            np += (p != i && labels[p] == labels[i]);
        }
        if (np == 0) {
            continue;
        }
        ++anchors;
        for (std::size_t p = 0; p < n; ++p) {
            if (p != i && labels[p] == labels[i]) {
                pos(i, p) = 1.0 / static_cast<double>(np);
            }
        }
    }
    if (anchors == 0) {
        throw ContractError("sup_contrastive: no anchor has a same-class partner");
    }
    for (double& v : pos.data()) {
        v /= static_cast<double>(anchors);
    }
    Tape& t = z_hat.tape();
    Var logp = masked_log_softmax_rows(matmul_nt(z_hat, z_tilde), tau_s, keep);
    return scale(sum(logp * t.constant(std::move(pos))), -1.0);
}

// ---------------------------------------------------------------------------
// Classifier losses
// ---------------------------------------------------------------------------

struct ClassifierLossParts {
    Var total;
    Var ce_unsup;
    std::optional<Var> ce_sup;
    Var entropy;
};

/// (1-lambda) mean_i CE(sg(p_tilde_i), p_hat_i) + lambda mean_{labeled} CE(y_i, p_hat_i) - epsilon H(p_bar),
/// with p_bar the batch mean of both views. labels[i] < 0 marks an unlabeled row.
inline ClassifierLossParts classifier_loss_parts(const Var& p_hat, const Var& p_tilde, std::span<const int> labels,
                                                 int num_known, double lambda, double epsilon) {
    require_same_shape(p_hat.value(), p_tilde.value(), "classifier_losses");
    const std::size_t n = p_hat.rows();
    const std::size_t k = p_hat.cols();
    if (labels.size() != n) {
        throw DimensionError("classifier_losses: label count differs from row count");
    }
    Tape& t = p_hat.tape();
    Var log_p_hat = log(p_hat);

    Var target = detach(p_tilde);
    Var ce_u = scale(sum(target * log_p_hat), -1.0 / static_cast<double>(n));

    Tensor onehot(n, k);
    std::size_t n_lab = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0) {
            continue;
        }
        if (labels[i] >= num_known || static_cast<std::size_t>(labels[i]) >= k) {
            throw ContractError("classifier_losses: labeled row carries class " + std::to_string(labels[i]) +
                                ", not a known class");
        }
        onehot(i, static_cast<std::size_t>(labels[i])) = 1.0;
        ++n_lab;
    }
    std::optional<Var> ce_s;
    if (n_lab > 0) {
        ce_s = scale(sum(t.constant(std::move(onehot)) * log_p_hat), -1.0 / static_cast<double>(n_lab));
    }

    Var ones = t.constant(Tensor(1, n, 1.0 / (2.0 * static_cast<double>(n))));
    Var p_bar = matmul(ones, p_hat + p_tilde);
    Var entropy = scale(sum(p_bar * log(p_bar)), -1.0);

    Var total = scale(ce_u, 1.0 - lambda);
    if (ce_s) {
        total = total + scale(*ce_s, lambda);
    }
    total = total - scale(entropy, epsilon);
    return {total, ce_u, ce_s, entropy};
}

inline Var classifier_losses(const Var& p_hat, const Var& p_tilde, std::span<const int> labels, int num_known,
                             double lambda, double epsilon) {
    return classifier_loss_parts(p_hat, p_tilde, labels, num_known, lambda, epsilon).total;
}

// ---------------------------------------------------------------------------
// Batch construction and embedding fusion
// ---------------------------------------------------------------------------

/// One training step's sample layout.
///
/// Step rows are the B sampled labeled samples followed by the B*mu sampled
/// unlabeled candidates (grouped mu per anchor). The fused order is
///   [l_1, u_{1,1} .. u_{1,mu_id}, l_2, u_{2,1} .. ]
/// and refers back into the step rows.
struct FusedBatch {
    std::size_t batch_size = 0;  // B
    std::size_t mu = 0;
    std::size_t mu_id = 0;
    double alpha = 0.0;
    std::vector<std::size_t> labeled;    // B indices into the labeled pool
    std::vector<std::size_t> unlabeled;  // B*mu indices into the unlabeled pool
    std::vector<std::size_t> order;      // Q step-row indices in fused order
    std::vector<bool> labeled_row;       // Q
    std::vector<double> w_old_per_row;   // Q, 1.0 on labeled rows
    AugmentInstance weak;
    AugmentInstance strong;

    std::size_t q() const { return order.size(); }
    std::size_t step_rows() const { return labeled.size() + unlabeled.size(); }
};

inline std::size_t mu_id_for(std::size_t mu, double rho_id) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(mu) * rho_id));
}

/// Indices of the k largest weights, largest first, ties broken by position.
inline std::vector<std::size_t> top_k_by_weight(std::span<const double> w, std::size_t k) {
    std::vector<std::size_t> idx(w.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&w](std::size_t a, std::size_t b) { return w[a] > w[b]; });
    idx.resize(std::min(k, idx.size()));
    return idx;
}

inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
    if (k > n) {
        throw ContractError("cannot draw " + std::to_string(k) + " distinct samples from " + std::to_string(n));
    }
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(k);
    return pool;
}

/// Samples B labeled and B*mu unlabeled candidates, keeps the top
/// floor(mu * rho_id) candidates of each anchor by w_old, interleaves them,
/// and draws one weak and one strong transform shared by every row.
inline FusedBatch build_batch(std::size_t n_labeled, std::span<const double> unlabeled_w_old, std::size_t batch_size,
                              std::size_t mu, double rho_id, double alpha, std::size_t dim, const AugmentConfig& aug,
                              Rng& rng) {
    if (mu < 1 || batch_size < 1) {
        throw ContractError("build_batch: need B >= 1 and mu >= 1");
    }
    if (!(rho_id >= 0.0 && rho_id <= 1.0)) {
        throw ContractError("build_batch: rho_id must lie in [0, 1]");
    }
    FusedBatch b;
    b.batch_size = batch_size;
    b.mu = mu;
    b.mu_id = mu_id_for(mu, rho_id);
    b.alpha = alpha;
    b.labeled = sample_without_replacement(n_labeled, batch_size, rng);
    b.unlabeled = sample_without_replacement(unlabeled_w_old.size(), batch_size * mu, rng);
    b.weak = sample_augmentation(dim, AugmentStrength::weak, aug, rng);
    b.strong = sample_augmentation(dim, AugmentStrength::strong, aug, rng);

    for (std::size_t i = 0; i < batch_size; ++i) {
        b.order.push_back(i);
        b.labeled_row.push_back(true);
        b.w_old_per_row.push_back(1.0);
        if (b.mu_id == 0) {
            continue;
        }
        std::vector<double> w(mu);
        for (std::size_t j = 0; j < mu; ++j) {
            w[j] = unlabeled_w_old[b.unlabeled[i * mu + j]];
        }
        for (std::size_t j : top_k_by_weight(w, b.mu_id)) {
            b.order.push_back(batch_size + i * mu + j);
            b.labeled_row.push_back(false);
            b.w_old_per_row.push_back(w[j]);
        }
    }
    return b;
}

/// A(i, (i-1) mod Q) = alpha * w_i, A(i, i) = -alpha * w_i, zero elsewhere.
inline Tensor fusion_matrix(std::span<const double> w_old_per_row, double alpha) {
    const std::size_t q = w_old_per_row.size();
    Tensor a(q, q);
    for (std::size_t i = 0; i < q; ++i) {
        const double v = alpha * w_old_per_row[i];
        a(i, (i + q - 1) % q) += v;
        a(i, i) += -v;
    }
    return a;
}

/// Z' = (I + A) Z, differentiable through Z.
inline Var apply_fusion(const Var& z, const Tensor& a) {
    if (a.rows() != a.cols() || a.cols() != z.rows()) {
        throw DimensionError("apply_fusion: A is " + a.shape_string() + " but Z has " + std::to_string(z.rows()) +
                             " rows");
    }
    Tensor m = a;
    for (std::size_t i = 0; i < m.rows(); ++i) {
        m(i, i) += 1.0;
    }
    return matmul(z.tape().constant(std::move(m)), z);
}

/// Delta = g(f(T_w x)) - g(f(T_s x)) per fused row. Labeled rows use the raw
/// projections; with fused = true, unlabeled rows use rows of the fused
/// batches (I + A) Z_w and (I + A) Z_s.
inline Var behavioral_delta(const Var& z_weak, const Var& z_strong, const std::vector<bool>& labeled_row,
                            const Tensor& a, bool fused) {
    Var raw = z_weak - z_strong;
    if (!fused) {
        return raw;
    }
    Var fused_delta = apply_fusion(z_weak, a) - apply_fusion(z_strong, a);
    return rows_where(labeled_row, raw, fused_delta);
}

struct AlignResult {
    std::optional<Var> loss;  // empty when no anchor has paired weight
    std::size_t anchors = 0;
};

/// Mean over labeled anchors of || Delta(l_i) - sum_j w_ij Delta(u_ij) / sum_j w_ij ||^2,
/// the sum running over the anchor's partners in the fused order. Anchors whose
/// partner weights sum to zero are skipped.
inline AlignResult align_loss(const Var& deltas, const std::vector<bool>& labeled_row,
                              std::span<const double> w_old_per_row) {
    const std::size_t q = deltas.rows();
    if (labeled_row.size() != q || w_old_per_row.size() != q) {
        throw DimensionError("align_loss: layout length differs from delta rows");
    }
    std::vector<std::vector<std::size_t>> groups;
    std::vector<std::size_t> anchor_rows;
    for (std::size_t i = 0; i < q; ++i) {
        if (labeled_row[i]) {
            anchor_rows.push_back(i);
            groups.emplace_back();
        } else {
            if (groups.empty()) {
                throw ContractError("align_loss: unlabeled row precedes every anchor");
            }
            groups.back().push_back(i);
        }
    }
    Tensor m(anchor_rows.size(), q);
    AlignResult r;
    for (std::size_t a = 0; a < anchor_rows.size(); ++a) {
        double wsum = 0.0;
        for (std::size_t j : groups[a]) {
            wsum += w_old_per_row[j];
        }
        if (!(wsum > 0.0)) {
            continue;
        }
        ++r.anchors;
        m(a, anchor_rows[a]) = 1.0;
        for (std::size_t j : groups[a]) {
            m(a, j) = -w_old_per_row[j] / wsum;
        }
    }
    if (r.anchors == 0) {
        return r;
    }
    Var diff = matmul(deltas.tape().constant(std::move(m)), deltas);
    r.loss = scale(sum(square(diff)), 1.0 / static_cast<double>(r.anchors));
    return r;
}

// ---------------------------------------------------------------------------
// Relational discovery
// ---------------------------------------------------------------------------

/// s_ij = exp(cos(f_i, f_j) / tau_u)
inline double pairwise_similarity(std::span<const double> fi, std::span<const double> fj, double tau_u) {
    require_positive_temperature(tau_u, "pairwise_similarity");
    double dot = 0.0, ni = 0.0, nj = 0.0;
    for (std::size_t k = 0; k < fi.size(); ++k) {
        dot += fi[k] * fj[k];
        ni += fi[k] * fi[k];
        nj += fj[k] * fj[k];
    }
    const double denom = std::max(std::sqrt(ni), 1e-12) * std::max(std::sqrt(nj), 1e-12);
    return std::exp(dot / denom / tau_u);
}

/// sum_{i,j} w_i w_j s_ij ||r_i - r_j||^2 over ordered pairs of the batch,
/// with r the relational signature against the known prototypes. The OVA
/// weights enter as constants.
inline Var discovery_loss(const Var& features, const Var& known_prototypes, std::span<const double> w_new,
                          double tau_u, bool detach_similarity = false) {
    require_positive_temperature(tau_u, "discovery_loss");
    const std::size_t n = features.rows();
    if (n < 2) {
        throw ContractError("discovery_loss: batch needs at least 2 rows");
    }
    if (w_new.size() != n) {
        throw DimensionError("discovery_loss: weight count differs from row count");
    }
    Tape& t = features.tape();
    Tensor ww(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            ww(i, j) = w_new[i] * w_new[j];
        }
    }
    Var sig = cosine_matrix(features, known_prototypes);
    Var dist = pairwise_sq_dist(sig);
    Var f = detach_similarity ? detach(features) : features;
    Var sim = exp(scale(cosine_matrix(f, f), 1.0 / tau_u));
    return sum(t.constant(std::move(ww)) * sim * dist);
}

/// sum_{i != j} w_i w_j s_ij, the total pair weight of the discovery sum.
inline double discovery_pair_mass(const Tensor& features, std::span<const double> w_new, double tau_u) {
    require_positive_temperature(tau_u, "discovery_pair_mass");
    if (w_new.size() != features.rows()) {
        throw DimensionError("discovery_pair_mass: weight count differs from row count");
    }
    double mass = 0.0;
    for (std::size_t i = 0; i < features.rows(); ++i) {
        for (std::size_t j = 0; j < features.rows(); ++j) {
            if (i != j) {
                mass += w_new[i] * w_new[j] *
                        pairwise_similarity(features.row_span(i), features.row_span(j), tau_u);
            }
        }
    }
    return mass;
}

inline Var discovery_loss(const BoundParams& p, const Var& features, std::span<const double> w_new, double tau_u,
                          bool detach_similarity = false, bool detach_prototypes = false) {
    Var protos = known_prototypes(p);
    return discovery_loss(features, detach_prototypes ? detach(protos) : protos, w_new, tau_u, detach_similarity);
}

// ---------------------------------------------------------------------------
// Total objective
// ---------------------------------------------------------------------------

struct LossTerms {
    Var rep_unsup;
    std::optional<Var> rep_sup;
    Var cls;
    std::optional<Var> align;
    std::optional<Var> discover;
};

inline void require_finite_component(const std::optional<Var>& v, const char* name) {
    if (v && !std::isfinite(v->item())) {
        throw NumericalError(std::string("loss component '") + name + "' is not finite");
    }
}

/// L_baseline = (1-lambda) L_rep^u + lambda L_rep^s + L_cls
inline Var baseline_loss(const LossTerms& terms, const LossWeights& w) {
    require_finite_component(terms.rep_unsup, "rep_unsup");
    require_finite_component(terms.rep_sup, "rep_sup");
    require_finite_component(terms.cls, "cls");
    Var rep = scale(terms.rep_unsup, 1.0 - w.lambda);
    if (terms.rep_sup) {
        rep = rep + scale(*terms.rep_sup, w.lambda);
    }
    return rep + terms.cls;
}

/// L_total = L_baseline + lambda1 L_align + lambda2 L_new. Absent terms
/// contribute nothing.
inline Var total_loss(const LossTerms& terms, const LossWeights& w) {
    require_finite_component(terms.align, "align");
    require_finite_component(terms.discover, "discover");
    Var total = baseline_loss(terms, w);
    if (terms.align) {
        total = total + scale(*terms.align, w.lambda1);
    }
    if (terms.discover) {
        total = total + scale(*terms.discover, w.lambda2);
    }
    return total;
}

}  // namespace rpc
