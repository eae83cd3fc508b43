#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rpc/gradcheck.hpp"
#include "rpc/losses.hpp"

using namespace rpc;

namespace {

Tensor randn(std::size_t r, std::size_t c, Rng& rng, double std = 1.0) {
    std::normal_distribution<double> n(0.0, std);
    Tensor t(r, c);
    for (double& v : t.data()) {
        v = n(rng);
    }
    return t;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    double d = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        d += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    return d / (std::sqrt(na) * std::sqrt(nb));
}

// Direct double loop over ordered pairs.
double discovery_oracle(const Tensor& f, const Tensor& protos, const std::vector<double>& w, double tau) {
    const std::size_t n = f.rows(), c = protos.rows();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double dist = 0.0;
            for (std::size_t k = 0; k < c; ++k) {
                const double d = cosine(f.row_span(i), protos.row_span(k)) - cosine(f.row_span(j), protos.row_span(k));
                dist += d * d;
            }
            total += w[i] * w[j] * std::exp(cosine(f.row_span(i), f.row_span(j)) / tau) * dist;
        }
    }
    return total;
}

double eval(const std::function<Var(Tape&)>& f) {
    Tape t;
    return f(t).item();
}

}  // namespace

// --- representation losses -------------------------------------------------

TEST(UnsupContrastive, OrthonormalPairs) {
    const Tensor z{{1, 0}, {0, 1}};
    const double v = eval([&](Tape& t) { return unsup_contrastive(t.constant(z), t.constant(z), 1.0); });
    EXPECT_NEAR(v, std::log(1.0 + std::exp(-1.0)), 1e-12);
    EXPECT_NEAR(v, 0.31326, 1e-5);
}

TEST(UnsupContrastive, IdenticalRowsGiveLogB) {
    const Tensor z(5, 3, 1.0 / std::sqrt(3.0));
    EXPECT_NEAR(eval([&](Tape& t) { return unsup_contrastive(t.constant(z), t.constant(z), 0.07); }), std::log(5.0),
                1e-12);
}

TEST(UnsupContrastive, SingleRowRejected) {
    Tape t;
    EXPECT_THROW(unsup_contrastive(t.constant(Tensor{{1, 0}}), t.constant(Tensor{{1, 0}}), 1.0), ContractError);
}

TEST(SupContrastive, TwoSampleDegenerate) {
    const Tensor z{{1, 0}, {0, 1}};
    const std::vector<int> y{0, 0};
    EXPECT_NEAR(eval([&](Tape& t) { return sup_contrastive(t.constant(z), t.constant(z), y, 1.0); }), 0.0, 1e-15);
}

TEST(SupContrastive, FourSamplesTwoClasses) {
    // positive at dot 1, two negatives at dot 0: -log(e / (e + 2))
    const Tensor z{{1, 0}, {1, 0}, {0, 1}, {0, 1}};
    const std::vector<int> y{0, 0, 1, 1};
    EXPECT_NEAR(eval([&](Tape& t) { return sup_contrastive(t.constant(z), t.constant(z), y, 1.0); }),
                std::log(1.0 + 2.0 / std::exp(1.0)), 1e-12);
}

TEST(SupContrastive, PermutationInvariant) {
    Rng rng(3);
    const Tensor zh = kernels::l2_normalize_rows(randn(6, 4, rng), 1e-12);
    const Tensor zt = kernels::l2_normalize_rows(randn(6, 4, rng), 1e-12);
    const std::vector<int> y{0, 1, 0, 2, 1, 2};
    const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    std::vector<int> yp;
    for (auto i : perm) {
        yp.push_back(y[i]);
    }
    const double a = eval([&](Tape& t) { return sup_contrastive(t.constant(zh), t.constant(zt), y, 0.1); });
    const double b = eval([&](Tape& t) {
        return sup_contrastive(t.constant(kernels::gather_rows(zh, perm)), t.constant(kernels::gather_rows(zt, perm)),
                               yp, 0.1);
    });
    EXPECT_NEAR(a, b, 1e-12);
}

TEST(SupContrastive, NoPositivesRejected) {
    Tape t;
    const std::vector<int> y{0, 1};
    EXPECT_THROW(sup_contrastive(t.constant(Tensor{{1, 0}, {0, 1}}), t.constant(Tensor{{1, 0}, {0, 1}}), y, 0.1),
                 ContractError);
}

// --- classifier losses -----------------------------------------------------

TEST(ClassifierLoss, OneHotAgreementIsZero) {
    // one-hot rows would hit log(0); use a near one-hot that keeps logs finite
    const double e = 1e-300;
    const Tensor p{{1.0 - 2 * e, e, e}, {e, 1.0 - 2 * e, e}};
    const std::vector<int> y{0, 1};
    const double v = eval([&](Tape& t) { return classifier_losses(t.constant(p), t.constant(p), y, 3, 0.35, 0.0); });
    EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(ClassifierLoss, UniformMeanHasEntropyLogK) {
    const Tensor p(4, 5, 0.2);
    const std::vector<int> y{-1, -1, -1, -1};
    Tape t;
    auto parts = classifier_loss_parts(t.constant(p), t.constant(p), y, 3, 0.35, 1.0);
    EXPECT_NEAR(parts.entropy.item(), std::log(5.0), 1e-12);
    EXPECT_FALSE(parts.ce_sup.has_value());
}

TEST(ClassifierLoss, NovelLabelRejected) {
    Tape t;
    const std::vector<int> y{3};
    EXPECT_THROW(classifier_losses(t.constant(Tensor(1, 5, 0.2)), t.constant(Tensor(1, 5, 0.2)), y, 3, 0.35, 1.0),
                 ContractError);
}

TEST(ClassifierLoss, TargetViewIsDetached) {
    Rng rng(5);
    const Tensor ph = kernels::softmax_rows(randn(3, 4, rng), 1.0);
    const Tensor pt = kernels::softmax_rows(randn(3, 4, rng), 1.0);
    const std::vector<int> y{0, -1, 1};
    Tape t;
    Var a = t.variable(ph), b = t.variable(pt);
    t.backward(classifier_loss_parts(a, b, y, 2, 0.35, 0.0).total);
    // with epsilon = 0 the only path into p_tilde is the stop-gradient target
    const Tensor gb = t.grad(b);
    for (double g : gb.data()) {
        EXPECT_EQ(g, 0.0);
    }
}

// --- batch construction and fusion -----------------------------------------

TEST(BuildBatch, MuIdFloor) {
    EXPECT_EQ(mu_id_for(4, 0.5), 2u);
    EXPECT_EQ(mu_id_for(4, 0.49), 1u);
    EXPECT_EQ(mu_id_for(4, 0.0), 0u);
    EXPECT_EQ(mu_id_for(4, 1.0), 4u);
}

TEST(BuildBatch, InterleavedPattern) {
    Rng rng(1);
    const std::vector<double> w(20, 0.7);
    const FusedBatch b = build_batch(10, w, 2, 4, 0.5, 0.3, 3, AugmentConfig{}, rng);
    EXPECT_EQ(b.q(), 6u);
    EXPECT_EQ(b.labeled_row, (std::vector<bool>{true, false, false, true, false, false}));
    EXPECT_EQ(b.order[0], 0u);
    EXPECT_EQ(b.order[3], 1u);
    for (std::size_t i : {1u, 2u}) {
        EXPECT_GE(b.order[i], 2u);
        EXPECT_LT(b.order[i], 6u);  // first anchor's candidates
    }
    for (std::size_t i : {4u, 5u}) {
        EXPECT_GE(b.order[i], 6u);
        EXPECT_LT(b.order[i], 10u);
    }
}

TEST(BuildBatch, KeepsTopWeights) {
    EXPECT_EQ(top_k_by_weight(std::vector<double>{0.9, 0.1, 0.8, 0.2}, 2), (std::vector<std::size_t>{0, 2}));
    Rng rng(2);
    const std::vector<double> w{0.9, 0.1, 0.8, 0.2};
    const FusedBatch b = build_batch(1, w, 1, 4, 0.5, 0.3, 2, AugmentConfig{}, rng);
    std::vector<double> kept(b.w_old_per_row.begin() + 1, b.w_old_per_row.end());
    std::sort(kept.begin(), kept.end());
    EXPECT_EQ(kept, (std::vector<double>{0.8, 0.9}));
}

TEST(BuildBatch, ZeroRhoHasNoPairs) {
    Rng rng(3);
    const std::vector<double> w(8, 0.0);
    const FusedBatch b = build_batch(4, w, 2, 4, 0.0, 0.3, 2, AugmentConfig{}, rng);
    EXPECT_EQ(b.mu_id, 0u);
    EXPECT_EQ(b.q(), 2u);
    EXPECT_EQ(b.step_rows(), 10u);
}

TEST(BuildBatch, DeterministicGivenRng) {
    const std::vector<double> w{0.1, 0.5, 0.3, 0.9, 0.2, 0.7, 0.6, 0.4};
    Rng a(4), b(4);
    const FusedBatch x = build_batch(6, w, 2, 4, 0.5, 0.3, 3, AugmentConfig{}, a);
    const FusedBatch y = build_batch(6, w, 2, 4, 0.5, 0.3, 3, AugmentConfig{}, b);
    EXPECT_EQ(x.order, y.order);
    EXPECT_EQ(x.labeled, y.labeled);
    EXPECT_EQ(x.weak.noise, y.weak.noise);
}

TEST(Fusion, HandBuiltMatrix) {
    const std::vector<double> w{1, 1};
    EXPECT_EQ(fusion_matrix(w, 0.5), (Tensor{{-0.5, 0.5}, {0.5, -0.5}}));
    EXPECT_EQ(fusion_matrix(std::vector<double>{1, 0.5, 0.0, 1}, 0.5),
              (Tensor{{-0.5, 0, 0, 0.5}, {0.25, -0.25, 0, 0}, {0, 0, 0, 0}, {0, 0, 0.5, -0.5}}));
    // Q = 1: the shift lands on the row itself and cancels
    EXPECT_EQ(fusion_matrix(std::vector<double>{0.7}, 0.3), (Tensor{{0.0}}));
}

TEST(Fusion, ApplyHandCase) {
    Tape t;
    const Var z = t.constant(Tensor{{2, 0}, {0, 2}});
    EXPECT_EQ(apply_fusion(z, fusion_matrix(std::vector<double>{1, 1}, 0.5)).value(), (Tensor{{1, 1}, {1, 1}}));
}

TEST(Fusion, AlphaZeroIsBitExactIdentity) {
    Rng rng(6);
    const Tensor z = randn(7, 5, rng, 3.0);
    Tape t;
    EXPECT_EQ(apply_fusion(t.constant(z), fusion_matrix(std::vector<double>(7, 0.8), 0.0)).value(), z);
}

TEST(Fusion, RowsOfIPlusASumToOne) {
    Rng rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t q = 1; q <= 9; ++q) {
        std::vector<double> w(q);
        for (double& x : w) {
            x = u(rng);
        }
        Tensor m = fusion_matrix(w, u(rng));
        for (std::size_t i = 0; i < q; ++i) {
            m(i, i) += 1.0;
            double s = 0.0;
            for (double v : m.row_span(i)) {
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Fusion, ZeroWeightRowUnchanged) {
    Rng rng(8);
    const Tensor z = randn(3, 2, rng);
    Tape t;
    const Tensor out = apply_fusion(t.constant(z), fusion_matrix(std::vector<double>{1, 0, 1}, 0.4)).value();
    EXPECT_EQ(out.row_vector(1), z.row_vector(1));
}

TEST(Fusion, ShapeMismatch) {
    Tape t;
    EXPECT_THROW(apply_fusion(t.constant(Tensor(3, 2)), Tensor(2, 2)), DimensionError);
}

// --- behavioral delta and alignment ----------------------------------------

TEST(Delta, IdenticalViewsGiveZero) {
    Rng rng(9);
    const Tensor z = randn(4, 3, rng);
    Tape t;
    const std::vector<bool> lab{true, false, true, false};
    const Tensor d =
        behavioral_delta(t.constant(z), t.constant(z), lab, fusion_matrix(std::vector<double>(4, 0.5), 0.3), true)
            .value();
    for (double v : d.data()) {
        EXPECT_EQ(v, 0.0);
    }
}

TEST(Delta, AlphaZeroFusedEqualsUnfused) {
    Rng rng(10);
    const Tensor zw = randn(4, 3, rng), zs = randn(4, 3, rng);
    const std::vector<bool> lab{true, false, false, true};
    const Tensor a = fusion_matrix(std::vector<double>{1, 0.3, 0.8, 1}, 0.0);
    Tape t;
    const Tensor fused = behavioral_delta(t.constant(zw), t.constant(zs), lab, a, true).value();
    const Tensor raw = behavioral_delta(t.constant(zw), t.constant(zs), lab, a, false).value();
    EXPECT_EQ(fused, raw);
}

TEST(Delta, FusedRowsOnlyForUnlabeled) {
    Rng rng(11);
    const Tensor zw = randn(4, 3, rng), zs = randn(4, 3, rng);
    const std::vector<bool> lab{true, false, true, false};
    const Tensor a = fusion_matrix(std::vector<double>{1, 0.5, 1, 0.5}, 0.3);
    Tape t;
    const Tensor d = behavioral_delta(t.constant(zw), t.constant(zs), lab, a, true).value();
    Tensor m = a;
    for (std::size_t i = 0; i < 4; ++i) {
        m(i, i) += 1.0;
    }
    const Tensor fw = kernels::matmul(m, zw), fs = kernels::matmul(m, zs);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t k = 0; k < 3; ++k) {
            const double want = lab[i] ? zw(i, k) - zs(i, k) : fw(i, k) - fs(i, k);
            EXPECT_NEAR(d(i, k), want, 1e-14);
        }
    }
}

TEST(Align, OnePair) {
    Tape t;
    const auto r = align_loss(t.constant(Tensor{{1, 0}, {0, 1}}), {true, false}, std::vector<double>{1, 1});
    ASSERT_TRUE(r.loss);
    EXPECT_DOUBLE_EQ(r.loss->item(), 2.0);
}

TEST(Align, WeightedMeanMatchesAnchor) {
    Tape t;
    const auto r =
        align_loss(t.constant(Tensor{{1, 0}, {2, 0}, {0, 0}}), {true, false, false}, std::vector<double>{1, 1, 1});
    EXPECT_DOUBLE_EQ(r.loss->item(), 0.0);
}

TEST(Align, ZeroWeightAnchorSkipped) {
    Tape t;
    // anchor 0 pairs with one zero-weight row, anchor 1 with [0,1]
    const auto r = align_loss(t.constant(Tensor{{5, 5}, {9, 9}, {1, 0}, {0, 1}}), {true, false, true, false},
                              std::vector<double>{1, 0, 1, 0.5});
    EXPECT_EQ(r.anchors, 1u);
    EXPECT_DOUBLE_EQ(r.loss->item(), 2.0);
    const auto none = align_loss(t.constant(Tensor{{1, 0}, {0, 1}}), {true, true}, std::vector<double>{1, 1});
    EXPECT_FALSE(none.loss);
}

TEST(Align, Gradient) {
    Rng rng(12);
    const std::vector<bool> lab{true, false, false, true, false, false};
    const std::vector<double> w{1, 0.3, 0.9, 1, 0.6, 0.2};
    const Tensor a = fusion_matrix(w, 0.3);
    const double err = finite_diff_gradcheck(
        [&](Tape&, std::span<const Var> v) {
            return *align_loss(behavioral_delta(v[0], v[1], lab, a, true), lab, w).loss;
        },
        {randn(6, 3, rng), randn(6, 3, rng)}).max_rel_error;
    EXPECT_LT(err, 1e-6);
}

// --- discovery ------------------------------------------------------------

TEST(Similarity, Cases) {
    const std::vector<double> a{1, 2}, b{-2, 1};
    EXPECT_NEAR(pairwise_similarity(a, a, 0.07), std::exp(1.0 / 0.07), 1e-6);
    EXPECT_DOUBLE_EQ(pairwise_similarity(a, b, 0.07), 1.0);
    const std::vector<double> c{0.3, -1.1};
    EXPECT_DOUBLE_EQ(pairwise_similarity(a, c, 0.5), pairwise_similarity(c, a, 0.5));
}

TEST(Discovery, TwoSampleHandValue) {
    Tape t;
    const Tensor f{{1, 0}, {0, 1}};
    EXPECT_NEAR(discovery_loss(t.constant(f), t.constant(f), std::vector<double>{1, 1}, 1.0).item(), 4.0, 1e-12);
}

TEST(Discovery, DegenerateCasesAreZero) {
    Rng rng(13);
    const Tensor p = randn(3, 4, rng);
    Tensor same(5, 4);
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t k = 0; k < 4; ++k) {
            same(i, k) = 1.0 + static_cast<double>(k);
        }
    }
    Tape t;
    EXPECT_EQ(discovery_loss(t.constant(same), t.constant(p), std::vector<double>(5, 0.7), 0.07).item(), 0.0);
    EXPECT_EQ(discovery_loss(t.constant(randn(5, 4, rng)), t.constant(p), std::vector<double>(5, 0.0), 0.07).item(),
              0.0);
}

TEST(Discovery, MatchesDoubleLoopOracle) {
    Rng rng(14);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t n = 2; n <= 16; ++n) {
        const Tensor f = randn(n, 6, rng), p = randn(4, 6, rng);
        std::vector<double> w(n);
        for (double& x : w) {
            x = u(rng);
        }
        Tape t;
        const double got = discovery_loss(t.constant(f), t.constant(p), w, 0.5).item();
        const double want = discovery_oracle(f, p, w, 0.5);
        EXPECT_NEAR(got, want, 1e-9 * std::max(1.0, std::abs(want))) << "n=" << n;
    }
}

TEST(Discovery, PermutationInvariant) {
    Rng rng(15);
    const Tensor f = randn(5, 4, rng), p = randn(2, 4, rng);
    const std::vector<double> w{0.1, 0.9, 0.4, 0.6, 0.3};
    const std::vector<std::size_t> perm{4, 2, 0, 3, 1};
    std::vector<double> wp;
    for (auto i : perm) {
        wp.push_back(w[i]);
    }
    Tape t;
    EXPECT_NEAR(discovery_loss(t.constant(f), t.constant(p), w, 0.3).item(),
                discovery_loss(t.constant(kernels::gather_rows(f, perm)), t.constant(p), wp, 0.3).item(), 1e-10);
}

TEST(Discovery, PairMassCountsOffDiagonal) {
    const Tensor f{{1, 0}, {0, 1}, {1, 0}};
    // pairs (0,2),(2,0) have s = e; the other four s = 1
    EXPECT_NEAR(discovery_pair_mass(f, std::vector<double>{1, 1, 1}, 1.0), 4.0 + 2.0 * std::exp(1.0), 1e-12);
}

TEST(Discovery, DetachedSimilarityChangesOnlyGradient) {
    Rng rng(16);
    const Tensor f = randn(4, 3, rng), p = randn(2, 3, rng);
    const std::vector<double> w{0.5, 0.8, 0.2, 0.9};
    Tape a, b;
    Var fa = a.variable(f), fb = b.variable(f);
    Var la = discovery_loss(fa, a.constant(p), w, 0.5, false);
    Var lb = discovery_loss(fb, b.constant(p), w, 0.5, true);
    EXPECT_EQ(la.item(), lb.item());
    a.backward(la);
    b.backward(lb);
    EXPECT_GT(kernels::max_abs_diff(a.grad(fa), b.grad(fb)), 1e-6);
}

// --- total ----------------------------------------------------------------

TEST(Total, WeightedSum) {
    Tape t;
    LossTerms terms{t.constant(Tensor::scalar(1.3)), t.constant(Tensor::scalar(0.7)), t.constant(Tensor::scalar(2.1)),
                    t.constant(Tensor::scalar(0.4)), t.constant(Tensor::scalar(5.0))};
    LossWeights w;
    w.lambda1 = 0.5;
    w.lambda2 = 0.3;
    const double base = (1 - 0.35) * 1.3 + 0.35 * 0.7 + 2.1;
    EXPECT_NEAR(baseline_loss(terms, w).item(), base, 1e-15);
    EXPECT_NEAR(total_loss(terms, w).item(), base + 0.5 * 0.4 + 0.3 * 5.0, 1e-15);
}

TEST(Total, ZeroWeightsReduceToBaselineBitExactly) {
    Tape t;
    LossTerms terms{t.constant(Tensor::scalar(1.3)), std::nullopt, t.constant(Tensor::scalar(2.1)),
                    t.constant(Tensor::scalar(0.4)), t.constant(Tensor::scalar(5.0))};
    LossWeights w;
    w.lambda1 = 0.0;
    w.lambda2 = 0.0;
    EXPECT_EQ(total_loss(terms, w).item(), baseline_loss(terms, w).item());
}

TEST(Total, NonFiniteComponentNamed) {
    Tape t;
    LossTerms terms{t.constant(Tensor::scalar(1.0)), std::nullopt, t.constant(Tensor::scalar(1.0)),
                    t.constant(Tensor::scalar(INFINITY)), std::nullopt};
    try {
        total_loss(terms, LossWeights{});
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("align"), std::string::npos);
    }
}

TEST(LossWeights, Validation) {
    LossWeights w;
    w.alpha = 1.5;
    EXPECT_THROW(w.validate(), ConfigError);
    w = LossWeights{};
    w.tau_u = 0.0;
    EXPECT_THROW(w.validate(), ConfigError);
}
