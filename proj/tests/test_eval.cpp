#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "rpc/eval.hpp"
#include "rpc/harness.hpp"

using namespace rpc;

namespace {

std::int64_t brute_force_best(const CountMatrix& m) {
    std::vector<int> perm(m.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::int64_t best = -1;
    do {
        best = std::max(best, matched_count(m, perm));
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

CountMatrix random_counts(std::size_t k, Rng& rng) {
    std::uniform_int_distribution<int> d(0, 20);
    CountMatrix m(k, std::vector<std::int64_t>(k));
    for (auto& r : m) {
        for (auto& v : r) {
            v = d(rng);
        }
    }
    return m;
}

}  // namespace

TEST(Hungarian, Diagonal) {
    const CountMatrix m{{5, 0, 0}, {0, 3, 0}, {0, 0, 7}};
    EXPECT_EQ(hungarian_match(m), (std::vector<int>{0, 1, 2}));
}

TEST(Hungarian, AntiDiagonal) {
    const CountMatrix m{{0, 0, 4}, {0, 4, 0}, {4, 0, 0}};
    EXPECT_EQ(hungarian_match(m), (std::vector<int>{2, 1, 0}));
}

TEST(Hungarian, MatchesBruteForce) {
    Rng rng(42);
    for (std::size_t k = 1; k <= 6; ++k) {
        for (int trial = 0; trial < 50; ++trial) {
            const CountMatrix m = random_counts(k, rng);
            const auto perm = hungarian_match(m);
            std::vector<int> sorted = perm;
            std::sort(sorted.begin(), sorted.end());
            std::vector<int> ident(k);
            std::iota(ident.begin(), ident.end(), 0);
            ASSERT_EQ(sorted, ident) << "not a permutation";
            EXPECT_EQ(matched_count(m, perm), brute_force_best(m)) << "k=" << k << " trial=" << trial;
        }
    }
}

TEST(Hungarian, Errors) {
    EXPECT_THROW(hungarian_match(CountMatrix{{1, 2}, {3}}), DimensionError);
    EXPECT_THROW(hungarian_match(CountMatrix{{1, -2}, {3, 4}}), ContractError);
    EXPECT_TRUE(hungarian_match(CountMatrix{}).empty());
}

TEST(GcdAccuracy, HandExample) {
    const std::vector<int> truth{0, 0, 1, 1}, pred{1, 1, 1, 0};
    const GcdAccuracy a = gcd_accuracy(assign_clusters(pred, truth), {true, true, false, false});
    EXPECT_DOUBLE_EQ(a.all, 0.75);
    EXPECT_DOUBLE_EQ(*a.old_acc, 1.0);
    EXPECT_DOUBLE_EQ(*a.new_acc, 0.5);
}

TEST(GcdAccuracy, PerfectAndPermuted) {
    const std::vector<int> truth{0, 1, 2, 3, 0, 1, 2, 3};
    const std::vector<bool> known{true, true, false, false, true, true, false, false};
    const GcdAccuracy same = gcd_accuracy(assign_clusters(truth, truth), known);
    EXPECT_EQ(same.all, 1.0);
    std::vector<int> pred;
    for (int t : truth) {
        pred.push_back((t + 1) % 4);
    }
    const GcdAccuracy perm = gcd_accuracy(assign_clusters(pred, truth), known);
    EXPECT_EQ(perm.all, 1.0);
    EXPECT_EQ(*perm.old_acc, 1.0);
    EXPECT_EQ(*perm.new_acc, 1.0);
}

TEST(GcdAccuracy, InvariantUnderRelabeling) {
    Rng rng(7);
    const std::size_t n = 200, k = 6;
    std::uniform_int_distribution<int> d(0, static_cast<int>(k) - 1);
    std::vector<int> truth(n), pred(n);
    std::vector<bool> known(n);
    for (std::size_t i = 0; i < n; ++i) {
        truth[i] = d(rng);
        pred[i] = d(rng) < 4 ? truth[i] : d(rng);  // mostly right
        known[i] = truth[i] < 3;
    }
    const GcdAccuracy base = gcd_accuracy(assign_clusters(pred, truth), known);
    std::vector<int> relabel(k);
    std::iota(relabel.begin(), relabel.end(), 0);
    for (int trial = 0; trial < 100; ++trial) {
        std::shuffle(relabel.begin(), relabel.end(), rng);
        std::vector<int> p2(n);
        for (std::size_t i = 0; i < n; ++i) {
            p2[i] = relabel[static_cast<std::size_t>(pred[i])];
        }
        const GcdAccuracy a = gcd_accuracy(assign_clusters(p2, truth), known);
        EXPECT_EQ(a.all, base.all);
    }
}

TEST(GcdAccuracy, EmptySubsetIsAbsent) {
    const std::vector<int> truth{0, 1}, pred{0, 1};
    const GcdAccuracy a = gcd_accuracy(assign_clusters(pred, truth), {true, true});
    EXPECT_TRUE(a.old_acc.has_value());
    EXPECT_FALSE(a.new_acc.has_value());
}

TEST(GcdAccuracy, LengthMismatch) {
    const std::vector<int> a{0, 1}, b{0};
    EXPECT_THROW(assign_clusters(a, b), DimensionError);
}

TEST(GcdAccuracy, EvalHandlePath) {
    const EvalHandle h({0, 0, 1, 1}, 2, 1);
    const std::vector<int> pred{1, 1, 1, 0};
    const GcdAccuracy a = make_evaluator(h)(pred);
    EXPECT_DOUBLE_EQ(a.all, 0.75);
    EXPECT_DOUBLE_EQ(*a.old_acc, 1.0);
}

TEST(Harness, StandardVariants) {
    const auto v = standard_ablation();
    ASSERT_EQ(v.size(), 4u);
    EXPECT_EQ(v[1].name, "w/o Embedding Fusion");
    EXPECT_EQ(v[2].name, "w/o L_align");
    EXPECT_EQ(v[3].name, "w/o L_discover");
    TrainConfig c;
    EXPECT_EQ(apply_ablation(c, v[1]).loss.alpha, 0.0);
    EXPECT_EQ(apply_ablation(c, v[2]).loss.lambda1, 0.0);
    EXPECT_EQ(apply_ablation(c, v[3]).loss.lambda2, 0.0);
    EXPECT_EQ(apply_ablation(c, v[0]).loss.lambda2, c.loss.lambda2);
}

TEST(Harness, Summarize) {
    const std::vector<double> v{1, 2, 3, 4};
    const Summary s = summarize(v);
    EXPECT_DOUBLE_EQ(s.mean, 2.5);
    EXPECT_DOUBLE_EQ(s.spread, std::sqrt(1.25));
    EXPECT_EQ(summarize(std::vector<double>{}).n, 0u);
}

TEST(Harness, EmptySpecListGivesHeaderOnly) {
    const AblationTable t = run_ablation(TrainConfig{}, {}, {}, {});
    EXPECT_EQ(ablation_csv(t), "variant,all_mean,all_spread,old_mean,old_spread,new_mean,new_spread,runs,failures\n");
}

TEST(Harness, FailedRunIsRecorded) {
    WorldConfig w;
    w.dim_input = 8;  // model expects 32
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.warmup_epochs_ova = 1;
    const std::vector<AblationSpec> specs{standard_ablation()[0]};
    const std::vector<WorldConfig> worlds{w};
    const std::vector<std::uint64_t> seeds{1};
    const AblationTable t = run_ablation(cfg, specs, worlds, seeds);
    ASSERT_EQ(t.rows.size(), 1u);
    EXPECT_EQ(t.rows[0].failures(), 1u);
    EXPECT_NE(ablation_text(t).find("(1 failed)"), std::string::npos);
}

TEST(Harness, SweepParams) {
    EXPECT_EQ(parse_sweep_param("alpha"), SweepParam::alpha);
    EXPECT_THROW(parse_sweep_param("beta"), ConfigError);
    EXPECT_EQ(with_param(TrainConfig{}, SweepParam::lambda1, 0.25).loss.lambda1, 0.25);
    EXPECT_THROW(run_sweep(SweepParam::alpha, {}, TrainConfig{}, {}, {}), ConfigError);
}

TEST(Harness, Slug) {
    EXPECT_EQ(slug("w/o Embedding Fusion"), "w_o_embedding_fusion");
    EXPECT_EQ(slug("RPC (full)"), "rpc_full");
}
