#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "rpc/autodiff.hpp"
#include "rpc/gradcheck.hpp"
#include "rpc/random.hpp"
#include "rpc/tensor.hpp"

using namespace rpc;

namespace {

Tensor randn(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Tensor t(r, c);
    for (double& v : t.data()) {
        v = n(rng);
    }
    return t;
}

}  // namespace

TEST(Tensor, ShapeAndAccess) {
    Tensor t{{1, 2, 3}, {4, 5, 6}};
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
    EXPECT_EQ(t(1, 2), 6.0);
    EXPECT_THROW(t.item(), ContractError);
    EXPECT_THROW(Tensor(2, 2, std::vector<double>{1, 2, 3}), DimensionError);
    EXPECT_THROW((Tensor{{1, 2}, {3}}), DimensionError);
}

TEST(Tensor, MatmulVariantsAgree) {
    const Tensor a = randn(3, 4, 1), b = randn(4, 5, 2);
    const Tensor ab = kernels::matmul(a, b);
    EXPECT_LT(kernels::max_abs_diff(ab, kernels::matmul_tn(kernels::transpose(a), b)), 1e-14);
    EXPECT_LT(kernels::max_abs_diff(ab, kernels::matmul_nt(a, kernels::transpose(b))), 1e-14);
    // hand value
    const Tensor m = kernels::matmul(Tensor{{1, 2}, {3, 4}}, Tensor{{5, 6}, {7, 8}});
    EXPECT_EQ(m, (Tensor{{19, 22}, {43, 50}}));
    EXPECT_THROW(kernels::matmul(a, a), DimensionError);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
    const Tensor x = randn(4, 6, 3);
    const Tensor p = kernels::softmax_rows(x, 0.1);
    const Tensor lp = kernels::log_softmax_rows(x, 0.1);
    for (std::size_t r = 0; r < 4; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 6; ++c) {
            s += p(r, c);
            EXPECT_NEAR(std::log(p(r, c)), lp(r, c), 1e-12);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Tensor, SoftmaxStableForLargeLogits) {
    const Tensor p = kernels::softmax_rows(Tensor{{1000.0, 0.0}}, 0.01);
    EXPECT_TRUE(p.all_finite());
    EXPECT_NEAR(p(0, 0), 1.0, 1e-15);
}

TEST(Tensor, NormalizeRows) {
    const Tensor n = kernels::l2_normalize_rows(Tensor{{3, 4}, {0, 0}}, 1e-12);
    EXPECT_DOUBLE_EQ(n(0, 0), 0.6);
    EXPECT_DOUBLE_EQ(n(0, 1), 0.8);
    EXPECT_EQ(n(1, 0), 0.0);
}

TEST(Tensor, NonFiniteRaises) {
    Tensor t{{1.0, std::numeric_limits<double>::quiet_NaN()}};
    EXPECT_THROW(require_finite(t, "test"), NumericalError);
}

TEST(Autodiff, MatmulGradient) {
    Tape tape;
    Var a = tape.variable(Tensor{{1, 2}, {3, 4}});
    Var b = tape.variable(Tensor{{5, 6}, {7, 8}});
    Var y = sum(matmul(a, b));
    tape.backward(y);
    EXPECT_DOUBLE_EQ(y.item(), 19 + 22 + 43 + 50);
    // d sum(AB)/dA = 1 B^T
    EXPECT_EQ(tape.grad(a), (Tensor{{11, 15}, {11, 15}}));
    EXPECT_EQ(tape.grad(b), (Tensor{{4, 4}, {6, 6}}));
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
    Tape tape;
    Var x = tape.variable(Tensor::scalar(3.0));
    Var y = x * x + x;
    tape.backward(y);
    EXPECT_DOUBLE_EQ(tape.grad(x).item(), 7.0);
}

TEST(Autodiff, DetachBlocksGradient) {
    Tape tape;
    Var x = tape.variable(Tensor::scalar(2.0));
    Var y = x * detach(x);
    tape.backward(y);
    EXPECT_DOUBLE_EQ(tape.grad(x).item(), 2.0);
}

TEST(Autodiff, ConstantsHaveNoGradient) {
    Tape tape;
    Var c = tape.constant(Tensor::scalar(2.0));
    Var x = tape.variable(Tensor::scalar(1.5));
    tape.backward(c * x);
    EXPECT_FALSE(c.requires_grad());
    EXPECT_DOUBLE_EQ(tape.grad(x).item(), 2.0);
}

TEST(Autodiff, BackwardNeedsScalar) {
    Tape tape;
    Var x = tape.variable(Tensor(2, 2, 1.0));
    EXPECT_THROW(tape.backward(x), Error);
}

TEST(Autodiff, LogOfZeroIsNumericalError) {
    Tape tape;
    Var x = tape.variable(Tensor::scalar(0.0));
    EXPECT_THROW(log(x), NumericalError);
}

TEST(Gradcheck, ElementwiseOps) {
    const Tensor x = randn(3, 4, 7);
    EXPECT_LT(finite_diff_gradcheck([](Tape&, const Var& v) { return sum(tanh(v) * exp(scale(v, 0.3))); }, x),
              1e-6);
    EXPECT_LT(finite_diff_gradcheck([](Tape&, const Var& v) { return sum(sigmoid(v) + softplus(v)); }, x), 1e-6);
    EXPECT_LT(finite_diff_gradcheck([](Tape&, const Var& v) { return mean(square(v)); }, x), 1e-6);
}

TEST(Gradcheck, RowOps) {
    const Tensor x = randn(4, 5, 8);
    EXPECT_LT(finite_diff_gradcheck(
                  [](Tape& t, const Var& v) {
                      return sum(log_softmax_rows(v, 0.5) * t.constant(Tensor(4, 5, 0.3)));
                  },
                  x),
              1e-6);
    EXPECT_LT(finite_diff_gradcheck(
                  [](Tape& t, const Var& v) {
                      return sum(l2_normalize_rows(v) * t.constant(randn(4, 5, 9)));
                  },
                  x),
              1e-6);
    EXPECT_LT(finite_diff_gradcheck([](Tape&, const Var& v) { return sum(pairwise_sq_dist(v)); }, x), 1e-6);
    EXPECT_LT(finite_diff_gradcheck(
                  [](Tape& t, const Var& v) {
                      return sum(matmul_nt(append_ones_col(v), t.constant(randn(2, 6, 10))));
                  },
                  x),
              1e-6);
}

TEST(Gradcheck, MaskedLogSoftmax) {
    const Tensor x = randn(3, 3, 11);
    Tensor keep(3, 3, 1.0);
    for (std::size_t i = 0; i < 3; ++i) {
        keep(i, i) = 0.0;
    }
    Tensor w(3, 3, 1.0);
    for (std::size_t i = 0; i < 3; ++i) {
        w(i, i) = 0.0;
    }
    EXPECT_LT(finite_diff_gradcheck(
                  [&](Tape& t, const Var& v) { return sum(masked_log_softmax_rows(v, 0.2, keep) * t.constant(w)); },
                  x),
              1e-6);
}

TEST(Gradcheck, DetectsWrongGradient) {
    // y = sum(x * sg(x)) has gradient sg(x); a check that ignored the
    // stop-gradient would see 2x and fail
    const Tensor x = randn(2, 2, 12);
    EXPECT_LT(finite_diff_gradcheck([](Tape&, const Var& v) { return sum(v * detach(v)); }, x), 1e-6);
}

TEST(Gradcheck, RejectsBadStep) {
    EXPECT_THROW(finite_diff_gradcheck([](Tape&, const Var& v) { return sum(v); }, Tensor(1, 1, 1.0), 1.0),
                 ParameterError);
}
