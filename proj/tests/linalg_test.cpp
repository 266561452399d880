#include <gtest/gtest.h>

#include "gradmap/linalg.hpp"
#include "oracles.hpp"

using namespace gradmap;

namespace {

double ridge_objective_plain(const Tensor& w, const Tensor& a, const Tensor& t, double lambda) {
    return sum_squares(sub(matmul(w, a), t)) + lambda * sum_squares(sub(w, Tensor::identity(w.rows())));
}

} // namespace

TEST(Cholesky, ReconstructsSpdMatrix) {
    const Tensor m = oracle::random_tensor({6, 6}, 1);
    Tensor spd = oracle::matmul(m, oracle::transpose(m));
    for (std::size_t i = 0; i < 6; ++i) spd(i, i) += 1.0;
    const Tensor l = cholesky(spd);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = i + 1; j < 6; ++j) EXPECT_EQ(l(i, j), 0.0);
    EXPECT_LT(max_abs_diff(oracle::matmul(l, oracle::transpose(l)), spd), 1e-12);
    const Tensor b = oracle::random_tensor({6, 3}, 2);
    EXPECT_LT(max_abs_diff(oracle::matmul(spd, cholesky_solve(l, b)), b), 1e-10);
}

TEST(Cholesky, IndefiniteMatrixIsNumericError) {
    EXPECT_THROW(cholesky(Tensor::matrix({{1, 2}, {2, 1}})), NumericError);
}

TEST(RidgeSolve, IdentityTargetGivesIdentity) {
    const Tensor a = oracle::random_tensor({5, 20}, 3);
    for (double lambda : {1e-6, 1e-3, 1.0, 1e3}) {
        EXPECT_LT(max_abs_diff(ridge_solve(a, a, lambda), Tensor::identity(5)), 1e-12) << lambda;
    }
}

TEST(RidgeSolve, HugeLambdaPinsIdentity) {
    const Tensor a = oracle::random_tensor({4, 16}, 4);
    const Tensor t = oracle::random_tensor({4, 16}, 5);
    EXPECT_LT(max_abs_diff(ridge_solve(a, t, 1e12), Tensor::identity(4)), 1e-6);
}

TEST(RidgeSolve, NoWorseThanGradientDescent) {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const Tensor a = oracle::random_tensor({4, 16}, 100 + s);
        const Tensor t = oracle::random_tensor({4, 16}, 200 + s);
        const double lambda = 0.1;
        const Tensor w = ridge_solve(a, t, lambda);
        // the descent oracle minimizes the same objective scaled by 1/n
        const Tensor g = oracle::ridge_by_descent(a, t, lambda / 16.0, 10000);
        EXPECT_LE(ridge_objective_plain(w, a, t, lambda), ridge_objective_plain(g, a, t, lambda) + 1e-8);
    }
}

TEST(RidgeSolve, Stationarity) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const Tensor a = oracle::random_tensor({8, 64}, 300 + s);
        const Tensor t = oracle::random_tensor({8, 64}, 400 + s, 3.0);
        const double lambda = 1e-3;
        const Tensor w = ridge_solve(a, t, lambda);
        const Tensor r = add(oracle::matmul(sub(oracle::matmul(w, a), t), oracle::transpose(a)),
                             scaled(sub(w, Tensor::identity(8)), lambda));
        EXPECT_LT(frobenius_norm(r), 1e-8 * (1.0 + frobenius_norm(t)));
    }
}

TEST(RidgeSolve, ObjectiveHelperMatchesPlainFormula) {
    const Tensor a = oracle::random_tensor({3, 7}, 6);
    const Tensor t = oracle::random_tensor({3, 7}, 7);
    const Tensor w = oracle::random_tensor({3, 3}, 8);
    EXPECT_NEAR(ridge_objective(w, a, t, 0.3), ridge_objective_plain(w, a, t, 0.3), 1e-10);
}

TEST(RidgeSolve, RejectsBadInput) {
    const Tensor a = oracle::random_tensor({3, 7}, 6);
    EXPECT_THROW(ridge_solve(a, a, 0.0), InputError);
    EXPECT_THROW(ridge_solve(a, a, -1.0), InputError);
    EXPECT_THROW(ridge_solve(a, Tensor::zeros({3, 6}), 1.0), ShapeError);
    EXPECT_THROW(ridge_solve(Tensor::zeros({3, 0}), Tensor::zeros({3, 0}), 1.0), ShapeError);
}

TEST(SymmetricEigen, Reconstructs) {
    const Tensor m = oracle::random_tensor({5, 5}, 11);
    const Tensor sym = add(m, oracle::transpose(m));
    const SymmetricEigen e = symmetric_eigen(sym);
    Tensor d({5, 5});
    for (std::size_t i = 0; i < 5; ++i) d(i, i) = e.values[i];
    EXPECT_LT(max_abs_diff(oracle::matmul(oracle::matmul(e.vectors, d), oracle::transpose(e.vectors)), sym), 1e-10);
}
