#pragma once

#include <cmath>
#include <string>

#include <Eigen/Eigenvalues>

#include "gradmap/tensor.hpp"

namespace gradmap {

/// Lower-triangular Cholesky factor L of a symmetric positive-definite
/// matrix (A = L L^T). Only the lower triangle of `spd` is read.
inline Tensor cholesky(const Tensor& spd) {
    const std::size_t n = spd.rows();
    if (spd.cols() != n) throw ShapeError("cholesky: matrix is not square");
    Tensor l({n, n});
    for (std::size_t j = 0; j < n; ++j) {
        double diag = spd(j, j);
        for (std::size_t p = 0; p < j; ++p) diag -= l(j, p) * l(j, p);
        if (!(diag > 0.0) || !std::isfinite(diag)) {
            throw NumericError("cholesky: matrix not positive definite at pivot " +
                               std::to_string(j));
        }
        const double ljj = std::sqrt(diag);
        l(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double v = spd(i, j);
            for (std::size_t p = 0; p < j; ++p) v -= l(i, p) * l(j, p);
            l(i, j) = v / ljj;
        }
    }
    return l;
}

/// Solves (L L^T) X = B for X given the Cholesky factor L. B is n x m.
inline Tensor cholesky_solve(const Tensor& l, const Tensor& b) {
    const std::size_t n = l.rows();
    if (b.rows() != n) throw ShapeError("cholesky_solve: right-hand side has wrong row count");
    const std::size_t m = b.cols();
    Tensor x = b;
    // forward: L y = b
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < i; ++p) {
            const double lip = l(i, p);
            for (std::size_t c = 0; c < m; ++c) x(i, c) -= lip * x(p, c);
        }
        for (std::size_t c = 0; c < m; ++c) x(i, c) /= l(i, i);
    }
    // backward: L^T x = y
    for (std::size_t ii = n; ii-- > 0;) {
        for (std::size_t p = ii + 1; p < n; ++p) {
            const double lpi = l(p, ii);
            for (std::size_t c = 0; c < m; ++c) x(ii, c) -= lpi * x(p, c);
        }
        for (std::size_t c = 0; c < m; ++c) x(ii, c) /= l(ii, ii);
    }
    return x;
}

/// Minimizer of ||W A - T||_F^2 + lambda ||W - I||_F^2 over square W.
///
/// A and T are d x n (features by samples). The stationarity condition is
/// W (A A^T + lambda I) = T A^T + lambda I; it is solved through a Cholesky
/// factorization of the SPD Gram matrix, never an explicit inverse.
inline Tensor ridge_solve(const Tensor& a, const Tensor& t, double lambda) {
    if (a.rank() != 2 || t.rank() != 2 || a.dims() != t.dims()) {
        throw ShapeError("ridge_solve: A " + dims_string(a.dims()) + " and T " +
                         dims_string(t.dims()) + " must share dims");
    }
    if (!(lambda > 0.0)) throw InputError("ridge_solve: lambda must be positive");
    const std::size_t d = a.rows();
    if (d == 0 || a.cols() == 0) throw ShapeError("ridge_solve: empty problem");

    Tensor gram = matmul_nt(a, a);
    for (std::size_t i = 0; i < d; ++i) gram(i, i) += lambda;
    // (A A^T + lambda I) W^T = A T^T + lambda I
    Tensor rhs = matmul_nt(a, t);
    for (std::size_t i = 0; i < d; ++i) rhs(i, i) += lambda;
    if (!gram.all_finite() || !rhs.all_finite()) throw NumericError("ridge_solve: non-finite input");
    const Tensor wt = cholesky_solve(cholesky(gram), rhs);
    return transpose(wt);
}

/// Ridge objective ||W A - T||_F^2 + lambda ||W - I||_F^2.
inline double ridge_objective(const Tensor& w, const Tensor& a, const Tensor& t, double lambda) {
    const Tensor r = sub(matmul(w, a), t);
    return sum_squares(r) + lambda * sum_squares(sub(w, Tensor::identity(w.rows())));
}

struct SymmetricEigen {
    Tensor values;  // ascending, length n
    Tensor vectors; // columns are eigenvectors
};

inline SymmetricEigen symmetric_eigen(const Tensor& sym) {
    if (sym.rows() != sym.cols()) throw ShapeError("symmetric_eigen: matrix is not square");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(as_matrix(sym));
    if (solver.info() != Eigen::Success) throw NumericError("symmetric_eigen: no convergence");
    const std::size_t n = sym.rows();
    SymmetricEigen out{Tensor({n}), Tensor({n, n})};
    for (std::size_t i = 0; i < n; ++i) {
        out.values[i] = solver.eigenvalues()(static_cast<Eigen::Index>(i));
        for (std::size_t j = 0; j < n; ++j) {
            out.vectors(i, j) =
                solver.eigenvectors()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        }
    }
    return out;
}

} // namespace gradmap
