#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "gradmap/error.hpp"

namespace gradmap {

using Dims = std::vector<std::size_t>;

inline std::size_t dims_product(const Dims& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string dims_string(const Dims& dims) {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(dims[i]);
    }
    return s + "]";
}

/// Dense row-major tensor of 64-bit reals.
///
/// Value type: copies are deep, and no public operation mutates a tensor
/// shared with another owner. Data arriving from outside the library
/// (constructor from a data vector, checkpoint loading) is rejected if it
/// contains NaN or Inf. Results of arithmetic are checked in debug builds.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Dims dims) : dims_(std::move(dims)), data_(dims_product(dims_), 0.0) {}

    Tensor(Dims dims, std::vector<double> data) : dims_(std::move(dims)), data_(std::move(data)) {
        if (dims_product(dims_) != data_.size()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match dims " + dims_string(dims_));
        }
        for (double v : data_) {
            if (!std::isfinite(v)) throw NumericError("non-finite value in tensor data");
        }
    }

    static Tensor zeros(Dims dims) { return Tensor(std::move(dims)); }

    static Tensor filled(Dims dims, double value) {
        Tensor t(std::move(dims));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor scalar(double value) { return Tensor({}, {value}); }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("ragged matrix literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(data));
    }

    const Dims& dims() const noexcept { return dims_; }
    std::size_t rank() const noexcept { return dims_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t rows() const {
        require_rank2();
        return dims_[0];
    }
    std::size_t cols() const {
        require_rank2();
        return dims_[1];
    }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    double operator()(std::size_t r, std::size_t c) const { return data_[r * dims_[1] + c]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * dims_[1] + c]; }

    double item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor with dims " + dims_string(dims_));
        return data_[0];
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    Tensor reshaped(Dims dims) const {
        if (dims_product(dims) != data_.size()) {
            throw ShapeError("cannot reshape " + dims_string(dims_) + " to " + dims_string(dims));
        }
        Tensor t = *this;
        t.dims_ = std::move(dims);
        return t;
    }

    bool operator==(const Tensor& other) const = default;

private:
    void require_rank2() const {
        if (dims_.size() != 2) throw ShapeError("expected a matrix, got dims " + dims_string(dims_));
    }

    Dims dims_;
    std::vector<double> data_;
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

inline ConstMatrixMap as_matrix(const Tensor& t) {
    return ConstMatrixMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                          static_cast<Eigen::Index>(t.cols()));
}

inline MatrixMap as_matrix(Tensor& t) {
    return MatrixMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

namespace detail {

inline void debug_check_finite([[maybe_unused]] const Tensor& t, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
    if (!t.all_finite()) throw NumericError(std::string("non-finite result from ") + op);
#endif
}

inline void require_same_dims(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dims() != b.dims()) {
        throw ShapeError(std::string(op) + ": dims " + dims_string(a.dims()) + " vs " +
                         dims_string(b.dims()));
    }
}

} // namespace detail

/// a[m x k] * b[k x n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw ShapeError("matmul: dims " + dims_string(a.dims()) + " and " + dims_string(b.dims()));
    }
    Tensor out({a.rows(), b.cols()});
    if (a.cols() > 0) as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
    detail::debug_check_finite(out, "matmul");
    return out;
}

/// a * b^T, the layout used for weight application (weights stored out x in).
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: dims " + dims_string(a.dims()) + " and " +
                         dims_string(b.dims()));
    }
    Tensor out({a.rows(), b.rows()});
    if (a.cols() > 0) as_matrix(out).noalias() = as_matrix(a) * as_matrix(b).transpose();
    detail::debug_check_finite(out, "matmul_nt");
    return out;
}

/// a^T * b
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: dims " + dims_string(a.dims()) + " and " +
                         dims_string(b.dims()));
    }
    Tensor out({a.cols(), b.cols()});
    if (a.rows() > 0) as_matrix(out).noalias() = as_matrix(a).transpose() * as_matrix(b);
    detail::debug_check_finite(out, "matmul_tn");
    return out;
}

inline Tensor transpose(const Tensor& t) {
    Tensor out({t.cols(), t.rows()});
    as_matrix(out) = as_matrix(t).transpose();
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_dims(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    detail::debug_check_finite(out, "add");
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_dims(a, b, "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    detail::debug_check_finite(out, "sub");
    return out;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    detail::require_same_dims(a, b, "hadamard");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    detail::debug_check_finite(out, "hadamard");
    return out;
}

inline Tensor scaled(const Tensor& a, double s) {
    Tensor out = a;
    for (double& v : out.data()) v *= s;
    detail::debug_check_finite(out, "scaled");
    return out;
}

inline double sum_squares(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v * v;
    return s;
}

inline double frobenius_norm(const Tensor& t) { return std::sqrt(sum_squares(t)); }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    detail::require_same_dims(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Stack row blocks vertically; all blocks must share a column count.
inline Tensor vstack(std::span<const Tensor> blocks) {
    if (blocks.empty()) return Tensor({0, 0});
    const std::size_t cols = blocks.front().cols();
    std::size_t rows = 0;
    for (const auto& b : blocks) {
        if (b.cols() != cols) throw ShapeError("vstack: column mismatch");
        rows += b.rows();
    }
    std::vector<double> data;
    data.reserve(rows * cols);
    for (const auto& b : blocks) data.insert(data.end(), b.data().begin(), b.data().end());
    Tensor out({rows, cols});
    std::copy(data.begin(), data.end(), out.data().begin());
    return out;
}

} // namespace gradmap
