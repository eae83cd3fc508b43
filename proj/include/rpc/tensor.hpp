#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rpc/error.hpp"

namespace rpc {

/// Dense row-major float64 matrix. Vectors are 1×n rows and scalars are 1×1,
/// so every quantity in the training stack is two-dimensional.
class Tensor {
  public:
    Tensor() = default;

    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + std::to_string(rows_) + "x" +
                                 std::to_string(cols_));
        }
    }

    Tensor(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ == 0 ? 0 : rows.begin()->size();
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) {
                throw DimensionError("ragged initializer list");
            }
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor(rows, cols, 0.0); }
    static Tensor ones(std::size_t rows, std::size_t cols) { return Tensor(rows, cols, 1.0); }
    static Tensor scalar(double v) { return Tensor(1, 1, v); }

    static Tensor identity(std::size_t n) {
        Tensor t(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            t(i, i) = 1.0;
        }
        return t;
    }

    static Tensor row(std::span<const double> values) {
        return Tensor(1, values.size(), std::vector<double>(values.begin(), values.end()));
    }

    static Tensor column(std::span<const double> values) {
        return Tensor(values.size(), 1, std::vector<double>(values.begin(), values.end()));
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    std::array<std::size_t, 2> shape() const noexcept { return {rows_, cols_}; }
    bool is_scalar() const noexcept { return rows_ == 1 && cols_ == 1; }
    bool same_shape(const Tensor& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double item() const {
        if (!is_scalar()) {
            throw ContractError("item() on non-scalar tensor of shape " + shape_string());
        }
        return data_[0];
    }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row_span(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double> row_vector(std::size_t r) const {
        auto s = row_span(r);
        return {s.begin(), s.end()};
    }

    std::string shape_string() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                             b.shape_string());
    }
}

inline void require_finite(const Tensor& t, std::string_view op) {
    if (!t.all_finite()) {
        throw NumericalError(std::string(op) + " produced a non-finite value");
    }
}

// ---------------------------------------------------------------------------
// Plain kernels. The differentiable ops in autodiff.hpp are built on these.
// ---------------------------------------------------------------------------

namespace kernels {

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions differ (" + a.shape_string() + " x " +
                             b.shape_string() + ")");
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        double* o = out.row_span(i).data();
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a(i, p);
            const double* br = b.row_span(p).data();
            for (std::size_t j = 0; j < n; ++j) {
                o[j] += av * br[j];
            }
        }
    }
    return out;
}

/// a^T b without materializing the transpose.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows()) {
        throw DimensionError("matmul_tn: row counts differ");
    }
    const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
    Tensor out(m, n);
    for (std::size_t p = 0; p < k; ++p) {
        const double* ar = a.row_span(p).data();
        const double* br = b.row_span(p).data();
        for (std::size_t i = 0; i < m; ++i) {
            const double av = ar[i];
            double* o = out.row_span(i).data();
            for (std::size_t j = 0; j < n; ++j) {
                o[j] += av * br[j];
            }
        }
    }
    return out;
}

/// a b^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: column counts differ");
    }
    const std::size_t m = a.rows(), n = b.rows(), k = a.cols();
    Tensor out(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* ar = a.row_span(i).data();
        for (std::size_t j = 0; j < n; ++j) {
            const double* br = b.row_span(j).data();
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                s += ar[p] * br[p];
            }
            out(i, j) = s;
        }
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    Tensor out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

template <class F>
Tensor map(const Tensor& a, F&& f) {
    Tensor out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out[i] = f(a[i]);
    }
    return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, F&& f) {
    Tensor out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out[i] = f(a[i], b[i]);
    }
    return out;
}

inline void add_inplace(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i];
    }
}

inline double sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) {
        s += v;
    }
    return s;
}

/// Row-wise softmax of x / temperature with max subtraction.
inline Tensor softmax_rows(const Tensor& x, double temperature) {
    Tensor out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto in = x.row_span(i);
        auto o = out.row_span(i);
        const double mx = *std::max_element(in.begin(), in.end());
        double z = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            o[j] = std::exp((in[j] - mx) / temperature);
            z += o[j];
        }
        for (double& v : o) {
            v /= z;
        }
    }
    return out;
}

inline Tensor log_softmax_rows(const Tensor& x, double temperature) {
    Tensor out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto in = x.row_span(i);
        auto o = out.row_span(i);
        const double mx = *std::max_element(in.begin(), in.end());
        double z = 0.0;
        for (double v : in) {
            z += std::exp((v - mx) / temperature);
        }
        const double lz = std::log(z);
        for (std::size_t j = 0; j < in.size(); ++j) {
            o[j] = (in[j] - mx) / temperature - lz;
        }
    }
    return out;
}

inline std::vector<double> row_norms(const Tensor& x) {
    std::vector<double> n(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double s = 0.0;
        for (double v : x.row_span(i)) {
            s += v * v;
        }
        n[i] = std::sqrt(s);
    }
    return n;
}

/// Rows scaled to unit norm; rows with norm below eps are scaled by 1/eps.
inline Tensor l2_normalize_rows(const Tensor& x, double eps) {
    Tensor out = x;
    const auto norms = row_norms(x);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double d = std::max(norms[i], eps);
        for (double& v : out.row_span(i)) {
            v /= d;
        }
    }
    return out;
}

inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> idx) {
    Tensor out(idx.size(), a.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= a.rows()) {
            throw DimensionError("gather_rows: index out of range");
        }
        auto src = a.row_span(idx[r]);
        std::copy(src.begin(), src.end(), out.row_span(r).begin());
    }
    return out;
}

inline double sigmoid(double x) {
    if (x >= 0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus(double x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

}  // namespace kernels
}  // namespace rpc
