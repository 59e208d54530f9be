#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "bicat/error.hpp"

namespace bicat {

/// Dense row-major tensor of doubles.  Values are immutable by convention once
/// an operation has produced them; mutation is reserved for owners (parameter
/// updates, gradient accumulation).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(count_(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (count_(shape_) != data_.size()) {
            throw ShapeError("tensor: data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }

    std::size_t rows() const {
        require_2d_("rows");
        return shape_[0];
    }
    std::size_t cols() const {
        require_2d_("cols");
        return shape_[1];
    }

    double& at(std::size_t i) { return data_[i]; }
    double at(std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    static std::string shape_string(const std::vector<std::size_t>& s) {
        std::string out = "[";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) out += "x";
            out += std::to_string(s[i]);
        }
        return out + "]";
    }

    std::string shape_string() const { return shape_string(shape_); }

private:
    static std::size_t count_(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t e : s) n *= e;
        return s.empty() ? 0 : n;
    }
    void require_2d_(const char* who) const {
        if (shape_.size() != 2)
            throw ShapeError(std::string(who) + ": tensor is not 2-d, shape " + shape_string());
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Plain value-level operations.  The autograd layer reuses these for forward
// computation and adds the backward rules.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
        throw ShapeError("matmul: incompatible shapes " + a.shape_string() + " and " +
                         b.shape_string());
    }
    const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
    Tensor c({m, p});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
            const double av = a.at(i, t);
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < p; ++j) c.at(i, j) += av * b.at(t, j);
        }
    }
    return c;
}

/// a * b^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: incompatible shapes " + a.shape_string() + " and " +
                         b.shape_string());
    }
    const std::size_t m = a.rows(), k = a.cols(), p = b.rows();
    Tensor c({m, p});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < p; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < k; ++t) s += a.at(i, t) * b.at(j, t);
            c.at(i, j) = s;
        }
    }
    return c;
}

/// a^T * b.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: incompatible shapes " + a.shape_string() + " and " +
                         b.shape_string());
    }
    const std::size_t m = a.cols(), k = a.rows(), p = b.cols();
    Tensor c({m, p});
    for (std::size_t t = 0; t < k; ++t) {
        for (std::size_t i = 0; i < m; ++i) {
            const double av = a.at(t, i);
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < p; ++j) c.at(i, j) += av * b.at(t, j);
        }
    }
    return c;
}

/// Row-wise softmax with max-subtraction.  Rows whose maximum is -infinity
/// (fully masked attention rows) come out as all zeros rather than NaN.
inline Tensor softmax_rows(const Tensor& x) {
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x.at(i, j));
        if (mx == -std::numeric_limits<double>::infinity()) continue;
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = std::exp(x.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= sum;
    }
    return out;
}

/// Row-wise log-softmax; finite for all finite inputs.
inline Tensor log_softmax_rows(const Tensor& x) {
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x.at(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(x.at(i, j) - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) - lse;
    }
    return out;
}

/// Row-wise layer normalization: each row standardized (population variance),
/// then scaled by gain and shifted by bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-8) {
    const std::size_t m = x.rows(), d = x.cols();
    if (gain.numel() != d || bias.numel() != d) {
        throw ShapeError("layer_norm: gain/bias length must equal row width " +
                         std::to_string(d));
    }
    Tensor out({m, d});
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += x.at(i, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = x.at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j)
            out.at(i, j) = gain.at(j) * ((x.at(i, j) - mean) * inv) + bias.at(j);
    }
    return out;
}

// log(sigmoid(x)) with sigma clamped to [1e-12, 1 - 1e-12].
inline double log_sigmoid_clamped(double x) {
    static const double kLo = std::log(1e-12);
    static const double kHi = std::log1p(-1e-12);
    double v;
    if (x >= 0.0) {
        v = -std::log1p(std::exp(-x));
    } else {
        v = x - std::log1p(std::exp(x));
    }
    return std::min(std::max(v, kLo), kHi);
}

inline double sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace bicat
