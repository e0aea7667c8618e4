#pragma once

// Dense row-major float tensors and the handful of kernels the toy
// transformer and the feature projector need.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "attncache/errors.hpp"

namespace attncache {

// Non-owning read-only view of a contiguous row-major matrix.
struct MatrixView {
    const float* data = nullptr;
    std::size_t rows = 0;
    std::size_t cols = 0;

    float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<const float> row(std::size_t r) const { return {data + r * cols, cols}; }
    std::size_t size() const { return rows * cols; }
};

class Tensor2D {
public:
    Tensor2D() = default;
    Tensor2D(std::size_t rows, std::size_t cols, float fill = 0.0f)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw ShapeError("Tensor2D: data length " + std::to_string(data_.size()) +
                             " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
    Tensor2D(std::initializer_list<std::initializer_list<float>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw ShapeError("Tensor2D: ragged initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }
    explicit Tensor2D(MatrixView v) : rows_(v.rows), cols_(v.cols), data_(v.data, v.data + v.size()) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<float>& data() { return data_; }
    const std::vector<float>& data() const { return data_; }

    MatrixView view() const { return {data_.data(), rows_, cols_}; }
    operator MatrixView() const { return view(); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](float x) { return std::isfinite(x); });
    }

    friend bool operator==(const Tensor2D&, const Tensor2D&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// Head-batched tensor, [dim0][dim1][dim2] row-major.
class Tensor3D {
public:
    Tensor3D() = default;
    Tensor3D(std::size_t d0, std::size_t d1, std::size_t d2, float fill = 0.0f)
        : dims_{d0, d1, d2}, data_(d0 * d1 * d2, fill) {}
    Tensor3D(std::size_t d0, std::size_t d1, std::size_t d2, std::vector<float> data)
        : dims_{d0, d1, d2}, data_(std::move(data)) {
        if (data_.size() != d0 * d1 * d2) throw ShapeError("Tensor3D: data length mismatch");
    }

    std::size_t dim0() const { return dims_[0]; }
    std::size_t dim1() const { return dims_[1]; }
    std::size_t dim2() const { return dims_[2]; }

    float& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * dims_[1] + j) * dims_[2] + k];
    }
    float operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * dims_[1] + j) * dims_[2] + k];
    }

    std::span<float> slice(std::size_t i) { return {data_.data() + i * dims_[1] * dims_[2], dims_[1] * dims_[2]}; }
    MatrixView view(std::size_t i) const {
        return {data_.data() + i * dims_[1] * dims_[2], dims_[1], dims_[2]};
    }

    std::vector<float>& data() { return data_; }
    const std::vector<float>& data() const { return data_; }

    friend bool operator==(const Tensor3D&, const Tensor3D&) = default;

private:
    std::array<std::size_t, 3> dims_{0, 0, 0};
    std::vector<float> data_;
};

// C = A * B with double accumulators. Blocked over output columns and rows
// of A so a panel of B stays cache resident; zero entries of A are skipped,
// which only avoids adding exact zeros.
inline Tensor2D matmul(MatrixView a, MatrixView b) {
    if (a.cols != b.rows)
        throw ShapeError("matmul: " + std::to_string(a.rows) + "x" + std::to_string(a.cols) + " * " +
                         std::to_string(b.rows) + "x" + std::to_string(b.cols));
    constexpr std::size_t kRowBlock = 4;
    constexpr std::size_t kColBlock = 256;
    const std::size_t m = a.rows, k = a.cols, n = b.cols;
    Tensor2D c(m, n);
    std::array<std::array<double, kColBlock>, kRowBlock> acc;

    for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
        const std::size_t nc = std::min(kColBlock, n - j0);
        for (std::size_t i0 = 0; i0 < m; i0 += kRowBlock) {
            const std::size_t mr = std::min(kRowBlock, m - i0);
            for (std::size_t r = 0; r < mr; ++r) std::fill_n(acc[r].begin(), nc, 0.0);
            for (std::size_t p = 0; p < k; ++p) {
                const float* brow = b.data + p * n + j0;
                for (std::size_t r = 0; r < mr; ++r) {
                    const double av = a.data[(i0 + r) * k + p];
                    if (av == 0.0) continue;
                    double* out = acc[r].data();
                    for (std::size_t j = 0; j < nc; ++j) out[j] += av * static_cast<double>(brow[j]);
                }
            }
            for (std::size_t r = 0; r < mr; ++r) {
                float* crow = c.data().data() + (i0 + r) * n + j0;
                for (std::size_t j = 0; j < nc; ++j) crow[j] = static_cast<float>(acc[r][j]);
            }
        }
    }
    return c;
}

inline Tensor2D transpose(MatrixView a) {
    Tensor2D t(a.cols, a.rows);
    for (std::size_t r = 0; r < a.rows; ++r)
        for (std::size_t c = 0; c < a.cols; ++c) t(c, r) = a(r, c);
    return t;
}

// Row-wise softmax with max subtraction. With causal masking, entry (i, j)
// for j > i is treated as -inf, so row i always keeps its diagonal entry.
inline Tensor2D softmax_rows(MatrixView scores, bool causal) {
    Tensor2D out(scores.rows, scores.cols);
    for (std::size_t i = 0; i < scores.rows; ++i) {
        const std::size_t limit = causal ? std::min(i + 1, scores.cols) : scores.cols;
        if (limit == 0) continue;
        const auto in = scores.row(i);
        const float mx = *std::max_element(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(limit));
        auto o = out.row(i);
        double sum = 0.0;
        for (std::size_t j = 0; j < limit; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < limit; ++j) o[j] = static_cast<float>(o[j] * inv);
    }
    return out;
}

inline constexpr double kRmsNormEps = 1e-6;

inline Tensor2D rms_norm(MatrixView x, std::span<const float> gain) {
    if (gain.size() != x.cols) throw ShapeError("rms_norm: gain length != cols");
    Tensor2D out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto in = x.row(i);
        double ss = 0.0;
        for (float v : in) ss += static_cast<double>(v) * v;
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.cols) + kRmsNormEps);
        auto o = out.row(i);
        for (std::size_t j = 0; j < x.cols; ++j) o[j] = static_cast<float>(in[j] * inv * gain[j]);
    }
    return out;
}

inline constexpr double kRotaryBase = 10000.0;

// Rotates (even, odd) channel pairs of every [head][position] row in place.
inline void rotary_embed_inplace(Tensor3D& t, std::span<const std::size_t> positions,
                                 double base = kRotaryBase) {
    const std::size_t dk = t.dim2();
    if (dk % 2 != 0) throw ShapeError("rotary_embed: head dimension must be even");
    if (positions.size() != t.dim1()) throw ShapeError("rotary_embed: positions length != sequence length");
    const std::size_t half = dk / 2;
    std::vector<double> inv_freq(half);
    for (std::size_t i = 0; i < half; ++i)
        inv_freq[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dk));
    for (std::size_t pos_idx = 0; pos_idx < t.dim1(); ++pos_idx) {
        const double pos = static_cast<double>(positions[pos_idx]);
        for (std::size_t i = 0; i < half; ++i) {
            const double angle = pos * inv_freq[i];
            const double c = std::cos(angle), s = std::sin(angle);
            for (std::size_t h = 0; h < t.dim0(); ++h) {
                float& x0 = t(h, pos_idx, 2 * i);
                float& x1 = t(h, pos_idx, 2 * i + 1);
                const double a = x0, b = x1;
                x0 = static_cast<float>(a * c - b * s);
                x1 = static_cast<float>(a * s + b * c);
            }
        }
    }
}

inline std::pair<Tensor3D, Tensor3D> rotary_embed(Tensor3D q, Tensor3D k, std::span<const std::size_t> positions,
                                                  double base = kRotaryBase) {
    rotary_embed_inplace(q, positions, base);
    rotary_embed_inplace(k, positions, base);
    return {std::move(q), std::move(k)};
}

}  // namespace attncache
