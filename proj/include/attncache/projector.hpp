#pragma once

// Feature projector: a two-layer MLP mapping a pooled input embedding to a
// 128-dim feature vector, trained Siamese-style so that the Euclidean
// distance between two feature vectors tracks the distance between the
// sentences' attention maps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "attncache/binio.hpp"
#include "attncache/errors.hpp"
#include "attncache/model.hpp"
#include "attncache/tensor.hpp"

namespace attncache {

inline constexpr std::size_t kFeatureDim = 128;
inline constexpr std::size_t kProjectorHidden = 256;
inline constexpr double kDefaultAlpha = 0.2;

inline constexpr std::string_view kProjectorMagic = "ACFP";
inline constexpr std::uint32_t kProjectorVersion = 1;

struct FeatureProjector {
    Tensor2D w1;  // input x hidden
    std::vector<float> b1;
    Tensor2D w2;  // hidden x feature
    std::vector<float> b2;

    std::size_t input_dim() const { return w1.rows(); }
    std::size_t hidden_dim() const { return w1.cols(); }
    std::size_t feature_dim() const { return w2.cols(); }

    static FeatureProjector zeros(std::size_t input_dim, std::size_t hidden = kProjectorHidden,
                                  std::size_t features = kFeatureDim) {
        return {Tensor2D(input_dim, hidden), std::vector<float>(hidden, 0.0f), Tensor2D(hidden, features),
                std::vector<float>(features, 0.0f)};
    }

    friend bool operator==(const FeatureProjector&, const FeatureProjector&) = default;

    // ACFP file: magic, version, input/hidden/feature dims (u32), then W1 b1 W2 b2 as f32.
    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot open " + path.string() + " for writing");
        binio::write_magic(os, kProjectorMagic);
        binio::write_u32(os, kProjectorVersion);
        binio::write_u32(os, static_cast<std::uint32_t>(input_dim()));
        binio::write_u32(os, static_cast<std::uint32_t>(hidden_dim()));
        binio::write_u32(os, static_cast<std::uint32_t>(feature_dim()));
        binio::write_floats(os, w1.data());
        binio::write_floats(os, b1);
        binio::write_floats(os, w2.data());
        binio::write_floats(os, b2);
        if (!os) throw Error("write failed: " + path.string());
    }

    static FeatureProjector load(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw FormatError("cannot open projector file " + path.string());
        binio::expect_magic(is, kProjectorMagic);
        if (binio::read_u32(is, "version") != kProjectorVersion) throw FormatError("unsupported projector version");
        const std::size_t in = binio::read_u32(is, "dims"), hid = binio::read_u32(is, "dims"),
                          out = binio::read_u32(is, "dims");
        if (!in || !hid || !out || in > (1u << 20) || hid > (1u << 20) || out > (1u << 20))
            throw FormatError("projector file: implausible dimensions");
        FeatureProjector p = zeros(in, hid, out);
        binio::read_floats(is, p.w1.data(), "W1");
        binio::read_floats(is, p.b1, "b1");
        binio::read_floats(is, p.w2.data(), "W2");
        binio::read_floats(is, p.b2, "b2");
        return p;
    }
};

// Mean over token rows plus one length channel L / max_seq_len.
inline std::vector<float> pool(const InputEmbedding& h, std::size_t max_seq_len) {
    const std::size_t L = h.seq_len(), d = h.matrix.cols();
    if (L == 0) throw InputError("pool: empty embedding");
    std::vector<double> acc(d, 0.0);
    for (std::size_t i = 0; i < L; ++i) {
        const auto r = h.matrix.row(i);
        for (std::size_t j = 0; j < d; ++j) acc[j] += r[j];
    }
    std::vector<float> out(d + 1);
    for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<float>(acc[j] / static_cast<double>(L));
    out[d] = static_cast<float>(static_cast<double>(L) / static_cast<double>(max_seq_len));
    return out;
}

// W2 * relu(W1 * x + b1) + b2
inline std::vector<float> project(std::span<const float> pooled, const FeatureProjector& p) {
    if (pooled.size() != p.input_dim())
        throw ShapeError("project: input length " + std::to_string(pooled.size()) + " != " +
                         std::to_string(p.input_dim()));
    const std::size_t hid = p.hidden_dim(), out_dim = p.feature_dim();
    std::vector<double> z(p.b1.begin(), p.b1.end());
    for (std::size_t i = 0; i < pooled.size(); ++i) {
        const double xi = pooled[i];
        const auto wrow = p.w1.row(i);
        for (std::size_t j = 0; j < hid; ++j) z[j] += xi * wrow[j];
    }
    std::vector<double> f(p.b2.begin(), p.b2.end());
    for (std::size_t j = 0; j < hid; ++j) {
        const double a = std::max(z[j], 0.0);
        if (a == 0.0) continue;
        const auto wrow = p.w2.row(j);
        for (std::size_t k = 0; k < out_dim; ++k) f[k] += a * wrow[k];
    }
    return {f.begin(), f.end()};
}

inline double l2_distance(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

inline double siamese_distance(std::span<const float> x1, std::span<const float> x2, const FeatureProjector& p) {
    return l2_distance(project(x1, p), project(x2, p));
}

// Maps a feature distance onto (0, 1]; 1 means identical features.
inline double similarity(double distance) {
    if (!(distance >= 0.0)) throw InputError("similarity: distance must be >= 0");
    return 1.0 / (1.0 + distance);
}

struct LabelOptions {
    std::size_t layer = 0;
    bool include_length = true;  // per-layer retrieval trains without the length term
};

// Average over heads of half the L2 distance between flattened maps, scaled
// by alpha, plus the token-length difference. `a` and `b` hold one map per
// head for sequence lengths s1 and s2; unequal lengths compare the common
// top-left submatrix.
inline double attention_label(std::span<const MatrixView> a, std::size_t s1, std::span<const MatrixView> b,
                              std::size_t s2, double alpha, bool include_length = true) {
    if (a.size() != b.size() || a.empty()) throw ShapeError("attention_label: head counts differ or are zero");
    const std::size_t n = a.size();
    const std::size_t m = std::min(s1, s2);
    double heads_sum = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
        if (a[p].rows < m || a[p].cols < m || b[p].rows < m || b[p].cols < m)
            throw ShapeError("attention_label: map smaller than its sequence length");
        double ss = 0.0;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                const double d = static_cast<double>(a[p](i, j)) - static_cast<double>(b[p](i, j));
                ss += d * d;
            }
        heads_sum += 0.5 * std::sqrt(ss);
    }
    double y = (1.0 / static_cast<double>(n)) * alpha * heads_sum;
    if (include_length) y += std::fabs(static_cast<double>(s1) - static_cast<double>(s2));
    return y;
}

inline double attention_label(const AttentionRecord& a, const AttentionRecord& b, double alpha,
                              LabelOptions opt = {}) {
    if (a.num_heads != b.num_heads || a.num_layers != b.num_layers)
        throw ShapeError("attention_label: records come from different model shapes");
    if (opt.layer >= a.num_layers) throw ShapeError("attention_label: layer out of range");
    std::vector<MatrixView> ma, mb;
    for (std::size_t p = 0; p < a.num_heads; ++p) {
        ma.push_back(a.map(opt.layer, p));
        mb.push_back(b.map(opt.layer, p));
    }
    return attention_label(ma, a.seq_len, mb, b.seq_len, alpha, opt.include_length);
}

inline double smooth_l1(double y_hat, double y) {
    const double r = std::fabs(y_hat - y);
    return r < 1.0 ? 0.5 * r * r : r - 0.5;
}

// d smooth_l1 / d y_hat
inline double smooth_l1_grad(double y_hat, double y) {
    const double r = y_hat - y;
    if (std::fabs(r) < 1.0) return r;
    return r > 0.0 ? 1.0 : -1.0;
}

struct TrainingPair {
    std::vector<float> x1, x2;
    double label = 0.0;
};

struct TrainConfig {
    double alpha = kDefaultAlpha;
    double learning_rate = 1e-2;
    std::size_t epochs = 20;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    std::size_t hidden = kProjectorHidden;
    std::size_t feature_dim = kFeatureDim;
};

// Double-precision parameter set used during training; exposed so tests can
// check analytic gradients against finite differences.
namespace training {

struct Params {
    std::size_t in = 0, hid = 0, out = 0;
    std::vector<double> w1, b1, w2, b2;  // w1: in x hid, w2: hid x out (row-major)

    static Params zeros(std::size_t in, std::size_t hid, std::size_t out) {
        return {in, hid, out, std::vector<double>(in * hid, 0.0), std::vector<double>(hid, 0.0),
                std::vector<double>(hid * out, 0.0), std::vector<double>(out, 0.0)};
    }

    static Params random(std::size_t in, std::size_t hid, std::size_t out, std::uint64_t seed) {
        Params p = zeros(in, hid, out);
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> d1(0.0, std::sqrt(2.0 / static_cast<double>(in)));
        std::normal_distribution<double> d2(0.0, std::sqrt(1.0 / static_cast<double>(hid)));
        for (double& w : p.w1) w = d1(rng);
        for (double& w : p.w2) w = d2(rng);
        return p;
    }

    // Visits every parameter tensor in W1 b1 W2 b2 order.
    template <typename F>
    void for_each_tensor(F&& f) {
        f(w1);
        f(b1);
        f(w2);
        f(b2);
    }

    FeatureProjector to_projector() const {
        FeatureProjector p = FeatureProjector::zeros(in, hid, out);
        std::transform(w1.begin(), w1.end(), p.w1.data().begin(), [](double v) { return static_cast<float>(v); });
        std::transform(b1.begin(), b1.end(), p.b1.begin(), [](double v) { return static_cast<float>(v); });
        std::transform(w2.begin(), w2.end(), p.w2.data().begin(), [](double v) { return static_cast<float>(v); });
        std::transform(b2.begin(), b2.end(), p.b2.begin(), [](double v) { return static_cast<float>(v); });
        return p;
    }
};

struct BranchState {
    std::vector<double> z1, a, f;
};

inline BranchState forward(const Params& p, std::span<const float> x) {
    BranchState s{std::vector<double>(p.b1), {}, std::vector<double>(p.b2)};
    for (std::size_t i = 0; i < p.in; ++i) {
        const double xi = x[i];
        const double* w = p.w1.data() + i * p.hid;
        for (std::size_t j = 0; j < p.hid; ++j) s.z1[j] += xi * w[j];
    }
    s.a.resize(p.hid);
    for (std::size_t j = 0; j < p.hid; ++j) s.a[j] = std::max(s.z1[j], 0.0);
    for (std::size_t j = 0; j < p.hid; ++j) {
        if (s.a[j] == 0.0) continue;
        const double* w = p.w2.data() + j * p.out;
        for (std::size_t k = 0; k < p.out; ++k) s.f[k] += s.a[j] * w[k];
    }
    return s;
}

inline void backward(const Params& p, std::span<const float> x, const BranchState& s,
                     std::span<const double> grad_f, Params& grad) {
    std::vector<double> grad_z(p.hid, 0.0);
    for (std::size_t j = 0; j < p.hid; ++j) {
        const double* w = p.w2.data() + j * p.out;
        double* gw = grad.w2.data() + j * p.out;
        double ga = 0.0;
        for (std::size_t k = 0; k < p.out; ++k) {
            gw[k] += s.a[j] * grad_f[k];
            ga += w[k] * grad_f[k];
        }
        grad_z[j] = s.z1[j] > 0.0 ? ga : 0.0;
    }
    for (std::size_t k = 0; k < p.out; ++k) grad.b2[k] += grad_f[k];
    for (std::size_t j = 0; j < p.hid; ++j) grad.b1[j] += grad_z[j];
    for (std::size_t i = 0; i < p.in; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        double* gw = grad.w1.data() + i * p.hid;
        for (std::size_t j = 0; j < p.hid; ++j) gw[j] += xi * grad_z[j];
    }
}

// Mean Smooth L1 loss of a batch; accumulates the mean gradient into `grad`
// when non-null. Both branches run through the same parameter set.
inline double batch_loss(const Params& p, std::span<const TrainingPair> batch, Params* grad) {
    if (batch.empty()) return 0.0;
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    std::vector<double> gf(p.out);
    for (const auto& pair : batch) {
        if (pair.x1.size() != p.in || pair.x2.size() != p.in) throw ShapeError("training pair width mismatch");
        const BranchState s1 = forward(p, pair.x1), s2 = forward(p, pair.x2);
        double ss = 0.0;
        for (std::size_t k = 0; k < p.out; ++k) {
            const double d = s1.f[k] - s2.f[k];
            ss += d * d;
        }
        const double y_hat = std::sqrt(ss);
        total += smooth_l1(y_hat, pair.label);
        if (!grad) continue;
        // At y_hat == 0 the distance has no gradient; use the zero subgradient.
        if (y_hat == 0.0) continue;
        const double scale = smooth_l1_grad(y_hat, pair.label) * inv_n / y_hat;
        for (std::size_t k = 0; k < p.out; ++k) gf[k] = scale * (s1.f[k] - s2.f[k]);
        backward(p, pair.x1, s1, gf, *grad);
        for (double& g : gf) g = -g;
        backward(p, pair.x2, s2, gf, *grad);
    }
    return total * inv_n;
}

}  // namespace training

struct TrainResult {
    FeatureProjector projector;
    std::vector<double> epoch_losses;  // mean loss over the epoch's batches, pre-update
    double final_loss = 0.0;           // mean loss over all pairs with the final weights
};

// Mini-batch SGD on the mean Smooth L1 loss with seeded shuffling.
inline TrainResult train(std::span<const TrainingPair> pairs, const TrainConfig& cfg) {
    if (pairs.empty()) throw TrainingError("train: no training pairs");
    if (!(cfg.learning_rate > 0.0)) throw TrainingError("train: learning rate must be > 0");
    if (cfg.batch_size == 0) throw TrainingError("train: batch size must be >= 1");
    const std::size_t in = pairs.front().x1.size();
    training::Params params = training::Params::random(in, cfg.hidden, cfg.feature_dim, cfg.seed);
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<TrainingPair> batch;
    TrainResult result;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            batch.clear();
            for (std::size_t i = start; i < end; ++i) batch.push_back(pairs[order[i]]);
            training::Params grad = training::Params::zeros(params.in, params.hid, params.out);
            const double loss = training::batch_loss(params, batch, &grad);
            if (!std::isfinite(loss))
                throw TrainingError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch starting " +
                                    std::to_string(start));
            epoch_loss += loss * static_cast<double>(end - start);
            auto step = [&](std::vector<double>& w, const std::vector<double>& g) {
                for (std::size_t i = 0; i < w.size(); ++i) w[i] -= cfg.learning_rate * g[i];
            };
            step(params.w1, grad.w1);
            step(params.b1, grad.b1);
            step(params.w2, grad.w2);
            step(params.b2, grad.b2);
        }
        result.epoch_losses.push_back(epoch_loss / static_cast<double>(pairs.size()));
    }
    result.final_loss = training::batch_loss(params, pairs, nullptr);
    if (!std::isfinite(result.final_loss)) throw TrainingError("train: non-finite final loss");
    result.projector = params.to_projector();
    return result;
}

}  // namespace attncache
