#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "attncache/projector.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace attncache;
using testing_support::TempDir;
using oracles::brute_label;

namespace {

FeatureProjector random_projector(std::size_t in, std::size_t hid, std::size_t out, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> n(0.0f, 0.3f);
    auto p = FeatureProjector::zeros(in, hid, out);
    for (float& v : p.w1.data()) v = n(rng);
    for (float& v : p.b1) v = n(rng);
    for (float& v : p.w2.data()) v = n(rng);
    for (float& v : p.b2) v = n(rng);
    return p;
}

std::vector<float> random_vec(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<float> d;
    std::vector<float> v(n);
    for (float& x : v) x = d(rng);
    return v;
}

}  // namespace

TEST(Pool, SingleRowPlusLengthChannel) {
    const InputEmbedding h{Tensor2D{{1.5f, -2.0f, 0.25f}}};
    const auto p = pool(h, 8);
    EXPECT_EQ(p, (std::vector<float>{1.5f, -2.0f, 0.25f, 0.125f}));
}

TEST(Pool, RowPermutationInvariant) {
    std::mt19937_64 rng(1);
    Tensor2D a(6, 10);
    for (float& v : a.data()) v = std::normal_distribution<float>()(rng);
    Tensor2D b(6, 10);
    const std::size_t perm[] = {3, 0, 5, 1, 4, 2};
    for (std::size_t i = 0; i < 6; ++i)
        std::copy(a.row(perm[i]).begin(), a.row(perm[i]).end(), b.row(i).begin());
    const auto pa = pool(InputEmbedding{a}, 32), pb = pool(InputEmbedding{b}, 32);
    for (std::size_t j = 0; j < pa.size(); ++j) EXPECT_NEAR(pa[j], pb[j], 1e-6);
}

TEST(Pool, MatchesScalarMean) {
    std::mt19937_64 rng(2);
    const std::size_t d = 128;
    Tensor2D x(8, d);
    for (float& v : x.data()) v = std::normal_distribution<float>()(rng);
    const auto p = pool(InputEmbedding{x}, 128);
    ASSERT_EQ(p.size(), d + 1);
    for (std::size_t j = 0; j < d; ++j) {
        double m = 0;
        for (std::size_t i = 0; i < 8; ++i) m += x(i, j);
        EXPECT_NEAR(p[j], m / 8, 1e-6);
    }
    EXPECT_FLOAT_EQ(p[d], 8.0f / 128.0f);
}

TEST(Project, ZeroWeightsGiveBias) {
    auto p = FeatureProjector::zeros(5, 7, kFeatureDim);
    for (std::size_t k = 0; k < kFeatureDim; ++k) p.b2[k] = static_cast<float>(k) * 0.5f;
    const auto f = project(std::vector<float>{1, 2, 3, 4, 5}, p);
    ASSERT_EQ(f.size(), 128u);
    EXPECT_EQ(f, p.b2);
}

TEST(Project, MatchesScalarLoop) {
    std::mt19937_64 rng(3);
    const auto p = random_projector(129, 256, 128, 4);
    const auto x = random_vec(129, rng);
    const auto f = project(x, p);
    for (std::size_t k = 0; k < 128; ++k) {
        double out = p.b2[k];
        for (std::size_t j = 0; j < 256; ++j) {
            double z = p.b1[j];
            for (std::size_t i = 0; i < 129; ++i) z += double(x[i]) * p.w1(i, j);
            out += std::max(z, 0.0) * p.w2(j, k);
        }
        EXPECT_NEAR(f[k], out, 1e-5);
    }
}

TEST(Project, ShapeMismatchThrows) {
    const auto p = FeatureProjector::zeros(4, 8, 16);
    EXPECT_THROW(project(std::vector<float>(5), p), ShapeError);
}

TEST(SiameseDistance, IdentitySymmetryAndOracle) {
    std::mt19937_64 rng(5);
    const auto p = random_projector(17, 32, 128, 6);
    const auto x1 = random_vec(17, rng), x2 = random_vec(17, rng);
    EXPECT_EQ(siamese_distance(x1, x1, p), 0.0);
    EXPECT_EQ(siamese_distance(x1, x2, p), siamese_distance(x2, x1, p));
    const auto f1 = project(x1, p), f2 = project(x2, p);
    double ss = 0;
    for (std::size_t k = 0; k < 128; ++k) ss += (double(f1[k]) - f2[k]) * (double(f1[k]) - f2[k]);
    EXPECT_NEAR(siamese_distance(x1, x2, p), std::sqrt(ss), 1e-5);
}

TEST(Similarity, Transform) {
    EXPECT_EQ(similarity(0.0), 1.0);
    EXPECT_EQ(similarity(1.0), 0.5);
    EXPECT_NEAR(1.0 / 0.99 - 1.0, 0.0101, 1e-4);
    EXPECT_GE(similarity(1.0 / 0.99 - 1.0), 0.99 - 1e-15);
    EXPECT_LT(similarity(0.0102), 0.99);
    EXPECT_THROW(similarity(-1e-9), InputError);
    double prev = 2.0;
    for (double d = 0; d < 50; d += 0.37) {
        const double s = similarity(d);
        EXPECT_LT(s, prev);
        EXPECT_GT(s, 0.0);
        prev = s;
    }
}

TEST(AttentionLabel, IdenticalMapsSameLengthIsZero) {
    AttentionRecord r(3, 2, 2);
    std::iota(r.maps.begin(), r.maps.end(), 0.0f);
    EXPECT_EQ(attention_label(r, r, 0.2), 0.0);
}

TEST(AttentionLabel, IdenticalMapsOnlyLengthTermSurvives) {
    AttentionRecord a(10, 1, 2), b(12, 1, 2);
    for (std::size_t h = 0; h < 2; ++h) {
        for (std::size_t i = 0; i < 10; ++i)
            for (std::size_t j = 0; j <= i; ++j) {
                a.maps[h * 100 + i * 10 + j] = 1.0f / float(i + 1);
                b.maps[h * 144 + i * 12 + j] = 1.0f / float(i + 1);
            }
    }
    EXPECT_EQ(attention_label(a, b, 0.2), 2.0);
}

TEST(AttentionLabel, HandBuiltTwoHeadsMatchesBruteForce) {
    const std::vector<std::vector<float>> a{{1, 0, 0.25f, 0.75f}, {1, 0, 0.5f, 0.5f}};
    const std::vector<std::vector<float>> b{{1, 0, 0.5f, 0.5f}, {1, 0, 0.9f, 0.1f}};
    AttentionRecord ra(2, 1, 2), rb(2, 1, 2);
    std::copy(a[0].begin(), a[0].end(), ra.maps.begin());
    std::copy(a[1].begin(), a[1].end(), ra.maps.begin() + 4);
    std::copy(b[0].begin(), b[0].end(), rb.maps.begin());
    std::copy(b[1].begin(), b[1].end(), rb.maps.begin() + 4);
    EXPECT_EQ(attention_label(ra, rb, 0.2), brute_label(a, b, 2, 0.2));
}

TEST(AttentionLabel, RandomRecordsMatchBruteForceAndAreSymmetric) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<float> u(0, 1);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t s = 1 + trial % 9, heads = 1 + trial % 4;
        AttentionRecord ra(s, 1, heads), rb(s, 1, heads);
        for (float& v : ra.maps) v = u(rng);
        for (float& v : rb.maps) v = u(rng);
        std::vector<std::vector<float>> a(heads), b(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            a[h].assign(ra.maps.begin() + h * s * s, ra.maps.begin() + (h + 1) * s * s);
            b[h].assign(rb.maps.begin() + h * s * s, rb.maps.begin() + (h + 1) * s * s);
        }
        const double y = attention_label(ra, rb, 0.2);
        EXPECT_EQ(y, brute_label(a, b, s, 0.2));
        EXPECT_EQ(y, attention_label(rb, ra, 0.2));
        EXPECT_GE(y, 0.0);
    }
}

TEST(AttentionLabel, UnequalLengthsUseTopLeftBlock) {
    AttentionRecord a(2, 1, 1), b(3, 1, 1);
    a.maps = {1, 0, 0.5f, 0.5f};
    b.maps = {1, 0, 0, 0.25f, 0.75f, 0, 0.2f, 0.3f, 0.5f};
    const double block = 0.5 * std::sqrt(0.25 * 0.25 * 2);
    EXPECT_NEAR(attention_label(a, b, 1.0), block + 1.0, 1e-12);
    EXPECT_NEAR(attention_label(a, b, 1.0, {0, false}), block, 1e-12);
}

TEST(AttentionLabel, LayerSelection) {
    AttentionRecord a(2, 2, 1), b(2, 2, 1);
    a.maps = {1, 0, 0.5f, 0.5f, 1, 0, 0.5f, 0.5f};
    b.maps = {1, 0, 0.5f, 0.5f, 1, 0, 0.0f, 1.0f};
    EXPECT_EQ(attention_label(a, b, 1.0, {0, true}), 0.0);
    EXPECT_GT(attention_label(a, b, 1.0, {1, true}), 0.0);
    EXPECT_THROW(attention_label(a, b, 1.0, {2, true}), ShapeError);
}

TEST(SmoothL1, BranchValues) {
    EXPECT_EQ(smooth_l1(3.0, 3.0), 0.0);
    EXPECT_EQ(smooth_l1(1.5, 1.0), 0.125);
    EXPECT_EQ(smooth_l1(0.5, 1.0), 0.125);
    EXPECT_EQ(smooth_l1(3.0, 1.0), 1.5);
    EXPECT_EQ(smooth_l1(-1.0, 1.0), 1.5);
}

TEST(SmoothL1, ContinuousWithContinuousDerivativeAtOne) {
    const double eps = 1e-9;
    EXPECT_NEAR(smooth_l1(1.0 - eps, 0.0), 0.5, 1e-8);
    EXPECT_NEAR(smooth_l1(1.0 + eps, 0.0), 0.5, 1e-8);
    EXPECT_NEAR(smooth_l1_grad(1.0 - eps, 0.0), 1.0, 1e-8);
    EXPECT_EQ(smooth_l1_grad(1.0 + eps, 0.0), 1.0);
    EXPECT_NEAR(smooth_l1_grad(-1.0 + eps, 0.0), -1.0, 1e-8);
    EXPECT_EQ(smooth_l1_grad(-1.0 - eps, 0.0), -1.0);
}

TEST(Training, GradientsMatchCentralDifferences) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(100 + seed);
        const std::size_t in = 5, hid = 7, out = 4;
        auto p = training::Params::random(in, hid, out, seed);
        std::normal_distribution<double> n(0.0, 0.2);
        for (double& b : p.b1) b = n(rng);
        for (double& b : p.b2) b = n(rng);
        std::uniform_real_distribution<double> lab(0.0, 3.0);
        std::vector<TrainingPair> batch;
        for (int i = 0; i < 3; ++i) batch.push_back({random_vec(in, rng), random_vec(in, rng), lab(rng)});

        auto grad = training::Params::zeros(in, hid, out);
        training::batch_loss(p, batch, &grad);

        std::vector<std::vector<double>*> params, grads;
        p.for_each_tensor([&](std::vector<double>& t) { params.push_back(&t); });
        grad.for_each_tensor([&](std::vector<double>& t) { grads.push_back(&t); });
        const double h = 1e-4;
        for (std::size_t t = 0; t < params.size(); ++t)
            for (std::size_t i = 0; i < params[t]->size(); ++i) {
                double& w = (*params[t])[i];
                const double saved = w;
                w = saved + h;
                const double up = training::batch_loss(p, batch, nullptr);
                w = saved - h;
                const double down = training::batch_loss(p, batch, nullptr);
                w = saved;
                const double numeric = (up - down) / (2 * h);
                const double analytic = (*grads[t])[i];
                const double scale = std::max({std::fabs(numeric), std::fabs(analytic), 1e-6});
                EXPECT_LE(std::fabs(numeric - analytic) / scale, 1e-3)
                    << "seed " << seed << " tensor " << t << " index " << i << " analytic " << analytic
                    << " numeric " << numeric;
            }
    }
}

TEST(Training, IdenticalZeroLabelPairsConverge) {
    std::mt19937_64 rng(8);
    std::vector<TrainingPair> pairs;
    for (int i = 0; i < 16; ++i) {
        auto x = random_vec(9, rng);
        pairs.push_back({x, x, 0.0});
    }
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.hidden = 16;
    cfg.feature_dim = 8;
    const auto r = train(pairs, cfg);
    EXPECT_LT(r.final_loss, 1e-3);
    for (double l : r.epoch_losses) EXPECT_TRUE(std::isfinite(l));
}

TEST(Training, ReducesLossOnLearnableLabels) {
    std::mt19937_64 rng(9);
    std::vector<std::vector<float>> xs;
    for (int i = 0; i < 40; ++i) xs.push_back(random_vec(6, rng));
    std::vector<TrainingPair> pairs;
    for (int i = 0; i < 40; ++i)
        for (int j = i; j < 40; j += 3) pairs.push_back({xs[i], xs[j], 0.5 * l2_distance(xs[i], xs[j])});
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.hidden = 32;
    cfg.feature_dim = 16;
    cfg.seed = 3;
    const auto r = train(pairs, cfg);
    EXPECT_LT(r.final_loss, r.epoch_losses.front());
    EXPECT_EQ(r.projector.feature_dim(), 16u);
}

TEST(Training, SharedWeightsAcrossBranches) {
    // One gradient step moves a single parameter set; both inputs are then
    // projected with it.
    std::mt19937_64 rng(10);
    const std::vector<TrainingPair> pairs{{random_vec(4, rng), random_vec(4, rng), 1.0}};
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.hidden = 8;
    cfg.feature_dim = 4;
    const auto r = train(pairs, cfg);
    EXPECT_DOUBLE_EQ(siamese_distance(pairs[0].x1, pairs[0].x2, r.projector),
                     l2_distance(project(pairs[0].x1, r.projector), project(pairs[0].x2, r.projector)));
}

TEST(Training, NonFiniteLossIsReported) {
    std::vector<TrainingPair> pairs{{{1.0f, std::numeric_limits<float>::infinity()}, {0.0f, 0.0f}, 1.0}};
    TrainConfig cfg;
    cfg.hidden = 4;
    cfg.feature_dim = 2;
    EXPECT_THROW(train(pairs, cfg), TrainingError);
    EXPECT_THROW(train({}, cfg), TrainingError);
}

TEST(Projector, SaveLoadRoundTrip) {
    TempDir dir;
    const auto p = random_projector(129, 256, 128, 11);
    p.save(dir / "p.acfp");
    EXPECT_EQ(FeatureProjector::load(dir / "p.acfp"), p);
    std::filesystem::resize_file(dir / "p.acfp", 30);
    EXPECT_THROW(FeatureProjector::load(dir / "p.acfp"), FormatError);
}
