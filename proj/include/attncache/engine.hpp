#pragma once

// Orchestration: building the feature-vector and attention-map databases,
// the retrieval step that decides whether to reuse maps, cache-gated
// inference, and the layer-sharing baselines it is compared against.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "attncache/amstore.hpp"
#include "attncache/errors.hpp"
#include "attncache/model.hpp"
#include "attncache/probe.hpp"
#include "attncache/projector.hpp"
#include "attncache/vecindex.hpp"

namespace attncache {

enum class Mode { AttnCache, AttnCacheF, LazyFormer, San, Baseline };

inline constexpr std::string_view mode_name(Mode m) {
    switch (m) {
        case Mode::AttnCache: return "attncache";
        case Mode::AttnCacheF: return "attncache_f";
        case Mode::LazyFormer: return "lazyformer";
        case Mode::San: return "san";
        case Mode::Baseline: return "baseline";
    }
    return "?";
}

inline Mode parse_mode(std::string_view s) {
    for (Mode m : {Mode::AttnCache, Mode::AttnCacheF, Mode::LazyFormer, Mode::San, Mode::Baseline})
        if (mode_name(m) == s) return m;
    throw InputError("unknown mode \"" + std::string(s) + "\"");
}

inline constexpr double kDefaultThreshold = 0.99;

struct EngineConfig {
    double threshold = kDefaultThreshold;
    double alpha = kDefaultAlpha;
    std::size_t feature_dim = kFeatureDim;
    std::size_t top_k = 1;
    Mode mode = Mode::AttnCache;
    std::size_t lazyformer_subblock = 2;
    double san_js_threshold = 0.05;
    std::size_t san_calibration_size = 32;
    IndexMode index_mode = IndexMode::Graph;
    GraphParams graph{};
    TrainConfig train{};
    std::uint64_t seed = 0;
    bool build_per_layer = false;  // per-layer databases for attncache_f
    bool build_san_plan = false;

    void validate() const {
        if (!(threshold > 0.0 && threshold <= 1.0)) throw InputError("EngineConfig: threshold must be in (0, 1]");
        if (!(alpha >= 0.0)) throw InputError("EngineConfig: alpha must be >= 0");
        if (top_k < 1) throw InputError("EngineConfig: top_k must be >= 1");
        if (lazyformer_subblock < 1) throw InputError("EngineConfig: lazyformer subblock must be >= 1");
        if (!(san_js_threshold >= 0.0)) throw InputError("EngineConfig: SAN threshold must be >= 0");
    }
};

// Accumulated per worker and merged; M <= N always.
struct HitStats {
    std::size_t n = 0;  // sentences processed
    std::size_t m = 0;  // successful reuses

    void record(bool hit) {
        ++n;
        if (hit) ++m;
    }
    double hit_rate() const { return n ? static_cast<double>(m) / static_cast<double>(n) : 0.0; }
    HitStats& merge(const HitStats& o) {
        n += o.n;
        m += o.m;
        return *this;
    }
};

// ---------------------------------------------------------------------------
// Jensen-Shannon divergence

namespace detail {

inline double kl_term(double p, double m) { return p > 0.0 ? p * std::log(p / m) : 0.0; }

inline double js_unchecked(std::span<const double> p, std::span<const double> q) {
    double js = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        js += 0.5 * kl_term(p[i], m) + 0.5 * kl_term(q[i], m);
    }
    return std::max(0.0, js);
}

}  // namespace detail

// 0.5 KL(p||m) + 0.5 KL(q||m), m = (p + q) / 2, natural log.
inline double js_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size() || p.empty()) throw InputError("js_divergence: length mismatch or empty");
    auto check = [](std::span<const double> v) {
        double s = 0.0;
        for (double x : v) {
            if (!(x >= 0.0)) throw InputError("js_divergence: negative or NaN probability");
            s += x;
        }
        if (std::fabs(s - 1.0) > 1e-6) throw InputError("js_divergence: distribution does not sum to 1");
    };
    check(p);
    check(q);
    return detail::js_unchecked(p, q);
}

// ---------------------------------------------------------------------------
// Layer-sharing baselines

// Within each run of `subblock` consecutive layers only the first computes
// its maps; the others reuse them.
inline std::vector<float> infer_lazyformer(std::span<const TokenId> sentence, const ModelWeights& w,
                                           std::size_t subblock, Probe* probe = nullptr) {
    if (subblock < 1) throw InputError("infer_lazyformer: subblock must be >= 1");
    Tensor2D h = encode(sentence, w).matrix;
    std::vector<float> anchor;
    for (std::size_t l = 0; l < w.config.num_layers; ++l) {
        if (l % subblock == 0)
            decoder_layer(w.layers[l], w.config, h, {}, &anchor, probe);
        else
            decoder_layer(w.layers[l], w.config, h, anchor, nullptr, probe);
    }
    return sentence_embedding(h);
}

// Layer partition for the SAN baseline, fixed by a calibration pass.
struct SanPlan {
    std::vector<double> mean_js;        // [l] = mean JS between layer l and l-1 maps; 0 for l = 0
    std::vector<bool> reuse_previous;  // layer l reuses the most recently computed maps
    double js_threshold = 0.0;
};

// Mean over sentences, heads and rows of JS(row of layer l, row of layer l-1).
inline std::vector<double> layer_js_profile(std::span<const Sentence> calibration, const ModelWeights& w) {
    const auto& cfg = w.config;
    std::vector<double> sum(cfg.num_layers, 0.0);
    std::size_t count = 0;
    std::vector<double> p, q;
    for (const auto& s : calibration) {
        const auto cap = forward_capture(encode(s, w), w);
        const std::size_t L = cap.record.seq_len;
        for (std::size_t l = 1; l < cfg.num_layers; ++l) {
            double layer_sum = 0.0;
            for (std::size_t hd = 0; hd < cfg.num_heads; ++hd) {
                const MatrixView a = cap.record.map(l, hd), b = cap.record.map(l - 1, hd);
                for (std::size_t i = 0; i < L; ++i) {
                    p.assign(a.row(i).begin(), a.row(i).end());
                    q.assign(b.row(i).begin(), b.row(i).end());
                    const double sp = std::accumulate(p.begin(), p.end(), 0.0);
                    const double sq = std::accumulate(q.begin(), q.end(), 0.0);
                    for (double& x : p) x /= sp;
                    for (double& x : q) x /= sq;
                    layer_sum += detail::js_unchecked(p, q);
                }
            }
            sum[l] += layer_sum / static_cast<double>(cfg.num_heads * L);
        }
        ++count;
    }
    if (count)
        for (double& v : sum) v /= static_cast<double>(count);
    return sum;
}

inline SanPlan calibrate_san(std::span<const Sentence> calibration, const ModelWeights& w, double js_threshold) {
    if (!(js_threshold >= 0.0)) throw InputError("calibrate_san: threshold must be >= 0");
    SanPlan plan;
    plan.js_threshold = js_threshold;
    plan.mean_js = layer_js_profile(calibration, w);
    plan.reuse_previous.assign(w.config.num_layers, false);
    for (std::size_t l = 1; l < w.config.num_layers; ++l)
        plan.reuse_previous[l] = !calibration.empty() && plan.mean_js[l] < js_threshold;
    return plan;
}

inline std::vector<float> infer_san(std::span<const TokenId> sentence, const ModelWeights& w, const SanPlan& plan,
                                    Probe* probe = nullptr) {
    if (plan.reuse_previous.size() != w.config.num_layers) throw InputError("infer_san: plan does not match model");
    Tensor2D h = encode(sentence, w).matrix;
    std::vector<float> last;
    for (std::size_t l = 0; l < w.config.num_layers; ++l) {
        if (plan.reuse_previous[l] && l > 0)
            decoder_layer(w.layers[l], w.config, h, last, nullptr, probe);
        else
            decoder_layer(w.layers[l], w.config, h, {}, &last, probe);
    }
    return sentence_embedding(h);
}

// ---------------------------------------------------------------------------
// Databases

struct LayerDatabase {
    FeatureProjector projector;
    VectorIndex index{kFeatureDim};
};

struct Databases {
    FeatureProjector projector;
    VectorIndex index{kFeatureDim};
    AttnStore store;
    std::filesystem::path store_path;
    std::vector<LayerDatabase> per_layer;  // attncache_f only
    std::optional<SanPlan> san_plan;
    double train_loss = 0.0;

    std::size_t size() const { return index.size(); }

    static constexpr const char* kProjectorFile = "projector.acfp";
    static constexpr const char* kIndexFile = "index.acvi";
    static constexpr const char* kStoreFile = "maps.acam";

    static std::string layer_file(std::size_t l, const char* ext) {
        return "layer" + std::to_string(l) + ext;
    }

    // Writes projector and index files next to the store (which already lives in `dir`).
    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        projector.save(dir / kProjectorFile);
        index.save(dir / kIndexFile);
        for (std::size_t l = 0; l < per_layer.size(); ++l) {
            per_layer[l].projector.save(dir / layer_file(l, ".acfp"));
            per_layer[l].index.save(dir / layer_file(l, ".acvi"));
        }
    }

    static Databases load(const std::filesystem::path& dir, GraphParams graph = {}) {
        Databases db;
        db.projector = FeatureProjector::load(dir / kProjectorFile);
        db.index = VectorIndex::load(dir / kIndexFile, graph);
        db.store_path = dir / kStoreFile;
        db.store = AttnStore::open(db.store_path);
        for (std::size_t l = 0; std::filesystem::exists(dir / layer_file(l, ".acfp")); ++l)
            db.per_layer.push_back(
                {FeatureProjector::load(dir / layer_file(l, ".acfp")), VectorIndex::load(dir / layer_file(l, ".acvi"), graph)});
        return db;
    }
};

namespace detail {

inline std::vector<MatrixView> layer_maps(const MappedAttnView& v, std::size_t layer) {
    std::vector<MatrixView> out;
    for (std::size_t h = 0; h < v.num_heads(); ++h) out.push_back(v.map(layer, h));
    return out;
}

// Self pairs plus 4 * N random pairs, labelled from the stored maps of one layer.
inline std::vector<TrainingPair> make_pairs(const std::vector<std::vector<float>>& pooled, const AttnStore& store,
                                            std::size_t layer, double alpha, bool include_length,
                                            std::uint64_t seed) {
    const std::size_t n = pooled.size();
    std::vector<TrainingPair> pairs;
    pairs.reserve(5 * n);
    for (std::size_t i = 0; i < n; ++i) pairs.push_back({pooled[i], pooled[i], 0.0});
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t k = 0; k < 4 * n; ++k) {
        const std::size_t i = pick(rng), j = pick(rng);
        const auto vi = store.get_maps(i, store.num_layers()), vj = store.get_maps(j, store.num_layers());
        const double y = attention_label(layer_maps(vi, layer), vi.seq_len(), layer_maps(vj, layer), vj.seq_len(),
                                         alpha, include_length);
        pairs.push_back({pooled[i], pooled[j], y});
    }
    return pairs;
}

}  // namespace detail

// Capture every sentence (store maps under id = corpus position), train the
// projector on attention-map labels, and index the projected features.
inline Databases build_databases(std::span<const Sentence> corpus, const ModelWeights& w, const EngineConfig& cfg,
                                 const std::filesystem::path& store_path) {
    cfg.validate();
    if (corpus.empty()) throw InputError("build_databases: empty corpus");
    const auto& mc = w.config;
    std::vector<std::vector<float>> pooled;
    std::vector<std::vector<std::vector<float>>> layer_pooled(cfg.build_per_layer ? mc.num_layers : 0);
    pooled.reserve(corpus.size());
    {
        auto writer = AttnStoreWriter::create(store_path, mc.num_layers, mc.num_heads);
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            const InputEmbedding h = encode(corpus[i], w);
            pooled.push_back(pool(h, mc.max_seq_len));
            LayerObserver observer;
            if (cfg.build_per_layer)
                observer = [&](std::size_t l, const Tensor2D& x) {
                    layer_pooled[l].push_back(pool(InputEmbedding{x}, mc.max_seq_len));
                };
            const auto cap = forward_capture(h, w, nullptr, observer);
            writer.put_record(i, cap.record);
        }
        writer.finish();
    }

    Databases db;
    db.store_path = store_path;
    db.store = AttnStore::open(store_path);

    TrainConfig tc = cfg.train;
    tc.alpha = cfg.alpha;
    tc.feature_dim = cfg.feature_dim;
    tc.seed = cfg.seed;
    auto fit = [&](const std::vector<std::vector<float>>& features, std::size_t layer, bool include_length,
                   std::uint64_t seed, double* loss) {
        const auto pairs = detail::make_pairs(features, db.store, layer, cfg.alpha, include_length, seed);
        TrainConfig t = tc;
        t.seed = seed;
        auto result = train(pairs, t);
        if (loss) *loss = result.final_loss;
        LayerDatabase out{std::move(result.projector), VectorIndex(cfg.feature_dim, cfg.index_mode, cfg.graph)};
        for (std::size_t i = 0; i < features.size(); ++i) out.index.add(i, project(features[i], out.projector));
        return out;
    };

    auto main_db = fit(pooled, 0, true, cfg.seed, &db.train_loss);
    db.projector = std::move(main_db.projector);
    db.index = std::move(main_db.index);
    for (std::size_t l = 0; l < layer_pooled.size(); ++l)
        db.per_layer.push_back(fit(layer_pooled[l], l, false, cfg.seed + 1 + l, nullptr));
    if (cfg.build_san_plan) {
        const std::size_t k = std::min(cfg.san_calibration_size, corpus.size());
        db.san_plan = calibrate_san(corpus.first(k), w, cfg.san_js_threshold);
    }
    return db;
}

// ---------------------------------------------------------------------------
// Retrieval and inference

struct SearchOutcome {
    std::optional<AttnCache> cache;  // present only on a usable hit
    InputEmbedding embedding;
    bool searched = false;  // false when the database is empty
    bool sim_hit = false;   // similarity cleared the threshold
    bool length_ok = false; // retrieved record length equals the input length
    std::uint64_t source_id = 0;
    double distance = 0.0;
    double sim = 0.0;
};

// Encode, project, take the top-1 neighbour, and fetch all layers' maps if
// the neighbour is similar enough and has exactly the input's length.
inline SearchOutcome search_engine(std::span<const TokenId> sentence, double threshold, const Databases& db,
                                   const ModelWeights& w, Probe* probe = nullptr) {
    SearchOutcome out;
    out.embedding = encode(sentence, w);
    if (db.index.empty()) return out;
    std::vector<float> feature;
    {
        ScopedStage t(probe, Stage::Embedding);
        feature = project(pool(out.embedding, w.config.max_seq_len), db.projector);
    }
    std::vector<SearchHit> hits;
    {
        ScopedStage t(probe, Stage::VectorSearch);
        hits = db.index.search(feature, 1);
    }
    out.searched = true;
    out.source_id = hits.front().id;
    out.distance = hits.front().distance;
    out.sim = hits.front().sim;
    out.sim_hit = out.sim >= threshold;
    if (!out.sim_hit) return out;
    ScopedStage t(probe, Stage::MapFetch);
    const auto view = db.store.get_maps(out.source_id, w.config.num_layers);
    out.length_ok = view.seq_len() == out.embedding.seq_len();
    if (out.length_ok) out.cache.emplace(view.to_cache());
    return out;
}

struct InferResult {
    std::vector<float> embedding;
    bool hit = false;      // maps were reused (any layer, for attncache_f)
    bool sim_hit = false;  // similarity alone cleared the threshold
    std::uint64_t source_id = 0;
    double sim = 0.0;
    std::vector<bool> layer_hits;  // attncache_f
    Probe probe;
    double total_seconds = 0.0;
};

// Per-layer retrieval: at each layer, project the layer input, search that
// layer's index, and reuse that layer's stored maps on a length-matched hit.
inline InferResult infer_attncache_f(std::span<const TokenId> sentence, const EngineConfig& cfg, const Databases& db,
                                     const ModelWeights& w) {
    InferResult r;
    const auto start = std::chrono::steady_clock::now();
    Tensor2D h = encode(sentence, w).matrix;
    const std::size_t L = h.rows();
    r.layer_hits.assign(w.config.num_layers, false);
    for (std::size_t l = 0; l < w.config.num_layers; ++l) {
        std::optional<MappedAttnView> view;
        if (l < db.per_layer.size() && !db.per_layer[l].index.empty()) {
            const auto& ldb = db.per_layer[l];
            std::vector<float> feature;
            {
                ScopedStage t(&r.probe, Stage::Embedding);
                feature = project(pool(InputEmbedding{h}, w.config.max_seq_len), ldb.projector);
            }
            std::vector<SearchHit> hits;
            {
                ScopedStage t(&r.probe, Stage::VectorSearch);
                hits = ldb.index.search(feature, 1);
            }
            if (hits.front().sim >= cfg.threshold) {
                r.sim_hit = true;
                ScopedStage t(&r.probe, Stage::MapFetch);
                auto v = db.store.get_maps(hits.front().id, w.config.num_layers);
                if (v.seq_len() == L) view.emplace(std::move(v));
            }
        }
        if (view) {
            decoder_layer(w.layers[l], w.config, h, view->layer(l), nullptr, &r.probe);
            r.layer_hits[l] = true;
            r.hit = true;
        } else {
            decoder_layer(w.layers[l], w.config, h, {}, nullptr, &r.probe);
        }
    }
    r.embedding = sentence_embedding(h);
    r.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

inline InferResult infer(std::span<const TokenId> sentence, const EngineConfig& cfg, const Databases* db,
                         const ModelWeights& w) {
    InferResult r;
    const auto start = std::chrono::steady_clock::now();
    switch (cfg.mode) {
        case Mode::Baseline: {
            const InputEmbedding h = encode(sentence, w);
            r.embedding = sentence_embedding(forward_with_cache(nullptr, h, w, &r.probe));
            break;
        }
        case Mode::AttnCache: {
            if (!db) throw InputError("infer: attncache mode needs databases");
            auto found = search_engine(sentence, cfg.threshold, *db, w, &r.probe);
            r.sim_hit = found.sim_hit;
            r.sim = found.sim;
            r.source_id = found.source_id;
            r.hit = found.cache.has_value();
            const AttnCache* cache = found.cache ? &*found.cache : nullptr;
            if (cache && cache->seq_len() != found.embedding.seq_len())
                throw CacheError("infer: length gate violated");
            r.embedding = sentence_embedding(forward_with_cache(cache, found.embedding, w, &r.probe));
            break;
        }
        case Mode::AttnCacheF: {
            if (!db) throw InputError("infer: attncache_f mode needs databases");
            return infer_attncache_f(sentence, cfg, *db, w);
        }
        case Mode::LazyFormer:
            r.embedding = infer_lazyformer(sentence, w, cfg.lazyformer_subblock, &r.probe);
            r.hit = cfg.lazyformer_subblock > 1 && w.config.num_layers > 1;
            break;
        case Mode::San: {
            if (!db || !db->san_plan) throw InputError("infer: san mode needs a calibrated plan");
            r.embedding = infer_san(sentence, w, *db->san_plan, &r.probe);
            for (bool b : db->san_plan->reuse_previous) r.hit = r.hit || b;
            break;
        }
    }
    r.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

}  // namespace attncache
