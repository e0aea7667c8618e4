#pragma once

// Prefill-only decoder transformer: pre-norm blocks, rotary positions,
// causal multi-head attention, SiLU feed-forward. Provides a capture pass
// that records every post-softmax attention map and a cache-reusing pass
// that substitutes stored maps and never computes Q, K, rotary or softmax.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "attncache/binio.hpp"
#include "attncache/errors.hpp"
#include "attncache/probe.hpp"
#include "attncache/tensor.hpp"

namespace attncache {

using TokenId = std::uint32_t;
using Sentence = std::vector<TokenId>;

struct ModelConfig {
    std::uint32_t num_layers = 4;
    std::uint32_t num_heads = 4;
    std::uint32_t hidden_dim = 128;
    std::uint32_t head_dim = 32;
    std::uint32_t ffn_dim = 512;
    std::uint32_t vocab_size = 256;
    std::uint32_t max_seq_len = 128;

    void validate() const {
        if (!num_layers || !num_heads || !hidden_dim || !head_dim || !ffn_dim || !vocab_size || !max_seq_len)
            throw InputError("ModelConfig: all counts must be >= 1");
        if (hidden_dim != num_heads * head_dim)
            throw InputError("ModelConfig: hidden_dim must equal num_heads * head_dim");
        if (head_dim % 2 != 0) throw InputError("ModelConfig: head_dim must be even for rotary embedding");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
    Tensor2D wq, wk, wv, wo;  // hidden x hidden
    std::vector<float> attn_norm;
    std::vector<float> ffn_norm;
    Tensor2D w_up;    // hidden x ffn
    Tensor2D w_down;  // ffn x hidden

    friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

inline constexpr std::string_view kWeightMagic = "ACWT";
inline constexpr std::uint32_t kWeightVersion = 1;

struct ModelWeights {
    ModelConfig config;
    Tensor2D embedding;  // vocab x hidden
    std::vector<float> input_norm;
    std::vector<LayerWeights> layers;

    friend bool operator==(const ModelWeights&, const ModelWeights&) = default;

    // Seeded Gaussian init with standard deviation 1/sqrt(fan_in); norm gains are 1.
    static ModelWeights random(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        std::mt19937_64 rng(seed);
        auto fill = [&rng](std::size_t rows, std::size_t cols, double stddev) {
            std::normal_distribution<float> dist(0.0f, static_cast<float>(stddev));
            Tensor2D t(rows, cols);
            for (float& x : t.data()) x = dist(rng);
            return t;
        };
        const std::size_t d = cfg.hidden_dim;
        const double s = 1.0 / std::sqrt(static_cast<double>(d));
        ModelWeights w;
        w.config = cfg;
        w.embedding = fill(cfg.vocab_size, d, 1.0);
        w.input_norm.assign(d, 1.0f);
        w.layers.resize(cfg.num_layers);
        for (auto& l : w.layers) {
            l.wq = fill(d, d, s);
            l.wk = fill(d, d, s);
            l.wv = fill(d, d, s);
            l.wo = fill(d, d, s);
            l.attn_norm.assign(d, 1.0f);
            l.ffn_norm.assign(d, 1.0f);
            l.w_up = fill(d, cfg.ffn_dim, s);
            l.w_down = fill(cfg.ffn_dim, d, 1.0 / std::sqrt(static_cast<double>(cfg.ffn_dim)));
        }
        return w;
    }

    // ACWT file: magic, version, the seven ModelConfig counts (u32), then
    // embedding, input_norm and per layer wq wk wv wo attn_norm ffn_norm
    // w_up w_down, all as little-endian f32.
    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot open " + path.string() + " for writing");
        binio::write_magic(os, kWeightMagic);
        binio::write_u32(os, kWeightVersion);
        for (std::uint32_t v : {config.num_layers, config.num_heads, config.hidden_dim, config.head_dim,
                                config.ffn_dim, config.vocab_size, config.max_seq_len})
            binio::write_u32(os, v);
        binio::write_floats(os, embedding.data());
        binio::write_floats(os, input_norm);
        for (const auto& l : layers) {
            for (const Tensor2D* t : {&l.wq, &l.wk, &l.wv, &l.wo}) binio::write_floats(os, t->data());
            binio::write_floats(os, l.attn_norm);
            binio::write_floats(os, l.ffn_norm);
            binio::write_floats(os, l.w_up.data());
            binio::write_floats(os, l.w_down.data());
        }
        if (!os) throw Error("write failed: " + path.string());
    }

    static ModelWeights load(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw FormatError("cannot open weight file " + path.string());
        binio::expect_magic(is, kWeightMagic);
        if (binio::read_u32(is, "version") != kWeightVersion) throw FormatError("unsupported weight file version");
        ModelWeights w;
        auto& c = w.config;
        for (std::uint32_t* f : {&c.num_layers, &c.num_heads, &c.hidden_dim, &c.head_dim, &c.ffn_dim,
                                 &c.vocab_size, &c.max_seq_len})
            *f = binio::read_u32(is, "config");
        try {
            c.validate();
        } catch (const InputError& e) {
            throw FormatError(std::string("weight file: ") + e.what());
        }
        const std::size_t d = c.hidden_dim;
        auto read = [&is](std::size_t rows, std::size_t cols) {
            Tensor2D t(rows, cols);
            binio::read_floats(is, t.data(), "weights");
            return t;
        };
        auto read_vec = [&is](std::size_t n) {
            std::vector<float> v(n);
            binio::read_floats(is, v, "weights");
            return v;
        };
        w.embedding = read(c.vocab_size, d);
        w.input_norm = read_vec(d);
        w.layers.resize(c.num_layers);
        for (auto& l : w.layers) {
            l.wq = read(d, d);
            l.wk = read(d, d);
            l.wv = read(d, d);
            l.wo = read(d, d);
            l.attn_norm = read_vec(d);
            l.ffn_norm = read_vec(d);
            l.w_up = read(d, c.ffn_dim);
            l.w_down = read(c.ffn_dim, d);
        }
        if (is.peek() != std::char_traits<char>::eof()) throw FormatError("weight file has trailing bytes");
        return w;
    }
};

// Byte-level hashing tokenizer: each byte maps to (byte mod vocab_size).
inline Sentence tokenize(std::string_view text, std::uint32_t vocab_size) {
    Sentence out;
    out.reserve(text.size());
    for (unsigned char ch : text) out.push_back(static_cast<TokenId>(ch) % vocab_size);
    return out;
}

struct InputEmbedding {
    Tensor2D matrix;  // seq_len x hidden

    std::size_t seq_len() const { return matrix.rows(); }
};

// Token lookup followed by the input RMS norm. The result is the residual
// stream entering layer 0.
inline InputEmbedding encode(std::span<const TokenId> sentence, const ModelWeights& w) {
    const auto& cfg = w.config;
    if (sentence.empty()) throw InputError("encode: empty sentence");
    if (sentence.size() > cfg.max_seq_len)
        throw InputError("encode: sentence length " + std::to_string(sentence.size()) + " exceeds max_seq_len " +
                         std::to_string(cfg.max_seq_len));
    Tensor2D x(sentence.size(), cfg.hidden_dim);
    for (std::size_t i = 0; i < sentence.size(); ++i) {
        if (sentence[i] >= cfg.vocab_size)
            throw InputError("encode: token id " + std::to_string(sentence[i]) + " out of range");
        const auto src = w.embedding.row(sentence[i]);
        std::copy(src.begin(), src.end(), x.row(i).begin());
    }
    return {rms_norm(x, w.input_norm)};
}

// Post-softmax attention maps of one sentence, [layer][head][L][L].
struct AttentionRecord {
    std::size_t seq_len = 0;
    std::size_t num_layers = 0;
    std::size_t num_heads = 0;
    std::vector<float> maps;

    AttentionRecord() = default;
    AttentionRecord(std::size_t L, std::size_t layers, std::size_t heads)
        : seq_len(L), num_layers(layers), num_heads(heads), maps(layers * heads * L * L, 0.0f) {}

    std::size_t map_floats() const { return seq_len * seq_len; }
    std::size_t layer_floats() const { return num_heads * map_floats(); }

    std::span<const float> layer(std::size_t l) const { return {maps.data() + l * layer_floats(), layer_floats()}; }
    std::span<float> layer(std::size_t l) { return {maps.data() + l * layer_floats(), layer_floats()}; }
    MatrixView map(std::size_t l, std::size_t h) const {
        return {maps.data() + l * layer_floats() + h * map_floats(), seq_len, seq_len};
    }

    friend bool operator==(const AttentionRecord&, const AttentionRecord&) = default;
};

// Retrieved maps for every layer of one input, in one contiguous region.
// The region is either owned (built from a record) or borrowed from a mapped
// store, in which case `keepalive` pins the mapping for the cache lifetime.
class AttnCache {
public:
    AttnCache(std::uint64_t source_id, std::size_t seq_len, std::size_t layers, std::size_t heads,
              std::span<const float> maps, std::shared_ptr<const void> keepalive)
        : source_id_(source_id), seq_len_(seq_len), layers_(layers), heads_(heads), maps_(maps),
          keepalive_(std::move(keepalive)) {
        if (maps_.size() != layers_ * heads_ * seq_len_ * seq_len_)
            throw CacheError("AttnCache: region size does not match layers x heads x L x L");
    }

    static AttnCache from_record(std::uint64_t source_id, const AttentionRecord& rec) {
        auto owned = std::make_shared<const std::vector<float>>(rec.maps);
        std::span<const float> region(owned->data(), owned->size());
        return AttnCache(source_id, rec.seq_len, rec.num_layers, rec.num_heads, region, std::move(owned));
    }

    std::uint64_t source_id() const { return source_id_; }
    std::size_t seq_len() const { return seq_len_; }
    std::size_t num_layers() const { return layers_; }
    std::size_t num_heads() const { return heads_; }
    std::span<const float> region() const { return maps_; }
    std::span<const float> layer(std::size_t l) const {
        const std::size_t n = heads_ * seq_len_ * seq_len_;
        return maps_.subspan(l * n, n);
    }

private:
    std::uint64_t source_id_;
    std::size_t seq_len_, layers_, heads_;
    std::span<const float> maps_;
    std::shared_ptr<const void> keepalive_;
};

namespace detail {

inline std::uint64_t matmul_flops(std::size_t m, std::size_t k, std::size_t n) {
    return 2ull * m * k * n;
}

// [L][heads*dk] -> [heads][L][dk]
inline Tensor3D split_heads(const Tensor2D& x, std::size_t heads, std::size_t dk) {
    Tensor3D t(heads, x.rows(), dk);
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t c = 0; c < dk; ++c) t(h, i, c) = x(i, h * dk + c);
    return t;
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

}  // namespace detail

// One decoder block applied in place to the residual stream `h`.
//   reuse    — heads*L*L maps to use instead of computing them; empty means compute.
//   computed — when maps are computed and this is non-null, receives them.
inline void decoder_layer(const LayerWeights& w, const ModelConfig& cfg, Tensor2D& h,
                          std::span<const float> reuse, std::vector<float>* computed, Probe* probe) {
    const std::size_t L = h.rows(), d = cfg.hidden_dim, heads = cfg.num_heads, dk = cfg.head_dim;
    const std::size_t map_floats = L * L;
    if (!reuse.empty() && reuse.size() != heads * map_floats)
        throw CacheError("decoder_layer: reused maps are not heads x L x L for L=" + std::to_string(L));

    Tensor2D x;
    {
        ScopedStage t(probe, Stage::AttnNorm);
        x = rms_norm(h, w.attn_norm);
    }
    Tensor3D v;
    {
        ScopedStage t(probe, Stage::VProj);
        v = detail::split_heads(matmul(x, w.wv), heads, dk);
        count_flops(probe, Stage::VProj, detail::matmul_flops(L, d, d));
    }

    std::vector<float> local_maps;
    std::span<const float> maps = reuse;
    if (reuse.empty()) {
        Tensor3D q, k;
        {
            ScopedStage t(probe, Stage::QProj);
            q = detail::split_heads(matmul(x, w.wq), heads, dk);
            count_flops(probe, Stage::QProj, detail::matmul_flops(L, d, d));
        }
        {
            ScopedStage t(probe, Stage::KProj);
            k = detail::split_heads(matmul(x, w.wk), heads, dk);
            count_flops(probe, Stage::KProj, detail::matmul_flops(L, d, d));
        }
        {
            ScopedStage t(probe, Stage::Rotary);
            std::vector<std::size_t> positions(L);
            for (std::size_t i = 0; i < L; ++i) positions[i] = i;
            rotary_embed_inplace(q, positions);
            rotary_embed_inplace(k, positions);
            count_flops(probe, Stage::Rotary, 2ull * 3ull * heads * L * dk);
        }
        {
            ScopedStage t(probe, Stage::MapCompute);
            std::vector<float>& out = computed ? *computed : local_maps;
            out.assign(heads * map_floats, 0.0f);
            const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dk)));
            for (std::size_t hd = 0; hd < heads; ++hd) {
                Tensor2D scores = matmul(q.view(hd), transpose(k.view(hd)));
                for (float& s : scores.data()) s *= scale;
                Tensor2D p = softmax_rows(scores, /*causal=*/true);
                std::copy(p.data().begin(), p.data().end(), out.begin() + static_cast<std::ptrdiff_t>(hd * map_floats));
            }
            count_flops(probe, Stage::MapCompute, heads * (detail::matmul_flops(L, dk, L) + 5ull * L * L));
            maps = out;
        }
    }

    Tensor2D merged(L, d);
    {
        ScopedStage t(probe, Stage::MapApply);
        for (std::size_t hd = 0; hd < heads; ++hd) {
            const MatrixView map{maps.data() + hd * map_floats, L, L};
            const Tensor2D o = matmul(map, v.view(hd));
            for (std::size_t i = 0; i < L; ++i)
                std::copy(o.row(i).begin(), o.row(i).end(), merged.row(i).begin() + static_cast<std::ptrdiff_t>(hd * dk));
        }
        count_flops(probe, Stage::MapApply, heads * detail::matmul_flops(L, L, dk));
    }
    {
        ScopedStage t(probe, Stage::OutProj);
        const Tensor2D attn = matmul(merged, w.wo);
        for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += attn.data()[i];
        count_flops(probe, Stage::OutProj, detail::matmul_flops(L, d, d));
    }
    {
        ScopedStage t(probe, Stage::FFN);
        const Tensor2D xn = rms_norm(h, w.ffn_norm);
        Tensor2D up = matmul(xn, w.w_up);
        for (float& u : up.data()) u = detail::silu(u);
        const Tensor2D down = matmul(up, w.w_down);
        for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += down.data()[i];
        count_flops(probe, Stage::FFN, detail::matmul_flops(L, d, cfg.ffn_dim) * 2);
    }
}

struct CaptureResult {
    Tensor2D hidden;
    AttentionRecord record;
};

// Called with (layer index, residual stream entering that layer).
using LayerObserver = std::function<void(std::size_t, const Tensor2D&)>;

// Full prefill pass that also records every layer's attention maps.
inline CaptureResult forward_capture(const InputEmbedding& input, const ModelWeights& w, Probe* probe = nullptr,
                                     const LayerObserver& observer = {}) {
    const auto& cfg = w.config;
    const std::size_t L = input.seq_len();
    if (input.matrix.cols() != cfg.hidden_dim) throw ShapeError("forward_capture: embedding width != hidden_dim");
    CaptureResult out{input.matrix, AttentionRecord(L, cfg.num_layers, cfg.num_heads)};
    std::vector<float> maps;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        if (observer) observer(l, out.hidden);
        decoder_layer(w.layers[l], cfg, out.hidden, {}, &maps, probe);
        std::copy(maps.begin(), maps.end(), out.record.layer(l).begin());
    }
    return out;
}

// Prefill pass that substitutes cached maps when a cache is given. Without a
// cache this executes exactly the arithmetic of forward_capture.
inline Tensor2D forward_with_cache(const AttnCache* cache, const InputEmbedding& input, const ModelWeights& w,
                                   Probe* probe = nullptr) {
    const auto& cfg = w.config;
    if (input.matrix.cols() != cfg.hidden_dim) throw ShapeError("forward_with_cache: embedding width != hidden_dim");
    if (cache) {
        if (cache->seq_len() != input.seq_len())
            throw CacheError("forward_with_cache: cached map side " + std::to_string(cache->seq_len()) +
                             " != input length " + std::to_string(input.seq_len()));
        if (cache->num_layers() != cfg.num_layers || cache->num_heads() != cfg.num_heads)
            throw CacheError("forward_with_cache: cache layer/head counts do not match the model");
    }
    Tensor2D h = input.matrix;
    for (std::size_t l = 0; l < cfg.num_layers; ++l)
        decoder_layer(w.layers[l], cfg, h, cache ? cache->layer(l) : std::span<const float>{}, nullptr, probe);
    return h;
}

// Hidden state of the last token.
inline std::vector<float> sentence_embedding(const Tensor2D& hidden) {
    if (hidden.rows() == 0) throw InputError("sentence_embedding: empty hidden states");
    const auto last = hidden.row(hidden.rows() - 1);
    return {last.begin(), last.end()};
}

}  // namespace attncache
