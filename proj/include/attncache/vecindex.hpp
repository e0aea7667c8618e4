#pragma once

// Feature-vector database keyed by record id. Flat mode is an exact scan;
// graph mode is a hierarchical navigable small-world graph (HNSW).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <queue>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "attncache/binio.hpp"
#include "attncache/errors.hpp"

namespace attncache {

enum class IndexMode : std::uint32_t { Flat = 0, Graph = 1 };

struct GraphParams {
    std::size_t max_neighbors = 24;     // M; level-0 lists keep up to 2M
    std::size_t ef_construction = 100;
    std::size_t ef_search = 96;
};

struct SearchHit {
    std::uint64_t id = 0;
    double distance = 0.0;
    double sim = 1.0;
};

inline constexpr std::string_view kIndexMagic = "ACVI";
inline constexpr std::uint32_t kIndexVersion = 1;

namespace detail {

inline float squared_l2(const float* a, const float* b, std::size_t n) {
    std::size_t i = 0;
    float s = 0.0f;
#if defined(__GNUC__)
    typedef float v8f __attribute__((vector_size(32)));
    v8f acc0 = {}, acc1 = {};
    for (; i + 16 <= n; i += 16) {
        v8f x0, y0, x1, y1;
        std::memcpy(&x0, a + i, sizeof(v8f));
        std::memcpy(&y0, b + i, sizeof(v8f));
        std::memcpy(&x1, a + i + 8, sizeof(v8f));
        std::memcpy(&y1, b + i + 8, sizeof(v8f));
        const v8f d0 = x0 - y0, d1 = x1 - y1;
        acc0 += d0 * d0;
        acc1 += d1 * d1;
    }
    acc0 += acc1;
    for (int j = 0; j < 8; ++j) s += acc0[j];
#endif
    for (; i < n; ++i) {
        const float d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

inline double exact_l2(const float* a, const float* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return std::sqrt(s);
}

}  // namespace detail

class VectorIndex {
public:
    explicit VectorIndex(std::size_t dimension, IndexMode mode = IndexMode::Flat, GraphParams params = {})
        : dim_(dimension), mode_(mode), params_(params) {
        if (dim_ == 0) throw InputError("VectorIndex: dimension must be >= 1");
        if (params_.max_neighbors < 2) throw InputError("VectorIndex: max_neighbors must be >= 2");
    }

    std::size_t dimension() const { return dim_; }
    std::size_t size() const { return ids_.size(); }
    bool empty() const { return ids_.empty(); }
    IndexMode mode() const { return mode_; }
    const GraphParams& params() const { return params_; }
    void set_ef_search(std::size_t ef) { params_.ef_search = ef; }

    std::uint64_t id_at(std::size_t slot) const { return ids_[slot]; }
    std::span<const float> vector_at(std::size_t slot) const { return {vectors_.data() + slot * dim_, dim_}; }
    bool contains(std::uint64_t id) const { return slot_of_.count(id) != 0; }

    // Largest level-0 neighbour list in the graph (0 in flat mode).
    std::size_t max_degree() const {
        std::size_t m = 0;
        for (const auto& n : links_) m = std::max(m, n.front().size());
        return m;
    }

    void add(std::uint64_t id, std::span<const float> v) {
        if (v.size() != dim_)
            throw ShapeError("VectorIndex::add: vector length " + std::to_string(v.size()) + " != dimension " +
                             std::to_string(dim_));
        if (slot_of_.count(id)) throw InputError("VectorIndex::add: duplicate id " + std::to_string(id));
        const auto slot = static_cast<std::uint32_t>(ids_.size());
        ids_.push_back(id);
        vectors_.insert(vectors_.end(), v.begin(), v.end());
        slot_of_.emplace(id, slot);
        if (mode_ == IndexMode::Graph) link_new_node(slot);
    }

    // k nearest by Euclidean distance, ascending, ties by lower id.
    std::vector<SearchHit> search(std::span<const float> q, std::size_t k) const {
        return mode_ == IndexMode::Graph ? search_graph(q, k) : search_flat(q, k);
    }

    std::vector<SearchHit> search_flat(std::span<const float> q, std::size_t k) const {
        check_query(q, k);
        std::vector<std::pair<double, std::uint32_t>> all(ids_.size());
        for (std::uint32_t s = 0; s < ids_.size(); ++s) all[s] = {detail::exact_l2(q.data(), vec(s), dim_), s};
        return finish(all, k);
    }

    std::vector<SearchHit> search_graph(std::span<const float> q, std::size_t k) const {
        check_query(q, k);
        if (links_.size() != ids_.size()) throw Error("VectorIndex: graph not built");
        const auto found = search_layers(q.data(), std::max(params_.ef_search, k));
        std::vector<std::pair<double, std::uint32_t>> cand;
        cand.reserve(found.size());
        for (const auto& [d, s] : found) cand.emplace_back(detail::exact_l2(q.data(), vec(s), dim_), s);
        return finish(cand, k);
    }

    // ACVI file: magic, version u32, dimension u32, count u64, mode u32, then
    // count x (id u64, dimension x f32). The graph is rebuilt on load.
    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot open " + path.string() + " for writing");
        binio::write_magic(os, kIndexMagic);
        binio::write_u32(os, kIndexVersion);
        binio::write_u32(os, static_cast<std::uint32_t>(dim_));
        binio::write_u64(os, ids_.size());
        binio::write_u32(os, static_cast<std::uint32_t>(mode_));
        for (std::size_t s = 0; s < ids_.size(); ++s) {
            binio::write_u64(os, ids_[s]);
            binio::write_floats(os, vector_at(s));
        }
        if (!os) throw Error("write failed: " + path.string());
    }

    static VectorIndex load(const std::filesystem::path& path, GraphParams params = {}) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw FormatError("cannot open index file " + path.string());
        binio::expect_magic(is, kIndexMagic);
        if (binio::read_u32(is, "version") != kIndexVersion) throw FormatError("unsupported index version");
        const std::uint32_t dim = binio::read_u32(is, "dimension");
        const std::uint64_t count = binio::read_u64(is, "count");
        const std::uint32_t mode = binio::read_u32(is, "mode");
        if (dim == 0 || dim > (1u << 20)) throw FormatError("index file: bad dimension");
        if (mode > 1) throw FormatError("index file: unknown mode " + std::to_string(mode));
        is.seekg(0, std::ios::end);
        const auto file_size = static_cast<std::uint64_t>(is.tellg());
        const std::uint64_t header = 4 + 4 + 4 + 8 + 4;
        if (file_size != header + count * (8 + 4ull * dim)) throw FormatError("index file: size does not match count");
        is.seekg(static_cast<std::streamoff>(header));
        VectorIndex idx(dim, static_cast<IndexMode>(mode), params);
        std::vector<float> v(dim);
        for (std::uint64_t i = 0; i < count; ++i) {
            const std::uint64_t id = binio::read_u64(is, "record id");
            binio::read_floats(is, v, "vector");
            try {
                idx.add(id, v);
            } catch (const InputError& e) {
                throw FormatError(std::string("index file: ") + e.what());
            }
        }
        return idx;
    }

private:
    using Candidate = std::pair<float, std::uint32_t>;  // (squared distance, slot)

    // Per-thread visited set; bumping the generation clears it in O(1).
    struct VisitedTags {
        std::vector<std::uint32_t> tags;
        std::uint32_t generation = 0;

        // True if the slot was not yet visited in this generation.
        bool mark(std::uint32_t slot) {
            if (tags[slot] == generation) return false;
            tags[slot] = generation;
            return true;
        }
    };

    static VisitedTags& visited_tags(std::size_t n) {
        thread_local VisitedTags v;
        if (v.tags.size() < n) v.tags.resize(n, 0);
        if (++v.generation == 0) {
            std::fill(v.tags.begin(), v.tags.end(), 0);
            v.generation = 1;
        }
        return v;
    }

    const float* vec(std::uint32_t slot) const { return vectors_.data() + static_cast<std::size_t>(slot) * dim_; }

    void check_query(std::span<const float> q, std::size_t k) const {
        if (ids_.empty()) throw NotFoundError("VectorIndex::search: index is empty");
        if (k == 0) throw InputError("VectorIndex::search: k must be >= 1");
        if (q.size() != dim_) throw ShapeError("VectorIndex::search: query length != dimension");
    }

    std::vector<SearchHit> finish(std::vector<std::pair<double, std::uint32_t>>& cand, std::size_t k) const {
        auto less = [this](const auto& a, const auto& b) {
            return a.first != b.first ? a.first < b.first : ids_[a.second] < ids_[b.second];
        };
        k = std::min(k, cand.size());
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), less);
        std::vector<SearchHit> out;
        out.reserve(k);
        for (std::size_t i = 0; i < k; ++i)
            out.push_back({ids_[cand[i].second], cand[i].first, 1.0 / (1.0 + cand[i].first)});
        return out;
    }

    // Level of a node in the hierarchy, derived from its id so that rebuilding
    // from a saved file reproduces the same graph.
    std::size_t level_for(std::uint64_t id) const {
        std::uint64_t z = id + 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        z ^= z >> 31;
        const double u = (static_cast<double>(z >> 11) + 0.5) * 0x1.0p-53;
        const double ml = 1.0 / std::log(static_cast<double>(params_.max_neighbors));
        return static_cast<std::size_t>(-std::log(u) * ml);
    }

    std::size_t max_links(std::size_t level) const {
        return level == 0 ? 2 * params_.max_neighbors : params_.max_neighbors;
    }

    // Greedy descent on one level: follow strictly closer neighbours.
    Candidate greedy_step(const float* q, Candidate cur, std::size_t level) const {
        bool moved = true;
        while (moved) {
            moved = false;
            for (std::uint32_t nb : links_[cur.second][level]) {
                const float d = detail::squared_l2(q, vec(nb), dim_);
                if (d < cur.first) {
                    cur = {d, nb};
                    moved = true;
                }
            }
        }
        return cur;
    }

    // Best-first search on one level from `entry`; returns up to ef nearest
    // visited nodes sorted ascending.
    std::vector<Candidate> beam_search(const float* q, Candidate entry, std::size_t ef, std::size_t level) const {
        VisitedTags& visited = visited_tags(ids_.size());
        std::priority_queue<Candidate, std::vector<Candidate>, std::greater<>> frontier;
        std::priority_queue<Candidate> best;
        thread_local std::vector<std::uint32_t> fresh;
        frontier.push(entry);
        best.push(entry);
        visited.mark(entry.second);
        while (!frontier.empty()) {
            const auto [d, s] = frontier.top();
            if (d > best.top().first && best.size() >= ef) break;
            frontier.pop();
            fresh.clear();
            for (std::uint32_t nb : links_[s][level]) {
                if (!visited.mark(nb)) continue;
                fresh.push_back(nb);
                const char* p = reinterpret_cast<const char*>(vec(nb));
                for (std::size_t off = 0; off < dim_ * sizeof(float); off += 64) __builtin_prefetch(p + off);
            }
            for (std::uint32_t nb : fresh) {
                const float dn = detail::squared_l2(q, vec(nb), dim_);
                if (best.size() < ef || dn < best.top().first) {
                    frontier.emplace(dn, nb);
                    best.emplace(dn, nb);
                    if (best.size() > ef) best.pop();
                }
            }
        }
        std::vector<Candidate> out;
        out.reserve(best.size());
        while (!best.empty()) {
            out.push_back(best.top());
            best.pop();
        }
        std::reverse(out.begin(), out.end());
        return out;
    }

    std::vector<Candidate> search_layers(const float* q, std::size_t ef) const {
        Candidate cur{detail::squared_l2(q, vec(entry_), dim_), entry_};
        for (std::size_t level = top_level_; level > 0; --level) cur = greedy_step(q, cur, level);
        return beam_search(q, cur, ef, 0);
    }

    // HNSW heuristic: keep a candidate only if it is closer to the base than
    // to every neighbour already kept. `cand` must be sorted ascending.
    std::vector<std::uint32_t> select_neighbors(const std::vector<Candidate>& cand, std::size_t m) const {
        std::vector<std::uint32_t> kept;
        for (const auto& [d, s] : cand) {
            if (kept.size() >= m) break;
            bool good = true;
            for (std::uint32_t k : kept)
                if (detail::squared_l2(vec(s), vec(k), dim_) < d) {
                    good = false;
                    break;
                }
            if (good) kept.push_back(s);
        }
        return kept;
    }

    void link_new_node(std::uint32_t slot) {
        const std::size_t level = level_for(ids_[slot]);
        links_.emplace_back(level + 1);
        if (slot == 0) {
            entry_ = 0;
            top_level_ = level;
            return;
        }
        const float* q = vec(slot);
        Candidate cur{detail::squared_l2(q, vec(entry_), dim_), entry_};
        for (std::size_t l = top_level_; l > level; --l) cur = greedy_step(q, cur, l);
        for (std::size_t l = std::min(level, top_level_) + 1; l-- > 0;) {
            const auto cand = beam_search(q, cur, params_.ef_construction, l);
            cur = cand.front();
            links_[slot][l] = select_neighbors(cand, params_.max_neighbors);
            for (std::uint32_t nb : links_[slot][l]) {
                auto& back = links_[nb][l];
                back.push_back(slot);
                if (back.size() <= max_links(l)) continue;
                std::vector<Candidate> c;
                c.reserve(back.size());
                for (std::uint32_t x : back) c.emplace_back(detail::squared_l2(vec(nb), vec(x), dim_), x);
                std::sort(c.begin(), c.end());
                back = select_neighbors(c, max_links(l));
            }
        }
        if (level > top_level_) {
            top_level_ = level;
            entry_ = slot;
        }
    }

    std::size_t dim_;
    IndexMode mode_;
    GraphParams params_;
    std::vector<std::uint64_t> ids_;
    std::vector<float> vectors_;
    std::unordered_map<std::uint64_t, std::uint32_t> slot_of_;
    std::vector<std::vector<std::vector<std::uint32_t>>> links_;  // [slot][level] -> neighbours
    std::uint32_t entry_ = 0;
    std::size_t top_level_ = 0;
};

}  // namespace attncache
