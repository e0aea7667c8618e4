#pragma once

// Per-stage FLOP counters and wall-clock timers. Stages mirror the rows of a
// per-layer time breakdown: retrieval overhead, the attention sub-stages, and
// the feed-forward block.

#include <array>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <string_view>

namespace attncache {

enum class Stage : std::size_t {
    Embedding,     // pool + project for retrieval (encode is untimed)
    VectorSearch,
    MapFetch,
    QProj,
    KProj,
    Rotary,
    VProj,
    MapCompute,    // Q K^T, scaling and causal softmax
    MapApply,      // attention map times V
    OutProj,
    AttnNorm,
    FFN,           // includes the pre-FFN norm
    kCount
};

inline constexpr std::size_t kStageCount = static_cast<std::size_t>(Stage::kCount);

inline constexpr std::string_view stage_name(Stage s) {
    switch (s) {
        case Stage::Embedding: return "embedding";
        case Stage::VectorSearch: return "vector_search";
        case Stage::MapFetch: return "map_fetch";
        case Stage::QProj: return "q_proj";
        case Stage::KProj: return "k_proj";
        case Stage::Rotary: return "rotary";
        case Stage::VProj: return "v_proj";
        case Stage::MapCompute: return "map_compute";
        case Stage::MapApply: return "map_apply";
        case Stage::OutProj: return "out_proj";
        case Stage::AttnNorm: return "attn_norm";
        case Stage::FFN: return "ffn";
        case Stage::kCount: break;
    }
    return "?";
}

struct Probe {
    std::array<std::uint64_t, kStageCount> flops{};
    std::array<double, kStageCount> seconds{};

    void add_flops(Stage s, std::uint64_t n) { flops[static_cast<std::size_t>(s)] += n; }
    std::uint64_t flops_of(Stage s) const { return flops[static_cast<std::size_t>(s)]; }
    double seconds_of(Stage s) const { return seconds[static_cast<std::size_t>(s)]; }

    // Everything inside the attention block, including retrieval charged to
    // a layer (per-layer search variants).
    double attention_seconds() const {
        double t = 0.0;
        for (Stage s : {Stage::Embedding, Stage::VectorSearch, Stage::MapFetch, Stage::QProj, Stage::KProj,
                        Stage::Rotary, Stage::VProj, Stage::MapCompute, Stage::MapApply, Stage::OutProj,
                        Stage::AttnNorm})
            t += seconds_of(s);
        return t;
    }
    double ffn_seconds() const { return seconds_of(Stage::FFN); }

    // Q/K projections, rotary, and map computation: the work map reuse removes.
    std::uint64_t skippable_flops() const {
        return flops_of(Stage::QProj) + flops_of(Stage::KProj) + flops_of(Stage::Rotary) +
               flops_of(Stage::MapCompute);
    }

    Probe& operator+=(const Probe& o) {
        for (std::size_t i = 0; i < kStageCount; ++i) {
            flops[i] += o.flops[i];
            seconds[i] += o.seconds[i];
        }
        return *this;
    }
};

// Charges the enclosed scope's wall time to one stage. No-op without a probe.
class ScopedStage {
public:
    ScopedStage(Probe* probe, Stage stage) : probe_(probe), stage_(stage) {
        if (probe_) start_ = std::chrono::steady_clock::now();
    }
    ~ScopedStage() {
        if (probe_)
            probe_->seconds[static_cast<std::size_t>(stage_)] +=
                std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }
    ScopedStage(const ScopedStage&) = delete;
    ScopedStage& operator=(const ScopedStage&) = delete;

private:
    Probe* probe_;
    Stage stage_;
    std::chrono::steady_clock::time_point start_{};
};

inline void count_flops(Probe* probe, Stage s, std::uint64_t n) {
    if (probe) probe->add_flops(s, n);
}

}  // namespace attncache
