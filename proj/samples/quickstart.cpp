// Builds a small database, then answers a stored sentence and an unseen one.
#include <cstdio>
#include <filesystem>

#include "attncache/engine.hpp"

using namespace attncache;

int main() {
    ModelConfig cfg;
    cfg.num_layers = 4;
    cfg.num_heads = 4;
    cfg.hidden_dim = 64;
    cfg.head_dim = 16;
    cfg.ffn_dim = 256;
    cfg.vocab_size = 256;
    cfg.max_seq_len = 64;
    const auto w = ModelWeights::random(cfg, 42);

    const std::vector<Sentence> corpus{
        tokenize("This sentence: 'a cat sat on the mat' means in one word:", cfg.vocab_size),
        tokenize("This sentence: 'the dog ran in the park' means in one word:", cfg.vocab_size),
        tokenize("This sentence: 'rain fell all night long' means in one word:", cfg.vocab_size),
    };

    const auto dir = std::filesystem::temp_directory_path() / "attncache-quickstart";
    std::filesystem::create_directories(dir);
    const auto db = build_databases(corpus, w, EngineConfig{}, dir / Databases::kStoreFile);
    db.save(dir);

    EngineConfig engine;  // attncache mode, threshold 0.99
    EngineConfig baseline;
    baseline.mode = Mode::Baseline;
    for (const char* text : {"This sentence: 'the dog ran in the park' means in one word:",
                             "This sentence: 'a bird sang at dawn' means in one word:"}) {
        const auto s = tokenize(text, cfg.vocab_size);
        const auto r = infer(s, engine, &db, w);
        const auto b = infer(s, baseline, nullptr, w);
        double err = 0;
        for (std::size_t i = 0; i < r.embedding.size(); ++i)
            err = std::max(err, double(std::fabs(r.embedding[i] - b.embedding[i])));
        std::printf("%-62s hit=%d sim=%.4f source=%llu max|reuse-baseline|=%.2e map FLOPs skipped=%s\n", text,
                    int(r.hit), r.sim, static_cast<unsigned long long>(r.source_id), err,
                    r.probe.flops_of(Stage::MapCompute) == 0 ? "yes" : "no");
    }
    std::filesystem::remove_all(dir);
}
