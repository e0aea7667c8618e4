// attncache_bench: corpus generation, database building, experiments and
// metric reporting.
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "attncache/bench.hpp"

using namespace attncache;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kModelFile = "model.acwt";
constexpr const char* kCorpusFile = "corpus.txt";
constexpr const char* kMetaFile = "meta.json";

struct ModelOpts {
    std::uint32_t layers = 4;
    std::uint32_t heads = 4;
    std::uint32_t dim = 128;
    std::uint32_t head_dim = 0;  // 0: dim / heads
    std::uint32_t seq_max = 128;
    std::uint32_t vocab = 1000;

    ModelConfig config() const {
        ModelConfig c;
        c.num_layers = layers;
        c.num_heads = heads;
        c.hidden_dim = dim;
        c.head_dim = head_dim ? head_dim : (heads ? dim / heads : 0);
        c.ffn_dim = 4 * dim;
        c.vocab_size = vocab;
        c.max_seq_len = seq_max;
        c.validate();
        return c;
    }
};

void add_model_options(CLI::App* app, ModelOpts& m) {
    app->add_option("--layers", m.layers, "decoder layers")->capture_default_str();
    app->add_option("--heads", m.heads, "attention heads")->capture_default_str();
    app->add_option("--dim", m.dim, "hidden size")->capture_default_str();
    app->add_option("--head-dim", m.head_dim, "per-head size (default dim/heads)");
    app->add_option("--seq-max", m.seq_max, "maximum sentence length")->capture_default_str();
    app->add_option("--vocab", m.vocab, "vocabulary size")->capture_default_str();
}

fs::path data_dir(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("ATTNCACHE_DATA_DIR"); env && *env) return env;
    return "attncache-data";
}

json read_meta(const fs::path& dir) {
    std::ifstream is(dir / kMetaFile);
    if (!is) throw FormatError("no database in " + dir.string() + " (run build-db first)");
    return json::parse(is);
}

std::vector<Mode> parse_modes(const std::string& list) {
    std::vector<Mode> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(parse_mode(item));
    if (out.empty()) throw InputError("no mode given");
    return out;
}

void print_report(const BenchReport& rep) {
    std::printf("queries=%zu repeats=%zu warmup=%zu threads=%zu baseline attn=%.4f ms e2e=%.4f ms\n", rep.queries,
                rep.repeats, rep.warmup, rep.threads, rep.baseline_attn_ms, rep.baseline_e2e_ms);
    std::printf("%-12s %7s %8s %8s %10s %10s %8s %8s %9s %8s\n", "mode", "theta", "hit", "raw_hit", "attn_ms",
                "e2e_ms", "attn_x", "e2e_x", "quality", "gamma");
    for (const auto& r : rep.rows)
        std::printf("%-12s %7.3f %8.3f %8.3f %10.4f %10.4f %8.3f %8.3f %9.6f %8.4f\n",
                    std::string(mode_name(r.mode)).c_str(), r.theta, r.hit_rate, r.raw_hit_rate, r.attn_ms, r.e2e_ms,
                    r.attn_speedup, r.e2e_speedup, r.quality_proxy, r.gamma);
    std::printf("\nper-stage ms per sentence\n%-22s", "stage");
    for (const auto& r : rep.rows) std::printf(" %12s", std::string(mode_name(r.mode)).substr(0, 12).c_str());
    std::printf("\n");
    for (std::size_t s = 0; s < kStageCount; ++s) {
        std::printf("%-22s", std::string(stage_name(static_cast<Stage>(s))).c_str());
        for (const auto& r : rep.rows) std::printf(" %12.4f", r.stage_ms[s]);
        std::printf("\n");
    }
}

struct RunOpts {
    std::string data;
    std::string queries;
    std::string modes = "attncache";
    std::vector<double> thetas;
    std::size_t subblock = 2;
    double san_js = 0.05;
    std::size_t repeats = 5;
    std::size_t warmup = 1;
    std::size_t parallel = 1;
    std::string out;
};

void add_run_options(CLI::App* app, RunOpts& o) {
    app->add_option("--data-dir", o.data, "database directory (default $ATTNCACHE_DATA_DIR)");
    app->add_option("--queries", o.queries, "query corpus file (default: the stored corpus)");
    app->add_option("--mode", o.modes, "comma list of attncache,attncache_f,lazyformer,san,baseline")
        ->capture_default_str();
    app->add_option("--subblock", o.subblock, "LazyFormer subblock size")->capture_default_str();
    app->add_option("--san-js", o.san_js, "SAN Jensen-Shannon reuse threshold")->capture_default_str();
    app->add_option("--repeats", o.repeats, "timed repetitions (median reported)")->capture_default_str();
    app->add_option("--warmup", o.warmup, "untimed warmup passes")->capture_default_str();
    app->add_option("--parallel-queries", o.parallel, "concurrent infer calls; times become throughput")
        ->capture_default_str();
    app->add_option("--out", o.out, "CSV output path");
}

int run_command(const RunOpts& o, bool sweep) {
    const fs::path dir = data_dir(o.data);
    const json meta = read_meta(dir);
    const auto w = ModelWeights::load(dir / kModelFile);
    const auto stored = read_corpus(dir / kCorpusFile);
    const auto queries = o.queries.empty() ? stored : read_corpus(o.queries);

    ExperimentConfig ex;
    ex.modes = parse_modes(o.modes);
    ex.engine.alpha = meta.value("alpha", kDefaultAlpha);
    ex.engine.lazyformer_subblock = o.subblock;
    ex.engine.san_js_threshold = o.san_js;
    ex.repeats = o.repeats;
    ex.warmup = o.warmup;
    ex.parallel_queries = o.parallel;
    if (sweep) {
        ex.thetas = o.thetas.empty() ? default_sweep_grid() : o.thetas;
    } else {
        ex.engine.threshold = o.thetas.empty() ? kDefaultThreshold : o.thetas.front();
        ex.thetas = o.thetas;
    }
    ex.engine.validate();

    auto db = Databases::load(dir);
    for (Mode m : ex.modes) {
        if (m == Mode::San && !db.san_plan) {
            const std::size_t n = std::min(ex.engine.san_calibration_size, stored.size());
            db.san_plan = calibrate_san(std::span(stored.sentences).first(n), w, ex.engine.san_js_threshold);
        }
        if (m == Mode::AttnCacheF && db.per_layer.empty())
            std::fprintf(stderr, "note: no per-layer databases (build-db --per-layer); attncache_f will miss\n");
    }
    const auto rep = run_experiment(ex, queries.sentences, &db, w);
    print_report(rep);
    if (sweep) {
        const auto pts = sweep_threshold(ex.thetas, queries.sentences, db, w);
        std::printf("\nthreshold sweep (similarity-only vs similarity+length gate)\n%7s %8s %8s %9s\n", "theta",
                    "raw_hit", "hit", "quality");
        for (const auto& p : pts)
            std::printf("%7.3f %8.3f %8.3f %9.6f\n", p.theta, p.raw_hits.hit_rate(), p.hits.hit_rate(),
                        p.quality_proxy);
    }
    if (!o.out.empty()) {
        emit_csv(rep, o.out);
        std::printf("wrote %s\n", o.out.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"AttnCache benchmark harness: reuse of prefill attention maps across similar sentences."};
    app.require_subcommand(1);

    // gen-corpus
    std::uint64_t seed = 0;
    std::size_t size = 1000;
    ModelOpts model;
    LengthDist dist;
    std::string out;
    auto* gen = app.add_subcommand("gen-corpus", "write a synthetic corpus with template families");
    gen->add_option("--seed", seed, "generator seed")->capture_default_str();
    gen->add_option("--size", size, "number of sentences")->capture_default_str();
    gen->add_option("--seq-max", model.seq_max, "maximum sentence length")->capture_default_str();
    gen->add_option("--vocab", model.vocab, "vocabulary size")->capture_default_str();
    gen->add_option("--min-len", dist.min_len, "minimum sentence length")->capture_default_str();
    gen->add_option("--max-len", dist.max_len, "maximum sentence length (<= --seq-max)")->capture_default_str();
    gen->add_option("--template-fraction", dist.template_fraction, "share of template-family sentences")
        ->capture_default_str();
    gen->add_option("--families", dist.families, "number of template families")->capture_default_str();
    gen->add_option("--out", out, "corpus file")->required();

    // build-db
    std::string corpus_path, build_dir;
    double alpha = kDefaultAlpha;
    std::size_t epochs = TrainConfig{}.epochs;
    bool per_layer = false;
    auto* build = app.add_subcommand("build-db", "build projector, vector index and attention-map store");
    build->add_option("--corpus", corpus_path, "corpus file from gen-corpus")->required();
    build->add_option("--seed", seed, "model weight seed")->capture_default_str();
    add_model_options(build, model);
    build->add_option("--alpha", alpha, "label weight on attention-map distance")->capture_default_str();
    build->add_option("--epochs", epochs, "projector training epochs")->capture_default_str();
    build->add_flag("--per-layer", per_layer, "also build per-layer databases for attncache_f");
    build->add_option("--data-dir", build_dir, "output directory (default $ATTNCACHE_DATA_DIR)");

    // run / sweep
    RunOpts run_opts, sweep_opts;
    auto* run = app.add_subcommand("run", "time baseline and the given modes on a query corpus");
    add_run_options(run, run_opts);
    run->add_option("--theta", run_opts.thetas, "similarity threshold(s) for attncache modes (default 0.99)");
    auto* sweep = app.add_subcommand("sweep", "hit rate, quality and timing across similarity thresholds");
    add_run_options(sweep, sweep_opts);
    sweep->add_option("--theta", sweep_opts.thetas, "thresholds (default 0.995 0.99 0.97 0.95 0.90 0.85)");

    // gamma
    double avg_full = 0, avg_method = 0, sp_full = 1, sp_method = 0;
    auto* gam = app.add_subcommand(
        "gamma",
        "speedup degradation ratio (avg_full - avg_method) / (speedup_method - speedup_full).\n"
        "Averages are fractions in [0, 1]: pass 0.6860, not 68.60.");
    gam->add_option("--avg-full", avg_full, "full-model average score as a fraction")->required();
    gam->add_option("--avg-method", avg_method, "method average score as a fraction")->required();
    gam->add_option("--speedup-full", sp_full, "full-model speedup")->capture_default_str();
    gam->add_option("--speedup-method", sp_method, "method speedup")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            const auto c = generate_corpus(seed, size, dist, model.vocab, model.seq_max);
            write_corpus(c, out);
            std::size_t templated = 0;
            for (int f : c.family) templated += f >= 0;
            std::printf("wrote %zu sentences (%zu in template families) to %s\n", c.size(), templated, out.c_str());
        } else if (*build) {
            const fs::path dir = data_dir(build_dir);
            fs::create_directories(dir);
            const auto corpus = read_corpus(corpus_path);
            const auto cfg = model.config();
            for (const auto& s : corpus.sentences)
                if (s.size() > cfg.max_seq_len)
                    throw InputError("corpus sentence longer than --seq-max " + std::to_string(cfg.max_seq_len));
            const auto w = ModelWeights::random(cfg, seed);
            EngineConfig ec;
            ec.alpha = alpha;
            ec.train.epochs = epochs;
            ec.seed = seed;
            ec.build_per_layer = per_layer;
            ec.validate();
            const auto db = build_databases(corpus.sentences, w, ec, dir / Databases::kStoreFile);
            db.save(dir);
            w.save(dir / kModelFile);
            write_corpus(corpus, dir / kCorpusFile);
            const json meta = {{"layers", cfg.num_layers},   {"heads", cfg.num_heads},   {"dim", cfg.hidden_dim},
                               {"head_dim", cfg.head_dim},   {"seq_max", cfg.max_seq_len}, {"vocab", cfg.vocab_size},
                               {"seed", seed},                {"alpha", alpha},           {"epochs", epochs},
                               {"records", db.size()},        {"per_layer", per_layer},   {"train_loss", db.train_loss}};
            std::ofstream(dir / kMetaFile) << meta.dump(2) << '\n';
            std::printf("built %zu records in %s (final training loss %.6g)\n", db.size(), dir.c_str(), db.train_loss);
        } else if (*run) {
            return run_command(run_opts, false);
        } else if (*sweep) {
            return run_command(sweep_opts, true);
        } else if (*gam) {
            std::printf("%.6f\n", gamma(avg_full, avg_method, sp_full, sp_method));
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
