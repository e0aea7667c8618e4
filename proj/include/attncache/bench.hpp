#pragma once

// Benchmark harness: synthetic corpora, timed experiment runs across modes,
// threshold sweeps, the speedup degradation ratio, and CSV reporting.

#include <algorithm>
#include <array>
#include <chrono>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "attncache/engine.hpp"
#include "attncache/errors.hpp"
#include "attncache/model.hpp"

namespace attncache {

// ---------------------------------------------------------------------------
// Corpus

struct LengthDist {
    std::size_t min_len = 8;
    std::size_t max_len = 64;
    double template_fraction = 0.7;  // remaining sentences are unrelated random tokens
    std::size_t families = 8;
    std::size_t prefix_len = 6;
    std::size_t suffix_len = 6;
    std::size_t infix_alphabet = 4;  // distinct tokens an infix slot may take

    void validate(std::size_t max_seq_len) const {
        if (min_len < 1 || min_len > max_len) throw InputError("LengthDist: need 1 <= min_len <= max_len");
        if (max_len > max_seq_len) throw InputError("LengthDist: max_len exceeds max_seq_len");
        if (!(template_fraction >= 0.0 && template_fraction <= 1.0))
            throw InputError("LengthDist: template_fraction must be in [0, 1]");
        if (template_fraction > 0.0) {
            if (families < 1 || infix_alphabet < 1) throw InputError("LengthDist: need families and infix alphabet >= 1");
            if (prefix_len + suffix_len + 1 > max_len)
                throw InputError("LengthDist: prefix + suffix leave no room for an infix");
        }
    }
};

struct Corpus {
    std::uint64_t seed = 0;
    LengthDist dist;
    std::vector<Sentence> sentences;
    std::vector<int> family;  // -1 for unrelated sentences

    std::size_t size() const { return sentences.size(); }
};

// Template sentences are prefix + infix + suffix. Each family fixes its
// prefix, suffix, infix length and a small infix alphabet, so members share
// length and most tokens.
inline Corpus generate_corpus(std::uint64_t seed, std::size_t size, const LengthDist& dist, std::uint32_t vocab,
                              std::size_t max_seq_len) {
    if (size < 1) throw InputError("generate_corpus: size must be >= 1");
    if (vocab < 2) throw InputError("generate_corpus: vocab must be >= 2");
    dist.validate(max_seq_len);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<TokenId> token(0, vocab - 1);
    auto random_tokens = [&](std::size_t n) {
        Sentence s(n);
        for (auto& t : s) t = token(rng);
        return s;
    };

    struct Family {
        Sentence prefix, suffix, alphabet;
        std::size_t infix_len;
    };
    std::vector<Family> fams;
    if (dist.template_fraction > 0.0) {
        const std::size_t fixed = dist.prefix_len + dist.suffix_len;
        const std::size_t lo = dist.min_len > fixed ? dist.min_len - fixed : 1;
        std::uniform_int_distribution<std::size_t> infix_len(lo, dist.max_len - fixed);
        for (std::size_t f = 0; f < dist.families; ++f)
            fams.push_back({random_tokens(dist.prefix_len), random_tokens(dist.suffix_len),
                            random_tokens(dist.infix_alphabet), infix_len(rng)});
    }

    Corpus c;
    c.seed = seed;
    c.dist = dist;
    std::bernoulli_distribution templated(dist.template_fraction);
    std::uniform_int_distribution<std::size_t> pick_family(0, fams.empty() ? 0 : fams.size() - 1);
    std::uniform_int_distribution<std::size_t> free_len(dist.min_len, dist.max_len);
    for (std::size_t i = 0; i < size; ++i) {
        if (!fams.empty() && templated(rng)) {
            const std::size_t f = pick_family(rng);
            const auto& fam = fams[f];
            std::uniform_int_distribution<std::size_t> slot(0, fam.alphabet.size() - 1);
            Sentence s = fam.prefix;
            for (std::size_t k = 0; k < fam.infix_len; ++k) s.push_back(fam.alphabet[slot(rng)]);
            s.insert(s.end(), fam.suffix.begin(), fam.suffix.end());
            c.sentences.push_back(std::move(s));
            c.family.push_back(static_cast<int>(f));
        } else {
            c.sentences.push_back(random_tokens(free_len(rng)));
            c.family.push_back(-1);
        }
    }
    return c;
}

// Text format: a "# attncache-corpus seed=<n>" header, then one sentence per
// line as "<family> <tok> <tok> ...".
inline void write_corpus(const Corpus& c, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write corpus " + path.string());
    os << "# attncache-corpus seed=" << c.seed << '\n';
    for (std::size_t i = 0; i < c.size(); ++i) {
        os << c.family[i];
        for (TokenId t : c.sentences[i]) os << ' ' << t;
        os << '\n';
    }
    if (!os) throw FormatError("error writing corpus " + path.string());
}

inline Corpus read_corpus(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot read corpus " + path.string());
    Corpus c;
    std::string line;
    if (!std::getline(is, line) || line.rfind("# attncache-corpus", 0) != 0)
        throw FormatError("corpus " + path.string() + ": missing header");
    if (const auto pos = line.find("seed="); pos != std::string::npos) c.seed = std::stoull(line.substr(pos + 5));
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        int fam = 0;
        if (!(ls >> fam)) throw FormatError("corpus line " + std::to_string(lineno) + ": bad family field");
        Sentence s;
        long long tok = 0;
        while (ls >> tok) {
            if (tok < 0 || tok > std::numeric_limits<TokenId>::max())
                throw FormatError("corpus line " + std::to_string(lineno) + ": token out of range");
            s.push_back(static_cast<TokenId>(tok));
        }
        if (!ls.eof()) throw FormatError("corpus line " + std::to_string(lineno) + ": bad token");
        if (s.empty()) throw FormatError("corpus line " + std::to_string(lineno) + ": empty sentence");
        c.sentences.push_back(std::move(s));
        c.family.push_back(fam);
    }
    return c;
}

// ---------------------------------------------------------------------------
// Metrics

// (avg_full - avg_method) / (speedup_method - speedup_full). Averages are
// fractions in [0, 1], not percentages.
inline double gamma(double avg_full, double avg_method, double speedup_full, double speedup_method) {
    for (double a : {avg_full, avg_method})
        if (!(a >= 0.0 && a <= 1.0)) throw InputError("gamma: averages must be fractions in [0, 1]");
    if (!std::isfinite(speedup_full) || !std::isfinite(speedup_method)) throw InputError("gamma: non-finite speedup");
    const double denom = speedup_method - speedup_full;
    if (denom == 0.0) throw MetricError("gamma: undefined when speedup_method == speedup_full");
    return (avg_full - avg_method) / denom;
}

inline double cosine_similarity(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += static_cast<double>(a[i]) * b[i];
        aa += static_cast<double>(a[i]) * a[i];
        bb += static_cast<double>(b[i]) * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return aa == bb ? 1.0 : 0.0;
    return ab / std::sqrt(aa * bb);
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw InputError("median: empty sample");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Experiments

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct ReportRow {
    Mode mode = Mode::Baseline;
    double theta = kNaN;  // NaN for modes without a threshold
    double hit_rate = 0.0;
    double raw_hit_rate = 0.0;  // similarity alone, before the length gate
    double attn_ms = 0.0;       // per sentence
    double e2e_ms = 0.0;        // per sentence
    double attn_speedup = 1.0;
    double e2e_speedup = 1.0;
    double quality_proxy = 1.0;  // mean cosine vs baseline embeddings
    double gamma = kNaN;
    std::array<double, kStageCount> stage_ms{};  // per sentence
};

struct BenchReport {
    std::vector<ReportRow> rows;
    std::size_t repeats = 0;
    std::size_t warmup = 0;
    std::size_t queries = 0;
    std::size_t threads = 1;  // > 1 means times are wall time / query (throughput)
    double baseline_attn_ms = 0.0;
    double baseline_e2e_ms = 0.0;
};

struct ExperimentConfig {
    EngineConfig engine;
    std::vector<Mode> modes{Mode::AttnCache};
    std::vector<double> thetas;  // empty: engine.threshold only
    std::size_t repeats = 5;
    std::size_t warmup = 1;
    std::size_t parallel_queries = 1;
};

namespace detail {

struct PassResult {
    std::vector<std::vector<float>> embeddings;
    HitStats hits, raw_hits;
    Probe probe;
    double wall_seconds = 0.0;
};

inline PassResult run_pass(std::span<const Sentence> queries, const EngineConfig& cfg, const Databases* db,
                           const ModelWeights& w, std::size_t threads) {
    PassResult out;
    out.embeddings.resize(queries.size());
    threads = std::max<std::size_t>(1, std::min(threads, queries.size()));
    std::vector<PassResult> parts(threads);
    const auto start = std::chrono::steady_clock::now();
    auto work = [&](std::size_t t) {
        for (std::size_t i = t; i < queries.size(); i += threads) {
            auto r = infer(queries[i], cfg, db, w);
            parts[t].hits.record(r.hit);
            parts[t].raw_hits.record(r.sim_hit);
            parts[t].probe += r.probe;
            parts[t].wall_seconds += r.total_seconds;
            out.embeddings[i] = std::move(r.embedding);
        }
    };
    if (threads == 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    double summed = 0.0;
    for (const auto& p : parts) {
        out.hits.merge(p.hits);
        out.raw_hits.merge(p.raw_hits);
        out.probe += p.probe;
        summed += p.wall_seconds;
    }
    out.wall_seconds = threads == 1 ? summed : wall;
    if (threads > 1) {
        // Report stage times as a share of wall time so they add up to throughput.
        const double scale = summed > 0.0 ? wall / summed : 0.0;
        for (double& s : out.probe.seconds) s *= scale;
    }
    return out;
}

struct TimedMode {
    PassResult last;
    double attn_ms = 0.0, e2e_ms = 0.0;
    std::array<double, kStageCount> stage_ms{};
};

inline TimedMode time_mode(std::span<const Sentence> queries, const EngineConfig& cfg, const Databases* db,
                           const ModelWeights& w, const ExperimentConfig& ex) {
    if (ex.repeats < 1) throw InputError("run_experiment: repeats must be >= 1");
    for (std::size_t i = 0; i < ex.warmup; ++i) run_pass(queries, cfg, db, w, ex.parallel_queries);
    const double n = static_cast<double>(queries.size());
    std::vector<double> attn, e2e;
    std::array<std::vector<double>, kStageCount> stages;
    TimedMode tm;
    for (std::size_t r = 0; r < ex.repeats; ++r) {
        tm.last = run_pass(queries, cfg, db, w, ex.parallel_queries);
        attn.push_back(1e3 * tm.last.probe.attention_seconds() / n);
        e2e.push_back(1e3 * tm.last.wall_seconds / n);
        for (std::size_t s = 0; s < kStageCount; ++s) stages[s].push_back(1e3 * tm.last.probe.seconds[s] / n);
    }
    tm.attn_ms = median(attn);
    tm.e2e_ms = median(e2e);
    for (std::size_t s = 0; s < kStageCount; ++s) tm.stage_ms[s] = median(stages[s]);
    return tm;
}

inline bool uses_threshold(Mode m) { return m == Mode::AttnCache || m == Mode::AttnCacheF; }

}  // namespace detail

// Times baseline and every requested mode over `queries` against prebuilt
// databases. Times are medians over `repeats` passes after `warmup` passes.
inline BenchReport run_experiment(const ExperimentConfig& ex, std::span<const Sentence> queries, const Databases* db,
                                  const ModelWeights& w) {
    ex.engine.validate();
    if (queries.empty()) throw InputError("run_experiment: empty query split");
    BenchReport rep;
    rep.repeats = ex.repeats;
    rep.warmup = ex.warmup;
    rep.queries = queries.size();
    rep.threads = std::max<std::size_t>(1, ex.parallel_queries);

    EngineConfig base_cfg = ex.engine;
    base_cfg.mode = Mode::Baseline;
    const auto base = detail::time_mode(queries, base_cfg, nullptr, w, ex);
    rep.baseline_attn_ms = base.attn_ms;
    rep.baseline_e2e_ms = base.e2e_ms;

    auto make_row = [&](Mode m, double theta, const detail::TimedMode& tm) {
        ReportRow row;
        row.mode = m;
        row.theta = theta;
        row.hit_rate = tm.last.hits.hit_rate();
        row.raw_hit_rate = tm.last.raw_hits.hit_rate();
        row.attn_ms = tm.attn_ms;
        row.e2e_ms = tm.e2e_ms;
        row.attn_speedup = tm.attn_ms > 0.0 ? base.attn_ms / tm.attn_ms : kNaN;
        row.e2e_speedup = tm.e2e_ms > 0.0 ? base.e2e_ms / tm.e2e_ms : kNaN;
        double q = 0.0;
        for (std::size_t i = 0; i < queries.size(); ++i)
            q += cosine_similarity(tm.last.embeddings[i], base.last.embeddings[i]);
        row.quality_proxy = q / static_cast<double>(queries.size());
        row.stage_ms = tm.stage_ms;
        if (m != Mode::Baseline && std::isfinite(row.e2e_speedup) && row.e2e_speedup != 1.0) {
            // Baseline quality is 1 by construction; clamp rounding above 1.
            row.gamma = gamma(1.0, std::clamp(row.quality_proxy, 0.0, 1.0), 1.0, row.e2e_speedup);
        }
        return row;
    };

    {
        ReportRow row = make_row(Mode::Baseline, kNaN, base);
        row.attn_speedup = row.e2e_speedup = 1.0;
        rep.rows.push_back(row);
    }
    for (Mode m : ex.modes) {
        if (m == Mode::Baseline) continue;
        std::vector<double> thetas = ex.thetas;
        if (!detail::uses_threshold(m) || thetas.empty()) thetas = {ex.engine.threshold};
        for (double theta : thetas) {
            EngineConfig cfg = ex.engine;
            cfg.mode = m;
            cfg.threshold = theta;
            cfg.validate();
            const auto tm = detail::time_mode(queries, cfg, db, w, ex);
            rep.rows.push_back(make_row(m, detail::uses_threshold(m) ? theta : kNaN, tm));
        }
    }
    return rep;
}

inline const std::vector<double>& default_sweep_grid() {
    static const std::vector<double> grid{0.995, 0.99, 0.97, 0.95, 0.90, 0.85};
    return grid;
}

struct SweepPoint {
    double theta = 0.0;
    HitStats hits;      // similarity and length gate
    HitStats raw_hits;  // similarity only
    double quality_proxy = 1.0;
};

// Hit statistics and quality proxy per threshold. The top-1 neighbour does
// not depend on the threshold, so each query is searched once and each
// threshold only decides whether that neighbour's maps are used.
inline std::vector<SweepPoint> sweep_threshold(std::span<const double> thetas, std::span<const Sentence> queries,
                                               const Databases& db, const ModelWeights& w) {
    for (double t : thetas)
        if (!(t > 0.0 && t <= 1.0)) throw InputError("sweep_threshold: thresholds must be in (0, 1]");
    struct QueryState {
        double sim = 0.0;
        bool length_ok = false;
        double reuse_cos = 1.0;  // cosine between reuse and baseline embeddings when length_ok
    };
    std::vector<QueryState> states;
    states.reserve(queries.size());
    for (const auto& s : queries) {
        // Threshold 0+ admits any neighbour; the gate is applied per theta below.
        auto found = search_engine(s, std::numeric_limits<double>::denorm_min(), db, w);
        QueryState st;
        st.sim = found.sim;
        st.length_ok = found.searched && found.length_ok;
        if (st.length_ok) {
            const auto base = sentence_embedding(forward_with_cache(nullptr, found.embedding, w));
            const auto reuse = sentence_embedding(forward_with_cache(&*found.cache, found.embedding, w));
            st.reuse_cos = cosine_similarity(reuse, base);
        }
        states.push_back(st);
    }
    std::vector<SweepPoint> out;
    for (double t : thetas) {
        SweepPoint p;
        p.theta = t;
        double q = 0.0;
        for (const auto& st : states) {
            const bool raw = !db.index.empty() && st.sim >= t;
            const bool hit = raw && st.length_ok;
            p.raw_hits.record(raw);
            p.hits.record(hit);
            q += hit ? st.reuse_cos : 1.0;
        }
        p.quality_proxy = states.empty() ? 1.0 : q / static_cast<double>(states.size());
        out.push_back(p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV

inline constexpr std::string_view kCsvHeader =
    "mode,theta,hit_rate,attn_ms,e2e_ms,attn_speedup,e2e_speedup,quality_proxy,gamma";

inline std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_number(std::string_view s) {
    if (s == "nan") return kNaN;
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw FormatError("csv: bad number \"" + std::string(s) + "\"");
    return v;
}

inline std::string format_csv(const BenchReport& rep) {
    std::string out(kCsvHeader);
    out += '\n';
    for (const auto& r : rep.rows) {
        out += mode_name(r.mode);
        for (double v : {r.theta, r.hit_rate, r.attn_ms, r.e2e_ms, r.attn_speedup, r.e2e_speedup, r.quality_proxy,
                         r.gamma}) {
            out += ',';
            out += format_number(v);
        }
        out += '\n';
    }
    return out;
}

inline void emit_csv(const BenchReport& rep, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot write csv " + path.string());
    os << format_csv(rep);
    os.flush();
    if (!os) throw FormatError("error writing csv " + path.string());
}

// Inverse of format_csv for the CSV columns (stage breakdown is not stored).
inline std::vector<ReportRow> parse_csv(std::string_view text) {
    std::vector<ReportRow> rows;
    std::size_t pos = 0;
    bool header = true;
    while (pos < text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string_view::npos) eol = text.size();
        const std::string_view line = text.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty()) continue;
        if (header) {
            if (line != kCsvHeader) throw FormatError("csv: unexpected header");
            header = false;
            continue;
        }
        std::vector<std::string_view> f;
        std::size_t s = 0;
        while (true) {
            const std::size_t c = line.find(',', s);
            f.push_back(line.substr(s, c == std::string_view::npos ? std::string_view::npos : c - s));
            if (c == std::string_view::npos) break;
            s = c + 1;
        }
        if (f.size() != 9) throw FormatError("csv: expected 9 fields, got " + std::to_string(f.size()));
        ReportRow r;
        r.mode = parse_mode(f[0]);
        r.theta = parse_number(f[1]);
        r.hit_rate = parse_number(f[2]);
        r.attn_ms = parse_number(f[3]);
        r.e2e_ms = parse_number(f[4]);
        r.attn_speedup = parse_number(f[5]);
        r.e2e_speedup = parse_number(f[6]);
        r.quality_proxy = parse_number(f[7]);
        r.gamma = parse_number(f[8]);
        rows.push_back(r);
    }
    if (header) throw FormatError("csv: missing header");
    return rows;
}

}  // namespace attncache
