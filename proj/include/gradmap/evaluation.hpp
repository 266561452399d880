#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#if defined(__linux__)
#include <pthread.h>
#include <sched.h>
#endif

#include "gradmap/calibration.hpp"
#include "gradmap/compensation.hpp"
#include "gradmap/importance.hpp"
#include "gradmap/model.hpp"
#include "gradmap/parallel.hpp"
#include "gradmap/pruner.hpp"

namespace gradmap {

struct EvalResult {
    double perplexity = 0.0;
    double mean_nll = 0.0;
    std::size_t tokens_evaluated = 0;
    std::size_t segments = 0;
    std::size_t segment_length = 0;
    std::string corpus;
};

/// Token-weighted perplexity over non-overlapping segments: segment j feeds
/// tokens [jT, jT+T) and scores the next token at each position.
inline EvalResult eval_perplexity(const TransformerModel& model, std::span<const Token> corpus,
                                  std::size_t t_eval, std::string corpus_id = {}, std::size_t threads = 1) {
    if (t_eval < 1) throw InputError("eval: segment length must be >= 1");
    if (t_eval > model.config().max_seq) {
        throw InputError("eval: segment length " + std::to_string(t_eval) + " exceeds max_seq " +
                         std::to_string(model.config().max_seq));
    }
    if (corpus.size() < t_eval + 1) {
        throw InputError("eval: corpus has " + std::to_string(corpus.size()) + " tokens, need at least " +
                         std::to_string(t_eval + 1));
    }
    const std::size_t segments = (corpus.size() - 1) / t_eval;
    auto nll = parallel_map(segments, threads, [&](std::size_t j) {
        const auto begin = corpus.begin() + static_cast<std::ptrdiff_t>(j * t_eval);
        Sample s{{begin, begin + static_cast<std::ptrdiff_t>(t_eval)},
                 {begin + 1, begin + static_cast<std::ptrdiff_t>(t_eval + 1)}};
        return sequence_loss(model, s) * static_cast<double>(t_eval);
    });
    EvalResult r;
    double total = 0.0;
    for (double v : nll) total += v;
    r.segments = segments;
    r.segment_length = t_eval;
    r.tokens_evaluated = segments * t_eval;
    r.mean_nll = total / static_cast<double>(r.tokens_evaluated);
    r.perplexity = std::exp(r.mean_nll);
    r.corpus = std::move(corpus_id);
    if (!std::isfinite(r.perplexity)) throw NumericError("eval: non-finite perplexity");
    return r;
}

struct BenchResult {
    double tokens_per_second = 0.0;
    double latency_ms = 0.0; // median over repetitions, one forward of the whole batch
    std::vector<double> samples_ms;
    std::size_t layers_present = 0;
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::size_t repetitions = 0;
    std::size_t warmup = 0;
};

inline double median(std::vector<double> v) {
    if (v.empty()) throw InputError("median of empty sequence");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

namespace detail {

/// Pins the calling thread to a single CPU for the lifetime of the guard.
class AffinityGuard {
public:
    AffinityGuard() {
#if defined(__linux__)
        if (pthread_getaffinity_np(pthread_self(), sizeof(saved_), &saved_) != 0) return;
        for (int c = 0; c < CPU_SETSIZE; ++c) {
            if (CPU_ISSET(c, &saved_)) {
                cpu_set_t one;
                CPU_ZERO(&one);
                CPU_SET(c, &one);
                active_ = pthread_setaffinity_np(pthread_self(), sizeof(one), &one) == 0;
                break;
            }
        }
#endif
    }
    ~AffinityGuard() {
#if defined(__linux__)
        if (active_) pthread_setaffinity_np(pthread_self(), sizeof(saved_), &saved_);
#endif
    }
    AffinityGuard(const AffinityGuard&) = delete;
    AffinityGuard& operator=(const AffinityGuard&) = delete;

private:
#if defined(__linux__)
    cpu_set_t saved_{};
#endif
    bool active_ = false;
};

} // namespace detail

/// Single-threaded forward timing on fixed synthetic token ids.
inline BenchResult bench_forward(const TransformerModel& model, std::size_t batch, std::size_t seq,
                                 std::size_t reps, std::size_t warmup = 2) {
    if (reps < 3) throw InputError("bench: repetitions must be >= 3");
    if (batch < 1 || seq < 1) throw InputError("bench: batch and seq must be >= 1");
    if (seq > model.config().max_seq) throw InputError("bench: seq exceeds max_seq");
    const std::size_t vocab = std::min<std::size_t>(model.config().vocab_size, 256);
    std::vector<std::vector<Token>> inputs(batch, std::vector<Token>(seq));
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < seq; ++i) inputs[b][i] = static_cast<Token>((b * 131 + i * 31 + 7) % vocab);
    }
    detail::AffinityGuard pin;
    volatile double sink = 0.0;
    auto run_once = [&] {
        for (const auto& in : inputs) sink = sink + forward(model, in).logits[0];
    };
    for (std::size_t i = 0; i < warmup; ++i) run_once();
    BenchResult r;
    for (std::size_t i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        run_once();
        r.samples_ms.push_back(
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    r.latency_ms = median(r.samples_ms);
    r.tokens_per_second = static_cast<double>(batch * seq) / (r.latency_ms / 1000.0);
    r.layers_present = model.layers().size();
    r.batch = batch;
    r.seq = seq;
    r.repetitions = reps;
    r.warmup = warmup;
    return r;
}

// --- comparison grid ---------------------------------------------------------

struct GridCell {
    Metric metric = Metric::grad_norm;
    PruneMode mode = PruneMode::iterative;
    bool compensate = false;

    std::string label() const {
        return std::string(metric_name(metric)) + "/" + std::string(mode_name(mode)) +
               (compensate ? "/comp" : "/plain");
    }
};

/// Every metric x mode x {plain, compensated} combination.
inline std::vector<GridCell> default_grid() {
    std::vector<GridCell> g;
    for (Metric m : {Metric::grad_norm, Metric::block_influence, Metric::loss_delta, Metric::random}) {
        for (PruneMode mode : {PruneMode::iterative, PruneMode::one_shot}) {
            for (bool c : {false, true}) g.push_back({m, mode, c});
        }
    }
    return g;
}

struct CompareConfig {
    std::vector<GridCell> cells = default_grid();
    std::vector<std::uint64_t> seeds = {0};
    double ratio = 0.25;
    std::size_t calib_n = 32;
    std::size_t calib_t = 64;
    std::size_t eval_t = 64;
    CompensationConfig compensation;
    std::size_t threads = 1;
};

struct CellRun {
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double perplexity = 0.0;
    std::size_t forward_passes = 0;
    std::size_t backward_passes = 0;
    std::vector<int> removed;
};

struct CellSummary {
    GridCell cell;
    std::vector<CellRun> runs; // one per seed, in seed order
    std::optional<double> median_perplexity;
    std::optional<double> median_passes; // forward + backward passes spent on pruning decisions
};

/// A directional claim "a beats b", tallied per seed.
struct ClaimTally {
    std::string claim;
    std::string better; // cell label expected to have lower perplexity
    std::string worse;
    std::size_t wins = 0;
    std::size_t losses = 0;
    std::size_t ties = 0;
};

struct ComparisonTable {
    std::vector<CellSummary> cells;
    std::vector<ClaimTally> claims;
};

/// For every seed and cell: calibrate with that seed, prune, optionally
/// compensate, evaluate. Failing cells are recorded and the grid continues.
/// Pruning is shared between the plain and compensated variants of a cell.
inline ComparisonTable compare_runs(const TransformerModel& base, std::span<const Token> calib_corpus,
                                    std::span<const Token> held_out, const CompareConfig& cfg) {
    if (cfg.cells.empty()) throw InputError("compare: empty grid");
    if (cfg.seeds.empty()) throw InputError("compare: no seeds");
    const std::size_t k = compute_K(base.layers().size(), cfg.ratio);
    ComparisonTable table;
    for (const auto& c : cfg.cells) table.cells.push_back({c, {}, {}, {}});

    for (std::uint64_t seed : cfg.seeds) {
        std::optional<CalibrationSet> calib;
        std::string calib_error;
        try {
            calib = build_calibration(calib_corpus, cfg.calib_n, cfg.calib_t, seed, "compare");
        } catch (const Error& e) {
            calib_error = e.what();
        }
        std::map<std::pair<Metric, PruneMode>, std::optional<PruneResult>> pruned;
        std::map<std::pair<Metric, PruneMode>, std::string> prune_error;
        for (auto& summary : table.cells) {
            CellRun run;
            run.seed = seed;
            try {
                if (!calib) throw InputError(calib_error);
                const auto key = std::make_pair(summary.cell.metric, summary.cell.mode);
                if (!pruned.count(key)) {
                    try {
                        ScoringOptions so;
                        so.threads = cfg.threads;
                        so.seed = seed;
                        pruned[key] = prune(summary.cell.mode, base, *calib, k, summary.cell.metric, so);
                    } catch (const Error& e) {
                        pruned[key] = std::nullopt;
                        prune_error[key] = e.what();
                    }
                }
                const auto& pr = pruned.at(key);
                if (!pr) throw InputError(prune_error.at(key));
                for (const auto& st : pr->run.history) {
                    run.forward_passes += st.forward_passes;
                    run.backward_passes += st.backward_passes;
                }
                run.removed = pr->run.removal_order;
                TransformerModel model = pr->model;
                if (summary.cell.compensate) {
                    CompensationConfig cc = cfg.compensation;
                    cc.threads = cfg.threads;
                    cc.seed = seed;
                    model = compensate(base, model, *calib, cc).model;
                }
                run.perplexity = eval_perplexity(model, held_out, cfg.eval_t, "held-out", cfg.threads).perplexity;
                run.ok = true;
            } catch (const std::exception& e) {
                run.error = e.what();
            }
            summary.runs.push_back(std::move(run));
        }
    }

    for (auto& s : table.cells) {
        std::vector<double> ppl, passes;
        for (const auto& r : s.runs) {
            if (!r.ok) continue;
            ppl.push_back(r.perplexity);
            passes.push_back(static_cast<double>(r.forward_passes + r.backward_passes));
        }
        if (!ppl.empty()) {
            s.median_perplexity = median(ppl);
            s.median_passes = median(passes);
        }
    }

    auto find = [&](const GridCell& c) -> const CellSummary* {
        for (const auto& s : table.cells) {
            if (s.cell.metric == c.metric && s.cell.mode == c.mode && s.cell.compensate == c.compensate) return &s;
        }
        return nullptr;
    };
    auto tally = [&](std::string claim, const GridCell& better, const GridCell& worse) {
        const CellSummary* a = find(better);
        const CellSummary* b = find(worse);
        if (!a || !b) return;
        ClaimTally t{std::move(claim), better.label(), worse.label(), 0, 0, 0};
        for (std::size_t i = 0; i < a->runs.size(); ++i) {
            if (!a->runs[i].ok || !b->runs[i].ok) continue;
            const double pa = a->runs[i].perplexity, pb = b->runs[i].perplexity;
            (pa < pb ? t.wins : pa > pb ? t.losses : t.ties) += 1;
        }
        table.claims.push_back(std::move(t));
    };
    for (Metric m : {Metric::grad_norm, Metric::block_influence, Metric::loss_delta, Metric::random}) {
        for (PruneMode mode : {PruneMode::iterative, PruneMode::one_shot}) {
            tally("compensated <= plain", {m, mode, true}, {m, mode, false});
        }
        for (bool c : {false, true}) {
            tally("iterative <= one-shot", {m, PruneMode::iterative, c}, {m, PruneMode::one_shot, c});
        }
    }
    for (Metric m : {Metric::block_influence, Metric::loss_delta, Metric::random}) {
        for (PruneMode mode : {PruneMode::iterative, PruneMode::one_shot}) {
            for (bool c : {false, true}) {
                tally("grad-norm <= " + std::string(metric_name(m)), {Metric::grad_norm, mode, c}, {m, mode, c});
            }
        }
    }
    return table;
}

namespace detail {
inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}
} // namespace detail

/// One row per (cell, seed) plus one median row per cell (seed column "median").
inline std::string comparison_csv(const ComparisonTable& t) {
    std::ostringstream os;
    os.precision(17);
    os << "metric,mode,compensated,seed,perplexity,forward_passes,backward_passes,removed,error\r\n";
    for (const auto& s : t.cells) {
        const std::string prefix = std::string(metric_name(s.cell.metric)) + "," +
                                   std::string(mode_name(s.cell.mode)) + "," +
                                   (s.cell.compensate ? "true" : "false") + ",";
        for (const auto& r : s.runs) {
            std::string removed;
            for (std::size_t i = 0; i < r.removed.size(); ++i) {
                removed += (i ? "," : "") + std::to_string(r.removed[i]);
            }
            os << prefix << r.seed << ",";
            if (r.ok) os << r.perplexity;
            os << "," << r.forward_passes << "," << r.backward_passes << "," << detail::csv_field(removed) << ","
               << detail::csv_field(r.error) << "\r\n";
        }
        os << prefix << "median,";
        if (s.median_perplexity) os << *s.median_perplexity;
        os << ",,,,\r\n";
    }
    return os.str();
}

} // namespace gradmap
