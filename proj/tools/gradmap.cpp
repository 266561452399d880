// gradmap: train a toy decoder, prune it by gradient importance, compensate
// the pruned model, evaluate and benchmark.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gradmap/calibration.hpp"
#include "gradmap/checkpoint.hpp"
#include "gradmap/compensation.hpp"
#include "gradmap/corpus.hpp"
#include "gradmap/drift.hpp"
#include "gradmap/evaluation.hpp"
#include "gradmap/pruner.hpp"
#include "gradmap/report.hpp"
#include "gradmap/trainer.hpp"

namespace {

using namespace gradmap;

struct Corpus {
    std::string path;
    std::string text;
    std::vector<Token> tokens;
};

Corpus load_corpus(const std::string& flag, const std::string& path) {
    if (path.empty()) throw InputError(flag + " is required");
    Corpus c;
    c.path = path;
    try {
        c.text = read_text_file(path);
    } catch (const Error& e) {
        throw InputError(flag + ": " + e.what());
    }
    c.tokens = tokenize(c.text);
    return c;
}

TransformerModel load_model(const std::string& flag, const std::string& path) {
    if (path.empty()) throw InputError(flag + " is required");
    try {
        return load_checkpoint(path);
    } catch (const FormatError& e) {
        throw FormatError(flag + " (" + path + "): " + e.what(), e.offset());
    } catch (const InputError& e) {
        throw InputError(flag + " (" + path + "): " + e.what());
    }
}

void write_text(const std::string& path, const std::string& text) {
    write_file_bytes(path, std::vector<char>(text.begin(), text.end()));
}

void log(const std::string& msg) { std::cerr << "[gradmap] " << msg << "\n"; }

class StageTimer {
public:
    explicit StageTimer(bool enabled) : enabled_(enabled) {}
    void mark(const std::string& stage) {
        const auto now = std::chrono::steady_clock::now();
        if (enabled_) times_[stage] = std::chrono::duration<double>(now - last_).count();
        last_ = now;
    }
    void attach(Json& report) const {
        if (enabled_) report["wall_seconds"] = times_;
    }

private:
    bool enabled_;
    std::map<std::string, double> times_;
    std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

struct Common {
    std::size_t threads = 0;
    bool record_timing = false;

    void add_threads(CLI::App* cmd) {
        cmd->add_option("--threads", threads, "Worker threads (default: GRADMAP_THREADS or all cores)");
    }
    void add_timing(CLI::App* cmd) {
        cmd->add_flag("--record-timing", record_timing, "Include per-stage wall times in the report");
    }
    std::size_t resolve_threads() const { return threads ? threads : default_threads(); }
};

// --- train-toy ---------------------------------------------------------------

struct TrainArgs {
    Common common;
    ModelConfig model;
    TrainConfig train;
    std::string corpus, out, loss_csv, precision = "f64";
    double init_std = 0.02;
};

int run_train(TrainArgs& a) {
    const Corpus corpus = load_corpus("--corpus", a.corpus);
    if (a.out.empty()) throw InputError("--out is required");
    a.model.vocab_size = kByteVocab;
    if (a.precision == "f32") a.model.precision = Precision::f32;
    else if (a.precision == "f64") a.model.precision = Precision::f64;
    else throw InputError("--precision must be f32 or f64");
    a.train.threads = a.common.resolve_threads();

    TransformerModel model = TransformerModel::initialize(a.model, a.train.seed, a.init_std);
    log("training " + std::to_string(a.model.n_layers) + " layers, d=" + std::to_string(a.model.d_model) +
        ", " + std::to_string(a.train.steps) + " steps");
    const std::size_t every = std::max<std::size_t>(1, a.train.steps / 20);
    TrainResult res = train(std::move(model), corpus.tokens, a.train, [&](std::size_t step, double loss) {
        if (step % every == 0) log("step " + std::to_string(step) + " loss " + std::to_string(loss));
    });
    Json prov = {{"command", "train-toy"},
                 {"corpus", corpus_json(corpus.path, corpus.text)},
                 {"seed", a.train.seed},
                 {"steps", a.train.steps},
                 {"batch", a.train.batch},
                 {"seq_len", a.train.seq_len},
                 {"lr", a.train.lr},
                 {"init_std", a.init_std}};
    res.model.set_provenance(prov.dump());
    save_checkpoint(res.model, a.out);

    std::ostringstream csv;
    csv.precision(17);
    csv << "step,loss\r\n";
    for (std::size_t i = 0; i < res.losses.size(); ++i) csv << i + 1 << "," << res.losses[i] << "\r\n";
    write_text(a.loss_csv.empty() ? a.out + ".loss.csv" : a.loss_csv, csv.str());
    log("wrote " + a.out);
    return 0;
}

// --- prune -------------------------------------------------------------------

struct CalibArgs {
    std::string corpus;
    std::size_t n = 128;
    std::size_t t = 128;
    std::uint64_t seed = 42;

    void add(CLI::App* cmd, bool required) {
        auto* o = cmd->add_option("--calib-corpus", corpus, "Calibration text file");
        if (required) o->required();
        cmd->add_option("--calib-n", n, "Calibration samples N");
        cmd->add_option("--calib-t", t, "Calibration sequence length T");
    }
    Json json(const Corpus& c) const {
        return {{"corpus", corpus_json(c.path, c.text)}, {"n", n}, {"t", t}, {"seed", seed}};
    }
};

struct PruneArgs {
    Common common;
    CalibArgs calib;
    std::string model, out, report, metric = "grad-norm", mode = "iterative";
    double ratio = 0.25;
};

int run_prune(PruneArgs& a) {
    StageTimer timer(a.common.record_timing);
    const TransformerModel base = load_model("--model", a.model);
    const Metric metric = parse_metric(a.metric);
    const PruneMode mode = parse_mode(a.mode);
    if (a.out.empty()) throw InputError("--out is required");
    const Corpus corpus = load_corpus("--calib-corpus", a.calib.corpus);
    const CalibrationSet calib = build_calibration(corpus.tokens, a.calib.n, a.calib.t, a.calib.seed, a.calib.corpus);
    timer.mark("load");

    const std::size_t k = compute_K(base.layers().size(), a.ratio);
    ScoringOptions so;
    so.threads = a.common.resolve_threads();
    so.seed = a.calib.seed;
    log("pruning K=" + std::to_string(k) + " of " + std::to_string(base.layers().size()) + " layers (" +
        a.metric + ", " + a.mode + ")");
    PruneResult res = prune(mode, base, calib, k, metric, so);
    timer.mark("prune");

    Json prov = {{"command", "prune"}, {"calibration", a.calib.json(corpus)}, {"parent", base.provenance()}};
    res.model.set_provenance(prov.dump());
    save_checkpoint(res.model, a.out);
    timer.mark("save");

    Json report = report_header("prune");
    report["config"] = {{"model", a.model},   {"ratio", a.ratio}, {"metric", a.metric},
                        {"mode", a.mode},     {"out", a.out},     {"calibration", a.calib.json(corpus)}};
    report["calibration_offsets"] = calib.offsets;
    report["prune"] = to_json(res.run);
    timer.attach(report);
    const std::string text = dump_report(report);
    if (!a.report.empty()) write_text(a.report, text);
    log("removed layers " + join_indices(res.run.removal_order));
    return 0;
}

// --- compensate --------------------------------------------------------------

struct CompensateArgs {
    Common common;
    CalibArgs calib;
    std::string original, pruned, out, report, drift_csv, curve_csv;
    std::string solver = "closed-form", side = "left", target = "w-down", strategy = "max-drift";
    CompensationConfig cfg;
};

int run_compensate(CompensateArgs& a) {
    StageTimer timer(a.common.record_timing);
    const TransformerModel original = load_model("--original", a.original);
    const TransformerModel pruned = load_model("--pruned", a.pruned);
    if (a.out.empty()) throw InputError("--out is required");
    a.cfg.solver = parse_solver(a.solver);
    a.cfg.side = parse_side(a.side);
    a.cfg.target = parse_target(a.target);
    a.cfg.strategy = parse_strategy(a.strategy);
    a.cfg.seed = a.calib.seed;
    a.cfg.threads = a.common.resolve_threads();

    // Without explicit calibration flags, reuse the set recorded by `prune`.
    if (a.calib.corpus.empty()) {
        Json prov;
        try {
            prov = Json::parse(pruned.provenance());
            const Json& c = prov.at("calibration");
            a.calib.corpus = c.at("corpus").at("path").get<std::string>();
            a.calib.n = c.at("n").get<std::size_t>();
            a.calib.t = c.at("t").get<std::size_t>();
            a.calib.seed = c.at("seed").get<std::uint64_t>();
        } catch (const nlohmann::json::exception&) {
            throw InputError("--calib-corpus is required (pruned checkpoint records no calibration set)");
        }
    }
    const Corpus corpus = load_corpus("--calib-corpus", a.calib.corpus);
    const CalibrationSet calib = build_calibration(corpus.tokens, a.calib.n, a.calib.t, a.calib.seed, a.calib.corpus);
    timer.mark("load");

    log("compensating (" + a.strategy + ", Z=" + std::to_string(a.cfg.z) + ", " + a.solver + ")");
    CompensationOutcome res = compensate(original, pruned, calib, a.cfg);
    timer.mark("compensate");

    Json folded = Json::array();
    for (const auto& s : res.solutions) {
        folded.push_back({{"layer", s.layer},
                          {"side", side_name(s.side)},
                          {"target", target_name(s.target)},
                          {"lambda", s.lambda},
                          {"solver", solver_name(s.solver)}});
    }
    Json prov = {{"command", "compensate"},
                 {"calibration", a.calib.json(corpus)},
                 {"compensation", folded},
                 {"parent", pruned.provenance()}};
    res.model.set_provenance(prov.dump());
    save_checkpoint(res.model, a.out);
    if (!a.drift_csv.empty()) write_text(a.drift_csv, drift_csv(res.drift));
    if (!a.curve_csv.empty()) {
        std::ostringstream os;
        os.precision(17);
        os << "layer,step,objective\r\n";
        for (const auto& s : res.solutions) {
            for (const auto& [step, obj] : s.curve) os << s.layer << "," << step << "," << obj << "\r\n";
        }
        write_text(a.curve_csv, os.str());
    }
    timer.mark("save");

    Json report = report_header("compensate");
    Json config = {{"original", a.original}, {"pruned", a.pruned},   {"out", a.out},
                   {"solver", a.solver},     {"side", a.side},       {"target", a.target},
                   {"strategy", a.strategy}, {"z", a.cfg.z},         {"lambda", a.cfg.lambda},
                   {"calibration", a.calib.json(corpus)}};
    if (a.cfg.solver == SolverKind::iterative) {
        config["lr"] = a.cfg.lr;
        config["steps"] = a.cfg.steps;
    }
    report["config"] = config;
    report["drift"] = to_json(res.drift);
    report["selected_layers"] = res.selected;
    Json sols = Json::array();
    for (const auto& s : res.solutions) sols.push_back(to_json(s));
    report["solutions"] = sols;
    timer.attach(report);
    if (!a.report.empty()) write_text(a.report, dump_report(report));
    for (const auto& s : res.solutions) {
        log("layer " + std::to_string(s.layer) + ": objective " + std::to_string(s.initial.total) + " -> " +
            std::to_string(s.final.total));
    }
    return 0;
}

// --- eval / bench --------------------------------------------------------------

struct EvalArgs {
    Common common;
    std::string model, corpus, report;
    std::size_t seq = 128;
};

int run_eval(EvalArgs& a) {
    const TransformerModel model = load_model("--model", a.model);
    const Corpus corpus = load_corpus("--corpus", a.corpus);
    const EvalResult r = eval_perplexity(model, corpus.tokens, a.seq, a.corpus, a.common.resolve_threads());
    std::printf("perplexity %.6f over %zu tokens\n", r.perplexity, r.tokens_evaluated);
    Json report = report_header("eval");
    report["config"] = {{"model", a.model}, {"corpus", corpus_json(corpus.path, corpus.text)}, {"seq", a.seq}};
    report["eval"] = to_json(r);
    if (!a.report.empty()) write_text(a.report, dump_report(report));
    return 0;
}

struct BenchArgs {
    std::string model, report;
    std::size_t batch = 4, seq = 64, reps = 10, warmup = 2;
};

int run_bench(BenchArgs& a) {
    const TransformerModel model = load_model("--model", a.model);
    const BenchResult r = bench_forward(model, a.batch, a.seq, a.reps, a.warmup);
    Json report = report_header("bench");
    report["config"] = {{"model", a.model}};
    report["bench"] = to_json(r);
    const std::string text = dump_report(report);
    std::cout << text;
    if (!a.report.empty()) write_text(a.report, text);
    return 0;
}

// --- compare -----------------------------------------------------------------

std::vector<GridCell> parse_grid(const std::string& spec) {
    if (spec == "default") return default_grid();
    std::vector<GridCell> cells;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto p1 = item.find('/');
        const auto p2 = item.find('/', p1 == std::string::npos ? p1 : p1 + 1);
        if (p1 == std::string::npos || p2 == std::string::npos) {
            throw InputError("--grid entries look like metric/mode/comp|plain, got '" + item + "'");
        }
        GridCell c;
        c.metric = parse_metric(item.substr(0, p1));
        c.mode = parse_mode(item.substr(p1 + 1, p2 - p1 - 1));
        const std::string comp = item.substr(p2 + 1);
        if (comp != "comp" && comp != "plain") throw InputError("--grid: expected comp or plain, got '" + comp + "'");
        c.compensate = comp == "comp";
        cells.push_back(c);
    }
    if (cells.empty()) throw InputError("--grid is empty");
    return cells;
}

struct CompareArgs {
    Common common;
    CalibArgs calib;
    std::string model, eval_corpus, grid = "default", csv, json;
    std::size_t seeds = 10, eval_seq = 128;
    double ratio = 0.25, lambda = 1e-3;
};

int run_compare(CompareArgs& a) {
    const TransformerModel base = load_model("--model", a.model);
    const Corpus calib = load_corpus("--calib-corpus", a.calib.corpus);
    const Corpus held = load_corpus("--eval-corpus", a.eval_corpus);
    CompareConfig cfg;
    cfg.cells = parse_grid(a.grid);
    if (a.seeds < 1) throw InputError("--seeds must be >= 1");
    cfg.seeds.clear();
    for (std::size_t i = 0; i < a.seeds; ++i) cfg.seeds.push_back(a.calib.seed + i);
    cfg.ratio = a.ratio;
    cfg.calib_n = a.calib.n;
    cfg.calib_t = a.calib.t;
    cfg.eval_t = a.eval_seq;
    cfg.compensation.lambda = a.lambda;
    cfg.threads = a.common.resolve_threads();
    log("comparing " + std::to_string(cfg.cells.size()) + " cells over " + std::to_string(a.seeds) + " seeds");
    const ComparisonTable table = compare_runs(base, calib.tokens, held.tokens, cfg);

    Json out = report_header("compare");
    Json grid = Json::array();
    for (const auto& c : cfg.cells) grid.push_back(c.label());
    out["manifest"] = {{"model", a.model},
                       {"model_provenance", base.provenance()},
                       {"calib_corpus", corpus_json(calib.path, calib.text)},
                       {"eval_corpus", corpus_json(held.path, held.text)},
                       {"grid", grid},
                       {"seeds", cfg.seeds},
                       {"ratio", cfg.ratio},
                       {"calib_n", cfg.calib_n},
                       {"calib_t", cfg.calib_t},
                       {"eval_seq", cfg.eval_t},
                       {"compensation",
                        {{"lambda", cfg.compensation.lambda},
                         {"z", cfg.compensation.z},
                         {"side", side_name(cfg.compensation.side)},
                         {"target", target_name(cfg.compensation.target)},
                         {"strategy", strategy_name(cfg.compensation.strategy)},
                         {"solver", solver_name(cfg.compensation.solver)}}}};
    out["table"] = to_json(table);
    const std::string text = dump_report(out);
    if (!a.json.empty()) write_text(a.json, text);
    if (!a.csv.empty()) write_text(a.csv, comparison_csv(table));
    for (const auto& c : table.claims) {
        std::printf("%-28s %-40s wins %zu losses %zu ties %zu\n", c.claim.c_str(), (c.better + " vs " + c.worse).c_str(),
                    c.wins, c.losses, c.ties);
    }
    return 0;
}

// --- gen-corpus --------------------------------------------------------------

struct GenArgs {
    std::size_t bytes = 1 << 20;
    std::uint64_t seed = 1;
    std::string out;
};

int run_gen(GenArgs& a) {
    if (a.out.empty()) throw InputError("--out is required");
    write_text(a.out, synthetic_corpus(a.bytes, a.seed));
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gradient-based layer pruning with projection compensation"};
    app.require_subcommand(1);

    TrainArgs train;
    auto* c_train = app.add_subcommand("train-toy", "Train a toy decoder on a byte corpus");
    c_train->add_option("--layers", train.model.n_layers)->default_val(8);
    c_train->add_option("--dmodel", train.model.d_model)->default_val(64);
    c_train->add_option("--dffn", train.model.d_ffn)->default_val(256);
    c_train->add_option("--heads", train.model.n_heads)->default_val(4);
    c_train->add_option("--max-seq", train.model.max_seq)->default_val(128);
    c_train->add_option("--precision", train.precision, "Checkpoint payload precision (f32|f64)");
    c_train->add_option("--corpus", train.corpus, "Training text file");
    c_train->add_option("--steps", train.train.steps)->default_val(1000);
    c_train->add_option("--batch", train.train.batch)->default_val(8);
    c_train->add_option("--seq", train.train.seq_len)->default_val(64);
    c_train->add_option("--lr", train.train.lr)->default_val(3e-4);
    c_train->add_option("--clip", train.train.clip_norm)->default_val(1.0);
    c_train->add_option("--init-std", train.init_std);
    c_train->add_option("--seed", train.train.seed)->default_val(42);
    c_train->add_option("--out", train.out, "Checkpoint path");
    c_train->add_option("--loss-csv", train.loss_csv, "Loss curve CSV (default: <out>.loss.csv)");
    train.common.add_threads(c_train);

    PruneArgs prune_args;
    auto* c_prune = app.add_subcommand("prune", "Remove layers by importance score");
    c_prune->add_option("--model", prune_args.model, "Base checkpoint");
    c_prune->add_option("--ratio", prune_args.ratio, "Fraction of layers to remove");
    c_prune->add_option("--metric", prune_args.metric, "grad-norm|block-influence|loss-delta|random");
    c_prune->add_option("--mode", prune_args.mode, "iterative|one-shot");
    prune_args.calib.add(c_prune, false);
    c_prune->add_option("--seed", prune_args.calib.seed);
    c_prune->add_option("--out", prune_args.out, "Pruned checkpoint path");
    c_prune->add_option("--report", prune_args.report, "Run report JSON");
    prune_args.common.add_threads(c_prune);
    prune_args.common.add_timing(c_prune);

    CompensateArgs comp;
    auto* c_comp = app.add_subcommand("compensate", "Fit and fold a projection compensation matrix");
    c_comp->add_option("--original", comp.original, "Unpruned checkpoint");
    c_comp->add_option("--pruned", comp.pruned, "Pruned checkpoint");
    c_comp->add_option("--solver", comp.solver, "closed-form|iterative");
    c_comp->add_option("--lambda", comp.cfg.lambda);
    c_comp->add_option("--side", comp.side, "left|right");
    c_comp->add_option("--target", comp.target, "w-down|w-up|w-gate|w-o|w-q|w-k|w-v");
    c_comp->add_option("--strategy", comp.strategy, "max-drift|local");
    c_comp->add_option("--z", comp.cfg.z, "Number of max-drift layers to compensate");
    c_comp->add_option("--lr", comp.cfg.lr, "Iterative solver learning rate");
    c_comp->add_option("--steps", comp.cfg.steps, "Iterative solver steps");
    comp.calib.add(c_comp, false);
    c_comp->add_option("--seed", comp.calib.seed);
    c_comp->add_option("--out", comp.out, "Compensated checkpoint path");
    c_comp->add_option("--report", comp.report, "Run report JSON");
    c_comp->add_option("--drift-csv", comp.drift_csv, "Per-layer drift table");
    c_comp->add_option("--curve-csv", comp.curve_csv, "Iterative objective curve (layer,step,objective)");
    comp.common.add_threads(c_comp);
    comp.common.add_timing(c_comp);

    EvalArgs eval;
    auto* c_eval = app.add_subcommand("eval", "Held-out perplexity");
    c_eval->add_option("--model", eval.model);
    c_eval->add_option("--corpus", eval.corpus);
    c_eval->add_option("--seq", eval.seq, "Segment length");
    c_eval->add_option("--report", eval.report, "Result JSON");
    eval.common.add_threads(c_eval);

    BenchArgs bench;
    auto* c_bench = app.add_subcommand("bench", "Forward latency and throughput");
    c_bench->add_option("--model", bench.model);
    c_bench->add_option("--batch", bench.batch);
    c_bench->add_option("--seq", bench.seq);
    c_bench->add_option("--reps", bench.reps);
    c_bench->add_option("--warmup", bench.warmup);
    c_bench->add_option("--report", bench.report, "Also write the JSON here");

    CompareArgs cmp;
    auto* c_cmp = app.add_subcommand("compare", "Multi-seed comparison grid");
    c_cmp->add_option("--model", cmp.model, "Base checkpoint");
    c_cmp->add_option("--grid", cmp.grid, "'default' or comma list of metric/mode/comp|plain");
    c_cmp->add_option("--seeds", cmp.seeds, "Number of seeds, starting at --seed");
    c_cmp->add_option("--seed", cmp.calib.seed);
    c_cmp->add_option("--ratio", cmp.ratio);
    c_cmp->add_option("--lambda", cmp.lambda);
    cmp.calib.add(c_cmp, false);
    c_cmp->add_option("--eval-corpus", cmp.eval_corpus, "Held-out text file");
    c_cmp->add_option("--eval-seq", cmp.eval_seq);
    c_cmp->add_option("--csv", cmp.csv);
    c_cmp->add_option("--json", cmp.json);
    cmp.common.add_threads(c_cmp);

    GenArgs gen;
    auto* c_gen = app.add_subcommand("gen-corpus", "Write the bundled synthetic corpus");
    c_gen->add_option("--bytes", gen.bytes);
    c_gen->add_option("--seed", gen.seed);
    c_gen->add_option("--out", gen.out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (*c_train) return run_train(train);
        if (*c_prune) return run_prune(prune_args);
        if (*c_comp) return run_compensate(comp);
        if (*c_eval) return run_eval(eval);
        if (*c_bench) return run_bench(bench);
        if (*c_cmp) return run_compare(cmp);
        if (*c_gen) return run_gen(gen);
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
