#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "gradmap/calibration.hpp"
#include "gradmap/checkpoint.hpp"
#include "gradmap/compensation.hpp"
#include "gradmap/corpus.hpp"
#include "gradmap/drift.hpp"
#include "gradmap/evaluation.hpp"
#include "gradmap/pruner.hpp"

namespace gradmap {

/// Report schema tracks the checkpoint format version.
inline constexpr std::uint32_t kReportSchemaVersion = kFormatVersion;

using Json = nlohmann::json;

/// "3,5" style index list.
inline std::string join_indices(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline Json scores_json(const std::map<int, double>& scores) {
    Json j = Json::array();
    for (const auto& [idx, s] : scores) j.push_back({{"layer", idx}, {"score", s}});
    return j;
}

inline Json to_json(const CalibrationSet& c) {
    return {{"n", c.n}, {"t", c.t}, {"seed", c.seed}, {"source", c.source}, {"offsets", c.offsets}};
}

inline Json to_json(const PruneRun& r) {
    Json history = Json::array();
    std::size_t fwd = 0, bwd = 0;
    for (const auto& st : r.history) {
        history.push_back({{"step", st.step},
                           {"removed", st.removed},
                           {"scores", scores_json(st.scores)},
                           {"forward_passes", st.forward_passes},
                           {"backward_passes", st.backward_passes}});
        fwd += st.forward_passes;
        bwd += st.backward_passes;
    }
    return {{"mode", mode_name(r.mode)},
            {"metric", metric_name(r.metric)},
            {"K", r.target_removed},
            {"layers_before", r.layers_before},
            {"ratio", r.ratio()},
            {"scoring_rounds", r.scoring_rounds()},
            {"removal_order", r.removal_order},
            {"pruned_layer_indices", join_indices(r.removal_order)},
            {"forward_passes", fwd},
            {"backward_passes", bwd},
            {"history", history}};
}

inline Json to_json(const DriftReport& d) {
    Json rows = Json::array();
    for (const auto& [idx, v] : d.delta) rows.push_back({{"layer", idx}, {"delta", v}});
    return {{"removed", std::vector<int>(d.removed.begin(), d.removed.end())}, {"tokens", d.tokens}, {"delta", rows}};
}

inline Json to_json(const ObjectiveValue& o) { return {{"total", o.total}, {"mse", o.mse}, {"reg", o.reg}}; }

/// Summary only; W' itself lives in the folded checkpoint.
inline Json to_json(const CompensationSolution& s) {
    Json j = {{"layer", s.layer},
              {"side", side_name(s.side)},
              {"target", target_name(s.target)},
              {"lambda", s.lambda},
              {"solver", solver_name(s.solver)},
              {"objective_initial", to_json(s.initial)},
              {"objective_final", to_json(s.final)},
              {"distance_to_identity", s.distance_to_identity}};
    if (s.solver == SolverKind::iterative) {
        Json curve = Json::array();
        for (const auto& [step, obj] : s.curve) curve.push_back({step, obj});
        j["lr"] = s.lr;
        j["steps"] = s.steps;
        j["seed"] = s.seed;
        j["curve"] = curve;
    }
    return j;
}

inline Json to_json(const EvalResult& e) {
    return {{"perplexity", e.perplexity},
            {"mean_nll", e.mean_nll},
            {"tokens_evaluated", e.tokens_evaluated},
            {"segments", e.segments},
            {"segment_length", e.segment_length},
            {"corpus", e.corpus}};
}

inline Json to_json(const BenchResult& b) {
    return {{"tokens_per_second", b.tokens_per_second},
            {"latency_ms", b.latency_ms},
            {"samples_ms", b.samples_ms},
            {"layers_present", b.layers_present},
            {"batch", b.batch},
            {"seq", b.seq},
            {"repetitions", b.repetitions},
            {"warmup", b.warmup}};
}

inline Json to_json(const ComparisonTable& t) {
    Json cells = Json::array();
    for (const auto& s : t.cells) {
        Json runs = Json::array();
        for (const auto& r : s.runs) {
            Json jr = {{"seed", r.seed},
                       {"ok", r.ok},
                       {"forward_passes", r.forward_passes},
                       {"backward_passes", r.backward_passes},
                       {"removed", r.removed}};
            if (r.ok) jr["perplexity"] = r.perplexity;
            else jr["error"] = r.error;
            runs.push_back(jr);
        }
        Json c = {{"metric", metric_name(s.cell.metric)},
                  {"mode", mode_name(s.cell.mode)},
                  {"compensated", s.cell.compensate},
                  {"runs", runs}};
        c["median_perplexity"] = s.median_perplexity ? Json(*s.median_perplexity) : Json(nullptr);
        c["median_passes"] = s.median_passes ? Json(*s.median_passes) : Json(nullptr);
        cells.push_back(c);
    }
    Json claims = Json::array();
    for (const auto& c : t.claims) {
        claims.push_back({{"claim", c.claim},
                          {"better", c.better},
                          {"worse", c.worse},
                          {"wins", c.wins},
                          {"losses", c.losses},
                          {"ties", c.ties}});
    }
    return {{"cells", cells}, {"claims", claims}};
}

/// Corpus identity recorded in reports.
inline Json corpus_json(const std::string& path, const std::string& text) {
    return {{"path", path}, {"bytes", text.size()}, {"fnv1a64", hex64(fnv1a64(text))}};
}

inline Json report_header(const std::string& command) {
    return {{"schema_version", kReportSchemaVersion}, {"command", command}};
}

inline std::string dump_report(const Json& j) { return j.dump(2) + "\n"; }

} // namespace gradmap
