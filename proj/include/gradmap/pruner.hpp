#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gradmap/importance.hpp"

namespace gradmap {

enum class PruneMode { iterative, one_shot };

inline std::string_view mode_name(PruneMode m) { return m == PruneMode::iterative ? "iterative" : "one-shot"; }

inline PruneMode parse_mode(std::string_view s) {
    if (s == "iterative") return PruneMode::iterative;
    if (s == "one-shot") return PruneMode::one_shot;
    throw InputError("unknown pruning mode '" + std::string(s) + "' (expected iterative or one-shot)");
}

/// One scoring round and the layers it removed.
struct PruneStep {
    std::size_t step = 0;
    std::vector<int> removed;
    std::map<int, double> scores;
    std::size_t forward_passes = 0;
    std::size_t backward_passes = 0;
};

struct PruneRun {
    PruneMode mode = PruneMode::iterative;
    Metric metric = Metric::grad_norm;
    std::size_t target_removed = 0; // K
    std::size_t layers_before = 0;  // L
    std::vector<PruneStep> history;
    std::vector<int> removal_order;
    double scoring_seconds = 0.0;

    double ratio() const { return static_cast<double>(target_removed) / static_cast<double>(layers_before); }
    std::size_t scoring_rounds() const { return history.size(); }
};

struct PruneResult {
    TransformerModel model;
    PruneRun run;
};

/// K = round(ratio * L), at least 1.
inline std::size_t compute_K(std::size_t layers, double ratio) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw InputError("pruning ratio must lie in (0, 1)");
    const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(layers)));
    return std::max<std::size_t>(k, 1);
}

/// Layers ordered by ascending score, ties by ascending original index.
inline std::vector<int> ascending_by_score(const std::map<int, double>& scores) {
    std::vector<std::pair<double, int>> v;
    for (const auto& [idx, s] : scores) v.emplace_back(s, idx);
    std::stable_sort(v.begin(), v.end());
    std::vector<int> out;
    for (const auto& p : v) out.push_back(p.second);
    return out;
}

namespace detail {
inline void require_prunable(const TransformerModel& model, std::size_t k) {
    const std::size_t retained = model.layers().size();
    if (k < 1 || k >= retained) {
        throw InputError("K=" + std::to_string(k) + " out of range: need 1 <= K < " +
                         std::to_string(retained) + " retained layers");
    }
}
} // namespace detail

/// Rescore the current model, remove its argmin layer, repeat K times.
inline PruneResult prune_iterative(const TransformerModel& model, const CalibrationSet& calib,
                                   std::size_t k, Metric metric, const ScoringOptions& opts = {}) {
    detail::require_prunable(model, k);
    PruneResult res{model, {}};
    res.run.mode = PruneMode::iterative;
    res.run.metric = metric;
    res.run.target_removed = k;
    res.run.layers_before = model.layers().size();
    for (std::size_t step = 0; step < k; ++step) {
        ScoringOptions round = opts;
        round.seed = opts.seed + step;
        const ImportanceScores s = score_layers(metric, res.model, calib, round);
        const int worst = ascending_by_score(s.scores).front();
        res.model = res.model.remove_layer(worst);
        res.run.history.push_back({step, {worst}, s.scores, s.forward_passes, s.backward_passes});
        res.run.removal_order.push_back(worst);
        res.run.scoring_seconds += s.wall_time;
    }
    return res;
}

/// Score once on the intact model and drop the K lowest layers together.
inline PruneResult prune_one_shot(const TransformerModel& model, const CalibrationSet& calib,
                                  std::size_t k, Metric metric, const ScoringOptions& opts = {}) {
    detail::require_prunable(model, k);
    PruneResult res{model, {}};
    res.run.mode = PruneMode::one_shot;
    res.run.metric = metric;
    res.run.target_removed = k;
    res.run.layers_before = model.layers().size();
    const ImportanceScores s = score_layers(metric, model, calib, opts);
    const auto order = ascending_by_score(s.scores);
    std::vector<int> removed(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    for (int idx : removed) res.model = res.model.remove_layer(idx);
    res.run.history.push_back({0, removed, s.scores, s.forward_passes, s.backward_passes});
    res.run.removal_order = removed;
    res.run.scoring_seconds = s.wall_time;
    return res;
}

inline PruneResult prune(PruneMode mode, const TransformerModel& model, const CalibrationSet& calib,
                         std::size_t k, Metric metric, const ScoringOptions& opts = {}) {
    return mode == PruneMode::iterative ? prune_iterative(model, calib, k, metric, opts)
                                        : prune_one_shot(model, calib, k, metric, opts);
}

} // namespace gradmap
