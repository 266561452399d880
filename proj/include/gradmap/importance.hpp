#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "gradmap/calibration.hpp"
#include "gradmap/model.hpp"
#include "gradmap/parallel.hpp"

namespace gradmap {

enum class Metric { grad_norm, block_influence, loss_delta, random };

inline std::string_view metric_name(Metric m) {
    switch (m) {
    case Metric::grad_norm: return "grad-norm";
    case Metric::block_influence: return "block-influence";
    case Metric::loss_delta: return "loss-delta";
    case Metric::random: return "random";
    }
    return "?";
}

inline Metric parse_metric(std::string_view s) {
    for (Metric m : {Metric::grad_norm, Metric::block_influence, Metric::loss_delta, Metric::random}) {
        if (metric_name(m) == s) return m;
    }
    throw InputError("unknown metric '" + std::string(s) +
                     "' (expected grad-norm, block-influence, loss-delta or random)");
}

/// Per-layer importance, keyed by original layer index. Lower = more prunable.
struct ImportanceScores {
    Metric metric = Metric::grad_norm;
    std::map<int, double> scores;
    std::size_t n_samples_used = 0;
    std::size_t forward_passes = 0;
    std::size_t backward_passes = 0;
    std::size_t excluded_tokens = 0; // block influence: zero-norm hidden vectors skipped
    double wall_time = 0.0;          // seconds
};

struct ScoringOptions {
    std::size_t threads = 1;
    PassCounter* counter = nullptr; // optional external probe, incremented alongside the report
    std::uint64_t seed = 0;         // used by the random metric only
};

namespace detail {

inline void require_scorable(const TransformerModel& model, const CalibrationSet& calib) {
    if (model.layers().empty()) throw InputError("scoring: model has no retained layers");
    if (calib.samples.empty()) throw InputError("scoring: empty calibration set");
}

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline void forward_counts(ImportanceScores& s, const PassCounter& local, PassCounter* external) {
    s.forward_passes = local.forwards;
    s.backward_passes = local.backwards;
    if (external) {
        external->forwards += local.forwards;
        external->backwards += local.backwards;
    }
}

} // namespace detail

/// Sum over the layer's nine tensors of the Frobenius norm of dL/dtheta.
inline double layer_gradient_magnitude(const GradientMap& grads, int original_index) {
    double g = 0.0;
    for (LayerWeight w : kLayerWeights) g += frobenius_norm(grads.at(layer_param_name(original_index, w)));
    return g;
}

/// s_i = mean over samples of sum_theta ||dL/dtheta||_2, one forward and one
/// backward pass per calibration sample.
inline ImportanceScores score_grad_norm(const TransformerModel& model, const CalibrationSet& calib,
                                        const ScoringOptions& opts = {}) {
    detail::require_scorable(model, calib);
    detail::Stopwatch clock;
    PassCounter local;
    ForwardOptions fopts;
    fopts.counter = &local;
    const auto retained = model.retained_indices();
    auto per_sample = parallel_map(calib.samples.size(), opts.threads, [&](std::size_t j) {
        const auto lg = loss_and_gradients(model, calib.samples[j], fopts);
        std::vector<double> g;
        g.reserve(retained.size());
        for (int idx : retained) g.push_back(layer_gradient_magnitude(lg.grads, idx));
        return g;
    });
    ImportanceScores out;
    out.metric = Metric::grad_norm;
    out.n_samples_used = calib.samples.size();
    std::vector<double> acc(retained.size(), 0.0);
    for (const auto& g : per_sample) {
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    }
    for (std::size_t i = 0; i < retained.size(); ++i) {
        out.scores[retained[i]] = acc[i] / static_cast<double>(per_sample.size());
    }
    detail::forward_counts(out, local, opts.counter);
    out.wall_time = clock.seconds();
    return out;
}

struct CosineTally {
    double sum_cos = 0.0;
    std::size_t tokens = 0;
    std::size_t excluded = 0;
};

/// Per-token cosine similarity between a layer's input and output rows.
inline CosineTally block_influence_terms(const Tensor& in, const Tensor& out) {
    detail::require_same_dims(in, out, "block_influence_terms");
    CosineTally t;
    for (std::size_t r = 0; r < in.rows(); ++r) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t c = 0; c < in.cols(); ++c) {
            dot += in(r, c) * out(r, c);
            na += in(r, c) * in(r, c);
            nb += out(r, c) * out(r, c);
        }
        if (na == 0.0 || nb == 0.0) {
            ++t.excluded;
            continue;
        }
        t.sum_cos += dot / (std::sqrt(na) * std::sqrt(nb));
        ++t.tokens;
    }
    return t;
}

/// Block Influence: 1 - mean token cosine(H_{i-1}, H_i), in [0, 2].
inline ImportanceScores score_block_influence(const TransformerModel& model, const CalibrationSet& calib,
                                              const ScoringOptions& opts = {}) {
    detail::require_scorable(model, calib);
    detail::Stopwatch clock;
    PassCounter local;
    const auto retained = model.retained_indices();
    ForwardOptions fopts;
    fopts.counter = &local;
    fopts.capture.layers.insert(retained.begin(), retained.end());
    fopts.capture.points = CapturePoint::layer_input | CapturePoint::layer_output;
    auto per_sample = parallel_map(calib.samples.size(), opts.threads, [&](std::size_t j) {
        const auto res = forward(model, calib.samples[j].input, fopts);
        std::vector<CosineTally> tallies;
        for (int idx : retained) {
            const auto& cap = res.trace.layers.at(idx);
            tallies.push_back(block_influence_terms(cap.at(CapturePoint::layer_input),
                                                    cap.at(CapturePoint::layer_output)));
        }
        return tallies;
    });
    ImportanceScores out;
    out.metric = Metric::block_influence;
    out.n_samples_used = calib.samples.size();
    std::vector<CosineTally> acc(retained.size());
    for (const auto& tallies : per_sample) {
        for (std::size_t i = 0; i < tallies.size(); ++i) {
            acc[i].sum_cos += tallies[i].sum_cos;
            acc[i].tokens += tallies[i].tokens;
            acc[i].excluded += tallies[i].excluded;
        }
    }
    for (std::size_t i = 0; i < retained.size(); ++i) {
        const double mean_cos = acc[i].tokens ? acc[i].sum_cos / static_cast<double>(acc[i].tokens) : 1.0;
        out.scores[retained[i]] = 1.0 - mean_cos;
        out.excluded_tokens += acc[i].excluded;
    }
    detail::forward_counts(out, local, opts.counter);
    out.wall_time = clock.seconds();
    return out;
}

/// Mask-and-measure: mean calibration loss with layer i bypassed minus the
/// mean base loss. Costs (L_retained + 1) * N forward passes. Negative
/// deltas are kept.
inline ImportanceScores score_loss_delta(const TransformerModel& model, const CalibrationSet& calib,
                                         const ScoringOptions& opts = {}) {
    detail::require_scorable(model, calib);
    detail::Stopwatch clock;
    PassCounter local;
    const auto retained = model.retained_indices();
    auto per_sample = parallel_map(calib.samples.size(), opts.threads, [&](std::size_t j) {
        ForwardOptions fopts;
        fopts.counter = &local;
        std::vector<double> losses; // [0] = base, [1 + i] = layer i bypassed
        losses.push_back(sequence_loss(model, calib.samples[j], fopts));
        for (int idx : retained) {
            fopts.skip = {idx};
            losses.push_back(sequence_loss(model, calib.samples[j], fopts));
        }
        return losses;
    });
    ImportanceScores out;
    out.metric = Metric::loss_delta;
    out.n_samples_used = calib.samples.size();
    std::vector<double> acc(retained.size() + 1, 0.0);
    for (const auto& l : per_sample) {
        for (std::size_t i = 0; i < l.size(); ++i) acc[i] += l[i];
    }
    const double inv_n = 1.0 / static_cast<double>(per_sample.size());
    for (std::size_t i = 0; i < retained.size(); ++i) {
        out.scores[retained[i]] = acc[i + 1] * inv_n - acc[0] * inv_n;
    }
    detail::forward_counts(out, local, opts.counter);
    out.wall_time = clock.seconds();
    return out;
}

/// Uniform random scores; a floor for comparisons.
inline ImportanceScores score_random(const TransformerModel& model, const CalibrationSet& calib,
                                     const ScoringOptions& opts = {}) {
    detail::require_scorable(model, calib);
    std::mt19937_64 rng(opts.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ImportanceScores out;
    out.metric = Metric::random;
    for (int idx : model.retained_indices()) out.scores[idx] = u(rng);
    return out;
}

inline ImportanceScores score_layers(Metric metric, const TransformerModel& model,
                                     const CalibrationSet& calib, const ScoringOptions& opts = {}) {
    switch (metric) {
    case Metric::grad_norm: return score_grad_norm(model, calib, opts);
    case Metric::block_influence: return score_block_influence(model, calib, opts);
    case Metric::loss_delta: return score_loss_delta(model, calib, opts);
    case Metric::random: return score_random(model, calib, opts);
    }
    throw InputError("unknown metric");
}

} // namespace gradmap
