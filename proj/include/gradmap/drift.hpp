#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gradmap/calibration.hpp"
#include "gradmap/model.hpp"
#include "gradmap/parallel.hpp"

namespace gradmap {

enum class CompensationStrategy { max_drift, local };

inline std::string_view strategy_name(CompensationStrategy s) {
    return s == CompensationStrategy::max_drift ? "max-drift" : "local";
}

inline CompensationStrategy parse_strategy(std::string_view s) {
    if (s == "max-drift") return CompensationStrategy::max_drift;
    if (s == "local") return CompensationStrategy::local;
    throw InputError("unknown compensation strategy '" + std::string(s) + "' (expected max-drift or local)");
}

/// First-moment drift of every retained layer's output between the original
/// and the pruned model.
struct DriftReport {
    std::map<int, double> delta;     // original index -> ||E[H_i] - E[H'_i]||_2
    std::set<int> removed;           // removal set of the pruned model
    std::size_t tokens = 0;          // tokens pooled into each mean
    std::map<int, std::pair<Tensor, Tensor>> means; // (original, pruned), when requested
};

/// Means are pooled over every token position of every calibration sample.
inline DriftReport compute_drift(const TransformerModel& original, const TransformerModel& pruned,
                                 const CalibrationSet& calib, std::size_t threads = 1,
                                 bool keep_means = false) {
    if (!(original.config() == pruned.config())) throw InputError("compute_drift: model configs differ");
    const auto retained = pruned.retained_indices();
    for (int idx : retained) {
        if (!original.is_present(idx)) {
            throw InputError("compute_drift: layer " + std::to_string(idx) +
                             " is retained in the pruned model but absent from the original");
        }
    }
    if (calib.samples.empty()) throw InputError("compute_drift: empty calibration set");
    const std::size_t d = original.config().d_model;

    ForwardOptions fopts;
    fopts.capture.layers.insert(retained.begin(), retained.end());
    fopts.capture.points = static_cast<std::uint32_t>(CapturePoint::layer_output);

    struct Sums {
        std::vector<std::vector<double>> orig, pruned; // per retained layer, d each
        std::size_t tokens = 0;
    };
    auto column_sums = [&](const Tensor& h) {
        std::vector<double> s(d, 0.0);
        for (std::size_t r = 0; r < h.rows(); ++r) {
            for (std::size_t c = 0; c < d; ++c) s[c] += h(r, c);
        }
        return s;
    };
    auto per_sample = parallel_map(calib.samples.size(), threads, [&](std::size_t j) {
        const auto& tokens = calib.samples[j].input;
        const auto ro = forward(original, tokens, fopts);
        const auto rp = forward(pruned, tokens, fopts);
        Sums s;
        s.tokens = tokens.size();
        for (int idx : retained) {
            s.orig.push_back(column_sums(ro.trace.layers.at(idx).at(CapturePoint::layer_output)));
            s.pruned.push_back(column_sums(rp.trace.layers.at(idx).at(CapturePoint::layer_output)));
        }
        return s;
    });

    DriftReport report;
    report.removed = pruned.removed();
    std::vector<std::vector<double>> mo(retained.size(), std::vector<double>(d, 0.0));
    std::vector<std::vector<double>> mp = mo;
    for (const auto& s : per_sample) {
        report.tokens += s.tokens;
        for (std::size_t i = 0; i < retained.size(); ++i) {
            for (std::size_t c = 0; c < d; ++c) {
                mo[i][c] += s.orig[i][c];
                mp[i][c] += s.pruned[i][c];
            }
        }
    }
    const double inv = 1.0 / static_cast<double>(report.tokens);
    for (std::size_t i = 0; i < retained.size(); ++i) {
        Tensor a({d}), b({d});
        double sq = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            a[c] = mo[i][c] * inv;
            b[c] = mp[i][c] * inv;
            sq += (a[c] - b[c]) * (a[c] - b[c]);
        }
        report.delta[retained[i]] = std::sqrt(sq);
        if (keep_means) report.means.emplace(retained[i], std::make_pair(std::move(a), std::move(b)));
    }
    return report;
}

/// max-drift: the Z largest-drift layers, descending, ties by lower index.
/// local: for each removed layer its nearest preceding retained layer (the
/// nearest following one when nothing precedes it), ascending, deduplicated.
inline std::vector<int> select_compensation_targets(const DriftReport& report,
                                                    CompensationStrategy strategy, std::size_t z = 1) {
    if (report.delta.empty()) throw InputError("select_compensation_targets: no retained layers");
    std::vector<int> out;
    if (strategy == CompensationStrategy::max_drift) {
        if (z < 1 || z > report.delta.size()) {
            throw InputError("Z=" + std::to_string(z) + " must be in [1, " +
                             std::to_string(report.delta.size()) + "]");
        }
        std::vector<std::pair<double, int>> v;
        for (const auto& [idx, d] : report.delta) v.emplace_back(-d, idx);
        std::stable_sort(v.begin(), v.end());
        for (std::size_t i = 0; i < z; ++i) out.push_back(v[i].second);
        return out;
    }
    std::set<int> chosen;
    for (int r : report.removed) {
        auto it = report.delta.lower_bound(r);
        if (it != report.delta.begin()) {
            chosen.insert(std::prev(it)->first);
        } else if (it != report.delta.end()) {
            chosen.insert(it->first);
        }
    }
    return {chosen.begin(), chosen.end()};
}

/// RFC-4180 CSV: header then one `layer_index,delta` row per retained layer.
inline std::string drift_csv(const DriftReport& report) {
    std::ostringstream os;
    os.precision(17);
    os << "layer_index,delta\r\n";
    for (const auto& [idx, d] : report.delta) os << idx << "," << d << "\r\n";
    return os.str();
}

} // namespace gradmap
