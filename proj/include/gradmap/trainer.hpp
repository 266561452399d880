#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gradmap/model.hpp"
#include "gradmap/parallel.hpp"

namespace gradmap {

struct TrainConfig {
    std::size_t steps = 1000;
    std::size_t batch = 8;
    std::size_t seq_len = 64;
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;
    std::uint64_t seed = 42;
    std::size_t threads = 1;

    void validate() const {
        if (batch < 1 || seq_len < 1) throw InputError("train config: batch and seq_len must be >= 1");
        if (!(lr > 0.0)) throw InputError("train config: lr must be positive");
        if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0)) {
            throw InputError("train config: Adam betas must lie in (0, 1)");
        }
    }
};

struct TrainResult {
    TransformerModel model;
    std::vector<double> losses; // mean batch loss per step, before the update
};

/// Adam on the mean next-token cross-entropy over random corpus windows.
/// Per-sample gradients may run on several threads; they are summed in
/// sample order so the result does not depend on the thread count.
inline TrainResult train(TransformerModel model, std::span<const Token> corpus, const TrainConfig& cfg,
                         const std::function<void(std::size_t, double)>& on_step = {}) {
    cfg.validate();
    if (cfg.seq_len > model.config().max_seq) {
        throw InputError("train: seq_len exceeds the model's max_seq");
    }
    if (corpus.size() < cfg.seq_len + 1) {
        throw InputError("train: corpus has " + std::to_string(corpus.size()) +
                         " tokens, need at least seq_len+1 = " + std::to_string(cfg.seq_len + 1));
    }
    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<std::size_t> start_dist(0, corpus.size() - cfg.seq_len - 1);

    struct Moments {
        Tensor m, v;
    };
    std::map<std::string, Moments> state;
    model.for_each_parameter([&](const std::string& name, const Tensor& t) {
        state.emplace(name, Moments{Tensor::zeros(t.dims()), Tensor::zeros(t.dims())});
    });

    TrainResult result{model, {}};
    result.losses.reserve(cfg.steps);
    TransformerModel& m = result.model;

    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        std::vector<Sample> batch(cfg.batch);
        for (auto& s : batch) {
            const std::size_t start = start_dist(rng);
            s.input.assign(corpus.begin() + static_cast<std::ptrdiff_t>(start),
                           corpus.begin() + static_cast<std::ptrdiff_t>(start + cfg.seq_len));
            s.target.assign(corpus.begin() + static_cast<std::ptrdiff_t>(start + 1),
                            corpus.begin() + static_cast<std::ptrdiff_t>(start + cfg.seq_len + 1));
        }
        auto per_sample = parallel_map(batch.size(), cfg.threads,
                                       [&](std::size_t i) { return loss_and_gradients(m, batch[i]); });

        double loss = 0.0;
        GradientMap total;
        for (auto& lg : per_sample) {
            loss += lg.loss;
            for (auto& [name, g] : lg.grads) {
                auto it = total.find(name);
                if (it == total.end()) {
                    total.emplace(name, std::move(g));
                } else {
                    auto dst = it->second.data();
                    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += g[k];
                }
            }
        }
        const double inv_b = 1.0 / static_cast<double>(batch.size());
        loss *= inv_b;
        if (!std::isfinite(loss)) {
            throw NumericError("train: non-finite loss at step " + std::to_string(step));
        }
        double sq = 0.0;
        for (auto& [name, g] : total) {
            for (double& v : g.data()) v *= inv_b;
            sq += sum_squares(g);
        }
        const double gnorm = std::sqrt(sq);
        const double clip = (cfg.clip_norm > 0.0 && gnorm > cfg.clip_norm) ? cfg.clip_norm / gnorm : 1.0;

        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        m.for_each_parameter([&](const std::string& name, Tensor& w) {
            const Tensor& g = total.at(name);
            Moments& mo = state.at(name);
            for (std::size_t k = 0; k < w.size(); ++k) {
                const double gk = g[k] * clip;
                mo.m[k] = cfg.beta1 * mo.m[k] + (1.0 - cfg.beta1) * gk;
                mo.v[k] = cfg.beta2 * mo.v[k] + (1.0 - cfg.beta2) * gk * gk;
                const double mhat = mo.m[k] / bc1;
                const double vhat = mo.v[k] / bc2;
                w[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            }
        });
        result.losses.push_back(loss);
        if (on_step) on_step(step, loss);
    }
    return result;
}

} // namespace gradmap
