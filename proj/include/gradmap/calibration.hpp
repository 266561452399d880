#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gradmap/model.hpp"

namespace gradmap {

/// N disjoint next-token windows of T tokens drawn from one corpus.
struct CalibrationSet {
    std::vector<Sample> samples;
    std::vector<std::size_t> offsets; // window start in the corpus, per sample
    std::size_t n = 0;
    std::size_t t = 0;
    std::uint64_t seed = 0;
    std::string source;

    std::size_t total_tokens() const noexcept { return n * t; }
};

/// Splits the corpus into floor(len / (T+1)) stride slots behind a random
/// global offset, shuffles the slots and keeps the first N. Each window of
/// T+1 tokens yields input = window[0..T), target = window[1..T].
inline CalibrationSet build_calibration(std::span<const Token> corpus, std::size_t n, std::size_t t,
                                        std::uint64_t seed, std::string source = {}) {
    if (n == 0 || t == 0) throw InputError("calibration: N and T must be >= 1");
    const std::size_t window = t + 1;
    const std::size_t required = n * window;
    if (corpus.size() < required) {
        throw InputError("calibration corpus too short: need at least " + std::to_string(required) +
                         " tokens (N*(T+1)), have " + std::to_string(corpus.size()));
    }
    std::mt19937_64 rng(seed);
    const std::size_t slots = corpus.size() / window;
    const std::size_t slack = corpus.size() - slots * window;
    const std::size_t base = std::uniform_int_distribution<std::size_t>(0, slack)(rng);
    std::vector<std::size_t> order(slots);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    CalibrationSet set;
    set.n = n;
    set.t = t;
    set.seed = seed;
    set.source = std::move(source);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t start = base + order[i] * window;
        Sample s;
        s.input.assign(corpus.begin() + static_cast<std::ptrdiff_t>(start),
                       corpus.begin() + static_cast<std::ptrdiff_t>(start + t));
        s.target.assign(corpus.begin() + static_cast<std::ptrdiff_t>(start + 1),
                        corpus.begin() + static_cast<std::ptrdiff_t>(start + window));
        set.samples.push_back(std::move(s));
        set.offsets.push_back(start);
    }
    return set;
}

} // namespace gradmap
