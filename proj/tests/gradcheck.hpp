#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>

#include "gradmap/autodiff.hpp"
#include "oracles.hpp"

namespace gradcheck {

using gradmap::Tensor;
using gradmap::Tape;
using gradmap::Var;

using Params = std::map<std::string, Tensor>;
using Builder = std::function<Var(Tape&, const std::map<std::string, Var>&)>;

inline double evaluate(const Params& params, const Builder& build) {
    Tape tape(false);
    std::map<std::string, Var> vars;
    for (const auto& [name, t] : params) vars.emplace(name, tape.constant(t));
    return build(tape, vars).value().item();
}

inline gradmap::GradientMap analytic(const Params& params, const Builder& build) {
    Tape tape(true);
    std::map<std::string, Var> vars;
    for (const auto& [name, t] : params) vars.emplace(name, tape.parameter(name, t));
    return tape.backward(build(tape, vars));
}

/// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double a, double n, double floor = 1e-5) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

struct Worst {
    double rel = 0.0;
    std::string where;
};

/// Compares analytic gradients with central differences at up to `coords`
/// random coordinates per tensor.
inline Worst compare(Params params, const Builder& build, std::size_t coords = 100, double h = 1e-5,
                     std::uint64_t seed = 7) {
    const auto grads = analytic(params, build);
    std::mt19937_64 rng(seed);
    Worst worst;
    for (auto& [name, t] : params) {
        const Tensor& g = grads.at(name);
        const std::size_t n = std::min(coords, t.size());
        std::vector<std::size_t> idx(t.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t s = 0; s < n; ++s) {
            const std::size_t k = idx[s];
            auto data = t.data();
            const double num =
                oracle::central_difference([&] { return evaluate(params, build); }, data[k], h);
            const double rel = relative_error(g[k], num);
            if (rel > worst.rel) worst = {rel, name + "[" + std::to_string(k) + "]"};
        }
    }
    return worst;
}

} // namespace gradcheck
