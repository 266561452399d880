#pragma once

#include <cmath>

#include "gradmap/calibration.hpp"
#include "gradmap/compensation.hpp"
#include "gradmap/model.hpp"
#include "oracles.hpp"

namespace testutil {

using namespace gradmap;

/// Copy of m with every tensor of one layer edited by fn(weight, tensor).
template <typename Fn>
TransformerModel edit_layer(const TransformerModel& m, int idx, Fn&& fn) {
    std::vector<IndexedLayer> layers = m.layers();
    for (auto& il : layers) {
        if (il.original_index != idx) continue;
        for (LayerWeight w : kLayerWeights) fn(w, il.layer.weight(w));
    }
    return TransformerModel(m.config(), m.embedding(), m.position_embedding(), m.final_norm(), m.lm_head(),
                            std::move(layers));
}

/// All nine tensors zeroed: the layer passes its input through unchanged.
inline TransformerModel zero_layer(const TransformerModel& m, int idx) {
    return edit_layer(m, idx, [](LayerWeight, Tensor& t) { t = Tensor::zeros(t.dims()); });
}

/// N random windows of T tokens (plus the shifted targets).
inline CalibrationSet random_calibration(std::size_t n, std::size_t t, std::uint64_t seed) {
    const auto corpus = oracle::random_tokens(n * (t + 1) * 2, seed);
    return build_calibration(corpus, n, t, seed);
}

/// Random linear (W_down) problem whose optimum is near, but not at, I.
inline CompensationProblem random_problem(std::uint64_t seed, Side side = Side::left, std::size_t d = 8,
                                   std::size_t k = 32, std::size_t n = 64) {
    CompensationProblem p;
    p.side = side;
    p.weight = oracle::random_tensor({d, k}, seed, 1.0 / std::sqrt(static_cast<double>(k)));
    p.x_in = oracle::random_tensor({k, n}, seed + 1);
    p.x_residual = oracle::random_tensor({d, n}, seed + 2);
    const Tensor m = add(Tensor::identity(d), oracle::random_tensor({d, d}, seed + 3, 0.2));
    const Tensor proj = side == Side::left ? oracle::matmul(m, oracle::matmul(p.weight, p.x_in))
                                           : oracle::matmul(p.weight, p.x_in);
    p.x_target = add(add(p.x_residual, proj), oracle::random_tensor({d, n}, seed + 4, 0.1));
    return p;
}

} // namespace testutil
