#include <cmath>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "gradmap/model.hpp"
#include "oracles.hpp"

using namespace gradmap;

namespace {

TransformerModel random_model(std::size_t layers = 4, std::uint64_t seed = 1, double std = 0.2) {
    return TransformerModel::initialize(oracle::tiny_config(layers), seed, std);
}

TransformerModel with_zeroed_layer(const TransformerModel& m, int idx) {
    std::vector<IndexedLayer> layers = m.layers();
    for (auto& il : layers) {
        if (il.original_index != idx) continue;
        for (LayerWeight w : kLayerWeights) {
            Tensor& t = il.layer.weight(w);
            t = Tensor::zeros(t.dims());
        }
    }
    return TransformerModel(m.config(), m.embedding(), m.position_embedding(), m.final_norm(), m.lm_head(),
                            std::move(layers));
}

Tensor rms_rows(const Tensor& x, const Tensor& gain) {
    Tensor y(x.dims());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double ms = 0;
        for (std::size_t c = 0; c < x.cols(); ++c) ms += x(r, c) * x(r, c);
        const double inv = 1.0 / std::sqrt(ms / static_cast<double>(x.cols()) + 1e-6);
        for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) = x(r, c) * inv * gain[c];
    }
    return y;
}

} // namespace

TEST(ModelConfig, Validation) {
    ModelConfig c = oracle::tiny_config();
    c.n_heads = 3;
    EXPECT_THROW(c.validate(), InputError);
    c = oracle::tiny_config();
    c.d_ffn = c.d_model;
    EXPECT_THROW(c.validate(), InputError);
}

TEST(Forward, AllLayersRemovedIsEmbeddingPassThrough) {
    TransformerModel m = random_model(2);
    m = m.remove_layer(0).remove_layer(1);
    const auto tokens = oracle::random_tokens(6, 3);
    const Tensor logits = forward(m, tokens).logits;
    Tensor h({6, m.config().d_model});
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t c = 0; c < h.cols(); ++c)
            h(r, c) = m.embedding()(tokens[r], c) + m.position_embedding()(r, c);
    const Tensor want = oracle::matmul(rms_rows(h, m.final_norm()), oracle::transpose(m.lm_head()));
    EXPECT_LT(max_abs_diff(logits, want), 1e-12);
}

TEST(Forward, DownProjectionRecomposesLayerOutput) {
    const TransformerModel m = random_model(3);
    ForwardOptions opts;
    opts.capture.layers = {0, 1, 2};
    opts.capture.points = CapturePoint::down_input | CapturePoint::ffn_residual | CapturePoint::layer_output;
    const auto res = forward(m, oracle::random_tokens(10, 4), opts);
    for (int i = 0; i < 3; ++i) {
        const auto& cap = res.trace.layers.at(i);
        const Tensor re = add(cap.at(CapturePoint::ffn_residual),
                              oracle::matmul(cap.at(CapturePoint::down_input), oracle::transpose(m.layer(i).w_down)));
        EXPECT_LT(max_abs_diff(re, cap.at(CapturePoint::layer_output)), 1e-10);
    }
}

TEST(Forward, CapturesOnlyRequestedPoints) {
    const TransformerModel m = random_model(3);
    ForwardOptions opts;
    opts.capture.layers = {1};
    opts.capture.points = static_cast<std::uint32_t>(CapturePoint::q);
    const auto res = forward(m, oracle::random_tokens(5, 4), opts);
    ASSERT_EQ(res.trace.layers.size(), 1u);
    EXPECT_EQ(res.trace.layers.at(1).streams.size(), 1u);
    EXPECT_THROW(res.trace.layers.at(1).at(CapturePoint::v), InputError);
    EXPECT_EQ(res.trace.tokens, 5u);
}

TEST(Forward, PrunedEqualsFreshModelOfRetainedLayers) {
    const TransformerModel m = random_model(4);
    const TransformerModel pruned = m.remove_layer(2);
    std::vector<IndexedLayer> kept;
    for (const auto& il : m.layers()) {
        if (il.original_index != 2) kept.push_back(il);
    }
    const TransformerModel fresh(m.config(), m.embedding(), m.position_embedding(), m.final_norm(), m.lm_head(), kept);
    const auto tokens = oracle::random_tokens(12, 5);
    EXPECT_EQ(forward(pruned, tokens).logits, forward(fresh, tokens).logits);
    EXPECT_EQ(fresh.removed(), std::set<int>{2});
}

TEST(Forward, SkipMatchesRemoval) {
    const TransformerModel m = random_model(4);
    const auto tokens = oracle::random_tokens(12, 6);
    ForwardOptions opts;
    opts.skip = {1};
    EXPECT_EQ(forward(m, tokens, opts).logits, forward(m.remove_layer(1), tokens).logits);
}

TEST(Forward, RejectsBadTokens) {
    const TransformerModel m = random_model(1);
    const std::vector<Token> bad = {1, 2, 300};
    EXPECT_THROW(forward(m, bad), InputError);
    EXPECT_THROW(forward(m, std::vector<Token>{}), InputError);
    EXPECT_THROW(forward(m, oracle::random_tokens(m.config().max_seq + 1, 1)), InputError);
}

TEST(Forward, IsCausal) {
    const TransformerModel m = random_model(2);
    auto a = oracle::random_tokens(10, 7);
    auto b = a;
    b[9] = (b[9] + 1) % 256;
    const Tensor la = forward(m, a).logits;
    const Tensor lb = forward(m, b).logits;
    for (std::size_t r = 0; r < 9; ++r)
        for (std::size_t c = 0; c < la.cols(); ++c) EXPECT_EQ(la(r, c), lb(r, c));
}

TEST(Loss, SequenceLossMatchesLogitOracle) {
    const TransformerModel m = random_model(2);
    const auto tokens = oracle::random_tokens(11, 8);
    Sample s{{tokens.begin(), tokens.end() - 1}, {tokens.begin() + 1, tokens.end()}};
    const Tensor logits = forward(m, s.input).logits;
    EXPECT_NEAR(sequence_loss(m, s), oracle::mean_nll(logits, s.target), 1e-10);
}

TEST(Loss, GradientsMatchFiniteDifferences) {
    const TransformerModel m = random_model(2, 3, 0.3);
    const auto tokens = oracle::random_tokens(9, 9);
    Sample s{{tokens.begin(), tokens.end() - 1}, {tokens.begin() + 1, tokens.end()}};
    const auto lg = loss_and_gradients(m, s);
    std::size_t tensors = 0;
    m.for_each_parameter([&](const std::string& name, const Tensor& t) {
        ++tensors;
        const Tensor& g = lg.grads.at(name);
        ASSERT_EQ(g.dims(), t.dims()) << name;
        for (std::size_t k = 0; k < t.size(); k += std::max<std::size_t>(1, t.size() / 15)) {
            TransformerModel probe = m;
            double* coord = nullptr;
            probe.for_each_parameter([&](const std::string& n, Tensor& pt) {
                if (n == name) coord = &pt.data()[k];
            });
            const double num = oracle::central_difference([&] { return sequence_loss(probe, s); }, *coord, 1e-5);
            EXPECT_LT(gradcheck::relative_error(g[k], num), 1e-4) << name << "[" << k << "]";
        }
    });
    EXPECT_EQ(tensors, 4u + 2 * kLayerWeights.size());
    EXPECT_EQ(lg.grads.size(), tensors);
}

TEST(RemoveLayer, CountsAndErrors) {
    const TransformerModel m = random_model(4);
    const TransformerModel r = m.remove_layer(1);
    EXPECT_EQ(r.layers().size(), 3u);
    EXPECT_EQ(r.retained_indices(), (std::vector<int>{0, 2, 3}));
    EXPECT_THROW(r.remove_layer(1), InputError);
    EXPECT_THROW(r.remove_layer(4), InputError);
    EXPECT_THROW(r.remove_layer(-1), InputError);
    EXPECT_EQ(m.layers().size(), 4u);
}

TEST(RemoveLayer, ZeroedLayerIsNoOp) {
    const TransformerModel m = with_zeroed_layer(random_model(4), 2);
    const auto tokens = oracle::random_tokens(16, 10);
    EXPECT_LT(max_abs_diff(forward(m, tokens).logits, forward(m.remove_layer(2), tokens).logits), 1e-12);
}

TEST(RemoveLayer, OrderDoesNotMatter) {
    const TransformerModel m = random_model(4);
    const auto tokens = oracle::random_tokens(16, 11);
    const TransformerModel a = m.remove_layer(3).remove_layer(1);
    const TransformerModel b = m.remove_layer(1).remove_layer(3);
    EXPECT_TRUE(a == b);
    EXPECT_EQ(forward(a, tokens).logits, forward(b, tokens).logits);
}

TEST(Fold, IdentityIsBitwiseNoOp) {
    const TransformerModel m = random_model(3);
    const TransformerModel f = m.fold_compensation(1, Tensor::identity(m.config().d_model));
    EXPECT_TRUE(f == m);
    const auto tokens = oracle::random_tokens(8, 12);
    EXPECT_EQ(forward(f, tokens).logits, forward(m, tokens).logits);
}

TEST(Fold, MatchesInterposedForward) {
    const TransformerModel m = random_model(3);
    const auto tokens = oracle::random_tokens(14, 13);
    const std::size_t d = m.config().d_model, k = m.config().d_ffn;
    struct Case {
        LayerWeight w;
        Side side;
        std::size_t dim;
    };
    for (const Case& c : {Case{LayerWeight::w_down, Side::left, d}, Case{LayerWeight::w_down, Side::right, k},
                          Case{LayerWeight::w_up, Side::left, k}, Case{LayerWeight::w_gate, Side::right, d},
                          Case{LayerWeight::w_o, Side::left, d}, Case{LayerWeight::w_q, Side::right, d}}) {
        Tensor wp = add(Tensor::identity(c.dim), oracle::random_tensor({c.dim, c.dim}, 14, 0.1));
        ForwardOptions opts;
        opts.interpose.push_back({1, c.w, c.side, wp});
        const Tensor folded = forward(m.fold_weight(1, c.w, c.side, wp), tokens).logits;
        EXPECT_LT(max_abs_diff(folded, forward(m, tokens, opts).logits), 1e-10) << weight_name(c.w);
    }
}

TEST(Fold, CompositionOfFolds) {
    const TransformerModel m = random_model(3);
    const std::size_t d = m.config().d_model;
    const Tensor a = add(Tensor::identity(d), oracle::random_tensor({d, d}, 15, 0.1));
    const Tensor b = add(Tensor::identity(d), oracle::random_tensor({d, d}, 16, 0.1));
    const TransformerModel twice = m.fold_compensation(0, a).fold_compensation(0, b);
    const TransformerModel once = m.fold_compensation(0, matmul(b, a));
    EXPECT_LT(max_abs_diff(twice.layer(0).w_down, once.layer(0).w_down), 1e-10);
}

TEST(Fold, Errors) {
    const TransformerModel m = random_model(3);
    EXPECT_THROW(m.fold_compensation(0, Tensor::identity(5)), ShapeError);
    EXPECT_THROW(m.remove_layer(0).fold_compensation(0, Tensor::identity(m.config().d_model)), InputError);
    EXPECT_THROW(m.fold_weight(0, LayerWeight::ffn_norm, Side::left, Tensor::identity(1)), InputError);
}

TEST(Initialize, DeterministicUnderSeed) {
    EXPECT_TRUE(random_model(2, 5) == random_model(2, 5));
    EXPECT_FALSE(random_model(2, 5) == random_model(2, 6));
}
