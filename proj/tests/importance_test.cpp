#include <cmath>

#include <gtest/gtest.h>

#include "gradmap/importance.hpp"
#include "helpers.hpp"

using namespace gradmap;
using testutil::random_calibration;

namespace {

TransformerModel model4(std::uint64_t seed = 2) {
    return TransformerModel::initialize(oracle::tiny_config(4, 8, 2, 16, 8), seed, 0.3);
}

double mean_loss(const TransformerModel& m, const CalibrationSet& c, const ForwardOptions& opts = {}) {
    long double s = 0;
    for (const auto& smp : c.samples) {
        const Tensor logits = forward(m, smp.input, opts).logits;
        s += oracle::mean_nll(logits, smp.target);
    }
    return static_cast<double>(s / c.samples.size());
}

} // namespace

TEST(GradNorm, ZeroedLayerScoresZero) {
    const TransformerModel m = testutil::zero_layer(TransformerModel::initialize(oracle::tiny_config(2), 3, 0.3), 1);
    const auto s = score_grad_norm(m, random_calibration(3, 8, 1));
    EXPECT_EQ(s.scores.at(1), 0.0);
    EXPECT_GT(s.scores.at(0), 0.0);
    // The zeroed layer also has zero finite-difference sensitivity in every coordinate.
    const auto calib = random_calibration(1, 8, 2);
    TransformerModel probe = m;
    double worst = 0;
    for (LayerWeight w : kLayerWeights) {
        Tensor& t = probe.layer(1).weight(w);
        for (std::size_t k = 0; k < t.size(); k += 7) {
            const double fd = oracle::central_difference(
                [&] { return sequence_loss(probe, calib.samples[0]); }, t.data()[k], 1e-5);
            worst = std::max(worst, std::abs(fd));
        }
    }
    EXPECT_LT(worst, 1e-8);
}

TEST(GradNorm, DuplicatedSamplesLeaveScoresUnchanged) {
    const TransformerModel m = model4();
    const CalibrationSet c = random_calibration(4, 8, 5);
    CalibrationSet twice = c;
    twice.samples.insert(twice.samples.end(), c.samples.begin(), c.samples.end());
    twice.n *= 2;
    const auto a = score_grad_norm(m, c), b = score_grad_norm(m, twice);
    for (const auto& [idx, s] : a.scores) EXPECT_NEAR(b.scores.at(idx), s, 1e-12 * s);
}

TEST(GradNorm, MatchesFiniteDifferenceReconstruction) {
    const TransformerModel m = model4();
    const CalibrationSet c = random_calibration(2, 6, 6);
    const auto s = score_grad_norm(m, c);
    for (int idx = 0; idx < 4; ++idx) {
        double total = 0;
        for (const auto& smp : c.samples) {
            TransformerModel probe = m;
            for (LayerWeight w : kLayerWeights) {
                Tensor& t = probe.layer(idx).weight(w);
                long double sq = 0;
                for (double& v : t.data()) {
                    const double g =
                        oracle::central_difference([&] { return sequence_loss(probe, smp); }, v, 1e-5);
                    sq += static_cast<long double>(g) * g;
                }
                total += std::sqrt(static_cast<double>(sq));
            }
        }
        total /= static_cast<double>(c.samples.size());
        EXPECT_NEAR(s.scores.at(idx), total, 1e-3 * total) << "layer " << idx;
    }
}

TEST(GradNorm, OneForwardBackwardPerSample) {
    const TransformerModel m = model4();
    PassCounter probe;
    ScoringOptions opts;
    opts.counter = &probe;
    const auto s = score_grad_norm(m, random_calibration(5, 6, 7), opts);
    EXPECT_EQ(s.forward_passes, 5u);
    EXPECT_EQ(s.backward_passes, 5u);
    EXPECT_EQ(probe.forwards.load(), 5u);
    EXPECT_EQ(probe.backwards.load(), 5u);
}

TEST(GradNorm, ThreadCountDoesNotChangeScores) {
    const TransformerModel m = model4();
    const auto c = random_calibration(6, 6, 8);
    ScoringOptions many;
    many.threads = 4;
    EXPECT_EQ(score_grad_norm(m, c).scores, score_grad_norm(m, c, many).scores);
}

TEST(BlockInfluence, IdentityLayerScoresZero) {
    const TransformerModel m = testutil::zero_layer(model4(), 2);
    EXPECT_NEAR(score_block_influence(m, random_calibration(3, 6, 9)).scores.at(2), 0.0, 1e-12);
}

TEST(BlockInfluence, NegatingLayerScoresTwo) {
    // With one-token windows attention returns v itself, so W_O W_V = -alpha I
    // gives out = x (1 - alpha / rms(x)), antiparallel to x once alpha > rms(x).
    TransformerModel m = testutil::edit_layer(model4(), 1, [](LayerWeight w, Tensor& t) {
        if (w == LayerWeight::w_v) t = Tensor::identity(8);
        else if (w == LayerWeight::w_o) t = scaled(Tensor::identity(8), -1e3);
        else if (w != LayerWeight::attn_norm) t = Tensor::zeros(t.dims());
    });
    EXPECT_NEAR(score_block_influence(m, random_calibration(8, 1, 10)).scores.at(1), 2.0, 1e-12);
}

TEST(BlockInfluence, MatchesPerTokenCosineOracle) {
    const TransformerModel m = model4();
    const CalibrationSet c = random_calibration(3, 7, 11);
    const auto s = score_block_influence(m, c);
    ForwardOptions opts;
    opts.capture.layers = {0, 1, 2, 3};
    opts.capture.points = CapturePoint::layer_input | CapturePoint::layer_output;
    for (int idx = 0; idx < 4; ++idx) {
        long double sum = 0;
        std::size_t count = 0;
        for (const auto& smp : c.samples) {
            const auto res = forward(m, smp.input, opts);
            const Tensor& a = res.trace.layers.at(idx).at(CapturePoint::layer_input);
            const Tensor& b = res.trace.layers.at(idx).at(CapturePoint::layer_output);
            for (std::size_t r = 0; r < a.rows(); ++r, ++count) {
                long double dot = 0, na = 0, nb = 0;
                for (std::size_t k = 0; k < a.cols(); ++k) {
                    dot += static_cast<long double>(a(r, k)) * b(r, k);
                    na += static_cast<long double>(a(r, k)) * a(r, k);
                    nb += static_cast<long double>(b(r, k)) * b(r, k);
                }
                sum += dot / std::sqrt(na * nb);
            }
        }
        EXPECT_NEAR(s.scores.at(idx), static_cast<double>(1.0L - sum / count), 1e-10);
    }
}

TEST(LossDelta, ZeroedLayerDeltaIsZero) {
    const TransformerModel m = testutil::zero_layer(model4(), 3);
    EXPECT_NEAR(score_loss_delta(m, random_calibration(3, 6, 12)).scores.at(3), 0.0, 1e-12);
}

TEST(LossDelta, MatchesCrossEntropyOracle) {
    const TransformerModel m = model4();
    const CalibrationSet c = random_calibration(3, 6, 13);
    const auto s = score_loss_delta(m, c);
    const double base = mean_loss(m, c);
    for (int idx = 0; idx < 4; ++idx) {
        ForwardOptions skip;
        skip.skip = {idx};
        EXPECT_NEAR(s.scores.at(idx), mean_loss(m, c, skip) - base, 1e-10);
    }
}

TEST(LossDelta, NegativeDeltasKeepTheirSign) {
    // Targets are the argmax predictions of the model with layer 1 bypassed,
    // so bypassing it can only help.
    const TransformerModel m = model4();
    ForwardOptions skip;
    skip.skip = {1};
    CalibrationSet c = random_calibration(4, 6, 14);
    for (auto& smp : c.samples) {
        const Tensor logits = forward(m, smp.input, skip).logits;
        for (std::size_t r = 0; r < logits.rows(); ++r) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < logits.cols(); ++k)
                if (logits(r, k) > logits(r, best)) best = k;
            smp.target[r] = static_cast<Token>(best);
        }
    }
    const double oracle_delta = mean_loss(m, c, skip) - mean_loss(m, c);
    ASSERT_LT(oracle_delta, 0.0);
    EXPECT_NEAR(score_loss_delta(m, c).scores.at(1), oracle_delta, 1e-10);
}

TEST(LossDelta, PassCountIsRetainedPlusOnePerSample) {
    const TransformerModel m = model4().remove_layer(0);
    const auto s = score_loss_delta(m, random_calibration(5, 6, 15));
    EXPECT_EQ(s.forward_passes, (3u + 1u) * 5u);
    EXPECT_EQ(s.backward_passes, 0u);
}

TEST(Scoring, RejectsEmptyCalibrationAndBadMetric) {
    CalibrationSet empty;
    EXPECT_THROW(score_grad_norm(model4(), empty), InputError);
    EXPECT_THROW(parse_metric("fisher"), InputError);
    EXPECT_EQ(parse_metric(metric_name(Metric::block_influence)), Metric::block_influence);
}

TEST(Scoring, OnlyRetainedLayersAreScored) {
    const TransformerModel m = model4().remove_layer(2);
    const auto s = score_grad_norm(m, random_calibration(2, 6, 16));
    EXPECT_EQ(s.scores.size(), 3u);
    EXPECT_EQ(s.scores.count(2), 0u);
}
