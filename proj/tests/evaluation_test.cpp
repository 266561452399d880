#include <cmath>

#include <gtest/gtest.h>

#include "gradmap/evaluation.hpp"
#include "helpers.hpp"

using namespace gradmap;

namespace {

/// No layers; every position predicts `winner` with logit margin `margin`
/// (or uniformly when margin is 0).
TransformerModel constant_predictor(std::size_t vocab, Token winner, double margin) {
    ModelConfig c = oracle::tiny_config(1, 8, 2, 16, 16);
    c.vocab_size = vocab;
    const std::size_t d = c.d_model;
    Tensor head({vocab, d});
    for (std::size_t k = 0; k < d; ++k) head(winner, k) = margin / static_cast<double>(d);
    return TransformerModel(c, Tensor::filled({vocab, d}, 1.0), Tensor({c.max_seq, d}), Tensor::filled({d}, 1.0),
                            head, {});
}

} // namespace

TEST(Perplexity, CertainModelScoresOne) {
    const std::vector<Token> corpus(100, 'a');
    const auto r = eval_perplexity(constant_predictor(257, 'a', 1e4), corpus, 8);
    EXPECT_NEAR(r.perplexity, 1.0, 1e-12);
}

TEST(Perplexity, UniformModelScoresVocabSize) {
    const auto corpus = oracle::random_tokens(200, 1);
    const auto r = eval_perplexity(constant_predictor(256, 0, 0.0), corpus, 16);
    EXPECT_NEAR(r.perplexity, 256.0, 1e-6);
}

TEST(Perplexity, MatchesLogitOracle) {
    const TransformerModel m = TransformerModel::initialize(oracle::tiny_config(2, 16, 2, 48, 16), 3, 0.2);
    const auto corpus = oracle::random_tokens(101, 2);
    const auto r = eval_perplexity(m, corpus, 12, "rand");
    EXPECT_EQ(r.segments, 8u);
    EXPECT_EQ(r.tokens_evaluated, 96u);
    EXPECT_EQ(r.corpus, "rand");
    long double total = 0;
    for (std::size_t j = 0; j < 8; ++j) {
        const std::vector<Token> in(corpus.begin() + j * 12, corpus.begin() + j * 12 + 12);
        const Tensor logits = forward(m, in).logits;
        for (std::size_t t = 0; t < 12; ++t) total -= oracle::log_prob(logits, t, corpus[j * 12 + t + 1]);
    }
    EXPECT_NEAR(r.mean_nll, static_cast<double>(total / 96), 1e-12);
    EXPECT_NEAR(r.perplexity, std::exp(static_cast<double>(total / 96)), 1e-8);
}

TEST(Perplexity, ThreadIndependent) {
    const TransformerModel m = TransformerModel::initialize(oracle::tiny_config(2), 3, 0.2);
    const auto corpus = oracle::random_tokens(300, 4);
    EXPECT_EQ(eval_perplexity(m, corpus, 16).perplexity, eval_perplexity(m, corpus, 16, {}, 3).perplexity);
}

TEST(Perplexity, Errors) {
    const TransformerModel m = TransformerModel::initialize(oracle::tiny_config(1), 3);
    const auto corpus = oracle::random_tokens(10, 4);
    EXPECT_THROW(eval_perplexity(m, corpus, 10), InputError);
    EXPECT_THROW(eval_perplexity(m, oracle::random_tokens(100, 4), 17), InputError);
    EXPECT_THROW(eval_perplexity(m, corpus, 0), InputError);
}

TEST(Bench, ReportsMedianAndShape) {
    const TransformerModel m = TransformerModel::initialize(oracle::tiny_config(2), 3);
    const auto r = bench_forward(m, 2, 8, 3, 1);
    EXPECT_EQ(r.samples_ms.size(), 3u);
    EXPECT_EQ(r.latency_ms, median(r.samples_ms));
    EXPECT_NEAR(r.tokens_per_second, 16.0 / (r.latency_ms / 1000.0), 1e-9 * r.tokens_per_second);
    EXPECT_EQ(r.layers_present, 2u);
    EXPECT_THROW(bench_forward(m, 2, 8, 2), InputError);
    EXPECT_THROW(bench_forward(m, 2, 17, 3), InputError);
}

TEST(Median, OddAndEven) {
    EXPECT_EQ(median({3, 1, 2}), 2.0);
    EXPECT_EQ(median({4, 1, 3, 2}), 2.5);
    EXPECT_THROW(median({}), InputError);
}

TEST(Compare, SingleCellMatchesDirectEvaluation) {
    const TransformerModel m = TransformerModel::initialize(oracle::tiny_config(4, 8, 2, 16, 8), 5, 0.3);
    const auto calib_corpus = oracle::random_tokens(400, 6);
    const auto held = oracle::random_tokens(120, 7);
    CompareConfig cfg;
    cfg.cells = {GridCell{Metric::grad_norm, PruneMode::iterative, false}};
    cfg.seeds = {11};
    cfg.calib_n = 4;
    cfg.calib_t = 6;
    cfg.eval_t = 8;
    const auto table = compare_runs(m, calib_corpus, held, cfg);
    ASSERT_EQ(table.cells.size(), 1u);
    ASSERT_EQ(table.cells[0].runs.size(), 1u);
    const CellRun& run = table.cells[0].runs[0];
    ASSERT_TRUE(run.ok) << run.error;
    const auto calib = build_calibration(calib_corpus, 4, 6, 11);
    const auto pr = prune_iterative(m, calib, 1, Metric::grad_norm);
    EXPECT_EQ(run.perplexity, eval_perplexity(pr.model, held, 8).perplexity);
    EXPECT_EQ(run.removed, pr.run.removal_order);
    EXPECT_EQ(*table.cells[0].median_perplexity, run.perplexity);
    EXPECT_TRUE(table.claims.empty());
}

TEST(Compare, GradNormCostsFewerPassesThanLossDelta) {
    const TransformerModel m = TransformerModel::initialize(oracle::tiny_config(4, 8, 2, 16, 8), 5, 0.3);
    CompareConfig cfg;
    cfg.cells = {GridCell{Metric::grad_norm, PruneMode::iterative, false},
                 GridCell{Metric::loss_delta, PruneMode::iterative, false},
                 GridCell{Metric::grad_norm, PruneMode::iterative, true}};
    cfg.seeds = {1, 2};
    cfg.calib_n = 3;
    cfg.calib_t = 6;
    cfg.eval_t = 8;
    const auto table = compare_runs(m, oracle::random_tokens(400, 8), oracle::random_tokens(100, 9), cfg);
    EXPECT_LT(*table.cells[0].median_passes, *table.cells[1].median_passes);
    ASSERT_FALSE(table.claims.empty());
    std::size_t tallied = 0;
    for (const auto& c : table.claims) tallied += c.wins + c.losses + c.ties;
    EXPECT_EQ(tallied, 2u * table.claims.size());
    const std::string csv = comparison_csv(table);
    EXPECT_EQ(csv.rfind("metric,mode,compensated,seed,perplexity", 0), 0u);
    EXPECT_NE(csv.find("grad-norm,iterative,true,median,"), std::string::npos);
}

TEST(Compare, FailingCellIsRecorded) {
    const TransformerModel m = TransformerModel::initialize(oracle::tiny_config(4, 8, 2, 16, 8), 5, 0.3);
    CompareConfig cfg;
    cfg.cells = {GridCell{Metric::grad_norm, PruneMode::one_shot, false}};
    cfg.calib_n = 1000; // corpus too short
    cfg.calib_t = 6;
    cfg.eval_t = 8;
    const auto table = compare_runs(m, oracle::random_tokens(100, 8), oracle::random_tokens(100, 9), cfg);
    EXPECT_FALSE(table.cells[0].runs[0].ok);
    EXPECT_FALSE(table.cells[0].median_perplexity.has_value());
    EXPECT_NE(table.cells[0].runs[0].error.find("too short"), std::string::npos);
}
