#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gradmap/calibration.hpp"
#include "gradmap/drift.hpp"
#include "gradmap/linalg.hpp"
#include "gradmap/model.hpp"
#include "gradmap/parallel.hpp"

namespace gradmap {

/// Smallest regularization weight the closed form will use; lambda = 0
/// (MSE-only) requests are raised to this so the normal equations stay SPD.
inline constexpr double kLambdaFloor = 1e-12;

enum class SolverKind { closed_form, iterative };

inline std::string_view solver_name(SolverKind s) {
    return s == SolverKind::closed_form ? "closed-form" : "iterative";
}

inline SolverKind parse_solver(std::string_view s) {
    if (s == "closed-form") return SolverKind::closed_form;
    if (s == "iterative") return SolverKind::iterative;
    throw InputError("unknown solver '" + std::string(s) + "' (expected closed-form or iterative)");
}

inline std::string_view side_name(Side s) { return s == Side::left ? "left" : "right"; }

inline Side parse_side(std::string_view s) {
    if (s == "left") return Side::left;
    if (s == "right") return Side::right;
    throw InputError("unknown side '" + std::string(s) + "' (expected left or right)");
}

/// CLI spelling of a compensation target: w-down, w-up, w-gate, w-q, w-k, w-v, w-o.
inline std::string target_name(LayerWeight w) {
    std::string s(weight_name(w));
    std::replace(s.begin(), s.end(), '_', '-');
    return s;
}

inline LayerWeight parse_target(std::string_view s) {
    std::string n(s);
    std::replace(n.begin(), n.end(), '-', '_');
    const LayerWeight w = parse_weight_name(n);
    if (w == LayerWeight::attn_norm || w == LayerWeight::ffn_norm) {
        throw InputError("norm gains are not compensation targets");
    }
    return w;
}

/// Calibration activations for fitting W' at one weight of one layer.
/// Every target reconstructs the original model's layer output X_O
/// (x_target, d x n, columns are tokens in sample order).
///
/// W_down is linear in W': the layer output is X_F + W' W_down X_down
/// (left) or X_F + W_down W' X_down (right), so x_in = X_down and
/// x_residual = X_F are all the solver needs. Any other target sits
/// upstream of a nonlinearity; the whole layer is re-run from the pruned
/// model's layer inputs with W' interposed at that weight.
struct CompensationProblem {
    int layer = 0;
    Side side = Side::left;
    LayerWeight target = LayerWeight::w_down;
    double lambda = 1e-3;
    Tensor weight;   // the target weight (out x in) in the pruned model
    Tensor x_target; // d x n

    // W_down only
    Tensor x_in;       // k x n
    Tensor x_residual; // d x n

    // other targets: per-sample streams, tokens x d
    DecoderLayer layer_weights;
    std::size_t heads = 1;
    std::vector<Tensor> layer_inputs;
    std::vector<Tensor> layer_targets;

    bool is_linear() const { return target == LayerWeight::w_down; }
    std::size_t tokens() const { return x_target.cols(); }
    std::size_t solution_dim() const { return side == Side::left ? weight.rows() : weight.cols(); }
};

struct ObjectiveValue {
    double total = 0.0;
    double mse = 0.0; // (1/n) ||prediction - x_target||_F^2
    double reg = 0.0; // lambda ||W' - I||_F^2
};

namespace detail {

/// Runs the problem's layer on one sample with W' interposed. When `tape`
/// records, W' is registered as the parameter "w_prime".
inline Var problem_layer(const CompensationProblem& p, std::size_t sample, const Tensor& w_prime, Tape& tape) {
    const Var wp = tape.recording() ? tape.parameter("w_prime", w_prime) : tape.constant(w_prime);
    LayerInserts inserts{{p.target, {p.side, wp}}};
    auto weight = [&](LayerWeight w) { return tape.constant(p.layer_weights.weight(w)); };
    return layer_on_tape(tape.constant(p.layer_inputs[sample]), p.heads, weight, inserts, [](CapturePoint, Var) {});
}

} // namespace detail

/// Compensated layer output (d x n) for a given W'.
inline Tensor compensated_output(const CompensationProblem& p, const Tensor& w_prime) {
    if (p.is_linear()) {
        const Tensor base = p.side == Side::left ? matmul(w_prime, matmul(p.weight, p.x_in))
                                                 : matmul(p.weight, matmul(w_prime, p.x_in));
        return add(base, p.x_residual);
    }
    std::vector<Tensor> blocks;
    for (std::size_t j = 0; j < p.layer_inputs.size(); ++j) {
        Tape tape(false);
        blocks.push_back(detail::problem_layer(p, j, w_prime, tape).value());
    }
    return transpose(vstack(blocks));
}

inline ObjectiveValue objective_value(const CompensationProblem& p, const Tensor& w_prime) {
    const std::size_t m = p.solution_dim();
    if (w_prime.rank() != 2 || w_prime.rows() != m || w_prime.cols() != m) {
        throw ShapeError("objective_value: W' has dims " + dims_string(w_prime.dims()));
    }
    ObjectiveValue v;
    v.mse = sum_squares(sub(compensated_output(p, w_prime), p.x_target)) / static_cast<double>(p.tokens());
    v.reg = p.lambda * sum_squares(sub(w_prime, Tensor::identity(m)));
    v.total = v.mse + v.reg;
    return v;
}

struct CompensationSolution {
    int layer = 0;
    Side side = Side::left;
    LayerWeight target = LayerWeight::w_down;
    double lambda = 0.0;
    SolverKind solver = SolverKind::closed_form;
    double lr = 0.0;
    std::size_t steps = 0;
    std::uint64_t seed = 0;
    Tensor w_prime;
    ObjectiveValue initial; // at W' = I
    ObjectiveValue final;
    double distance_to_identity = 0.0;
    std::vector<std::pair<std::size_t, double>> curve; // (step, total objective), iterative only
    double solve_seconds = 0.0;
};

namespace detail {

inline void validate_problem(const CompensationProblem& p) {
    const std::size_t out = p.weight.rows();
    const std::size_t n = p.tokens();
    if (n == 0) throw ShapeError("compensation problem has no tokens");
    if (!(p.lambda >= 0.0)) throw InputError("lambda must be >= 0");
    if (p.is_linear()) {
        if (p.x_in.rows() != p.weight.cols() || p.x_residual.rows() != out || p.x_target.rows() != out ||
            p.x_in.cols() != n || p.x_residual.cols() != n) {
            throw ShapeError("compensation problem blocks are inconsistent");
        }
        return;
    }
    if (p.layer_inputs.empty() || p.layer_inputs.size() != p.layer_targets.size()) {
        throw ShapeError("compensation problem has mismatched per-sample streams");
    }
}

// Quadratic pieces shared by both solvers:
//   left:  objective = (1/n)||W' B - T||^2 + lambda||W' - I||^2 with B = W x_in
//   right: objective = (1/n)||W W' X - T||^2 + lambda||W' - I||^2
struct Normal {
    Tensor gram_left;  // left: B B^T / n ; right: W^T W
    Tensor gram_right; // right only: X X^T / n
    Tensor cross;      // left: T B^T / n ; right: W^T T X^T / n
};

inline Normal normal_pieces(const CompensationProblem& p) {
    const double inv_n = 1.0 / static_cast<double>(p.tokens());
    const Tensor t = sub(p.x_target, p.x_residual);
    Normal nm;
    if (p.side == Side::left) {
        const Tensor b = matmul(p.weight, p.x_in);
        nm.gram_left = scaled(matmul_nt(b, b), inv_n);
        nm.cross = scaled(matmul_nt(t, b), inv_n);
    } else {
        nm.gram_left = matmul_tn(p.weight, p.weight);
        nm.gram_right = scaled(matmul_nt(p.x_in, p.x_in), inv_n);
        nm.cross = scaled(matmul(matmul_tn(p.weight, t), transpose(p.x_in)), inv_n);
    }
    return nm;
}

inline CompensationSolution start_solution(const CompensationProblem& p, SolverKind kind) {
    CompensationSolution s;
    s.layer = p.layer;
    s.side = p.side;
    s.target = p.target;
    s.lambda = p.lambda;
    s.solver = kind;
    s.initial = objective_value(p, Tensor::identity(p.solution_dim()));
    return s;
}

inline void finish_solution(const CompensationProblem& p, CompensationSolution& s,
                            std::chrono::steady_clock::time_point t0) {
    s.final = objective_value(p, s.w_prime);
    s.distance_to_identity = frobenius_norm(sub(s.w_prime, Tensor::identity(p.solution_dim())));
    s.solve_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace detail

/// Exact minimizer of the normalized objective.
///
/// Left side reduces to ridge_solve on (B, T) with lambda scaled by n.
/// Right side solves A W' C + lambda W' = R (A = W^T W, C = X X^T / n)
/// in the joint eigenbasis of A and C.
inline CompensationSolution solve_closed_form(const CompensationProblem& p) {
    detail::validate_problem(p);
    if (!p.is_linear()) {
        throw InputError("closed-form solve exists only for w-down; use the iterative solver for " +
                         target_name(p.target));
    }
    const auto t0 = std::chrono::steady_clock::now();
    CompensationSolution s = detail::start_solution(p, SolverKind::closed_form);
    const double lambda = std::max(p.lambda, kLambdaFloor);
    const double n = static_cast<double>(p.tokens());
    if (p.side == Side::left) {
        s.w_prime = ridge_solve(matmul(p.weight, p.x_in), sub(p.x_target, p.x_residual), lambda * n);
    } else {
        const detail::Normal nm = detail::normal_pieces(p);
        const std::size_t m = p.solution_dim();
        Tensor rhs = nm.cross;
        for (std::size_t i = 0; i < m; ++i) rhs(i, i) += lambda;
        const SymmetricEigen ea = symmetric_eigen(nm.gram_left);
        const SymmetricEigen ec = symmetric_eigen(nm.gram_right);
        Tensor y = matmul(matmul_tn(ea.vectors, rhs), ec.vectors);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                const double a = std::max(ea.values[i], 0.0);
                const double c = std::max(ec.values[j], 0.0);
                y(i, j) /= a * c + lambda;
            }
        }
        s.w_prime = matmul_nt(matmul(ea.vectors, y), ec.vectors);
    }
    if (!s.w_prime.all_finite()) throw NumericError("closed-form solve produced non-finite W'");
    detail::finish_solution(p, s, t0);
    return s;
}

namespace detail {

/// Objective and gradient at W for a target behind a nonlinearity,
/// by reverse-mode through the layer. Samples are reduced in order.
inline std::pair<ObjectiveValue, Tensor> layer_objective_and_gradient(const CompensationProblem& p,
                                                                      const Tensor& w, std::size_t threads) {
    auto per_sample = parallel_map(p.layer_inputs.size(), threads, [&](std::size_t j) {
        Tape tape(true);
        Var out = problem_layer(p, j, w, tape);
        Var diff = add(out, tape.constant(scaled(p.layer_targets[j], -1.0)));
        Var sq = sum(mul(diff, diff));
        return std::make_pair(sq.value().item(), tape.backward(sq).at("w_prime"));
    });
    const double inv_n = 1.0 / static_cast<double>(p.tokens());
    const std::size_t m = w.rows();
    Tensor grad({m, m});
    double sse = 0.0;
    for (const auto& [e, g] : per_sample) {
        sse += e;
        for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += g[k];
    }
    ObjectiveValue v;
    v.mse = sse * inv_n;
    double reg = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            const double d = w(i, j) - (i == j ? 1.0 : 0.0);
            reg += d * d;
            grad(i, j) = grad(i, j) * inv_n + 2.0 * p.lambda * d;
        }
    }
    v.reg = p.lambda * reg;
    v.total = v.mse + v.reg;
    return {v, std::move(grad)};
}

} // namespace detail

/// Full-batch Adam from W' = I on the same normalized objective. The batch
/// is the whole calibration stream, so the seed only labels the run.
/// `threads` parallelizes the per-sample passes of non-linear targets.
inline CompensationSolution solve_iterative(const CompensationProblem& p, double lr = 1e-3,
                                            std::size_t steps = 20000, std::uint64_t seed = 42,
                                            std::size_t curve_every = 1000, std::size_t threads = 1) {
    detail::validate_problem(p);
    if (!(lr > 0.0)) throw InputError("iterative solver: lr must be positive");
    const auto t0 = std::chrono::steady_clock::now();
    CompensationSolution s = detail::start_solution(p, SolverKind::iterative);
    s.lr = lr;
    s.steps = steps;
    s.seed = seed;
    const std::size_t m = p.solution_dim();
    const detail::Normal nm = p.is_linear() ? detail::normal_pieces(p) : detail::Normal{};
    const Tensor eye = Tensor::identity(m);

    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    Tensor w = eye;
    Tensor mom({m, m}), vel({m, m});
    s.curve.emplace_back(0, s.initial.total);
    for (std::size_t step = 1; step <= steps; ++step) {
        Tensor grad;
        if (p.is_linear()) {
            grad = p.side == Side::left ? matmul(w, nm.gram_left) : matmul(matmul(nm.gram_left, w), nm.gram_right);
            for (std::size_t k = 0; k < grad.size(); ++k) {
                grad[k] = 2.0 * (grad[k] - nm.cross[k]) + 2.0 * p.lambda * (w[k] - eye[k]);
            }
        } else {
            auto [obj, g] = detail::layer_objective_and_gradient(p, w, threads);
            if (!std::isfinite(obj.total)) {
                throw NumericError("iterative solver: non-finite objective at step " + std::to_string(step));
            }
            if (curve_every && step > 1 && (step - 1) % curve_every == 0) s.curve.emplace_back(step - 1, obj.total);
            grad = std::move(g);
        }
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        for (std::size_t k = 0; k < w.size(); ++k) {
            mom[k] = beta1 * mom[k] + (1.0 - beta1) * grad[k];
            vel[k] = beta2 * vel[k] + (1.0 - beta2) * grad[k] * grad[k];
            w[k] -= lr * (mom[k] / bc1) / (std::sqrt(vel[k] / bc2) + eps);
        }
        if (!w.all_finite()) {
            throw NumericError("iterative solver diverged at step " + std::to_string(step));
        }
        if (p.is_linear() && curve_every && step % curve_every == 0) {
            const double obj = objective_value(p, w).total;
            if (!std::isfinite(obj)) {
                throw NumericError("iterative solver: non-finite objective at step " + std::to_string(step));
            }
            s.curve.emplace_back(step, obj);
        }
    }
    s.w_prime = std::move(w);
    detail::finish_solution(p, s, t0);
    if (steps > 0 && s.curve.back().first != steps) s.curve.emplace_back(steps, s.final.total);
    return s;
}

/// Gathers the problem blocks for `layer` over the whole calibration stream.
inline CompensationProblem capture_problem(const TransformerModel& original, const TransformerModel& pruned,
                                           const CalibrationSet& calib, int layer, Side side,
                                           LayerWeight target, double lambda, std::size_t threads = 1) {
    if (!pruned.is_present(layer)) {
        throw InputError("capture_problem: layer " + std::to_string(layer) + " is not retained");
    }
    if (!original.is_present(layer)) {
        throw InputError("capture_problem: layer " + std::to_string(layer) + " absent from original model");
    }
    if (!(original.config() == pruned.config())) throw InputError("capture_problem: model configs differ");
    if (calib.samples.empty()) throw InputError("capture_problem: empty calibration set");

    CompensationProblem p;
    p.layer = layer;
    p.side = side;
    p.target = target;
    p.lambda = lambda;
    p.weight = pruned.layer(layer).weight(target);

    ForwardOptions oopts;
    oopts.capture.layers = {layer};
    oopts.capture.points = static_cast<std::uint32_t>(CapturePoint::layer_output);
    ForwardOptions popts;
    popts.capture.layers = {layer};
    popts.capture.points = p.is_linear() ? (CapturePoint::down_input | CapturePoint::ffn_residual)
                                         : static_cast<std::uint32_t>(CapturePoint::layer_input);

    struct Blocks {
        Tensor a, b, target;
    };
    auto blocks = parallel_map(calib.samples.size(), threads, [&](std::size_t j) {
        const auto& tokens = calib.samples[j].input;
        const auto rp = forward(pruned, tokens, popts);
        const auto ro = forward(original, tokens, oopts);
        const auto& cp = rp.trace.layers.at(layer);
        Blocks out;
        out.target = ro.trace.layers.at(layer).at(CapturePoint::layer_output);
        if (p.is_linear()) {
            out.a = cp.at(CapturePoint::down_input);
            out.b = cp.at(CapturePoint::ffn_residual);
        } else {
            out.a = cp.at(CapturePoint::layer_input);
        }
        return out;
    });
    std::vector<Tensor> as, bs, ts;
    for (auto& b : blocks) {
        as.push_back(std::move(b.a));
        bs.push_back(std::move(b.b));
        ts.push_back(std::move(b.target));
    }
    p.x_target = transpose(vstack(ts));
    if (p.is_linear()) {
        p.x_in = transpose(vstack(as));
        p.x_residual = transpose(vstack(bs));
    } else {
        p.layer_weights = pruned.layer(layer);
        p.heads = pruned.config().n_heads;
        p.layer_inputs = std::move(as);
        p.layer_targets = std::move(ts);
    }
    detail::validate_problem(p);
    return p;
}

/// Folds W' into the target weight: W' W (left) or W W' (right).
inline TransformerModel apply_solution(const TransformerModel& pruned, const CompensationSolution& sol) {
    return pruned.fold_weight(sol.layer, sol.target, sol.side, sol.w_prime);
}

struct CompensationConfig {
    CompensationStrategy strategy = CompensationStrategy::max_drift;
    std::size_t z = 1;
    Side side = Side::left;
    LayerWeight target = LayerWeight::w_down;
    double lambda = 1e-3;
    SolverKind solver = SolverKind::closed_form;
    double lr = 1e-3;
    std::size_t steps = 20000;
    std::uint64_t seed = 42;
    std::size_t threads = 1;
};

struct CompensationOutcome {
    TransformerModel model;
    DriftReport drift;
    std::vector<int> selected;
    std::vector<CompensationSolution> solutions;
};

/// Drift analysis, target selection, then one solve-and-fold per selected
/// layer (in selection order, each captured on the model compensated so far).
inline CompensationOutcome compensate(const TransformerModel& original, const TransformerModel& pruned,
                                      const CalibrationSet& calib, const CompensationConfig& cfg) {
    CompensationOutcome out{pruned, compute_drift(original, pruned, calib, cfg.threads), {}, {}};
    out.selected = select_compensation_targets(out.drift, cfg.strategy, cfg.z);
    for (int layer : out.selected) {
        const CompensationProblem p =
            capture_problem(original, out.model, calib, layer, cfg.side, cfg.target, cfg.lambda, cfg.threads);
        CompensationSolution sol = cfg.solver == SolverKind::closed_form
                                       ? solve_closed_form(p)
                                       : solve_iterative(p, cfg.lr, cfg.steps, cfg.seed, 1000, cfg.threads);
        out.model = apply_solution(out.model, sol);
        out.solutions.push_back(std::move(sol));
    }
    return out;
}

} // namespace gradmap
