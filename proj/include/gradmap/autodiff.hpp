#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gradmap/tensor.hpp"

namespace gradmap {

class Tape;

/// Handle to a node on a Tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
};

/// Gradients of a scalar loss keyed by parameter name (ordered, so iteration
/// is deterministic).
using GradientMap = std::map<std::string, Tensor>;

/// Single-owner record of tensor operations for reverse-mode differentiation.
///
/// A tape built with `record = false` still evaluates every operation but keeps
/// no backward closures; it is the inference path and `backward` on it fails.
class Tape {
public:
    using Grads = std::vector<Tensor>;
    using BackwardFn = std::function<void(const Tape&, const Tensor& grad_out, Grads& grads)>;

    explicit Tape(bool record = true) : record_(record) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return record_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    Var constant(Tensor value) { return push(std::move(value), {}, nullptr); }

    Var parameter(std::string name, Tensor value) {
        Var v = push(std::move(value), {}, nullptr);
        nodes_[v.id].name = std::move(name);
        nodes_[v.id].is_param = true;
        nodes_[v.id].needs_grad = record_;
        return v;
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    const Tensor& value(Var v) const { return value(v.id); }

    /// Records an operation. `fn` is stored only when some input needs a
    /// gradient and the tape is recording.
    Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
        bool needs = false;
        if (record_) {
            for (std::size_t in : inputs) needs = needs || nodes_[in].needs_grad;
        }
        Node node;
        node.value = std::move(value);
        node.needs_grad = needs;
        if (needs) node.backward = std::move(fn);
        nodes_.push_back(std::move(node));
        return Var{this, nodes_.size() - 1};
    }

    /// Reverse sweep from a scalar root. Returns the gradient of every
    /// registered parameter (zeros for parameters the loss does not reach).
    GradientMap backward(Var loss) const {
        if (!record_) throw InputError("backward: tape was built without recording");
        if (loss.id >= nodes_.size()) throw InputError("backward: node not on this tape");
        if (nodes_[loss.id].value.size() != 1) {
            throw InputError("backward: root must be a scalar, got dims " +
                             dims_string(nodes_[loss.id].value.dims()));
        }
        Grads grads(nodes_.size());
        grads[loss.id] = Tensor::filled(nodes_[loss.id].value.dims(), 1.0);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            const Node& node = nodes_[i];
            if (!node.backward || grads[i].empty()) continue;
            node.backward(*this, grads[i], grads);
            grads[i] = Tensor();
        }
        GradientMap out;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const Node& node = nodes_[i];
            if (!node.is_param) continue;
            Tensor g = grads[i].empty() ? Tensor::zeros(node.value.dims()) : std::move(grads[i]);
            auto [it, inserted] = out.emplace(node.name, std::move(g));
            if (!inserted) throw InputError("backward: duplicate parameter name " + node.name);
        }
        return out;
    }

    /// Adds `g` into the gradient slot of node `id` (allocating on first use).
    static void accumulate(Grads& grads, std::size_t id, const Tensor& g) {
        Tensor& slot = grads[id];
        if (slot.empty()) {
            slot = g;
            return;
        }
        auto dst = slot.data();
        auto src = g.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }

    static void accumulate(Grads& grads, std::size_t id, Tensor&& g) {
        Tensor& slot = grads[id];
        if (slot.empty()) {
            slot = std::move(g);
            return;
        }
        auto dst = slot.data();
        auto src = g.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }

private:
    struct Node {
        Tensor value;
        BackwardFn backward;
        std::string name;
        bool is_param = false;
        bool needs_grad = false;
    };

    bool record_;
    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {
inline Tape& same_tape(Var a, Var b) {
    if (a.tape != b.tape || a.tape == nullptr) throw InputError("operands live on different tapes");
    return *a.tape;
}
} // namespace detail

// --- primitives -------------------------------------------------------------

inline Var matmul(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    return tape.push(matmul(a.value(), b.value()), {a.id, b.id},
                     [a = a.id, b = b.id](const Tape& t, const Tensor& g, Tape::Grads& grads) {
                         Tape::accumulate(grads, a, matmul_nt(g, t.value(b)));
                         Tape::accumulate(grads, b, matmul_tn(t.value(a), g));
                     });
}

/// x[n x in] * w[out x in]^T
inline Var linear(Var x, Var w) {
    Tape& tape = detail::same_tape(x, w);
    return tape.push(matmul_nt(x.value(), w.value()), {x.id, w.id},
                     [x = x.id, w = w.id](const Tape& t, const Tensor& g, Tape::Grads& grads) {
                         Tape::accumulate(grads, x, matmul(g, t.value(w)));
                         Tape::accumulate(grads, w, matmul_tn(g, t.value(x)));
                     });
}

inline Var add(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    return tape.push(add(a.value(), b.value()), {a.id, b.id},
                     [a = a.id, b = b.id](const Tape&, const Tensor& g, Tape::Grads& grads) {
                         Tape::accumulate(grads, a, g);
                         Tape::accumulate(grads, b, g);
                     });
}

inline Var mul(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    return tape.push(hadamard(a.value(), b.value()), {a.id, b.id},
                     [a = a.id, b = b.id](const Tape& t, const Tensor& g, Tape::Grads& grads) {
                         Tape::accumulate(grads, a, hadamard(g, t.value(b)));
                         Tape::accumulate(grads, b, hadamard(g, t.value(a)));
                     });
}

inline Var scale(Var a, double s) {
    return a.tape->push(scaled(a.value(), s), {a.id},
                        [a = a.id, s](const Tape&, const Tensor& g, Tape::Grads& grads) {
                            Tape::accumulate(grads, a, scaled(g, s));
                        });
}

inline Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    return a.tape->push(Tensor::scalar(s), {a.id},
                        [a = a.id](const Tape& t, const Tensor& g, Tape::Grads& grads) {
                            Tape::accumulate(grads, a, Tensor::filled(t.value(a).dims(), g.item()));
                        });
}

/// Row-wise RMS normalization: y = x / sqrt(mean(x^2) + eps) * gain.
inline Var rms_norm(Var x, Var gain, double eps = 1e-6) {
    Tape& tape = detail::same_tape(x, gain);
    const Tensor& xv = x.value();
    const Tensor& gv = gain.value();
    const std::size_t n = xv.rows();
    const std::size_t d = xv.cols();
    if (gv.size() != d) throw ShapeError("rms_norm: gain length does not match width");
    Tensor y({n, d});
    std::vector<double> inv_rms(n);
    for (std::size_t r = 0; r < n; ++r) {
        double ms = 0.0;
        for (std::size_t c = 0; c < d; ++c) ms += xv(r, c) * xv(r, c);
        ms /= static_cast<double>(d);
        inv_rms[r] = 1.0 / std::sqrt(ms + eps);
        for (std::size_t c = 0; c < d; ++c) y(r, c) = xv(r, c) * inv_rms[r] * gv[c];
    }
    return tape.push(
        std::move(y), {x.id, gain.id},
        [x = x.id, gain = gain.id, inv_rms = std::move(inv_rms)](const Tape& t, const Tensor& g,
                                                                 Tape::Grads& grads) {
            const Tensor& xv = t.value(x);
            const Tensor& gv = t.value(gain);
            const std::size_t n = xv.rows();
            const std::size_t d = xv.cols();
            Tensor gx({n, d});
            Tensor gg(gv.dims());
            for (std::size_t r = 0; r < n; ++r) {
                const double ir = inv_rms[r];
                double dot = 0.0; // sum_c g*gain*x
                for (std::size_t c = 0; c < d; ++c) {
                    dot += g(r, c) * gv[c] * xv(r, c);
                    gg[c] += g(r, c) * xv(r, c) * ir;
                }
                const double k = ir * ir * ir * dot / static_cast<double>(d);
                for (std::size_t c = 0; c < d; ++c) {
                    gx(r, c) = g(r, c) * gv[c] * ir - xv(r, c) * k;
                }
            }
            Tape::accumulate(grads, x, std::move(gx));
            Tape::accumulate(grads, gain, std::move(gg));
        });
}

inline double silu_scalar(double v) { return v / (1.0 + std::exp(-v)); }

inline Var silu(Var x) {
    Tensor y = x.value();
    for (double& v : y.data()) v = silu_scalar(v);
    return x.tape->push(std::move(y), {x.id},
                        [x = x.id](const Tape& t, const Tensor& g, Tape::Grads& grads) {
                            const Tensor& xv = t.value(x);
                            Tensor gx(xv.dims());
                            for (std::size_t i = 0; i < xv.size(); ++i) {
                                const double s = 1.0 / (1.0 + std::exp(-xv[i]));
                                gx[i] = g[i] * s * (1.0 + xv[i] * (1.0 - s));
                            }
                            Tape::accumulate(grads, x, std::move(gx));
                        });
}

/// Rows of `table` selected by `ids`.
inline Var embedding(Var table, std::span<const std::uint32_t> ids) {
    const Tensor& tv = table.value();
    const std::size_t d = tv.cols();
    Tensor y({ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] >= tv.rows()) throw InputError("embedding: id out of range");
        for (std::size_t c = 0; c < d; ++c) y(r, c) = tv(ids[r], c);
    }
    std::vector<std::uint32_t> saved(ids.begin(), ids.end());
    return table.tape->push(
        std::move(y), {table.id},
        [table = table.id, ids = std::move(saved)](const Tape& t, const Tensor& g,
                                                   Tape::Grads& grads) {
            const Tensor& tv = t.value(table);
            Tensor gt(tv.dims());
            const std::size_t d = tv.cols();
            for (std::size_t r = 0; r < ids.size(); ++r) {
                for (std::size_t c = 0; c < d; ++c) gt(ids[r], c) += g(r, c);
            }
            Tape::accumulate(grads, table, std::move(gt));
        });
}

/// Causal softmax attention probabilities for one head: rows sum to one,
/// entries above the diagonal are zero. q, k are n x dh.
inline Tensor causal_attention_probs(const Tensor& scores) {
    const std::size_t n = scores.rows();
    Tensor p({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, scores(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            p(i, j) = std::exp(scores(i, j) - mx);
            z += p(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) p(i, j) /= z;
    }
    return p;
}

namespace detail {
inline Tensor head_slice(const Tensor& x, std::size_t head, std::size_t dh) {
    const std::size_t n = x.rows();
    Tensor out({n, dh});
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < dh; ++c) out(r, c) = x(r, head * dh + c);
    }
    return out;
}

inline void head_scatter_add(Tensor& dst, const Tensor& src, std::size_t head, std::size_t dh) {
    for (std::size_t r = 0; r < src.rows(); ++r) {
        for (std::size_t c = 0; c < dh; ++c) dst(r, head * dh + c) += src(r, c);
    }
}
} // namespace detail

/// Multi-head scaled dot-product attention with a causal mask. q, k, v are
/// n x d with heads laid out as contiguous column blocks of width d / heads.
inline Var causal_attention(Var q, Var k, Var v, std::size_t heads) {
    Tape& tape = detail::same_tape(q, k);
    detail::same_tape(q, v);
    const Tensor& qv = q.value();
    const std::size_t n = qv.rows();
    const std::size_t d = qv.cols();
    if (heads == 0 || d % heads != 0) throw ShapeError("causal_attention: width not divisible by heads");
    if (k.value().dims() != qv.dims() || v.value().dims() != qv.dims()) {
        throw ShapeError("causal_attention: q, k, v dims differ");
    }
    const std::size_t dh = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor out({n, d});
    std::vector<Tensor> probs;
    probs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const Tensor qh = detail::head_slice(qv, h, dh);
        const Tensor kh = detail::head_slice(k.value(), h, dh);
        const Tensor vh = detail::head_slice(v.value(), h, dh);
        Tensor p = causal_attention_probs(scaled(matmul_nt(qh, kh), inv_scale));
        detail::head_scatter_add(out, matmul(p, vh), h, dh);
        probs.push_back(std::move(p));
    }
    return tape.push(
        std::move(out), {q.id, k.id, v.id},
        [q = q.id, k = k.id, v = v.id, heads, dh, inv_scale,
         probs = std::move(probs)](const Tape& t, const Tensor& g, Tape::Grads& grads) {
            const Tensor& qv = t.value(q);
            Tensor gq(qv.dims()), gk(qv.dims()), gv(qv.dims());
            for (std::size_t h = 0; h < heads; ++h) {
                const Tensor& p = probs[h];
                const Tensor gh = detail::head_slice(g, h, dh);
                const Tensor qh = detail::head_slice(qv, h, dh);
                const Tensor kh = detail::head_slice(t.value(k), h, dh);
                const Tensor vh = detail::head_slice(t.value(v), h, dh);
                detail::head_scatter_add(gv, matmul_tn(p, gh), h, dh);
                const Tensor dp = matmul_nt(gh, vh);
                Tensor ds(p.dims());
                for (std::size_t i = 0; i < p.rows(); ++i) {
                    double rowdot = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) rowdot += dp(i, j) * p(i, j);
                    for (std::size_t j = 0; j <= i; ++j) {
                        ds(i, j) = p(i, j) * (dp(i, j) - rowdot) * inv_scale;
                    }
                }
                detail::head_scatter_add(gq, matmul(ds, kh), h, dh);
                detail::head_scatter_add(gk, matmul_tn(ds, qh), h, dh);
            }
            Tape::accumulate(grads, q, std::move(gq));
            Tape::accumulate(grads, k, std::move(gk));
            Tape::accumulate(grads, v, std::move(gv));
        });
}

/// Row-wise log-softmax values (plain tensor helper).
inline Tensor log_softmax_rows(const Tensor& x) {
    Tensor out = x;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < x.cols(); ++c) mx = std::max(mx, x(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) z += std::exp(x(r, c) - mx);
        const double lse = mx + std::log(z);
        for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) - lse;
    }
    return out;
}

/// Mean over rows of -log softmax(logits)[row, target].
inline Var cross_entropy(Var logits, std::span<const std::uint32_t> targets) {
    const Tensor& lv = logits.value();
    if (lv.rows() != targets.size()) {
        throw InputError("cross_entropy: " + std::to_string(lv.rows()) + " logit rows vs " +
                         std::to_string(targets.size()) + " targets");
    }
    if (targets.empty()) throw InputError("cross_entropy: no scored positions");
    Tensor logp = log_softmax_rows(lv);
    double total = 0.0;
    for (std::size_t r = 0; r < targets.size(); ++r) {
        if (targets[r] >= lv.cols()) throw InputError("cross_entropy: target out of range");
        total -= logp(r, targets[r]);
    }
    const double inv_n = 1.0 / static_cast<double>(targets.size());
    std::vector<std::uint32_t> saved(targets.begin(), targets.end());
    return logits.tape->push(
        Tensor::scalar(total * inv_n), {logits.id},
        [logits = logits.id, logp = std::move(logp), tg = std::move(saved),
         inv_n](const Tape&, const Tensor& g, Tape::Grads& grads) {
            Tensor gl(logp.dims());
            const double s = g.item() * inv_n;
            for (std::size_t r = 0; r < logp.rows(); ++r) {
                for (std::size_t c = 0; c < logp.cols(); ++c) gl(r, c) = std::exp(logp(r, c)) * s;
                gl(r, tg[r]) -= s;
            }
            Tape::accumulate(grads, logits, std::move(gl));
        });
}

inline Var log_softmax(Var x) {
    Tensor y = log_softmax_rows(x.value());
    return x.tape->push(y, {x.id},
                        [x = x.id, y](const Tape&, const Tensor& g, Tape::Grads& grads) {
                            Tensor gx(y.dims());
                            for (std::size_t r = 0; r < y.rows(); ++r) {
                                double gs = 0.0;
                                for (std::size_t c = 0; c < y.cols(); ++c) gs += g(r, c);
                                for (std::size_t c = 0; c < y.cols(); ++c) {
                                    gx(r, c) = g(r, c) - std::exp(y(r, c)) * gs;
                                }
                            }
                            Tape::accumulate(grads, x, std::move(gx));
                        });
}

/// sum_r x[r, ids[r]]
inline Var gather_sum(Var x, std::span<const std::uint32_t> ids) {
    const Tensor& xv = x.value();
    if (xv.rows() != ids.size()) throw InputError("gather_sum: row count mismatch");
    double s = 0.0;
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] >= xv.cols()) throw InputError("gather_sum: id out of range");
        s += xv(r, ids[r]);
    }
    std::vector<std::uint32_t> saved(ids.begin(), ids.end());
    return x.tape->push(Tensor::scalar(s), {x.id},
                        [x = x.id, ids = std::move(saved)](const Tape& t, const Tensor& g,
                                                           Tape::Grads& grads) {
                            Tensor gx(t.value(x).dims());
                            for (std::size_t r = 0; r < ids.size(); ++r) gx(r, ids[r]) += g.item();
                            Tape::accumulate(grads, x, std::move(gx));
                        });
}

} // namespace gradmap
