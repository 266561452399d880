#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gradmap/autodiff.hpp"
#include "gradmap/tensor.hpp"

namespace gradmap {

using Token = std::uint32_t;

enum class Precision { f32, f64 };

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 32;
    std::size_t n_heads = 4;
    std::size_t d_ffn = 128;
    std::size_t vocab_size = 257;
    std::size_t max_seq = 128;
    Precision precision = Precision::f64;

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ffn < 1 || vocab_size < 1 || max_seq < 1) {
            throw InputError("model config: all counts must be >= 1");
        }
        if (d_model % n_heads != 0) throw InputError("model config: d_model must be divisible by n_heads");
        if (d_ffn <= d_model) throw InputError("model config: d_ffn must exceed d_model");
    }

    bool operator==(const ModelConfig&) const = default;
};

/// The nine learnable tensors of a decoder layer.
enum class LayerWeight { attn_norm, w_q, w_k, w_v, w_o, ffn_norm, w_gate, w_up, w_down };

inline constexpr std::array<LayerWeight, 9> kLayerWeights = {
    LayerWeight::attn_norm, LayerWeight::w_q,    LayerWeight::w_k,
    LayerWeight::w_v,       LayerWeight::w_o,    LayerWeight::ffn_norm,
    LayerWeight::w_gate,    LayerWeight::w_up,   LayerWeight::w_down};

inline std::string_view weight_name(LayerWeight w) {
    switch (w) {
    case LayerWeight::attn_norm: return "attn_norm";
    case LayerWeight::w_q: return "w_q";
    case LayerWeight::w_k: return "w_k";
    case LayerWeight::w_v: return "w_v";
    case LayerWeight::w_o: return "w_o";
    case LayerWeight::ffn_norm: return "ffn_norm";
    case LayerWeight::w_gate: return "w_gate";
    case LayerWeight::w_up: return "w_up";
    case LayerWeight::w_down: return "w_down";
    }
    return "?";
}

inline LayerWeight parse_weight_name(std::string_view s) {
    for (LayerWeight w : kLayerWeights) {
        if (weight_name(w) == s) return w;
    }
    throw InputError("unknown layer weight '" + std::string(s) + "'");
}

enum class Side { left, right };

struct DecoderLayer {
    Tensor attn_norm;                // d
    Tensor w_q, w_k, w_v, w_o;       // d x d
    Tensor ffn_norm;                 // d
    Tensor w_gate, w_up;             // k x d
    Tensor w_down;                   // d x k

    Tensor& weight(LayerWeight w) {
        switch (w) {
        case LayerWeight::attn_norm: return attn_norm;
        case LayerWeight::w_q: return w_q;
        case LayerWeight::w_k: return w_k;
        case LayerWeight::w_v: return w_v;
        case LayerWeight::w_o: return w_o;
        case LayerWeight::ffn_norm: return ffn_norm;
        case LayerWeight::w_gate: return w_gate;
        case LayerWeight::w_up: return w_up;
        case LayerWeight::w_down: return w_down;
        }
        throw InputError("bad layer weight");
    }
    const Tensor& weight(LayerWeight w) const { return const_cast<DecoderLayer*>(this)->weight(w); }

    Dims expected_dims(LayerWeight w, const ModelConfig& c) const {
        switch (w) {
        case LayerWeight::attn_norm:
        case LayerWeight::ffn_norm: return {c.d_model};
        case LayerWeight::w_gate:
        case LayerWeight::w_up: return {c.d_ffn, c.d_model};
        case LayerWeight::w_down: return {c.d_model, c.d_ffn};
        default: return {c.d_model, c.d_model};
        }
    }
};

inline std::string layer_param_name(int original_index, LayerWeight w) {
    return "layers." + std::to_string(original_index) + "." + std::string(weight_name(w));
}

struct IndexedLayer {
    int original_index = 0;
    DecoderLayer layer;
};

/// LLaMA-style pre-norm decoder with learned absolute positions, SwiGLU FFN
/// and an untied output head. Layers keep their original index when others
/// are removed.
class TransformerModel {
public:
    TransformerModel(ModelConfig config, Tensor embedding, Tensor position, Tensor final_norm,
                     Tensor lm_head, std::vector<IndexedLayer> layers, std::string provenance = {})
        : config_(config), embedding_(std::move(embedding)), position_(std::move(position)),
          final_norm_(std::move(final_norm)), lm_head_(std::move(lm_head)),
          layers_(std::move(layers)), provenance_(std::move(provenance)) {
        config_.validate();
        const std::size_t d = config_.d_model;
        auto check = [](const Tensor& t, const Dims& want, const std::string& name) {
            if (t.dims() != want) {
                throw ShapeError(name + " has dims " + dims_string(t.dims()) + ", expected " +
                                 dims_string(want));
            }
        };
        check(embedding_, {config_.vocab_size, d}, "embedding");
        check(position_, {config_.max_seq, d}, "position_embedding");
        check(final_norm_, {d}, "final_norm");
        check(lm_head_, {config_.vocab_size, d}, "lm_head");
        int prev = -1;
        for (const auto& il : layers_) {
            if (il.original_index <= prev || il.original_index >= static_cast<int>(config_.n_layers)) {
                throw InputError("layer original indices must be strictly increasing and < n_layers");
            }
            prev = il.original_index;
            for (LayerWeight w : kLayerWeights) {
                check(il.layer.weight(w), il.layer.expected_dims(w, config_),
                      layer_param_name(il.original_index, w));
            }
        }
        for (int i = 0; i < static_cast<int>(config_.n_layers); ++i) {
            if (!is_present(i)) removed_.insert(i);
        }
    }

    /// Gaussian(0, init_std) projections and embeddings, unit norm gains.
    static TransformerModel initialize(const ModelConfig& config, std::uint64_t seed,
                                       double init_std = 0.02) {
        config.validate();
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, init_std);
        auto gaussian = [&](Dims dims) {
            Tensor t(std::move(dims));
            for (double& v : t.data()) v = normal(rng);
            return t;
        };
        const std::size_t d = config.d_model;
        const std::size_t k = config.d_ffn;
        Tensor embedding = gaussian({config.vocab_size, d});
        Tensor position = gaussian({config.max_seq, d});
        Tensor lm_head = gaussian({config.vocab_size, d});
        std::vector<IndexedLayer> layers;
        for (std::size_t i = 0; i < config.n_layers; ++i) {
            DecoderLayer l;
            l.attn_norm = Tensor::filled({d}, 1.0);
            l.w_q = gaussian({d, d});
            l.w_k = gaussian({d, d});
            l.w_v = gaussian({d, d});
            l.w_o = gaussian({d, d});
            l.ffn_norm = Tensor::filled({d}, 1.0);
            l.w_gate = gaussian({k, d});
            l.w_up = gaussian({k, d});
            l.w_down = gaussian({d, k});
            layers.push_back({static_cast<int>(i), std::move(l)});
        }
        return TransformerModel(config, std::move(embedding), std::move(position),
                                Tensor::filled({d}, 1.0), std::move(lm_head), std::move(layers));
    }

    const ModelConfig& config() const noexcept { return config_; }
    const std::vector<IndexedLayer>& layers() const noexcept { return layers_; }
    const std::set<int>& removed() const noexcept { return removed_; }
    const std::string& provenance() const noexcept { return provenance_; }
    void set_provenance(std::string p) { provenance_ = std::move(p); }

    const Tensor& embedding() const noexcept { return embedding_; }
    const Tensor& position_embedding() const noexcept { return position_; }
    const Tensor& final_norm() const noexcept { return final_norm_; }
    const Tensor& lm_head() const noexcept { return lm_head_; }

    std::vector<int> retained_indices() const {
        std::vector<int> out;
        for (const auto& il : layers_) out.push_back(il.original_index);
        return out;
    }

    bool is_present(int original_index) const {
        return std::any_of(layers_.begin(), layers_.end(),
                           [&](const IndexedLayer& il) { return il.original_index == original_index; });
    }

    const DecoderLayer& layer(int original_index) const {
        for (const auto& il : layers_) {
            if (il.original_index == original_index) return il.layer;
        }
        throw InputError("layer " + std::to_string(original_index) + " is not present");
    }

    DecoderLayer& layer(int original_index) {
        return const_cast<DecoderLayer&>(std::as_const(*this).layer(original_index));
    }

    /// Returns a copy without the given layer.
    TransformerModel remove_layer(int original_index) const {
        if (original_index < 0 || original_index >= static_cast<int>(config_.n_layers)) {
            throw InputError("remove_layer: index " + std::to_string(original_index) + " out of range");
        }
        if (!is_present(original_index)) {
            throw InputError("remove_layer: layer " + std::to_string(original_index) +
                             " already removed");
        }
        TransformerModel out = *this;
        std::erase_if(out.layers_,
                      [&](const IndexedLayer& il) { return il.original_index == original_index; });
        out.removed_.insert(original_index);
        return out;
    }

    /// Replaces one weight of a present layer by W' * W (left) or W * W' (right).
    TransformerModel fold_weight(int original_index, LayerWeight target, Side side,
                                 const Tensor& w_prime) const {
        if (target == LayerWeight::attn_norm || target == LayerWeight::ffn_norm) {
            throw InputError("fold_weight: norm gains cannot be folded");
        }
        TransformerModel out = *this;
        Tensor& w = out.layer(original_index).weight(target);
        const std::size_t want = side == Side::left ? w.rows() : w.cols();
        if (w_prime.rank() != 2 || w_prime.rows() != want || w_prime.cols() != want) {
            throw ShapeError("fold_weight: W' has dims " + dims_string(w_prime.dims()) +
                             ", expected " + std::to_string(want) + "x" + std::to_string(want));
        }
        w = side == Side::left ? matmul(w_prime, w) : matmul(w, w_prime);
        return out;
    }

    /// W_down <- W' * W_down for the given layer.
    TransformerModel fold_compensation(int original_index, const Tensor& w_prime) const {
        return fold_weight(original_index, LayerWeight::w_down, Side::left, w_prime);
    }

    /// Visits every learnable tensor in a fixed order with its checkpoint name.
    template <typename Fn>
    void for_each_parameter(Fn&& fn) {
        fn(std::string("embedding"), embedding_);
        fn(std::string("position_embedding"), position_);
        for (auto& il : layers_) {
            for (LayerWeight w : kLayerWeights) {
                fn(layer_param_name(il.original_index, w), il.layer.weight(w));
            }
        }
        fn(std::string("final_norm"), final_norm_);
        fn(std::string("lm_head"), lm_head_);
    }

    template <typename Fn>
    void for_each_parameter(Fn&& fn) const {
        const_cast<TransformerModel*>(this)->for_each_parameter(
            [&](const std::string& name, Tensor& t) { fn(name, std::as_const(t)); });
    }

    bool operator==(const TransformerModel& other) const {
        if (!(config_ == other.config_) || removed_ != other.removed_) return false;
        bool same = true;
        std::vector<const Tensor*> mine;
        for_each_parameter([&](const std::string&, const Tensor& t) { mine.push_back(&t); });
        std::size_t i = 0;
        other.for_each_parameter([&](const std::string&, const Tensor& t) {
            if (i >= mine.size() || !(*mine[i] == t)) same = false;
            ++i;
        });
        return same && i == mine.size();
    }

private:
    ModelConfig config_;
    Tensor embedding_;
    Tensor position_;
    Tensor final_norm_;
    Tensor lm_head_;
    std::vector<IndexedLayer> layers_;
    std::set<int> removed_;
    std::string provenance_;
};

// --- forward -----------------------------------------------------------------

/// Counts model evaluations; shared across threads.
struct PassCounter {
    std::atomic<std::size_t> forwards{0};
    std::atomic<std::size_t> backwards{0};

    void reset() {
        forwards = 0;
        backwards = 0;
    }
};

/// Activation streams inside one layer, token-major (tokens x width).
enum class CapturePoint : std::uint32_t {
    layer_input = 1u << 0,   // residual stream entering the layer
    attn_in = 1u << 1,       // attn_norm(layer_input)
    q = 1u << 2,
    k = 1u << 3,
    v = 1u << 4,
    context = 1u << 5,       // attention output before W_O
    attn_out = 1u << 6,      // W_O * context
    ffn_residual = 1u << 7,  // X_F: layer_input + attn_out
    ffn_in = 1u << 8,        // ffn_norm(X_F)
    gate = 1u << 9,          // W_gate * ffn_in (pre-activation)
    up = 1u << 10,           // W_up * ffn_in
    down_input = 1u << 11,   // X_down: silu(gate) * up
    layer_output = 1u << 12, // X_F + W_down * X_down
};

inline constexpr std::uint32_t operator|(CapturePoint a, CapturePoint b) {
    return static_cast<std::uint32_t>(a) | static_cast<std::uint32_t>(b);
}
inline constexpr std::uint32_t operator|(std::uint32_t a, CapturePoint b) {
    return a | static_cast<std::uint32_t>(b);
}
inline constexpr std::uint32_t kAllCapturePoints = (1u << 13) - 1;

struct CaptureSpec {
    std::set<int> layers;   // original indices
    std::uint32_t points = 0;

    bool wants(int layer, CapturePoint p) const {
        return (points & static_cast<std::uint32_t>(p)) != 0 && layers.count(layer) != 0;
    }
};

struct LayerCapture {
    std::map<CapturePoint, Tensor> streams;

    const Tensor& at(CapturePoint p) const {
        auto it = streams.find(p);
        if (it == streams.end()) throw InputError("capture point was not requested");
        return it->second;
    }
};

struct ActivationTrace {
    std::size_t tokens = 0;
    std::map<int, LayerCapture> layers;
};

/// Linear map inserted at a weight's output (left: y = W'(Wx)) or input
/// (right: y = W(W'x)); used to check folded weights against the unfolded path.
struct Interposition {
    int layer = 0;
    LayerWeight weight = LayerWeight::w_down;
    Side side = Side::left;
    Tensor matrix;
};

struct ForwardOptions {
    CaptureSpec capture;
    std::set<int> skip;                     // layers bypassed (treated as removed)
    std::vector<Interposition> interpose;
    PassCounter* counter = nullptr;
};

namespace detail {

inline void validate_tokens(const ModelConfig& c, std::span<const Token> tokens) {
    if (tokens.empty()) throw InputError("forward: empty token sequence");
    if (tokens.size() > c.max_seq) {
        throw InputError("forward: sequence length " + std::to_string(tokens.size()) +
                         " exceeds max_seq " + std::to_string(c.max_seq));
    }
    for (Token t : tokens) {
        if (t >= c.vocab_size) {
            throw InputError("forward: token id " + std::to_string(t) + " out of range (vocab " +
                             std::to_string(c.vocab_size) + ")");
        }
    }
}

inline Var param(Tape& tape, const std::string& name, const Tensor& t) {
    return tape.recording() ? tape.parameter(name, t) : tape.constant(t);
}

} // namespace detail

/// Linear maps inserted at a weight: left gives W'(W x), right gives W(W' x).
using LayerInserts = std::map<LayerWeight, std::pair<Side, Var>>;

/// One pre-norm decoder layer applied to the residual stream `h`.
/// `p(w)` yields the Var for weight `w`; `capture(point, v)` observes
/// intermediate streams.
template <typename ParamFn, typename CaptureFn>
Var layer_on_tape(Var h, std::size_t heads, ParamFn&& p, const LayerInserts& inserts, CaptureFn&& capture) {
    auto apply = [&](Var x, LayerWeight w) {
        Var wv = p(w);
        const auto it = inserts.find(w);
        if (it == inserts.end()) return linear(x, wv);
        const auto& [side, m] = it->second;
        return side == Side::left ? linear(linear(x, wv), m) : linear(linear(x, m), wv);
    };
    capture(CapturePoint::layer_input, h);
    Var a_in = rms_norm(h, p(LayerWeight::attn_norm));
    capture(CapturePoint::attn_in, a_in);
    Var q = apply(a_in, LayerWeight::w_q);
    Var k = apply(a_in, LayerWeight::w_k);
    Var v = apply(a_in, LayerWeight::w_v);
    capture(CapturePoint::q, q);
    capture(CapturePoint::k, k);
    capture(CapturePoint::v, v);
    Var ctx = causal_attention(q, k, v, heads);
    capture(CapturePoint::context, ctx);
    Var attn = apply(ctx, LayerWeight::w_o);
    capture(CapturePoint::attn_out, attn);
    Var xf = add(h, attn);
    capture(CapturePoint::ffn_residual, xf);
    Var f_in = rms_norm(xf, p(LayerWeight::ffn_norm));
    capture(CapturePoint::ffn_in, f_in);
    Var gate = apply(f_in, LayerWeight::w_gate);
    Var up = apply(f_in, LayerWeight::w_up);
    capture(CapturePoint::gate, gate);
    capture(CapturePoint::up, up);
    Var xdown = mul(silu(gate), up);
    capture(CapturePoint::down_input, xdown);
    Var out = add(xf, apply(xdown, LayerWeight::w_down));
    capture(CapturePoint::layer_output, out);
    return out;
}

/// Evaluates the model on one sequence, recording on `tape`. Returns logits
/// (tokens x vocab). Parameters are registered on a recording tape under
/// their checkpoint names.
inline Var forward_on_tape(const TransformerModel& model, std::span<const Token> tokens, Tape& tape,
                           const ForwardOptions& opts = {}, ActivationTrace* trace = nullptr) {
    const ModelConfig& c = model.config();
    detail::validate_tokens(c, tokens);
    if (opts.counter) ++opts.counter->forwards;
    const std::size_t n = tokens.size();

    std::vector<Token> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<Token>(i);

    Var emb = detail::param(tape, "embedding", model.embedding());
    Var pos = detail::param(tape, "position_embedding", model.position_embedding());
    Var h = add(embedding(emb, tokens), embedding(pos, positions));

    if (trace) trace->tokens = n;

    for (const auto& il : model.layers()) {
        const int idx = il.original_index;
        if (opts.skip.count(idx)) continue;
        LayerInserts inserts;
        for (const auto& ip : opts.interpose) {
            if (ip.layer == idx) inserts.emplace(ip.weight, std::make_pair(ip.side, tape.constant(ip.matrix)));
        }
        auto p = [&](LayerWeight w) { return detail::param(tape, layer_param_name(idx, w), il.layer.weight(w)); };
        auto capture = [&](CapturePoint cp, Var v) {
            if (trace && opts.capture.wants(idx, cp)) trace->layers[idx].streams[cp] = v.value();
        };
        h = layer_on_tape(h, c.n_heads, p, inserts, capture);
    }

    Var normed = rms_norm(h, detail::param(tape, "final_norm", model.final_norm()));
    return linear(normed, detail::param(tape, "lm_head", model.lm_head()));
}

struct ForwardResult {
    Tensor logits;
    ActivationTrace trace;
};

/// Inference forward pass (no gradient recording).
inline ForwardResult forward(const TransformerModel& model, std::span<const Token> tokens,
                             const ForwardOptions& opts = {}) {
    Tape tape(false);
    ForwardResult out;
    Var logits = forward_on_tape(model, tokens, tape, opts, &out.trace);
    out.logits = logits.value();
    return out;
}

/// A next-token prediction example: target[t] follows input[0..t].
struct Sample {
    std::vector<Token> input;
    std::vector<Token> target;
};

inline double sequence_loss(const TransformerModel& model, const Sample& s,
                            const ForwardOptions& opts = {}) {
    Tape tape(false);
    Var logits = forward_on_tape(model, s.input, tape, opts);
    return cross_entropy(logits, s.target).value().item();
}

struct LossAndGradients {
    double loss = 0.0;
    GradientMap grads;
};

/// One forward and one backward pass of the mean next-token cross-entropy.
inline LossAndGradients loss_and_gradients(const TransformerModel& model, const Sample& s,
                                           const ForwardOptions& opts = {}) {
    Tape tape(true);
    Var logits = forward_on_tape(model, s.input, tape, opts);
    Var loss = cross_entropy(logits, s.target);
    LossAndGradients out;
    out.loss = loss.value().item();
    out.grads = tape.backward(loss);
    if (opts.counter) ++opts.counter->backwards;
    return out;
}

} // namespace gradmap
