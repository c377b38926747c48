#pragma once

// Sparse MoE layer: router scoring, top-K selection, masked softmax
// weighting, SwiGLU experts, and the analytic backward pass.
//
// Summation orders are fixed: the layer output accumulates expert
// contributions in ascending expert index, and every matrix-vector product
// reduces its inner dimension in index order. The single-token and batched
// paths therefore produce identical bits.

#include <smoe/numerics.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace smoe {

struct ExpertParams {
    Matrix w_gate;  // d_ff x d
    Matrix w_up;    // d_ff x d
    Matrix w_down;  // d x d_ff

    std::size_t dim() const noexcept { return w_gate.cols(); }
    std::size_t hidden_dim() const noexcept { return w_gate.rows(); }

    void validate() const {
        const auto d = dim(), f = hidden_dim();
        require_shape(w_up.rows() == f && w_up.cols() == d, "ExpertParams: w_up shape");
        require_shape(w_down.rows() == d && w_down.cols() == f, "ExpertParams: w_down shape");
    }

    static ExpertParams zeros(std::size_t d, std::size_t d_ff) {
        return {Matrix(d_ff, d), Matrix(d_ff, d), Matrix(d, d_ff)};
    }

    /// N(0, 1/d) for the input-side matrices, N(0, 1/d_ff) for w_down.
    static ExpertParams init(Rng& rng, std::size_t d, std::size_t d_ff) {
        ExpertParams e;
        e.w_gate = random_normal(rng, d_ff, d, 1.0 / std::sqrt(double(d)));
        e.w_up = random_normal(rng, d_ff, d, 1.0 / std::sqrt(double(d)));
        e.w_down = random_normal(rng, d, d_ff, 1.0 / std::sqrt(double(d_ff)));
        return e;
    }
};

struct RouterParams {
    Matrix w_r;   // N x d
    Vector bias;  // N; selection-only, never trained

    std::size_t num_experts() const noexcept { return w_r.rows(); }
    std::size_t dim() const noexcept { return w_r.cols(); }

    static RouterParams init(Rng& rng, std::size_t n, std::size_t d) {
        return {random_normal(rng, n, d, 1.0 / std::sqrt(double(d))), Vector(n, 0.0f)};
    }
};

/// Which score the combination weights are a softmax of. Learned routers
/// use their logits; the centroid router uses cosine scores and the weights
/// are treated as constants in the backward pass.
enum class WeightMode { softmax_logits, softmax_scores };

struct RoutingDecision {
    Vector logits;                      // raw scores z
    Vector biased_logits;               // z + b, used only for selection
    std::vector<std::uint32_t> selected;  // ascending expert indices
    Vector weights;                     // p, zero outside `selected`
    bool stop_gradient = false;
};

// ---------------------------------------------------------------------------

inline Vector router_logits(const RouterParams& router, std::span<const float> x) {
    require_shape(router.dim() == x.size(), "router_logits: x.dim != d");
    return matvec(router.w_r, x);
}

/// Indices of the k largest scores, ties broken toward the lower index.
/// Returned in ascending index order.
inline std::vector<std::uint32_t> topk_select(std::span<const float> scores, std::size_t k) {
    const std::size_t n = scores.size();
    if (k < 1 || k > n) throw std::invalid_argument("topk_select: need 1 <= k <= N");
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::partial_sort(order.begin(), order.begin() + std::ptrdiff_t(k), order.end(),
                      [&](std::uint32_t a, std::uint32_t b) {
                          if (scores[a] != scores[b]) return scores[a] > scores[b];
                          return a < b;
                      });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

/// Softmax of z restricted to `selected`; zero elsewhere.
inline Vector masked_softmax(std::span<const float> z, std::span<const std::uint32_t> selected) {
    if (selected.empty()) throw std::invalid_argument("masked_softmax: empty selection");
    Vector sub(selected.size());
    for (std::size_t i = 0; i < selected.size(); ++i) {
        if (selected[i] >= z.size()) throw std::out_of_range("masked_softmax: index out of range");
        sub[i] = z[selected[i]];
    }
    const Vector p_sub = softmax(sub);
    Vector p(z.size(), 0.0f);
    for (std::size_t i = 0; i < selected.size(); ++i) p[selected[i]] = p_sub[i];
    return p;
}

/// Builds a decision from scores, an optional additive selection bias and k.
inline RoutingDecision make_decision(Vector scores, std::span<const float> bias, std::size_t k, WeightMode mode) {
    RoutingDecision dec;
    dec.biased_logits = scores;
    if (!bias.empty()) {
        require_shape(bias.size() == scores.size(), "make_decision: bias size");
        for (std::size_t i = 0; i < scores.size(); ++i) dec.biased_logits[i] = scores[i] + bias[i];
    }
    dec.selected = topk_select(dec.biased_logits, k);
    dec.weights = masked_softmax(scores, dec.selected);
    dec.logits = std::move(scores);
    dec.stop_gradient = (mode == WeightMode::softmax_scores);
    return dec;
}

inline RoutingDecision route(const RouterParams& router, std::span<const float> x, std::size_t k,
                             WeightMode mode = WeightMode::softmax_logits) {
    return make_decision(router_logits(router, x), router.bias, k, mode);
}

// ---------------------------------------------------------------------------
// Experts

/// Transposed copies of an expert's matrices; the forward kernels stream
/// these row-wise so every output coordinate reduces in index order.
struct ExpertKernel {
    Matrix gate_t;  // d x d_ff
    Matrix up_t;    // d x d_ff
    Matrix down_t;  // d_ff x d

    explicit ExpertKernel(const ExpertParams& e)
        : gate_t(e.w_gate.transposed()), up_t(e.w_up.transposed()), down_t(e.w_down.transposed()) {}
};

struct ExpertCache {
    Vector gate_pre;  // W_gate x
    Vector gate_act;  // SiLU(W_gate x)
    Vector up;        // W_up x
    Vector hidden;    // gate_act (.) up
};

namespace detail {

/// Forward for m tokens routed to one expert. Row r of every cache matrix
/// belongs to x_rows[r].
inline void expert_block_forward(const ExpertKernel& ker, std::span<const float* const> x_rows, Matrix& gate_pre,
                                 Matrix& gate_act, Matrix& up, Matrix& hidden, Matrix& out) {
    const std::size_t m = x_rows.size(), f = ker.gate_t.cols(), d = ker.down_t.cols();
    gate_pre = Matrix(m, f);
    gate_act = Matrix(m, f);
    up = Matrix(m, f);
    hidden = Matrix(m, f);
    out = Matrix(m, d);
    gemm_rows(x_rows, ker.gate_t, row_ptrs(gate_pre));
    gemm_rows(x_rows, ker.up_t, row_ptrs(up));
    for (std::size_t k = 0; k < m * f; ++k) {
        gate_act.data()[k] = silu(gate_pre.data()[k]);
        hidden.data()[k] = gate_act.data()[k] * up.data()[k];
    }
    gemm_rows(row_ptrs(hidden), ker.down_t, row_ptrs(out));
}

/// Accumulates gradients for m tokens of one expert given dL/dE (already
/// scaled by p), one row per token. dx_rows[r] receives the input gradient.
inline void expert_block_backward(const ExpertParams& e, std::span<const float* const> x_rows,
                                  const Matrix& gate_pre, const Matrix& gate_act, const Matrix& up,
                                  const Matrix& hidden, const Matrix& d_out, ExpertParams& grads,
                                  std::span<float* const> dx_rows) {
    const std::size_t m = x_rows.size(), d = e.dim(), f = e.hidden_dim();
    Matrix dh(m, f);
    gemm_rows(row_ptrs(d_out), e.w_down, row_ptrs(dh));
    gemm_rows<true>(row_ptrs(static_cast<const Matrix&>(d_out.transposed())), hidden, row_ptrs(grads.w_down));

    Matrix d_up(m, f), d_pre(m, f);
    for (std::size_t k = 0; k < m * f; ++k) {
        const float g = dh.data()[k];
        d_up.data()[k] = g * gate_act.data()[k];
        d_pre.data()[k] = g * up.data()[k] * silu_deriv(gate_pre.data()[k]);
    }
    Matrix xs(m, d);
    for (std::size_t r = 0; r < m; ++r) std::copy(x_rows[r], x_rows[r] + d, xs.row(r).begin());
    gemm_rows<true>(row_ptrs(static_cast<const Matrix&>(d_up.transposed())), xs, row_ptrs(grads.w_up));
    gemm_rows<true>(row_ptrs(static_cast<const Matrix&>(d_pre.transposed())), xs, row_ptrs(grads.w_gate));
    gemm_rows<true>(row_ptrs(static_cast<const Matrix&>(d_up)), e.w_up, dx_rows);
    gemm_rows<true>(row_ptrs(static_cast<const Matrix&>(d_pre)), e.w_gate, dx_rows);
}

template <class M>
inline Matrix row_matrix(const M& v) {
    Matrix out(1, v.size());
    std::copy(v.begin(), v.end(), out.row(0).begin());
    return out;
}

}  // namespace detail

inline std::pair<Vector, ExpertCache> expert_forward(const ExpertParams& e, std::span<const float> x) {
    e.validate();
    require_shape(x.size() == e.dim(), "expert_forward: x.dim != d");
    const float* row = x.data();
    Matrix gp, ga, u, h, out;
    detail::expert_block_forward(ExpertKernel(e), std::span<const float* const>(&row, 1), gp, ga, u, h, out);
    auto vec = [](const Matrix& mtx) { return Vector(mtx.flat().begin(), mtx.flat().end()); };
    return {vec(out), ExpertCache{vec(gp), vec(ga), vec(u), vec(h)}};
}

// ---------------------------------------------------------------------------
// Single-token layer

struct LayerTape {
    Vector x;
    RoutingDecision decision;
    std::vector<ExpertCache> caches;  // aligned with decision.selected
    std::vector<Vector> outputs;      // E_i(x), aligned with decision.selected
    std::size_t expert_evaluations = 0;
};

struct LayerGrads {
    Matrix w_r;
    Vector bias;  // always zero
    std::vector<ExpertParams> experts;
    Vector input;

    static LayerGrads zeros_like(const RouterParams* router, std::size_t n, std::size_t d, std::size_t d_ff) {
        LayerGrads g;
        g.w_r = router ? Matrix(router->num_experts(), router->dim()) : Matrix();
        g.bias = Vector(router ? router->num_experts() : 0, 0.0f);
        g.experts.reserve(n);
        for (std::size_t i = 0; i < n; ++i) g.experts.push_back(ExpertParams::zeros(d, d_ff));
        g.input = Vector(d, 0.0f);
        return g;
    }
};

/// y = sum over selected i of p_i E_i(x), in ascending expert order. Only
/// selected experts are read.
inline std::pair<Vector, LayerTape> moe_forward(std::span<const ExpertParams> experts, std::span<const float> x,
                                                RoutingDecision decision) {
    require_shape(decision.logits.size() == experts.size(), "moe_forward: experts.size != N");
    LayerTape tape;
    tape.x.assign(x.begin(), x.end());
    Vector y(x.size(), 0.0f);
    for (auto i : decision.selected) {
        const auto& e = experts[i];
        e.validate();
        require_shape(e.dim() == x.size(), "moe_forward: x.dim != d");
        auto [out, cache] = expert_forward(e, x);
        axpy(decision.weights[i], out, y);
        tape.caches.push_back(std::move(cache));
        tape.outputs.push_back(std::move(out));
        ++tape.expert_evaluations;
    }
    tape.decision = std::move(decision);
    return {std::move(y), std::move(tape)};
}

inline std::pair<Vector, LayerTape> moe_forward(const RouterParams& router, std::span<const ExpertParams> experts,
                                                std::span<const float> x, std::size_t k,
                                                WeightMode mode = WeightMode::softmax_logits) {
    require_shape(experts.size() == router.num_experts(), "moe_forward: experts.size != N");
    return moe_forward(experts, x, route(router, x, k, mode));
}

/// Gradient of the combination weights' pre-softmax scores over T_K:
/// dz_i = p_i (dp_i - sum_j p_j dp_j), zero outside T_K.
inline Vector routing_logit_grad(const RoutingDecision& dec, std::span<const double> dp_selected) {
    Vector dz(dec.logits.size(), 0.0f);
    double mean = 0.0;
    for (std::size_t s = 0; s < dec.selected.size(); ++s) mean += double(dec.weights[dec.selected[s]]) * dp_selected[s];
    for (std::size_t s = 0; s < dec.selected.size(); ++s) {
        const auto i = dec.selected[s];
        dz[i] = float(double(dec.weights[i]) * (dp_selected[s] - mean));
    }
    return dz;
}

/// Analytic gradients for one token. `router` may be null for routers
/// without learnable weights (the decision must then be stop-gradient).
inline LayerGrads moe_backward(const RouterParams* router, std::span<const ExpertParams> experts,
                               const LayerTape& tape, std::span<const float> upstream) {
    const std::size_t d = tape.x.size();
    require_shape(upstream.size() == d, "moe_backward: upstream.dim != d");
    require_shape(tape.caches.size() == tape.decision.selected.size(), "moe_backward: malformed tape");
    const std::size_t d_ff = experts.empty() ? 0 : experts[0].hidden_dim();
    LayerGrads g = LayerGrads::zeros_like(router, experts.size(), d, d_ff);

    Matrix d_out(1, d);
    const float* x_row = tape.x.data();
    float* dx_row = g.input.data();
    std::vector<double> dp(tape.decision.selected.size());
    for (std::size_t s = 0; s < tape.decision.selected.size(); ++s) {
        const auto i = tape.decision.selected[s];
        const float p = tape.decision.weights[i];
        for (std::size_t m = 0; m < d; ++m) d_out.data()[m] = p * upstream[m];
        const auto& c = tape.caches[s];
        detail::expert_block_backward(experts[i], std::span<const float* const>(&x_row, 1),
                                      detail::row_matrix(c.gate_pre), detail::row_matrix(c.gate_act),
                                      detail::row_matrix(c.up), detail::row_matrix(c.hidden), d_out, g.experts[i],
                                      std::span<float* const>(&dx_row, 1));
        dp[s] = dot_f64(upstream, tape.outputs[s]);
    }
    if (!tape.decision.stop_gradient) {
        if (!router) throw std::invalid_argument("moe_backward: learned routing needs router params");
        const Vector dz = routing_logit_grad(tape.decision, dp);
        for (auto i : tape.decision.selected) {
            axpy(dz[i], tape.x, g.w_r.row(i));
            axpy(dz[i], router->w_r.row(i), g.input);
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Batched layer: tokens are grouped by expert so each expert's weights are
// streamed once per batch. Per-token arithmetic is identical to the
// single-token path.

struct ExpertBlock {
    std::vector<std::uint32_t> tokens;  // ascending token indices routed here
    Matrix gate_pre, gate_act, up, hidden, out;  // one row per routed token
};

struct BatchTape {
    Matrix x;  // n x d
    std::vector<RoutingDecision> decisions;
    std::vector<ExpertBlock> blocks;  // one per expert
    std::size_t expert_evaluations = 0;
};

/// Forward for a batch of tokens given their routing decisions.
inline Matrix moe_forward_batch(std::span<const ExpertParams> experts, const Matrix& x,
                                std::vector<RoutingDecision> decisions, BatchTape& tape) {
    const std::size_t n = x.rows(), d = x.cols(), n_exp = experts.size();
    require_shape(decisions.size() == n, "moe_forward_batch: one decision per token");
    tape.x = x;
    tape.blocks.assign(n_exp, {});
    tape.expert_evaluations = 0;
    for (std::size_t t = 0; t < n; ++t)
        for (auto i : decisions[t].selected) tape.blocks[i].tokens.push_back(std::uint32_t(t));

    Matrix y(n, d);
    for (std::size_t i = 0; i < n_exp; ++i) {
        auto& b = tape.blocks[i];
        if (b.tokens.empty()) continue;
        const auto& e = experts[i];
        e.validate();
        require_shape(e.dim() == d, "moe_forward_batch: x.dim != d");
        const std::size_t m = b.tokens.size();
        std::vector<const float*> rows(m);
        for (std::size_t r = 0; r < m; ++r) rows[r] = x.row(b.tokens[r]).data();
        detail::expert_block_forward(ExpertKernel(e), rows, b.gate_pre, b.gate_act, b.up, b.hidden, b.out);
        for (std::size_t r = 0; r < m; ++r) {
            const auto t = b.tokens[r];
            axpy(decisions[t].weights[i], b.out.row(r), y.row(t));
        }
        tape.expert_evaluations += m;
    }
    tape.decisions = std::move(decisions);
    return y;
}

/// Accumulates batch gradients into `grads` and writes dL/dx into `dx`
/// (n x d, overwritten). `extra_logit_grad`, if given, is an n x N matrix of
/// additional dL/dz terms (auxiliary losses) applied to every router row.
inline void moe_backward_batch(const RouterParams* router, std::span<const ExpertParams> experts,
                               const BatchTape& tape, const Matrix& upstream, const Matrix* extra_logit_grad,
                               LayerGrads& grads, Matrix& dx) {
    const std::size_t n = tape.x.rows(), d = tape.x.cols(), n_exp = experts.size();
    require_shape(upstream.rows() == n && upstream.cols() == d, "moe_backward_batch: upstream shape");
    dx = Matrix(n, d);
    // dp[t][slot] for the router path; slot follows decision.selected.
    std::vector<std::vector<double>> dp(n);
    for (std::size_t t = 0; t < n; ++t) dp[t].assign(tape.decisions[t].selected.size(), 0.0);

    for (std::size_t i = 0; i < n_exp; ++i) {
        const auto& b = tape.blocks[i];
        if (b.tokens.empty()) continue;
        const std::size_t mt = b.tokens.size();
        Matrix d_out(mt, d);
        std::vector<const float*> x_rows(mt);
        std::vector<float*> dx_rows(mt);
        for (std::size_t r = 0; r < mt; ++r) {
            const auto t = b.tokens[r];
            const float p = tape.decisions[t].weights[i];
            const auto up_t = upstream.row(t);
            for (std::size_t m = 0; m < d; ++m) d_out(r, m) = p * up_t[m];
            x_rows[r] = tape.x.row(t).data();
            dx_rows[r] = dx.row(t).data();
        }
        detail::expert_block_backward(experts[i], x_rows, b.gate_pre, b.gate_act, b.up, b.hidden, d_out,
                                      grads.experts[i], dx_rows);
        for (std::size_t r = 0; r < mt; ++r) {
            const auto t = b.tokens[r];
            const auto& dec = tape.decisions[t];
            const auto up_t = upstream.row(t);
            const auto slot = std::size_t(std::find(dec.selected.begin(), dec.selected.end(), i) - dec.selected.begin());
            dp[t][slot] = dot_f64(up_t, b.out.row(r));
        }
    }

    for (std::size_t t = 0; t < n; ++t) {
        const auto& dec = tape.decisions[t];
        const bool learned = !dec.stop_gradient;
        if (!learned && !extra_logit_grad) continue;
        if (!router) throw std::invalid_argument("moe_backward_batch: router gradients need router params");
        Vector dz = learned ? routing_logit_grad(dec, dp[t]) : Vector(n_exp, 0.0f);
        if (extra_logit_grad) {
            const auto extra = extra_logit_grad->row(t);
            for (std::size_t j = 0; j < n_exp; ++j) dz[j] += extra[j];
            for (std::size_t j = 0; j < n_exp; ++j) {
                if (dz[j] == 0.0f) continue;
                axpy(dz[j], tape.x.row(t), grads.w_r.row(j));
                axpy(dz[j], router->w_r.row(j), dx.row(t));
            }
        } else {
            for (auto j : dec.selected) {
                axpy(dz[j], tape.x.row(t), grads.w_r.row(j));
                axpy(dz[j], router->w_r.row(j), dx.row(t));
            }
        }
    }
}

}  // namespace smoe
