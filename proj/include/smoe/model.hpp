#pragma once

// Desk-scale language model: token embedding, a fixed causal EMA token
// mixer, L residual blocks h <- h + SMoE(rmsnorm(h)), a final rmsnorm and a
// linear output head. Forward and backward are written out by hand.

#include <smoe/balancing.hpp>
#include <smoe/centroid_router.hpp>
#include <smoe/config.hpp>
#include <smoe/data.hpp>
#include <smoe/moe_layer.hpp>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace smoe {

struct LayerState {
    RouterParams router;                    // w_r is 0 x d for the centroid router
    std::optional<CentroidState> centroids;  // set only for the centroid router
    std::vector<ExpertParams> experts;

    bool learned_router() const noexcept { return !centroids.has_value(); }
};

struct ModelState {
    Matrix embedding;  // V x d
    Matrix head;       // V x d
    std::vector<LayerState> layers;
};

struct ModelGrads {
    Matrix embedding;
    Matrix head;
    std::vector<LayerGrads> layers;

    static ModelGrads zeros_like(const ModelState& m) {
        ModelGrads g{Matrix(m.embedding.rows(), m.embedding.cols()), Matrix(m.head.rows(), m.head.cols()), {}};
        for (const auto& l : m.layers)
            g.layers.push_back(LayerGrads::zeros_like(l.learned_router() ? &l.router : nullptr, l.experts.size(),
                                                      m.embedding.cols(), l.experts.front().hidden_dim()));
        return g;
    }
};

inline ModelState init_model(const ModelConfig& cfg) {
    const Rng root = Rng(cfg.seed).split("init");
    ModelState m;
    Rng emb_rng = root.split("embedding");
    m.embedding = random_normal(emb_rng, cfg.vocab, cfg.hidden, 1.0);
    Rng head_rng = root.split("head");
    m.head = random_normal(head_rng, cfg.vocab, cfg.hidden, 0.5 / std::sqrt(double(cfg.hidden)));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        LayerState layer;
        if (cfg.variant == RoutingVariant::kmeans) {
            Rng crng = root.split("centroids", l);
            layer.router.w_r = Matrix(0, cfg.hidden);
            layer.centroids = centroid_init(crng, cfg.experts, cfg.hidden, cfg.centroid_decay, cfg.bias_rate);
        } else {
            Rng rrng = root.split("router", l);
            layer.router = RouterParams::init(rrng, cfg.experts, cfg.hidden);
        }
        for (std::size_t i = 0; i < cfg.experts; ++i) {
            Rng erng = root.split("expert", l * 1000003ull + i);
            layer.experts.push_back(ExpertParams::init(erng, cfg.hidden, cfg.expert_hidden));
        }
        m.layers.push_back(std::move(layer));
    }
    return m;
}

/// Visits every learnable tensor (never centroids or biases) in a fixed order.
template <class Model, class Fn>
void for_each_param(Model& m, Fn&& fn) {
    fn(std::string("embedding"), m.embedding.flat());
    fn(std::string("head"), m.head.flat());
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        auto& layer = m.layers[l];
        const std::string p = "layer" + std::to_string(l) + "/";
        if (layer.router.w_r.size() > 0) fn(p + "w_r", layer.router.w_r.flat());
        for (std::size_t i = 0; i < layer.experts.size(); ++i) {
            const std::string e = p + "expert" + std::to_string(i) + "/";
            fn(e + "w_gate", layer.experts[i].w_gate.flat());
            fn(e + "w_up", layer.experts[i].w_up.flat());
            fn(e + "w_down", layer.experts[i].w_down.flat());
        }
    }
}

/// Same order as for_each_param, pairing each tensor with its gradient.
template <class Fn>
void for_each_param_grad(ModelState& m, ModelGrads& g, Fn&& fn) {
    fn(std::string("embedding"), m.embedding.flat(), g.embedding.flat());
    fn(std::string("head"), m.head.flat(), g.head.flat());
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        auto& layer = m.layers[l];
        auto& lg = g.layers[l];
        const std::string p = "layer" + std::to_string(l) + "/";
        if (layer.router.w_r.size() > 0) fn(p + "w_r", layer.router.w_r.flat(), lg.w_r.flat());
        for (std::size_t i = 0; i < layer.experts.size(); ++i) {
            const std::string e = p + "expert" + std::to_string(i) + "/";
            fn(e + "w_gate", layer.experts[i].w_gate.flat(), lg.experts[i].w_gate.flat());
            fn(e + "w_up", layer.experts[i].w_up.flat(), lg.experts[i].w_up.flat());
            fn(e + "w_down", layer.experts[i].w_down.flat(), lg.experts[i].w_down.flat());
        }
    }
}

inline std::size_t count_learnable(const ModelState& m) {
    std::size_t n = 0;
    for_each_param(m, [&](const std::string&, std::span<const float> p) { n += p.size(); });
    return n;
}

inline std::size_t count_router_params(const ModelState& m) {
    std::size_t n = 0;
    for (const auto& l : m.layers) n += l.router.w_r.size();
    return n;
}

// ---------------------------------------------------------------------------

inline constexpr float kRmsEps = 1e-6f;

/// x = h / sqrt(mean(h^2) + eps); returns the inverse rms.
inline float rmsnorm(std::span<const float> h, std::span<float> x) {
    double ss = 0.0;
    for (float v : h) ss += double(v) * double(v);
    const float inv = float(1.0 / std::sqrt(ss / double(h.size()) + double(kRmsEps)));
    for (std::size_t i = 0; i < h.size(); ++i) x[i] = h[i] * inv;
    return inv;
}

/// dh += inv * (dx - x * <dx, x> / d)
inline void rmsnorm_backward(std::span<const float> x, float inv, std::span<const float> dx, std::span<float> dh) {
    const double proj = dot_f64(dx, x) / double(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) dh[i] += inv * (dx[i] - float(double(x[i]) * proj));
}

/// Per-layer routing to reuse instead of routing afresh. For learned
/// routers only the selected sets are reused (weights follow the current
/// logits); for the centroid router the whole decision is reused.
using RoutingReplay = std::vector<std::vector<RoutingDecision>>;

struct LayerForward {
    Matrix h_in;  // residual stream entering the block
    Vector inv_rms;
    BatchTape tape;  // tape.x is the normalized block input
    Matrix logits;   // n x N router scores
    LoadStats load;
    Matrix extra_logit_grad;  // balancing-loss dL/dz (empty if none)
    double aux_loss = 0.0, z_loss = 0.0, seq_aux_loss = 0.0;
    std::size_t seq_aux_skipped = 0;
};

struct ForwardResult {
    double lm_loss = 0.0;       // mean next-token cross-entropy
    double total_loss = 0.0;    // lm + weighted balancing terms
    std::size_t sequences = 0, seq_len = 0;
    std::vector<std::uint32_t> inputs, targets;  // flattened, n = sequences * seq_len
    std::vector<LayerForward> layers;
    Matrix final_h, final_x;
    Vector final_inv_rms;
    Matrix probs;  // n x V softmax of the head logits
    std::size_t expert_evaluations = 0;

    std::size_t positions() const noexcept { return inputs.size(); }
    std::vector<LoadStats> load_stats() const {
        std::vector<LoadStats> s;
        for (const auto& l : layers) s.push_back(l.load);
        return s;
    }
};

inline ForwardResult forward_pass(const ModelConfig& cfg, const ModelState& m, const Batch& batch,
                                  const RoutingReplay* replay = nullptr) {
    const std::size_t d = cfg.hidden, S = batch.sequences, T = batch.seq_len, n = S * T, N = cfg.experts;
    const std::size_t V = m.embedding.rows();
    ForwardResult r;
    r.sequences = S;
    r.seq_len = T;
    r.inputs.resize(n);
    r.targets.resize(n);
    for (std::size_t s = 0; s < S; ++s) {
        const auto seq = batch.sequence(s);
        for (std::size_t t = 0; t < T; ++t) {
            if (seq[t] >= V || seq[t + 1] >= V) throw std::out_of_range("forward_pass: token id out of range");
            r.inputs[s * T + t] = seq[t];
            r.targets[s * T + t] = seq[t + 1];
        }
    }

    // embedding + causal EMA context: h[t] = e[t] + c[t], c[t] = a c[t-1] + (1-a) e[t-1]
    Matrix h(n, d);
    const float a = float(cfg.mixer_decay), one_minus_a = 1.0f - a;
    Vector ctx(d);
    for (std::size_t s = 0; s < S; ++s) {
        std::fill(ctx.begin(), ctx.end(), 0.0f);
        for (std::size_t t = 0; t < T; ++t) {
            const std::size_t row = s * T + t;
            const auto e = m.embedding.row(r.inputs[row]);
            auto hr = h.row(row);
            for (std::size_t j = 0; j < d; ++j) hr[j] = e[j] + ctx[j];
            for (std::size_t j = 0; j < d; ++j) ctx[j] = a * ctx[j] + one_minus_a * e[j];
        }
    }

    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const auto& layer = m.layers[l];
        LayerForward lf;
        lf.h_in = h;
        lf.inv_rms.resize(n);
        Matrix x(n, d);
        for (std::size_t t = 0; t < n; ++t) lf.inv_rms[t] = rmsnorm(h.row(t), x.row(t));

        std::vector<RoutingDecision> decisions(n);
        for (std::size_t t = 0; t < n; ++t) {
            const auto xt = x.row(t);
            if (layer.learned_router()) {
                if (replay) {
                    const auto& old = (*replay)[l][t];
                    RoutingDecision dec;
                    dec.logits = router_logits(layer.router, xt);
                    dec.biased_logits = old.biased_logits;
                    dec.selected = old.selected;
                    dec.weights = masked_softmax(dec.logits, dec.selected);
                    decisions[t] = std::move(dec);
                } else {
                    decisions[t] = route(layer.router, xt, cfg.top_k);
                }
            } else {
                decisions[t] = replay ? (*replay)[l][t] : centroid_route(*layer.centroids, xt, cfg.top_k);
            }
        }
        lf.logits = Matrix(n, N);
        for (std::size_t t = 0; t < n; ++t)
            std::copy(decisions[t].logits.begin(), decisions[t].logits.end(), lf.logits.row(t).begin());
        lf.load = load_fractions(decisions, N, cfg.top_k);

        if (layer.learned_router()) {
            auto add_extra = [&](const Matrix& g, double coeff) {
                if (coeff == 0.0) return;
                if (lf.extra_logit_grad.empty()) lf.extra_logit_grad = Matrix(n, N);
                auto dst = lf.extra_logit_grad.flat();
                const auto src = g.flat();
                for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += float(coeff) * src[i];
            };
            if (cfg.uses_aux()) {
                const auto bal = aux_balance_loss(lf.load, lf.logits);
                const auto zl = router_z_loss(lf.logits);
                lf.aux_loss = bal.loss;
                lf.z_loss = zl.loss;
                add_extra(bal.logit_grad, cfg.lambda_aux);
                add_extra(zl.logit_grad, cfg.lambda_z);
            }
            if (cfg.uses_seq_aux()) {
                const std::vector<std::size_t> lens(S, T);
                const auto sa = seq_aux_loss(decisions, lf.logits, lens, N, cfg.top_k);
                lf.seq_aux_loss = sa.grads.loss;
                lf.seq_aux_skipped = sa.skipped_empty;
                add_extra(sa.grads.logit_grad, cfg.lambda_seq);
            }
        }

        const Matrix y = moe_forward_batch(layer.experts, x, std::move(decisions), lf.tape);
        r.expert_evaluations += lf.tape.expert_evaluations;
        for (std::size_t i = 0; i < h.size(); ++i) h.flat()[i] += y.flat()[i];
        r.layers.push_back(std::move(lf));
    }

    r.final_h = h;
    r.final_x = Matrix(n, d);
    r.final_inv_rms.resize(n);
    for (std::size_t t = 0; t < n; ++t) r.final_inv_rms[t] = rmsnorm(h.row(t), r.final_x.row(t));

    r.probs = Matrix(n, V);
    gemm_rows(row_ptrs(static_cast<const Matrix&>(r.final_x)), m.head.transposed(), row_ptrs(r.probs));
    double loss = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        auto logits = r.probs.row(t);
        const double lse = log_sum_exp(logits);
        loss += lse - double(logits[r.targets[t]]);
        for (auto& v : logits) v = float(std::exp(double(v) - lse));
    }
    r.lm_loss = loss / double(n);
    if (!std::isfinite(r.lm_loss)) throw std::runtime_error("forward_pass: non-finite loss");

    r.total_loss = r.lm_loss;
    for (const auto& lf : r.layers) {
        if (cfg.uses_aux()) r.total_loss += cfg.lambda_aux * lf.aux_loss + cfg.lambda_z * lf.z_loss;
        if (cfg.uses_seq_aux()) r.total_loss += cfg.lambda_seq * lf.seq_aux_loss;
    }
    return r;
}

struct BackwardOptions {
    /// If set, receives dL/dy for each layer's block output (n x d per layer).
    std::vector<Matrix>* layer_upstream = nullptr;
    /// Skip the balancing-loss logit gradients (LM loss only).
    bool lm_only = false;
};

/// Gradients of total_loss with respect to every learnable tensor,
/// accumulated into `g` (which the caller zeroes).
inline void backward_pass(const ModelConfig& cfg, const ModelState& m, const ForwardResult& fr, ModelGrads& g,
                          const BackwardOptions& opt = {}) {
    const std::size_t n = fr.positions(), d = cfg.hidden, V = m.head.rows();
    const float inv_n = float(1.0 / double(n));

    Matrix dh(n, d), dlogit(n, V), dxf(n, d);
    for (std::size_t t = 0; t < n; ++t) {
        const auto p = fr.probs.row(t);
        auto dl = dlogit.row(t);
        for (std::size_t v = 0; v < V; ++v) dl[v] = p[v] * inv_n;
        dl[fr.targets[t]] -= inv_n;
    }
    gemm_rows<true>(row_ptrs(static_cast<const Matrix&>(dlogit.transposed())), fr.final_x, row_ptrs(g.head));
    gemm_rows(row_ptrs(static_cast<const Matrix&>(dlogit)), m.head, row_ptrs(dxf));
    for (std::size_t t = 0; t < n; ++t) rmsnorm_backward(fr.final_x.row(t), fr.final_inv_rms[t], dxf.row(t), dh.row(t));

    if (opt.layer_upstream) opt.layer_upstream->assign(m.layers.size(), Matrix());
    Matrix dx;
    for (std::size_t li = m.layers.size(); li-- > 0;) {
        const auto& layer = m.layers[li];
        const auto& lf = fr.layers[li];
        if (opt.layer_upstream) (*opt.layer_upstream)[li] = dh;
        const Matrix* extra = (!opt.lm_only && !lf.extra_logit_grad.empty()) ? &lf.extra_logit_grad : nullptr;
        moe_backward_batch(layer.learned_router() ? &layer.router : nullptr, layer.experts, lf.tape, dh, extra,
                           g.layers[li], dx);
        for (std::size_t t = 0; t < n; ++t) rmsnorm_backward(lf.tape.x.row(t), lf.inv_rms[t], dx.row(t), dh.row(t));
    }

    // mixer + embedding
    const float a = float(cfg.mixer_decay), one_minus_a = 1.0f - a;
    Vector carry(d), de(d);
    for (std::size_t s = 0; s < fr.sequences; ++s) {
        std::fill(carry.begin(), carry.end(), 0.0f);
        for (std::size_t t = fr.seq_len; t-- > 0;) {
            const std::size_t row = s * fr.seq_len + t;
            const auto dh0 = dh.row(row);
            for (std::size_t j = 0; j < d; ++j) {
                de[j] = dh0[j] + one_minus_a * carry[j];
                carry[j] = dh0[j] + a * carry[j];
            }
            axpy(1.0f, de, g.embedding.row(fr.inputs[row]));
        }
    }
}

inline void zero_grads(ModelGrads& g) {
    g.embedding.fill(0.0f);
    g.head.fill(0.0f);
    for (auto& l : g.layers) {
        l.w_r.fill(0.0f);
        std::fill(l.bias.begin(), l.bias.end(), 0.0f);
        for (auto& e : l.experts) {
            e.w_gate.fill(0.0f);
            e.w_up.fill(0.0f);
            e.w_down.fill(0.0f);
        }
        std::fill(l.input.begin(), l.input.end(), 0.0f);
    }
}

inline RoutingReplay routing_of(const ForwardResult& fr) {
    RoutingReplay rp;
    for (const auto& l : fr.layers) rp.push_back(l.tape.decisions);
    return rp;
}

}  // namespace smoe
