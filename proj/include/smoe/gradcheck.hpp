#pragma once

// Finite-difference checks of the hand-written backward passes.
//
// The numeric side does not reuse the float32 forward. It differentiates a
// separate double-precision evaluation of the same model, so rounding noise
// in the forward cannot swamp small gradient entries. Selection is piecewise
// constant in the parameters; the reference keeps the selected sets of the
// unperturbed float pass (weights still follow the current logits for learned
// routers, and the centroid router's decisions are frozen whole).
//
// Error per coordinate: |a - n| / max(|a|, |n|, floor * scale), with scale
// the largest gradient magnitude in the group.

#include <smoe/model.hpp>

#include <cstdio>
#include <map>
#include <string>
#include <vector>

namespace smoe {

inline constexpr double kGradcheckTolerance = 2e-3;
inline constexpr double kGradcheckScaleFloor = 1e-3;
inline constexpr double kGradcheckStep = 1e-5;

struct GroupError {
    std::string group;
    std::size_t checked = 0;
    double max_rel_err = 0.0;
    double scale = 0.0;
    std::string worst_name;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0, worst_numeric = 0.0;
};

struct GradcheckReport {
    std::string scope;  // "layer" or "model"
    RoutingVariant variant = RoutingVariant::loss_free;
    std::vector<GroupError> groups;
    double tolerance = kGradcheckTolerance;

    double max_rel_err() const {
        double m = 0.0;
        for (const auto& g : groups) m = std::max(m, g.max_rel_err);
        return m;
    }
    bool passed() const { return max_rel_err() <= tolerance; }
};

struct GradcheckOptions {
    double tolerance = kGradcheckTolerance;
    double step = kGradcheckStep;
    /// Test fixture: scales the analytic gradient of this group by 1.05.
    std::string corrupt_group;
};

/// Group key for a parameter name such as "layer0/expert3/w_up".
inline std::string param_group(const std::string& name) {
    const auto slash = name.rfind('/');
    return slash == std::string::npos ? name : name.substr(slash + 1);
}

// ---------------------------------------------------------------------------
// Double-precision reference model

namespace reference {

struct Mat {
    std::size_t rows = 0, cols = 0;
    std::vector<double> v;

    Mat() = default;
    explicit Mat(const Matrix& m) : rows(m.rows()), cols(m.cols()), v(m.flat().begin(), m.flat().end()) {}
    double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

using Vec = std::vector<double>;

struct Expert {
    Mat gate, up, down;
};

struct Layer {
    Mat w_r;
    std::vector<Expert> experts;
};

struct Model {
    Mat embedding, head;
    std::vector<Layer> layers;
};

inline Layer from_layer(const LayerState& l) {
    Layer out{Mat(l.router.w_r), {}};
    for (const auto& e : l.experts) out.experts.push_back({Mat(e.w_gate), Mat(e.w_up), Mat(e.w_down)});
    return out;
}

inline Model from_model(const ModelState& m) {
    Model out{Mat(m.embedding), Mat(m.head), {}};
    for (const auto& l : m.layers) out.layers.push_back(from_layer(l));
    return out;
}

/// Same names and order as smoe::for_each_param.
template <class Fn>
void for_each_param(Model& m, Fn&& fn) {
    fn(std::string("embedding"), m.embedding.v);
    fn(std::string("head"), m.head.v);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        auto& layer = m.layers[l];
        const std::string p = "layer" + std::to_string(l) + "/";
        if (!layer.w_r.v.empty()) fn(p + "w_r", layer.w_r.v);
        for (std::size_t i = 0; i < layer.experts.size(); ++i) {
            const std::string e = p + "expert" + std::to_string(i) + "/";
            fn(e + "w_gate", layer.experts[i].gate.v);
            fn(e + "w_up", layer.experts[i].up.v);
            fn(e + "w_down", layer.experts[i].down.v);
        }
    }
}

inline Vec matvec(const Mat& m, const Vec& x) {
    Vec out(m.rows, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c) out[r] += m(r, c) * x[c];
    return out;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline Vec expert(const Expert& e, const Vec& x) {
    const Vec a = matvec(e.gate, x), u = matvec(e.up, x);
    Vec h(a.size());
    for (std::size_t k = 0; k < h.size(); ++k) h[k] = silu(a[k]) * u[k];
    return matvec(e.down, h);
}

inline double lse(const Vec& z) {
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    return m + std::log(s);
}

inline Vec softmax(const Vec& z) {
    const double l = lse(z);
    Vec p(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) p[i] = std::exp(z[i] - l);
    return p;
}

/// N sum_i f_i mean_t softmax(z_t)_i over tokens [begin, end), f from the
/// frozen selections.
inline double balance(const std::vector<Vec>& z, const std::vector<RoutingDecision>& dec, std::size_t begin,
                      std::size_t end) {
    const std::size_t n = z[begin].size();
    Vec f(n, 0.0), mean_p(n, 0.0);
    double assignments = 0.0;
    for (std::size_t t = begin; t < end; ++t) {
        for (auto i : dec[t].selected) f[i] += 1.0;
        assignments += double(dec[t].selected.size());
        const Vec p = softmax(z[t]);
        for (std::size_t i = 0; i < n; ++i) mean_p[i] += p[i] / double(end - begin);
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) loss += f[i] / assignments * mean_p[i];
    return double(n) * loss;
}

struct Weights {
    double aux = 0.0, z = 0.0, seq = 0.0;
};

/// Block output for every token plus the weighted balancing terms.
inline double layer_block(const Layer& layer, const std::vector<Vec>& x,
                          const std::vector<RoutingDecision>& frozen, std::size_t sequences, const Weights& w,
                          std::vector<Vec>& y) {
    const bool learned = !layer.w_r.v.empty();
    const std::size_t n = x.size();
    std::vector<Vec> z(n);
    y.assign(n, Vec(x.front().size(), 0.0));
    for (std::size_t t = 0; t < n; ++t) {
        const auto& sel = frozen[t].selected;
        Vec p(layer.experts.size(), 0.0);
        if (learned) {
            z[t] = matvec(layer.w_r, x[t]);
            Vec zs;
            for (auto i : sel) zs.push_back(z[t][i]);
            const Vec ps = softmax(zs);
            for (std::size_t s = 0; s < sel.size(); ++s) p[sel[s]] = ps[s];
        } else {
            for (auto i : sel) p[i] = frozen[t].weights[i];
        }
        for (auto i : sel) {
            const Vec e = expert(layer.experts[i], x[t]);
            for (std::size_t c = 0; c < e.size(); ++c) y[t][c] += p[i] * e[c];
        }
    }
    double extra = 0.0;
    if (learned && w.aux != 0.0) {
        extra += w.aux * balance(z, frozen, 0, n);
        double zl = 0.0;
        for (const auto& zt : z) zl += lse(zt) * lse(zt);
        extra += w.z * zl / double(n);
    }
    if (learned && w.seq != 0.0) {
        const std::size_t len = n / sequences;
        double s = 0.0;
        for (std::size_t q = 0; q < sequences; ++q) s += balance(z, frozen, q * len, (q + 1) * len);
        extra += w.seq * s / double(sequences);
    }
    return extra;
}

inline Vec rmsnorm(const Vec& h) {
    double ss = 0.0;
    for (double v : h) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / double(h.size()) + double(kRmsEps));
    Vec x(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) x[i] = h[i] * inv;
    return x;
}

inline Weights model_weights(const ModelConfig& cfg) {
    Weights w;
    if (cfg.uses_aux()) {
        w.aux = cfg.lambda_aux;
        w.z = cfg.lambda_z;
    }
    if (cfg.uses_seq_aux()) w.seq = cfg.lambda_seq;
    return w;
}

/// Mean next-token cross-entropy plus weighted balancing terms.
inline double model_loss(const ModelConfig& cfg, const Model& m, const Batch& batch, const RoutingReplay& replay) {
    const std::size_t S = batch.sequences, T = batch.seq_len, d = m.embedding.cols, V = m.head.rows;
    const double a = double(float(cfg.mixer_decay));
    std::vector<Vec> h;
    std::vector<std::uint32_t> targets;
    for (std::size_t s = 0; s < S; ++s) {
        const auto seq = batch.sequence(s);
        Vec ctx(d, 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            Vec row(d);
            for (std::size_t j = 0; j < d; ++j) {
                const double e = m.embedding(seq[t], j);
                row[j] = e + ctx[j];
                ctx[j] = a * ctx[j] + (1.0 - a) * e;
            }
            h.push_back(std::move(row));
            targets.push_back(seq[t + 1]);
        }
    }
    double total = 0.0;
    const Weights w = model_weights(cfg);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        std::vector<Vec> x;
        for (const auto& row : h) x.push_back(rmsnorm(row));
        std::vector<Vec> y;
        total += layer_block(m.layers[l], x, replay[l], S, w, y);
        for (std::size_t t = 0; t < h.size(); ++t)
            for (std::size_t j = 0; j < d; ++j) h[t][j] += y[t][j];
    }
    double ce = 0.0;
    for (std::size_t t = 0; t < h.size(); ++t) {
        const Vec x = rmsnorm(h[t]);
        Vec logits(V, 0.0);
        for (std::size_t v = 0; v < V; ++v)
            for (std::size_t j = 0; j < d; ++j) logits[v] += m.head(v, j) * x[j];
        ce += lse(logits) - logits[targets[t]];
    }
    return ce / double(h.size()) + total;
}

}  // namespace reference

namespace detail {

class GroupAccumulator {
public:
    void add(const std::string& group, const std::string& name, std::span<const float> analytic,
             std::span<const double> numeric) {
        auto& e = entries_[group];
        for (std::size_t k = 0; k < analytic.size(); ++k) e.push_back({name, k, analytic[k], numeric[k]});
    }

    std::vector<GroupError> finish(const std::vector<std::string>& order) const {
        std::vector<GroupError> out;
        for (const auto& group : order) {
            GroupError ge;
            ge.group = group;
            const auto it = entries_.find(group);
            if (it != entries_.end()) {
                for (const auto& e : it->second) ge.scale = std::max({ge.scale, std::fabs(e.a), std::fabs(e.n)});
                for (const auto& e : it->second) {
                    const double denom = std::max({std::fabs(e.a), std::fabs(e.n), kGradcheckScaleFloor * ge.scale});
                    const double err = denom > 0.0 ? std::fabs(e.a - e.n) / denom : 0.0;
                    if (ge.checked++ == 0 || err > ge.max_rel_err) {
                        ge.max_rel_err = err;
                        ge.worst_name = e.name;
                        ge.worst_index = e.index;
                        ge.worst_analytic = e.a;
                        ge.worst_numeric = e.n;
                    }
                }
            }
            out.push_back(std::move(ge));
        }
        return out;
    }

private:
    struct Entry {
        std::string name;
        std::size_t index;
        double a, n;
    };
    std::map<std::string, std::vector<Entry>> entries_;
};

inline void corrupt(std::span<float> g, const std::string& group, const GradcheckOptions& opt) {
    if (!opt.corrupt_group.empty() && opt.corrupt_group == group)
        for (auto& v : g) v *= 1.05f;
}

}  // namespace detail

/// Checks one SMoE layer (layer 0 of a freshly initialized model) on random
/// inputs. Loss: <U, y> plus the variant's balancing terms at unit weight,
/// treating the tokens as two equal sequences.
inline GradcheckReport gradcheck_layer(const ModelConfig& cfg, const GradcheckOptions& opt = {}) {
    ModelState m = init_model(cfg);
    const auto& layer = m.layers.front();
    const bool learned = layer.learned_router();
    const std::size_t n = 2 * std::max<std::size_t>(1, cfg.batch_sequences * cfg.seq_len / 2), d = cfg.hidden,
                      N = cfg.experts;
    Rng rng = Rng(cfg.seed).split("gradcheck/layer");
    const Matrix x = random_normal(rng, n, d, 1.0);
    const Matrix upstream = random_normal(rng, n, d, 1.0);

    // analytic
    std::vector<RoutingDecision> decisions;
    for (std::size_t t = 0; t < n; ++t)
        decisions.push_back(learned ? route(layer.router, x.row(t), cfg.top_k)
                                    : centroid_route(*layer.centroids, x.row(t), cfg.top_k));
    const std::vector<RoutingDecision> frozen = decisions;
    Matrix extra;
    if (learned && (cfg.uses_aux() || cfg.uses_seq_aux())) {
        Matrix logits(n, N);
        for (std::size_t t = 0; t < n; ++t) std::copy(decisions[t].logits.begin(), decisions[t].logits.end(), logits.row(t).begin());
        extra = Matrix(n, N);
        auto add = [&](const Matrix& g) {
            for (std::size_t i = 0; i < extra.size(); ++i) extra.flat()[i] += g.flat()[i];
        };
        if (cfg.uses_aux()) {
            add(aux_balance_loss(load_fractions(decisions, N, cfg.top_k), logits).logit_grad);
            add(router_z_loss(logits).logit_grad);
        }
        if (cfg.uses_seq_aux()) {
            const std::vector<std::size_t> lens{n / 2, n / 2};
            add(seq_aux_loss(decisions, logits, lens, N, cfg.top_k).grads.logit_grad);
        }
    }
    BatchTape tape;
    moe_forward_batch(layer.experts, x, std::move(decisions), tape);
    LayerGrads g = LayerGrads::zeros_like(learned ? &layer.router : nullptr, N, d, cfg.expert_hidden);
    Matrix dx;
    moe_backward_batch(learned ? &layer.router : nullptr, layer.experts, tape, upstream, extra.empty() ? nullptr : &extra,
                       g, dx);

    // numeric
    reference::Layer ref = reference::from_layer(layer);
    std::vector<reference::Vec> xs(n), us(n);
    for (std::size_t t = 0; t < n; ++t) {
        xs[t].assign(x.row(t).begin(), x.row(t).end());
        us[t].assign(upstream.row(t).begin(), upstream.row(t).end());
    }
    reference::Weights w;
    if (cfg.uses_aux()) w.aux = w.z = 1.0;
    if (cfg.uses_seq_aux()) w.seq = 1.0;
    auto loss = [&] {
        std::vector<reference::Vec> y;
        double total = reference::layer_block(ref, xs, frozen, 2, w, y);
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t c = 0; c < d; ++c) total += us[t][c] * y[t][c];
        return total;
    };

    detail::GroupAccumulator acc;
    auto check = [&](const std::string& group, const std::string& name, std::span<double> p, std::span<float> a) {
        detail::corrupt(a, group, opt);
        acc.add(group, name, a, finite_diff_grad<double>(loss, p, opt.step));
    };
    if (learned) check("w_r", "w_r", ref.w_r.v, g.w_r.flat());
    for (std::size_t i = 0; i < N; ++i) {
        const std::string e = "expert" + std::to_string(i) + "/";
        check("w_gate", e + "w_gate", ref.experts[i].gate.v, g.experts[i].w_gate.flat());
        check("w_up", e + "w_up", ref.experts[i].up.v, g.experts[i].w_up.flat());
        check("w_down", e + "w_down", ref.experts[i].down.v, g.experts[i].w_down.flat());
    }
    std::vector<double> xflat;
    for (const auto& row : xs) xflat.insert(xflat.end(), row.begin(), row.end());
    {
        // the input gradient is checked through a flat view rebuilt per evaluation
        auto x_loss = [&] {
            for (std::size_t t = 0; t < n; ++t) std::copy_n(xflat.begin() + std::ptrdiff_t(t * d), d, xs[t].begin());
            return loss();
        };
        detail::corrupt(dx.flat(), "input", opt);
        acc.add("input", "x", dx.flat(), finite_diff_grad<double>(x_loss, xflat, opt.step));
    }

    GradcheckReport rep;
    rep.scope = "layer";
    rep.variant = cfg.variant;
    rep.tolerance = opt.tolerance;
    rep.groups = acc.finish({"w_r", "w_gate", "w_up", "w_down", "input"});
    return rep;
}

/// Checks the whole model's total loss on the first training batch.
inline GradcheckReport gradcheck_model(const ModelConfig& cfg, const GradcheckOptions& opt = {}) {
    const ModelState m = init_model(cfg);
    const DataStream data(cfg);
    const Batch batch = data.train_batch(0);
    const ForwardResult fr = forward_pass(cfg, m, batch);
    const RoutingReplay replay = routing_of(fr);
    ModelState shadow = m;
    ModelGrads g = ModelGrads::zeros_like(m);
    backward_pass(cfg, m, fr, g);

    reference::Model ref = reference::from_model(m);
    std::vector<std::span<float>> analytic;
    std::vector<std::string> names;
    for_each_param_grad(shadow, g, [&](const std::string& name, std::span<float>, std::span<float> a) {
        names.push_back(name);
        analytic.push_back(a);
    });

    detail::GroupAccumulator acc;
    std::size_t slot = 0;
    reference::for_each_param(ref, [&](const std::string& name, std::vector<double>& p) {
        if (name != names.at(slot)) throw std::logic_error("gradcheck: parameter order mismatch at " + name);
        const auto group = param_group(name);
        auto a = analytic[slot++];
        detail::corrupt(a, group, opt);
        const auto num = finite_diff_grad<double>([&] { return reference::model_loss(cfg, ref, batch, replay); }, p,
                                                  opt.step);
        acc.add(group, name, a, num);
    });

    GradcheckReport rep;
    rep.scope = "model";
    rep.variant = cfg.variant;
    rep.tolerance = opt.tolerance;
    rep.groups = acc.finish({"w_r", "w_gate", "w_up", "w_down", "embedding", "head"});
    return rep;
}

/// Double-precision loss at the parameters of `m`; should agree with the
/// float forward's total_loss to float accuracy.
inline double reference_model_loss(const ModelConfig& cfg, const ModelState& m, const Batch& batch,
                                   const RoutingReplay& replay) {
    return reference::model_loss(cfg, reference::from_model(m), batch, replay);
}

inline std::string format_gradcheck(const GradcheckReport& rep) {
    std::string out;
    char buf[512];
    for (const auto& g : rep.groups) {
        if (g.checked == 0) {
            std::snprintf(buf, sizeof buf, "%-5s %-17s %-9s no learnable parameters\n", rep.scope.c_str(),
                          to_string(rep.variant), g.group.c_str());
        } else {
            std::snprintf(buf, sizeof buf,
                          "%-5s %-17s %-9s max_rel_err=%.3e %s worst=%s[%zu] analytic=%.6e numeric=%.6e\n",
                          rep.scope.c_str(), to_string(rep.variant), g.group.c_str(), g.max_rel_err,
                          g.max_rel_err <= rep.tolerance ? "ok  " : "FAIL", g.worst_name.c_str(), g.worst_index,
                          g.worst_analytic, g.worst_numeric);
        }
        out += buf;
    }
    return out;
}

}  // namespace smoe
