#pragma once

// Measurements behind the router/expert coupling analysis: load imbalance
// (MaxVio), router-row geometry, per-token gradient collinearity, and the
// router-score vs gate-activation rank correlation.

#include <smoe/balancing.hpp>
#include <smoe/centroid_router.hpp>
#include <smoe/moe_layer.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace smoe {

/// max_i f_i / (1/N) - 1. Zero iff perfectly balanced.
inline double maxvio(const LoadStats& stats) {
    if (stats.fractions.empty()) throw std::invalid_argument("maxvio: no experts");
    const double mx = *std::max_element(stats.fractions.begin(), stats.fractions.end());
    return std::max(0.0, mx * double(stats.fractions.size()) - 1.0);
}

struct MaxVioReport {
    std::vector<double> per_layer;
    double mean = 0.0;
};

inline MaxVioReport maxvio_report(std::span<const LoadStats> layers) {
    MaxVioReport r;
    for (const auto& s : layers) r.per_layer.push_back(maxvio(s));
    double sum = 0.0;
    for (double v : r.per_layer) sum += v;
    r.mean = r.per_layer.empty() ? 0.0 : sum / double(r.per_layer.size());
    return r;
}

// ---------------------------------------------------------------------------

struct GeometryReport {
    int layer = 0;
    std::vector<std::vector<double>> cosines;  // N x N
    double off_diagonal_mean = 0.0;            // mu
    std::vector<std::size_t> zero_rows;        // rows that hit the zero-norm convention
};

inline GeometryReport cosine_matrix(const Matrix& w, int layer = 0) {
    const std::size_t n = w.rows();
    if (n < 2) throw std::invalid_argument("cosine_matrix: need at least two rows");
    GeometryReport r;
    r.layer = layer;
    r.cosines.assign(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        if (norm_f64(w.row(i)) == 0.0) r.zero_rows.push_back(i);
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        r.cosines[i][i] = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double c = cosine(w.row(i), w.row(j));
            r.cosines[i][j] = r.cosines[j][i] = c;
            off += 2.0 * c;
        }
    }
    r.off_diagonal_mean = off / double(n * (n - 1));
    return r;
}

// ---------------------------------------------------------------------------
// Coupling

enum class CouplingKind { router, up, gate, aux_router };

inline const char* to_string(CouplingKind k) {
    switch (k) {
        case CouplingKind::router: return "router";
        case CouplingKind::up: return "w_up";
        case CouplingKind::gate: return "w_gate";
        case CouplingKind::aux_router: return "aux_router";
    }
    return "?";
}

struct CouplingMeasurement {
    CouplingKind kind;
    std::size_t token = 0;
    std::size_t expert = 0;
    std::size_t row = 0;
    double abs_cosine = 0.0;
};

struct CouplingReport {
    int layer = 0;
    std::vector<CouplingMeasurement> measurements;
    double min_router_abs_cos = 1.0;
    double min_up_abs_cos = 1.0;
    double min_gate_abs_cos = 1.0;
    double min_aux_abs_cos = 1.0;
    std::size_t degenerate = 0;          // zero-norm gradients, not averaged
    std::size_t unselected_nonzero = 0;  // unselected rows (router or expert) with any nonzero entry
    std::size_t aux_rows_zero = 0;       // router rows whose accumulated aux gradient is zero
    std::size_t tokens = 0;

    double min_abs_cosine() const {
        return std::min({min_router_abs_cos, min_up_abs_cos, min_gate_abs_cos, min_aux_abs_cos});
    }
};

struct CouplingOptions {
    std::size_t max_rows_per_expert = 64;
    bool include_aux = false;
    double lambda_aux = 1.0;
    double zero_norm = 1e-20;
    std::uint64_t seed = 0;
};

namespace detail {

inline bool any_nonzero(std::span<const float> xs) {
    return std::any_of(xs.begin(), xs.end(), [](float v) { return v != 0.0f; });
}

inline std::vector<std::size_t> sample_rows(std::size_t rows, std::size_t limit, Rng rng) {
    std::vector<std::size_t> idx(rows);
    std::iota(idx.begin(), idx.end(), 0);
    if (rows <= limit) return idx;
    rng.shuffle(std::span<std::size_t>(idx));
    idx.resize(limit);
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace detail

/// Runs the analytic backward per token with the supplied upstream
/// gradients dL/dy and measures how the router row and input-side expert
/// rows line up with the token direction. With `include_aux`, the Switch
/// balance loss over the same tokens is added and its per-token router
/// contributions are measured as well. When `centroids` is given, tokens
/// are routed by it and there are no router rows to measure.
inline CouplingReport coupling_probe(const RouterParams& router, std::span<const ExpertParams> experts,
                                     const Matrix& x, const Matrix& upstream, std::size_t k,
                                     const CouplingOptions& opt = {}, const CentroidState* centroids = nullptr) {
    require_shape(x.rows() == upstream.rows() && x.cols() == upstream.cols(), "coupling_probe: upstream shape");
    const std::size_t n_tok = x.rows(), n_exp = experts.size();
    CouplingReport rep;
    rep.tokens = n_tok;
    const Rng base(opt.seed);

    auto record = [&](CouplingKind kind, std::size_t t, std::size_t i, std::size_t row, std::span<const float> g,
                      std::span<const float> dir) {
        if (norm_f64(g) <= opt.zero_norm) {
            ++rep.degenerate;
            return;
        }
        const double c = std::abs(cosine(g, dir));
        rep.measurements.push_back({kind, t, i, row, c});
        double& slot = kind == CouplingKind::router ? rep.min_router_abs_cos
                       : kind == CouplingKind::up   ? rep.min_up_abs_cos
                       : kind == CouplingKind::gate ? rep.min_gate_abs_cos
                                                    : rep.min_aux_abs_cos;
        slot = std::min(slot, c);
    };

    std::vector<RoutingDecision> decisions;
    decisions.reserve(n_tok);
    for (std::size_t t = 0; t < n_tok; ++t) {
        const auto xt = x.row(t);
        auto [y, tape] = moe_forward(experts, xt, centroids ? centroid_route(*centroids, xt, k) : route(router, xt, k));
        const auto g = moe_backward(centroids ? nullptr : &router, experts, tape, upstream.row(t));
        const bool has_rows = !g.w_r.empty();
        const auto& sel = tape.decision.selected;
        for (std::size_t i = 0; i < n_exp; ++i) {
            const bool chosen = std::find(sel.begin(), sel.end(), i) != sel.end();
            if (!chosen) {
                if (has_rows && detail::any_nonzero(g.w_r.row(i))) ++rep.unselected_nonzero;
                const auto& ge = g.experts[i];
                for (std::size_t r = 0; r < ge.w_gate.rows(); ++r) {
                    if (detail::any_nonzero(ge.w_gate.row(r))) ++rep.unselected_nonzero;
                    if (detail::any_nonzero(ge.w_up.row(r))) ++rep.unselected_nonzero;
                }
                for (std::size_t r = 0; r < ge.w_down.rows(); ++r)
                    if (detail::any_nonzero(ge.w_down.row(r))) ++rep.unselected_nonzero;
                continue;
            }
            if (has_rows) record(CouplingKind::router, t, i, i, g.w_r.row(i), xt);
            const auto rows = detail::sample_rows(experts[i].hidden_dim(), opt.max_rows_per_expert,
                                                  base.split("rows", t * n_exp + i));
            for (auto r : rows) {
                record(CouplingKind::up, t, i, r, g.experts[i].w_up.row(r), xt);
                record(CouplingKind::gate, t, i, r, g.experts[i].w_gate.row(r), xt);
            }
        }
        decisions.push_back(std::move(tape.decision));
    }

    if (opt.include_aux && n_tok > 0 && !centroids) {
        Matrix logits(n_tok, n_exp);
        for (std::size_t t = 0; t < n_tok; ++t)
            std::copy(decisions[t].logits.begin(), decisions[t].logits.end(), logits.row(t).begin());
        const auto stats = load_fractions(decisions, n_exp, k);
        auto aux = aux_balance_loss(stats, logits);
        Matrix accumulated(n_exp, x.cols());
        Vector contrib(x.cols());
        for (std::size_t t = 0; t < n_tok; ++t) {
            for (std::size_t j = 0; j < n_exp; ++j) {
                const float beta = float(opt.lambda_aux * aux.logit_grad(t, j));
                std::fill(contrib.begin(), contrib.end(), 0.0f);
                axpy(beta, x.row(t), contrib);
                record(CouplingKind::aux_router, t, j, j, contrib, x.row(t));
                axpy(1.0f, contrib, accumulated.row(j));
            }
        }
        for (std::size_t j = 0; j < n_exp; ++j)
            if (norm_f64(accumulated.row(j)) == 0.0) ++rep.aux_rows_zero;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Score / activation correlation

struct RoutedSample {
    int layer = 0;
    std::uint32_t expert = 0;
    double score = 0.0;       // raw router score for the selected expert
    double activation = 0.0;  // mean gate-neuron activation of that expert
};

/// Pulls one sample per routed (token, expert) pair out of a batch tape.
inline void collect_routed_samples(const BatchTape& tape, int layer, std::vector<RoutedSample>& out) {
    for (std::size_t i = 0; i < tape.blocks.size(); ++i) {
        const auto& b = tape.blocks[i];
        for (std::size_t r = 0; r < b.tokens.size(); ++r) {
            const auto act = b.gate_act.row(r);
            double mean = 0.0;
            for (float v : act) mean += v;
            mean /= double(act.size());
            out.push_back({layer, std::uint32_t(i), double(tape.decisions[b.tokens[r]].logits[i]), mean});
        }
    }
}

struct CorrelationOptions {
    std::size_t min_group = 20;
    std::size_t min_pairs = 100;
    std::size_t permutations = 10000;
    std::uint64_t seed = 0;
};

struct CorrelationReport {
    std::vector<std::pair<double, double>> pairs;  // normalized (score, activation)
    std::vector<std::pair<int, std::uint32_t>> pair_groups;
    std::map<std::pair<int, std::uint32_t>, std::size_t> group_counts;  // raw samples per (layer, expert)
    std::size_t excluded_groups = 0;
    double rho = 0.0;
    double p_value = 1.0;
    bool insufficient = false;
    bool degenerate = false;

    std::size_t pair_count() const noexcept { return pairs.size(); }
};

namespace detail {

inline bool z_normalize(std::vector<double>& xs) {
    double mean = 0.0;
    for (double v : xs) mean += v;
    mean /= double(xs.size());
    double var = 0.0;
    for (double v : xs) var += (v - mean) * (v - mean);
    var /= double(xs.size());
    if (!(var > 0.0)) return false;
    const double inv = 1.0 / std::sqrt(var);
    for (double& v : xs) v = (v - mean) * inv;
    return true;
}

}  // namespace detail

/// Normalizes scores and activations separately within each (layer, expert)
/// group with at least `min_group` samples, pools the groups and reports
/// Spearman's rho with a permutation p-value.
inline CorrelationReport correlation_probe(std::span<const RoutedSample> samples, const CorrelationOptions& opt = {}) {
    CorrelationReport rep;
    std::map<std::pair<int, std::uint32_t>, std::vector<std::size_t>> groups;
    for (std::size_t s = 0; s < samples.size(); ++s) groups[{samples[s].layer, samples[s].expert}].push_back(s);
    for (const auto& [key, idx] : groups) {
        rep.group_counts[key] = idx.size();
        if (idx.size() < opt.min_group) {
            ++rep.excluded_groups;
            continue;
        }
        std::vector<double> sc, ac;
        for (auto s : idx) {
            sc.push_back(samples[s].score);
            ac.push_back(samples[s].activation);
        }
        if (!detail::z_normalize(sc) || !detail::z_normalize(ac)) {
            ++rep.excluded_groups;
            continue;
        }
        for (std::size_t m = 0; m < idx.size(); ++m) {
            rep.pairs.emplace_back(sc[m], ac[m]);
            rep.pair_groups.push_back(key);
        }
    }
    if (rep.pairs.size() < opt.min_pairs) rep.insufficient = true;
    if (rep.pairs.size() < 3) {
        rep.degenerate = true;
        return rep;
    }
    std::vector<double> xs, ys;
    for (const auto& [a, b] : rep.pairs) {
        xs.push_back(a);
        ys.push_back(b);
    }
    const auto sr = spearman_rho(xs, ys, opt.permutations, opt.seed);
    rep.rho = sr.rho;
    rep.p_value = sr.p_value;
    rep.degenerate = sr.degenerate;
    return rep;
}

// ---------------------------------------------------------------------------
// CSV output

inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline void write_geometry_csv(const std::filesystem::path& path, const GeometryReport& r) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "mu," << format_real(r.off_diagonal_mean) << "\n";
    for (const auto& row : r.cosines) {
        for (std::size_t j = 0; j < row.size(); ++j) out << (j ? "," : "") << format_real(row[j]);
        out << "\n";
    }
}

inline void write_coupling_csv(const std::filesystem::path& path, std::span<const CouplingReport> reports) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "layer,kind,token,expert,row,abs_cosine\n";
    for (const auto& r : reports)
        for (const auto& m : r.measurements)
            out << r.layer << "," << to_string(m.kind) << "," << m.token << "," << m.expert << "," << m.row << ","
                << format_real(m.abs_cosine) << "\n";
}

inline void write_correlation_csv(const std::filesystem::path& path, const CorrelationReport& r) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "layer,expert,score_z,activation_z\n";
    for (std::size_t m = 0; m < r.pairs.size(); ++m)
        out << r.pair_groups[m].first << "," << r.pair_groups[m].second << "," << format_real(r.pairs[m].first)
            << "," << format_real(r.pairs[m].second) << "\n";
}

}  // namespace smoe
