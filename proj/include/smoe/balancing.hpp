#pragma once

// Expert load accounting and the balancing strategies: Switch-style
// auxiliary loss, router z-loss, per-sequence auxiliary loss, and the
// sign-based selection-bias update.

#include <smoe/moe_layer.hpp>

#include <span>
#include <vector>

namespace smoe {

struct LoadStats {
    std::vector<double> fractions;  // f_i, sums to 1
    double target = 0.0;            // tau = 1/N
    std::size_t batch_assignments = 0;

    std::size_t num_experts() const noexcept { return fractions.size(); }
};

/// f_i = (#tokens that selected i) / (k |B|).
inline LoadStats load_fractions(std::span<const RoutingDecision> decisions, std::size_t n, std::size_t k) {
    if (decisions.empty()) throw std::invalid_argument("load_fractions: empty batch");
    if (n == 0 || k == 0) throw std::invalid_argument("load_fractions: n and k must be positive");
    std::vector<std::size_t> counts(n, 0);
    for (const auto& dec : decisions) {
        if (dec.selected.size() != k) throw std::invalid_argument("load_fractions: |T_K| != k");
        for (auto i : dec.selected) {
            if (i >= n) throw std::out_of_range("load_fractions: expert index out of range");
            ++counts[i];
        }
    }
    LoadStats s;
    s.batch_assignments = k * decisions.size();
    s.target = 1.0 / double(n);
    s.fractions.resize(n);
    for (std::size_t i = 0; i < n; ++i) s.fractions[i] = double(counts[i]) / double(s.batch_assignments);
    return s;
}

struct BalanceGrads {
    double loss = 0.0;
    Matrix logit_grad;  // |B| x N, dL/dz per token
    Matrix row_grad;    // N x d, sum_t dL/dz_t,j x_t (empty when inputs are not supplied)
};

/// sum_t dz_t (outer) x_t, accumulated in token order.
inline Matrix router_row_grads(const Matrix& logit_grad, const Matrix& x) {
    require_shape(logit_grad.rows() == x.rows(), "router_row_grads: token count mismatch");
    Matrix g(logit_grad.cols(), x.cols());
    for (std::size_t t = 0; t < x.rows(); ++t)
        for (std::size_t j = 0; j < logit_grad.cols(); ++j) axpy(logit_grad(t, j), x.row(t), g.row(j));
    return g;
}

namespace detail {

// Adds scale * dL/dz for L = N sum_i f_i mean_t softmax(z_t)_i over `tokens`
// and returns the unscaled loss.
inline double accumulate_balance(std::span<const double> f, const Matrix& logits, std::size_t begin,
                                 std::size_t end, double scale, Matrix& logit_grad) {
    const std::size_t n = f.size();
    const double count = double(end - begin);
    std::vector<double> mean_p(n, 0.0);
    for (std::size_t t = begin; t < end; ++t) {
        const Vector p = softmax(logits.row(t));
        double fp = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            mean_p[i] += p[i];
            fp += f[i] * p[i];
        }
        for (std::size_t j = 0; j < n; ++j)
            logit_grad(t, j) += float(scale * double(n) / count * double(p[j]) * (f[j] - fp));
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) loss += f[i] * (mean_p[i] / count);
    return double(n) * loss;
}

}  // namespace detail

/// L_balance = N sum_i f_i P_i with P_i the batch mean of the unmasked
/// softmax. f is held constant; the gradient flows through P only.
inline BalanceGrads aux_balance_loss(const LoadStats& stats, const Matrix& logits, const Matrix* x = nullptr) {
    require_shape(logits.cols() == stats.num_experts(), "aux_balance_loss: logits width != N");
    if (logits.rows() == 0) throw std::invalid_argument("aux_balance_loss: empty batch");
    BalanceGrads out;
    out.logit_grad = Matrix(logits.rows(), logits.cols());
    out.loss = detail::accumulate_balance(stats.fractions, logits, 0, logits.rows(), 1.0, out.logit_grad);
    if (x) out.row_grad = router_row_grads(out.logit_grad, *x);
    return out;
}

/// ST-MoE z-loss: mean over tokens of (log sum_j e^{z_j})^2.
inline BalanceGrads router_z_loss(const Matrix& logits, double coefficient = 1.0, const Matrix* x = nullptr) {
    const std::size_t b = logits.rows(), n = logits.cols();
    BalanceGrads out;
    out.logit_grad = Matrix(b, n);
    if (b == 0) return out;
    double total = 0.0;
    for (std::size_t t = 0; t < b; ++t) {
        const auto z = logits.row(t);
        const double lse = log_sum_exp(z);
        total += lse * lse;
        const Vector p = softmax(z);
        for (std::size_t j = 0; j < n; ++j)
            out.logit_grad(t, j) = float(coefficient * 2.0 * lse * double(p[j]) / double(b));
    }
    out.loss = coefficient * total / double(b);
    if (x) out.row_grad = router_row_grads(out.logit_grad, *x);
    return out;
}

struct SeqAuxResult {
    BalanceGrads grads;
    std::size_t skipped_empty = 0;
};

/// Per-sequence auxiliary balance loss averaged over non-empty sequences.
/// Tokens are laid out contiguously; `sequence_lengths` partitions them.
inline SeqAuxResult seq_aux_loss(std::span<const RoutingDecision> decisions, const Matrix& logits,
                                 std::span<const std::size_t> sequence_lengths, std::size_t n, std::size_t k,
                                 const Matrix* x = nullptr) {
    require_shape(decisions.size() == logits.rows(), "seq_aux_loss: one decision per token");
    std::size_t total = 0;
    for (auto len : sequence_lengths) total += len;
    require_shape(total == logits.rows(), "seq_aux_loss: sequence lengths do not cover the batch");

    SeqAuxResult out;
    for (auto len : sequence_lengths)
        if (len == 0) ++out.skipped_empty;
    const std::size_t nonempty = sequence_lengths.size() - out.skipped_empty;
    out.grads.logit_grad = Matrix(logits.rows(), logits.cols());
    if (nonempty == 0) return out;

    const double scale = 1.0 / double(nonempty);
    double loss = 0.0;
    std::size_t begin = 0;
    for (auto len : sequence_lengths) {
        if (len == 0) continue;
        const auto stats = load_fractions(decisions.subspan(begin, len), n, k);
        loss += detail::accumulate_balance(stats.fractions, logits, begin, begin + len, scale, out.grads.logit_grad);
        begin += len;
    }
    out.grads.loss = loss * scale;
    if (x) out.grads.row_grad = router_row_grads(out.grads.logit_grad, *x);
    return out;
}

/// b_i <- b_i + gamma * sign(tau - f_i), sign(0) = 0.
inline Vector bias_update(std::span<const float> bias, const LoadStats& stats, double gamma) {
    if (!(gamma > 0.0)) throw std::invalid_argument("bias_update: gamma must be positive");
    require_shape(bias.size() == stats.num_experts(), "bias_update: bias size != N");
    Vector out(bias.begin(), bias.end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double diff = stats.target - stats.fractions[i];
        const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        out[i] = float(double(out[i]) + gamma * sgn);
    }
    return out;
}

}  // namespace smoe
