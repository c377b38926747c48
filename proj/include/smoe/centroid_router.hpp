#pragma once

// Parameter-free online K-Means router. Each expert keeps an exponential
// moving average of the hidden states routed to it; tokens pick the k
// experts with the largest cosine-plus-bias score. Nothing here is trained.

#include <smoe/balancing.hpp>
#include <smoe/moe_layer.hpp>

#include <span>
#include <vector>

namespace smoe {

struct CentroidState {
    Matrix centroids;  // N x d
    Vector bias;       // N
    double decay = 0.99;       // alpha
    double bias_rate = 1e-3;   // gamma

    std::size_t num_experts() const noexcept { return centroids.rows(); }
    std::size_t dim() const noexcept { return centroids.cols(); }
};

/// Unit-norm rows from a seeded normal; zero biases.
inline CentroidState centroid_init(Rng& rng, std::size_t n, std::size_t d, double decay = 0.99,
                                   double bias_rate = 1e-3) {
    if (n < 1 || d < 1) throw std::invalid_argument("centroid_init: n and d must be >= 1");
    if (!(decay >= 0.0 && decay < 1.0)) throw std::invalid_argument("centroid_init: decay must be in [0,1)");
    if (!(bias_rate > 0.0)) throw std::invalid_argument("centroid_init: bias rate must be positive");
    CentroidState s{Matrix(n, d), Vector(n, 0.0f), decay, bias_rate};
    for (std::size_t i = 0; i < n; ++i) {
        auto row = s.centroids.row(i);
        double norm = 0.0;
        while (norm <= 0.0) {
            for (auto& v : row) v = float(rng.normal());
            norm = norm_f64(row);
        }
        for (auto& v : row) v = float(double(v) / norm);
    }
    return s;
}

/// Cosine similarity of x to every centroid, without bias.
inline Vector centroid_cosines(const CentroidState& state, std::span<const float> x) {
    require_shape(x.size() == state.dim(), "centroid_scores: x.dim != d");
    Vector c(state.num_experts());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = float(cosine(state.centroids.row(i), x));
    return c;
}

/// s_i = cos(c_i, x) + b_i.
inline Vector centroid_scores(const CentroidState& state, std::span<const float> x) {
    Vector s = centroid_cosines(state, x);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += state.bias[i];
    return s;
}

/// Selection on cosine + bias; combination weights are a softmax over the
/// bias-free cosines of the selected experts and carry no gradient.
inline RoutingDecision centroid_route(const CentroidState& state, std::span<const float> x, std::size_t k) {
    return make_decision(centroid_cosines(state, x), state.bias, k, WeightMode::softmax_scores);
}

/// Token rows of `x` routed to each expert. Empty lists are allowed.
using Assignments = std::vector<std::vector<std::uint32_t>>;

inline Assignments assignments_from(std::span<const RoutingDecision> decisions, std::size_t n) {
    Assignments a(n);
    for (std::size_t t = 0; t < decisions.size(); ++t)
        for (auto i : decisions[t].selected) a.at(i).push_back(std::uint32_t(t));
    return a;
}

/// c_i <- alpha c_i + (1 - alpha) mean(x_t for t in T_i); experts with no
/// routed tokens keep their centroid unchanged.
inline CentroidState centroid_update(CentroidState state, const Matrix& x, const Assignments& assignments) {
    require_shape(x.cols() == state.dim(), "centroid_update: x.dim != d");
    require_shape(assignments.size() == state.num_experts(), "centroid_update: one token list per expert");
    const std::size_t d = state.dim();
    std::vector<double> mean(d);
    for (std::size_t i = 0; i < assignments.size(); ++i) {
        const auto& tokens = assignments[i];
        if (tokens.empty()) continue;
        std::fill(mean.begin(), mean.end(), 0.0);
        for (auto t : tokens) {
            const auto row = x.row(t);
            for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
        }
        const double inv = 1.0 / double(tokens.size());
        auto c = state.centroids.row(i);
        for (std::size_t j = 0; j < d; ++j)
            c[j] = float(state.decay * double(c[j]) + (1.0 - state.decay) * mean[j] * inv);
    }
    return state;
}

inline CentroidState centroid_bias_update(CentroidState state, const LoadStats& stats) {
    state.bias = bias_update(state.bias, stats, state.bias_rate);
    return state;
}

}  // namespace smoe
