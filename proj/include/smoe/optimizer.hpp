#pragma once

#include <smoe/model.hpp>

#include <cmath>
#include <vector>

namespace smoe {

/// Linear warmup to lr_peak, then cosine decay to lr_min at the last step.
inline double learning_rate(const ModelConfig& cfg, std::size_t step) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.lr_peak * double(step + 1) / double(cfg.warmup_steps);
    const std::size_t decay_steps = cfg.steps > cfg.warmup_steps + 1 ? cfg.steps - cfg.warmup_steps - 1 : 1;
    const double progress = std::min(1.0, double(step - cfg.warmup_steps) / double(decay_steps));
    return cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + std::cos(M_PI * progress));
}

struct AdamWParams {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adam with bias correction and decoupled weight decay. Moments are kept
/// per learnable tensor in for_each_param order.
class AdamW {
public:
    AdamW() = default;
    explicit AdamW(AdamWParams p) : params_(p) {}

    /// One update of a single tensor; `slot` identifies its moment buffers.
    void update(std::size_t slot, std::span<float> param, std::span<const float> grad, double lr) {
        require_shape(param.size() == grad.size(), "AdamW: param/grad size mismatch");
        if (slot >= m_.size()) {
            m_.resize(slot + 1);
            v_.resize(slot + 1);
        }
        if (m_[slot].empty()) {
            m_[slot].assign(param.size(), 0.0f);
            v_[slot].assign(param.size(), 0.0f);
        }
        require_shape(m_[slot].size() == param.size(), "AdamW: moment size mismatch");
        const double t = double(step_ + 1);
        const double bc1 = 1.0 - std::pow(params_.beta1, t);
        const double bc2 = 1.0 - std::pow(params_.beta2, t);
        auto& m = m_[slot];
        auto& v = v_[slot];
        for (std::size_t i = 0; i < param.size(); ++i) {
            const double g = grad[i];
            m[i] = float(params_.beta1 * m[i] + (1.0 - params_.beta1) * g);
            v[i] = float(params_.beta2 * v[i] + (1.0 - params_.beta2) * g * g);
            const double mhat = double(m[i]) / bc1;
            const double vhat = double(v[i]) / bc2;
            const double p = param[i];
            param[i] = float(p - lr * params_.weight_decay * p - lr * mhat / (std::sqrt(vhat) + params_.eps));
        }
    }

    /// Updates every learnable tensor of the model and advances the step.
    void step(ModelState& model, ModelGrads& grads, double lr) {
        std::size_t slot = 0;
        for_each_param_grad(model, grads, [&](const std::string&, std::span<float> p, std::span<float> g) {
            update(slot++, p, g, lr);
        });
        ++step_;
    }

    std::size_t step_count() const noexcept { return step_; }
    void set_step_count(std::size_t s) noexcept { step_ = s; }
    const AdamWParams& params() const noexcept { return params_; }

    std::vector<std::vector<float>>& first_moments() noexcept { return m_; }
    std::vector<std::vector<float>>& second_moments() noexcept { return v_; }
    const std::vector<std::vector<float>>& first_moments() const noexcept { return m_; }
    const std::vector<std::vector<float>>& second_moments() const noexcept { return v_; }

private:
    AdamWParams params_;
    std::vector<std::vector<float>> m_, v_;
    std::size_t step_ = 0;
};

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_global_norm(ModelState& model, ModelGrads& grads, double max_norm) {
    double ss = 0.0;
    for_each_param_grad(model, grads, [&](const std::string&, std::span<float>, std::span<float> g) {
        for (float v : g) ss += double(v) * double(v);
    });
    const double norm = std::sqrt(ss);
    if (max_norm > 0.0 && norm > max_norm) {
        const float scale = float(max_norm / norm);
        for_each_param_grad(model, grads, [&](const std::string&, std::span<float>, std::span<float> g) {
            for (auto& v : g) v *= scale;
        });
    }
    return norm;
}

}  // namespace smoe
