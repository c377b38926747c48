#pragma once

#include <smoe/config.hpp>
#include <smoe/numerics.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <unistd.h>

namespace smoe::test {

namespace fs = std::filesystem;

/// Fresh directory removed on scope exit.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() /
                ("smoe_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    fs::path path_;
};

inline std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void spit(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

inline Vector random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
    Vector v(n);
    for (auto& x : v) x = float(rng.normal() * scale);
    return v;
}

/// V=8, d=8, L=1, N=4, K=2, d_ff=8.
inline ModelConfig tiny_config(RoutingVariant v = RoutingVariant::loss_free) {
    ModelConfig c;
    c.vocab = 8;
    c.hidden = 8;
    c.layers = 1;
    c.experts = 4;
    c.top_k = 2;
    c.expert_hidden = 8;
    c.data_clusters = 2;
    c.batch_sequences = 2;
    c.seq_len = 8;
    c.eval_sequences = 2;
    c.seed = 3;
    c.steps = 20;
    c.warmup_steps = 2;
    c.variant = v;
    return c;
}

/// Small but non-trivial training config that runs in well under a second per step.
inline ModelConfig small_config(RoutingVariant v = RoutingVariant::loss_free) {
    ModelConfig c;
    c.vocab = 32;
    c.hidden = 16;
    c.layers = 2;
    c.experts = 4;
    c.top_k = 2;
    c.expert_hidden = 16;
    c.data_clusters = 4;
    c.batch_sequences = 4;
    c.seq_len = 16;
    c.eval_sequences = 4;
    c.seed = 11;
    c.steps = 12;
    c.warmup_steps = 2;
    c.variant = v;
    return c;
}

struct RelErr {
    double worst = 0.0;
    void add(std::span<const float> analytic, const std::vector<double>& numeric) {
        double scale = 0.0;
        for (double v : numeric) scale = std::max(scale, std::abs(v));
        for (std::size_t k = 0; k < numeric.size(); ++k) {
            const double a = analytic[k], n = numeric[k];
            const double den = std::max({std::abs(a), std::abs(n), 1e-3 * scale, 1e-12});
            worst = std::max(worst, std::abs(a - n) / den);
        }
    }
};

/// Central differences over float weights, using the realized step.
inline std::vector<double> numeric_grad(Matrix& w, const std::function<double()>& f) {
    std::vector<double> g(w.size());
    for (std::size_t k = 0; k < w.size(); ++k) {
        const float saved = w.data()[k];
        const float h = std::max(1e-3f, std::abs(saved) * 1e-3f);
        w.data()[k] = saved + h;
        const double plus = f();
        w.data()[k] = saved - h;
        const double minus = f();
        w.data()[k] = saved;
        g[k] = (plus - minus) / (double(saved + h) - double(saved - h));
    }
    return g;
}

inline std::string config_text(const ModelConfig& c) { return config_to_text(c); }

}  // namespace smoe::test
