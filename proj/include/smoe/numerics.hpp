#pragma once

// Dense linear algebra, activations, similarity, rank statistics, a
// counter-based RNG and central finite differences. Compute is float32;
// anything that reports a metric or a loss accumulates in double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace smoe {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

using Vector = std::vector<float>;

inline void require_shape(bool ok, const char* what) {
    if (!ok) throw ShapeError(what);
}

/// Row-major float32 matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        require_shape(data_.size() == rows_ * cols_, "Matrix: data length != rows*cols");
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<float> flat() noexcept { return data_; }
    std::span<const float> flat() const noexcept { return data_; }
    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }

    void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

    Matrix transposed() const {
        Matrix t(cols_, rows_);
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
        return t;
    }

    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// ---------------------------------------------------------------------------
// Kernels. Every reduction runs in index order with one accumulator per
// output so results are bitwise reproducible and match a naive scalar loop.

/// y[:] += a * x[:]
inline void axpy(float a, std::span<const float> x, std::span<float> y) noexcept {
    const std::size_t n = y.size();
    const float* xs = x.data();
    float* ys = y.data();
    for (std::size_t i = 0; i < n; ++i) ys[i] += a * xs[i];
}

inline float dot(std::span<const float> a, std::span<const float> b) noexcept {
    float acc = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline double dot_f64(std::span<const float> a, std::span<const float> b) noexcept {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += double(a[i]) * double(b[i]);
    return acc;
}

inline double norm_f64(std::span<const float> a) noexcept { return std::sqrt(dot_f64(a, a)); }

/// out = m^T-form product given the TRANSPOSE of m (cols(m) x rows(m)).
/// out_i = sum_j m_ij v_j accumulated in j order.
inline void matvec_transposed(const Matrix& m_t, std::span<const float> v, std::span<float> out) noexcept {
    std::fill(out.begin(), out.end(), 0.0f);
    for (std::size_t j = 0; j < m_t.rows(); ++j) axpy(v[j], m_t.row(j), out);
}

namespace detail {

template <std::size_t TB, std::size_t CB, bool Accumulate>
inline void gemm_tile(const float* const* x, std::size_t inner, const float* w, std::size_t ldw, float* const* y,
                      std::size_t c0) noexcept {
    float acc[TB][CB];
    for (std::size_t q = 0; q < TB; ++q)
        for (std::size_t c = 0; c < CB; ++c) acc[q][c] = Accumulate ? y[q][c0 + c] : 0.0f;
    for (std::size_t j = 0; j < inner; ++j) {
        const float* wr = w + j * ldw + c0;
        for (std::size_t q = 0; q < TB; ++q) {
            const float xv = x[q][j];
            for (std::size_t c = 0; c < CB; ++c) acc[q][c] += xv * wr[c];
        }
    }
    for (std::size_t q = 0; q < TB; ++q)
        for (std::size_t c = 0; c < CB; ++c) y[q][c0 + c] = acc[q][c];
}

template <std::size_t TB, bool Accumulate>
inline void gemm_row_block(const float* const* x, const Matrix& w, float* const* y) noexcept {
    const std::size_t cols = w.cols(), inner = w.rows();
    std::size_t c = 0;
    for (; c + 64 <= cols; c += 64) gemm_tile<TB, 64, Accumulate>(x, inner, w.data(), cols, y, c);
    for (; c + 16 <= cols; c += 16) gemm_tile<TB, 16, Accumulate>(x, inner, w.data(), cols, y, c);
    for (; c < cols; ++c) gemm_tile<TB, 1, Accumulate>(x, inner, w.data(), cols, y, c);
}

}  // namespace detail

/// y_r[c] (+)= sum_j x_r[j] * w(j, c) for every row pointer pair (x_r, y_r).
/// The inner index j is reduced in ascending order with one accumulator per
/// output, so results equal a naive scalar triple loop bit for bit.
template <bool Accumulate = false>
inline void gemm_rows(std::span<const float* const> x_rows, const Matrix& w, std::span<float* const> y_rows) {
    require_shape(x_rows.size() == y_rows.size(), "gemm_rows: row count mismatch");
    const std::size_t m = x_rows.size();
    std::size_t r = 0;
    for (; r + 4 <= m; r += 4) detail::gemm_row_block<4, Accumulate>(x_rows.data() + r, w, y_rows.data() + r);
    for (; r < m; ++r) detail::gemm_row_block<1, Accumulate>(x_rows.data() + r, w, y_rows.data() + r);
}

inline std::vector<const float*> row_ptrs(const Matrix& m) {
    std::vector<const float*> p(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) p[r] = m.data() + r * m.cols();
    return p;
}

inline std::vector<float*> row_ptrs(Matrix& m) {
    std::vector<float*> p(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) p[r] = m.data() + r * m.cols();
    return p;
}

inline Vector matvec(const Matrix& m, std::span<const float> v) {
    require_shape(m.cols() == v.size(), "matvec: m.cols != v.dim");
    Vector out(m.rows(), 0.0f);
    for (std::size_t i = 0; i < m.rows(); ++i) out[i] = dot(m.row(i), v);
    return out;
}

/// out[:] = sum_i v_i * m.row(i), i.e. m^T v.
inline void matvec_t_accumulate(const Matrix& m, std::span<const float> v, std::span<float> out) {
    require_shape(m.rows() == v.size() && m.cols() == out.size(), "matvec_t: shape mismatch");
    for (std::size_t i = 0; i < m.rows(); ++i) axpy(v[i], m.row(i), out);
}

// ---------------------------------------------------------------------------
// Activations

inline float sigmoid(float x) noexcept {
    if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
    const float e = std::exp(x);
    return e / (1.0f + e);
}

inline float silu(float x) noexcept { return x * sigmoid(x); }

inline float silu_deriv(float x) noexcept {
    const float s = sigmoid(x);
    return s * (1.0f + x * (1.0f - s));
}

inline Vector silu(std::span<const float> xs) {
    Vector out(xs.size());
    std::transform(xs.begin(), xs.end(), out.begin(), [](float x) { return silu(x); });
    return out;
}

inline Vector silu_deriv(std::span<const float> xs) {
    Vector out(xs.size());
    std::transform(xs.begin(), xs.end(), out.begin(), [](float x) { return silu_deriv(x); });
    return out;
}

/// Max-subtracted softmax. Normalization is computed in double.
inline Vector softmax(std::span<const float> z) {
    Vector out(z.size());
    if (z.empty()) return out;
    const float mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = std::exp(z[i] - mx);
        sum += out[i];
    }
    const double inv = 1.0 / sum;
    for (auto& v : out) v = float(double(v) * inv);
    return out;
}

/// log(sum exp z), computed in double.
inline double log_sum_exp(std::span<const float> z) {
    const float mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (float v : z) sum += std::exp(double(v) - double(mx));
    return double(mx) + std::log(sum);
}

// ---------------------------------------------------------------------------
// Similarity

inline constexpr double kCosineEps = 1e-8;

/// Cosine similarity. Each side is first divided by its largest magnitude, so
/// the result does not depend on scale even for tiny vectors; the
/// denominator is then clamped at 1e-8, which only matters for a zero vector
/// (giving 0).
inline double cosine(std::span<const float> a, std::span<const float> b) {
    require_shape(a.size() == b.size(), "cosine: dimension mismatch");
    double ma = 0.0, mb = 0.0;
    for (float v : a) ma = std::max(ma, std::fabs(double(v)));
    for (float v : b) mb = std::max(mb, std::fabs(double(v)));
    const double sa = ma > 0.0 ? 1.0 / ma : 0.0, sb = mb > 0.0 ? 1.0 / mb : 0.0;
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = double(a[i]) * sa, y = double(b[i]) * sb;
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    const double c = ab / std::max(std::sqrt(aa) * std::sqrt(bb), kCosineEps);
    return std::clamp(c, -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// RNG: counter-based; each draw hashes (key, counter) with SplitMix64's
// finalizer, so sub-streams are cheap and independent of draw history.

inline constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline constexpr std::uint64_t hash_label(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : key_(mix64(seed)) {}

    /// Independent sub-stream; the parent's counter is not consumed.
    Rng split(std::uint64_t stream) const noexcept { return Rng(key_, mix64(stream ^ 0xA5A5A5A5DEADBEEFull)); }
    Rng split(std::string_view label) const noexcept { return split(hash_label(label)); }
    Rng split(std::string_view label, std::uint64_t index) const noexcept {
        return split(hash_label(label)).split(index);
    }

    std::uint64_t next_u64() noexcept { return mix64(key_ ^ mix64(counter_++)); }

    /// Uniform in [0, 1) with 24 bits of mantissa.
    float uniform() noexcept { return float(next_u64() >> 40) * 0x1.0p-24f; }
    double uniform_f64() noexcept { return double(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n). Lemire's multiply-shift; bias is < 2^-32 for small n.
    std::uint64_t below(std::uint64_t n) noexcept {
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    /// Standard normal via Box-Muller (one value per pair of draws).
    double normal() noexcept {
        double u1 = uniform_f64();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double u2 = uniform_f64();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    template <class T>
    void shuffle(std::span<T> xs) noexcept {
        for (std::size_t i = xs.size(); i > 1; --i) std::swap(xs[i - 1], xs[below(i)]);
    }

    std::uint64_t counter() const noexcept { return counter_; }

private:
    Rng(std::uint64_t parent, std::uint64_t salt) : key_(mix64(parent ^ salt)) {}
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

inline Matrix random_normal(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    Matrix m(rows, cols);
    for (auto& v : m.flat()) v = float(rng.normal() * stddev);
    return m;
}

// ---------------------------------------------------------------------------
// Statistics

/// Ranks starting at 1 with ties receiving their average rank.
inline std::vector<double> average_ranks(std::span<const double> xs) {
    const std::size_t n = xs.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && xs[idx[j + 1]] == xs[idx[i]]) ++j;
        const double avg = 0.5 * double(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

/// Pearson correlation; returns NaN when either side has zero variance.
inline double pearson(std::span<const double> xs, std::span<const double> ys) {
    const std::size_t n = xs.size();
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= double(n);
    my /= double(n);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = xs[i] - mx, dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) return std::nan("");
    return sxy / std::sqrt(sxx * syy);
}

struct SpearmanResult {
    double rho = 0.0;
    double p_value = 1.0;
    bool degenerate = false;  // constant input on one side; rho undefined
};

/// Spearman rank correlation with a two-sided permutation p-value,
/// p = (1 + #{|rho_perm| >= |rho|}) / (1 + permutations).
inline SpearmanResult spearman_rho(std::span<const double> xs, std::span<const double> ys,
                                   std::size_t permutations = 10000, std::uint64_t seed = 0) {
    if (xs.size() != ys.size()) throw ShapeError("spearman_rho: length mismatch");
    if (xs.size() < 3) throw std::invalid_argument("spearman_rho: need at least 3 samples");
    const auto rx = average_ranks(xs);
    auto ry = average_ranks(ys);
    SpearmanResult out;
    const double rho = pearson(rx, ry);
    if (std::isnan(rho)) {
        out.degenerate = true;
        out.rho = 0.0;
        out.p_value = 1.0;
        return out;
    }
    out.rho = rho;
    if (permutations == 0) return out;
    Rng rng(seed);
    std::size_t extreme = 0;
    const double thresh = std::abs(rho) - 1e-12;
    for (std::size_t p = 0; p < permutations; ++p) {
        rng.shuffle(std::span<double>(ry));
        if (std::abs(pearson(rx, ry)) >= thresh) ++extreme;
    }
    out.p_value = double(extreme + 1) / double(permutations + 1);
    return out;
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central differences of a scalar function with respect to every entry of
/// `params`. The function is evaluated in place on perturbed parameters;
/// each coordinate is restored bitwise afterwards.
template <class T>
std::vector<double> finite_diff_grad(const std::function<double()>& f, std::span<T> params, T h = T(1e-3)) {
    if (!(h > T(0))) throw std::invalid_argument("finite_diff_grad: step must be positive");
    std::vector<double> grad(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
        const T saved = params[k];
        params[k] = saved + h;
        const double plus = f();
        params[k] = saved - h;
        const double minus = f();
        params[k] = saved;
        if (!std::isfinite(plus) || !std::isfinite(minus))
            throw std::domain_error("finite_diff_grad: non-finite function value at coordinate " + std::to_string(k));
        // Use the realized step so float rounding of saved +/- h does not bias the estimate.
        const double step = double(saved + h) - double(saved - h);
        grad[k] = (plus - minus) / step;
    }
    return grad;
}

inline bool all_finite(std::span<const float> xs) noexcept {
    return std::all_of(xs.begin(), xs.end(), [](float v) { return std::isfinite(v); });
}

}  // namespace smoe
