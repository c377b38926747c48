#pragma once

// Binary checkpoints. Little-endian layout:
//   magic "SMOECL01" | u32 version | u64 config digest | u32 array count
//   per array: u32 name length | name | u32 ndim | u64 dims[ndim] | f32 data
// Learnable tensors are stored under "param/", running statistics
// (selection biases, centroids) under "stat/", and AdamW moments under
// "adam_m/" and "adam_v/".

#include <smoe/optimizer.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace smoe {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'S', 'M', 'O', 'E', 'C', 'L', '0', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainState {
    ModelState model;
    AdamW optimizer;
    std::size_t step = 0;  // completed optimizer steps
};

struct NamedArray {
    std::vector<std::uint64_t> shape;
    std::vector<float> data;
};

namespace detail {

class LeWriter {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(char((v >> (8 * i)) & 0xFF));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(char((v >> (8 * i)) & 0xFF));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void bytes(const char* p, std::size_t n) { buf_.append(p, n); }
    const std::string& data() const noexcept { return buf_; }

private:
    std::string buf_;
};

class LeReader {
public:
    explicit LeReader(std::string data) : buf_(std::move(data)) {}
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool at_end() const noexcept { return pos_ == buf_.size(); }
    std::size_t remaining() const noexcept { return buf_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (buf_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
    }
    std::string buf_;
    std::size_t pos_ = 0;
};

inline void put_array(std::map<std::string, NamedArray>& out, const std::string& name,
                      std::vector<std::uint64_t> shape, std::span<const float> data) {
    out[name] = NamedArray{std::move(shape), std::vector<float>(data.begin(), data.end())};
}

}  // namespace detail

/// Every array a checkpoint of this state carries, keyed by name.
inline std::map<std::string, NamedArray> checkpoint_arrays(const TrainState& st) {
    std::map<std::string, NamedArray> arrays;
    const float step_value = float(st.step);
    detail::put_array(arrays, "state/step", {1}, std::span<const float>(&step_value, 1));
    std::size_t slot = 0;
    const auto& m1 = st.optimizer.first_moments();
    const auto& m2 = st.optimizer.second_moments();
    for_each_param(st.model, [&](const std::string& name, std::span<const float> p) {
        detail::put_array(arrays, "param/" + name, {p.size()}, p);
        if (slot < m1.size() && !m1[slot].empty()) {
            detail::put_array(arrays, "adam_m/" + name, {p.size()}, m1[slot]);
            detail::put_array(arrays, "adam_v/" + name, {p.size()}, m2[slot]);
        }
        ++slot;
    });
    for (std::size_t l = 0; l < st.model.layers.size(); ++l) {
        const auto& layer = st.model.layers[l];
        const std::string p = "stat/layer" + std::to_string(l) + "/";
        if (layer.centroids) {
            const auto& c = *layer.centroids;
            detail::put_array(arrays, p + "centroids", {c.centroids.rows(), c.centroids.cols()}, c.centroids.flat());
            detail::put_array(arrays, p + "centroid_bias", {c.bias.size()}, c.bias);
        } else {
            detail::put_array(arrays, p + "router_bias", {layer.router.bias.size()}, layer.router.bias);
        }
    }
    return arrays;
}

inline std::string encode_checkpoint(const TrainState& st, std::uint64_t digest) {
    detail::LeWriter w;
    w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
    w.u32(kCheckpointVersion);
    w.u64(digest);
    const auto arrays = checkpoint_arrays(st);
    w.u32(std::uint32_t(arrays.size()));
    for (const auto& [name, arr] : arrays) {
        w.u32(std::uint32_t(name.size()));
        w.bytes(name.data(), name.size());
        w.u32(std::uint32_t(arr.shape.size()));
        for (auto dim : arr.shape) w.u64(dim);
        for (float v : arr.data) w.f32(v);
    }
    return w.data();
}

/// Writes atomically: a partially written file never replaces a good one.
inline void checkpoint_save(const TrainState& st, const ModelConfig& cfg, const std::filesystem::path& path) {
    const std::string bytes = encode_checkpoint(st, config_digest(cfg));
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
        out.write(bytes.data(), std::streamsize(bytes.size()));
        if (!out) throw CheckpointError("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

struct DecodedCheckpoint {
    std::uint32_t version = 0;
    std::uint64_t digest = 0;
    std::map<std::string, NamedArray> arrays;
};

inline DecodedCheckpoint decode_checkpoint(std::string bytes) {
    detail::LeReader r(std::move(bytes));
    DecodedCheckpoint out;
    if (r.bytes(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic))
        throw CheckpointError("not a checkpoint (bad magic)");
    out.version = r.u32();
    if (out.version != kCheckpointVersion)
        throw CheckpointError("incompatible checkpoint format version " + std::to_string(out.version) +
                              " (expected " + std::to_string(kCheckpointVersion) + ")");
    out.digest = r.u64();
    const auto count = r.u32();
    for (std::uint32_t a = 0; a < count; ++a) {
        const auto name_len = r.u32();
        const std::string name = r.bytes(name_len);
        NamedArray arr;
        const auto ndim = r.u32();
        std::uint64_t total = 1;
        for (std::uint32_t k = 0; k < ndim; ++k) {
            arr.shape.push_back(r.u64());
            total *= arr.shape.back();
        }
        if (total * 4 > r.remaining()) throw CheckpointError("checkpoint truncated");
        arr.data.resize(total);
        for (auto& v : arr.data) v = r.f32();
        out.arrays.emplace(name, std::move(arr));
    }
    if (!r.at_end()) throw CheckpointError("trailing bytes after checkpoint arrays");
    return out;
}

inline std::string hex64(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Loads into a freshly initialized state for `cfg`. Nothing is returned
/// unless every expected array is present with the right shape.
inline TrainState checkpoint_load(const std::filesystem::path& path, const ModelConfig& cfg) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto dec = decode_checkpoint(std::move(bytes));
    const auto want = config_digest(cfg);
    if (dec.digest != want)
        throw CheckpointError("config digest mismatch: checkpoint " + hex64(dec.digest) + " vs config " + hex64(want));

    TrainState st;
    st.model = init_model(cfg);
    st.optimizer = AdamW(AdamWParams{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay});

    auto take = [&](const std::string& name, std::span<float> dst) {
        const auto it = dec.arrays.find(name);
        if (it == dec.arrays.end()) throw CheckpointError("checkpoint is missing array '" + name + "'");
        if (it->second.data.size() != dst.size()) throw CheckpointError("shape mismatch for array '" + name + "'");
        std::copy(it->second.data.begin(), it->second.data.end(), dst.begin());
    };
    Vector step_value(1);
    take("state/step", step_value);
    st.step = std::size_t(step_value[0]);

    const bool has_moments = dec.arrays.count("adam_m/embedding") > 0;
    auto& m1 = st.optimizer.first_moments();
    auto& m2 = st.optimizer.second_moments();
    for_each_param(st.model, [&](const std::string& name, std::span<float> p) {
        take("param/" + name, p);
        if (has_moments) {
            m1.emplace_back(p.size());
            m2.emplace_back(p.size());
            take("adam_m/" + name, m1.back());
            take("adam_v/" + name, m2.back());
        }
    });
    st.optimizer.set_step_count(has_moments ? st.step : 0);
    for (std::size_t l = 0; l < st.model.layers.size(); ++l) {
        auto& layer = st.model.layers[l];
        const std::string p = "stat/layer" + std::to_string(l) + "/";
        if (layer.centroids) {
            take(p + "centroids", layer.centroids->centroids.flat());
            take(p + "centroid_bias", layer.centroids->bias);
        } else {
            take(p + "router_bias", layer.router.bias);
        }
    }
    return st;
}

}  // namespace smoe
