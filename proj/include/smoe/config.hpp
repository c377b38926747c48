#pragma once

// Run configuration and its line-based `key = value` file format.

#include <smoe/numerics.hpp>

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace smoe {

enum class RoutingVariant { none, aux_loss, loss_free, loss_free_seq_aux, kmeans };

inline const char* to_string(RoutingVariant v) {
    switch (v) {
        case RoutingVariant::none: return "none";
        case RoutingVariant::aux_loss: return "aux_loss";
        case RoutingVariant::loss_free: return "loss_free";
        case RoutingVariant::loss_free_seq_aux: return "loss_free_seq_aux";
        case RoutingVariant::kmeans: return "kmeans";
    }
    return "?";
}

inline constexpr RoutingVariant kAllVariants[] = {RoutingVariant::none, RoutingVariant::aux_loss,
                                                  RoutingVariant::loss_free, RoutingVariant::loss_free_seq_aux,
                                                  RoutingVariant::kmeans};

inline bool parse_variant(std::string_view s, RoutingVariant& out) {
    for (auto v : kAllVariants)
        if (s == to_string(v)) {
            out = v;
            return true;
        }
    return false;
}

enum class DataSource { synthetic_clustered, text_file };

class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& msg, std::size_t line = 0)
        : std::runtime_error(line ? "line " + std::to_string(line) + ": " + msg : msg), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

struct ModelConfig {
    // architecture
    std::size_t vocab = 256;
    std::size_t hidden = 64;
    std::size_t layers = 2;
    std::size_t experts = 8;
    std::size_t top_k = 2;
    std::size_t expert_hidden = 128;
    RoutingVariant variant = RoutingVariant::loss_free;
    double mixer_decay = 0.7;

    // balancing
    double lambda_aux = 1e-2;
    double lambda_z = 1e-3;
    double lambda_seq = 1e-3;
    double bias_rate = 1e-3;
    double centroid_decay = 0.99;

    // optimization
    std::uint64_t seed = 0;
    std::size_t steps = 5000;
    std::size_t batch_sequences = 16;
    std::size_t seq_len = 128;
    double lr_peak = 1e-3;
    double lr_min = 1e-4;
    std::size_t warmup_steps = 100;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double grad_clip = 0.0;  // global-norm clip, 0 = off

    // data
    DataSource data_source = DataSource::synthetic_clustered;
    std::string data_path;
    std::size_t data_clusters = 8;
    double data_stickiness = 0.97;
    double data_noise = 0.01;
    std::size_t eval_sequences = 16;

    // outputs
    std::size_t checkpoint_every = 0;
    std::size_t probe_every = 0;
    std::vector<std::size_t> probe_layers;  // empty = first/middle/last
    std::size_t rolling_window = 200;

    bool learned_router() const noexcept { return variant != RoutingVariant::kmeans; }
    bool uses_bias_update() const noexcept {
        return variant == RoutingVariant::loss_free || variant == RoutingVariant::loss_free_seq_aux;
    }
    bool uses_aux() const noexcept { return variant == RoutingVariant::aux_loss; }
    bool uses_seq_aux() const noexcept { return variant == RoutingVariant::loss_free_seq_aux; }

    std::size_t tokens_per_batch() const noexcept { return batch_sequences * seq_len; }

    std::vector<std::size_t> resolved_probe_layers() const {
        if (!probe_layers.empty()) return probe_layers;
        std::set<std::size_t> s{0, layers / 2, layers - 1};
        return {s.begin(), s.end()};
    }

    void validate() const {
        auto need = [](bool ok, const std::string& msg) {
            if (!ok) throw ConfigError(msg);
        };
        need(vocab >= 1 && hidden >= 1 && layers >= 1 && experts >= 1 && expert_hidden >= 1, "all dims must be >= 1");
        need(top_k >= 1 && top_k <= experts, "top_k must satisfy 1 <= top_k <= experts");
        need(mixer_decay >= 0.0 && mixer_decay < 1.0, "mixer_decay must be in [0,1)");
        need(lambda_aux >= 0.0 && lambda_z >= 0.0 && lambda_seq >= 0.0, "loss coefficients must be >= 0");
        need(bias_rate > 0.0, "bias_rate must be > 0");
        need(centroid_decay >= 0.0 && centroid_decay < 1.0, "centroid_decay must be in [0,1)");
        need(batch_sequences >= 1 && seq_len >= 1, "batch shape must be positive");
        need(lr_peak >= 0.0 && lr_min >= 0.0, "learning rates must be >= 0");
        need(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must be in [0,1)");
        need(adam_eps > 0.0, "adam_eps must be > 0");
        need(weight_decay >= 0.0 && grad_clip >= 0.0, "weight_decay and grad_clip must be >= 0");
        need(data_clusters >= 1 && data_clusters <= vocab, "data_clusters must be in [1, vocab]");
        need(data_stickiness >= 0.0 && data_stickiness <= 1.0, "data_stickiness must be in [0,1]");
        need(data_noise >= 0.0 && data_noise <= 1.0, "data_noise must be in [0,1]");
        need(data_source != DataSource::text_file || !data_path.empty(), "text_file source needs data_path");
        need(data_source != DataSource::text_file || vocab == 256, "text_file source is byte-level (vocab = 256)");
        need(rolling_window >= 1, "rolling_window must be >= 1");
        for (auto l : probe_layers) need(l < layers, "probe_layers entry out of range");
    }
};

namespace detail {

struct ConfigField {
    const char* name;
    bool architecture;  // part of the checkpoint compatibility digest
    std::function<bool(ModelConfig&, const std::string&)> set;
    std::function<std::string(const ModelConfig&)> get;
};

inline bool parse_size(const std::string& s, std::size_t& out) {
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
}

inline bool parse_u64(const std::string& s, std::uint64_t& out) {
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
}

inline bool parse_real(const std::string& s, double& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return end == s.c_str() + s.size() && std::isfinite(out);
}

inline std::string real_text(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

#define SMOE_SIZE_FIELD(key, member, arch)                                                          \
    ConfigField{key, arch, [](ModelConfig& c, const std::string& v) { return parse_size(v, c.member); }, \
                [](const ModelConfig& c) { return std::to_string(c.member); }}
#define SMOE_REAL_FIELD(key, member, arch)                                                          \
    ConfigField{key, arch, [](ModelConfig& c, const std::string& v) { return parse_real(v, c.member); }, \
                [](const ModelConfig& c) { return real_text(c.member); }}

inline const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = {
        SMOE_SIZE_FIELD("vocab", vocab, true),
        SMOE_SIZE_FIELD("hidden", hidden, true),
        SMOE_SIZE_FIELD("layers", layers, true),
        SMOE_SIZE_FIELD("experts", experts, true),
        SMOE_SIZE_FIELD("top_k", top_k, true),
        SMOE_SIZE_FIELD("expert_hidden", expert_hidden, true),
        ConfigField{"routing_variant", true,
                    [](ModelConfig& c, const std::string& v) { return parse_variant(v, c.variant); },
                    [](const ModelConfig& c) { return std::string(to_string(c.variant)); }},
        SMOE_REAL_FIELD("mixer_decay", mixer_decay, true),
        SMOE_REAL_FIELD("lambda_aux", lambda_aux, false),
        SMOE_REAL_FIELD("lambda_z", lambda_z, false),
        SMOE_REAL_FIELD("lambda_seq", lambda_seq, false),
        SMOE_REAL_FIELD("bias_rate", bias_rate, false),
        SMOE_REAL_FIELD("centroid_decay", centroid_decay, false),
        ConfigField{"seed", false, [](ModelConfig& c, const std::string& v) { return parse_u64(v, c.seed); },
                    [](const ModelConfig& c) { return std::to_string(c.seed); }},
        SMOE_SIZE_FIELD("steps", steps, false),
        SMOE_SIZE_FIELD("batch_sequences", batch_sequences, false),
        SMOE_SIZE_FIELD("seq_len", seq_len, false),
        SMOE_REAL_FIELD("lr_peak", lr_peak, false),
        SMOE_REAL_FIELD("lr_min", lr_min, false),
        SMOE_SIZE_FIELD("warmup_steps", warmup_steps, false),
        SMOE_REAL_FIELD("beta1", beta1, false),
        SMOE_REAL_FIELD("beta2", beta2, false),
        SMOE_REAL_FIELD("adam_eps", adam_eps, false),
        SMOE_REAL_FIELD("weight_decay", weight_decay, false),
        SMOE_REAL_FIELD("grad_clip", grad_clip, false),
        ConfigField{"data_source", false,
                    [](ModelConfig& c, const std::string& v) {
                        if (v == "synthetic_clustered") c.data_source = DataSource::synthetic_clustered;
                        else if (v == "text_file") c.data_source = DataSource::text_file;
                        else return false;
                        return true;
                    },
                    [](const ModelConfig& c) {
                        return std::string(c.data_source == DataSource::text_file ? "text_file"
                                                                                  : "synthetic_clustered");
                    }},
        ConfigField{"data_path", false,
                    [](ModelConfig& c, const std::string& v) {
                        c.data_path = v;
                        return true;
                    },
                    [](const ModelConfig& c) { return c.data_path; }},
        SMOE_SIZE_FIELD("data_clusters", data_clusters, false),
        SMOE_REAL_FIELD("data_stickiness", data_stickiness, false),
        SMOE_REAL_FIELD("data_noise", data_noise, false),
        SMOE_SIZE_FIELD("eval_sequences", eval_sequences, false),
        SMOE_SIZE_FIELD("checkpoint_every", checkpoint_every, false),
        SMOE_SIZE_FIELD("probe_every", probe_every, false),
        ConfigField{"probe_layers", false,
                    [](ModelConfig& c, const std::string& v) {
                        c.probe_layers.clear();
                        std::stringstream ss(v);
                        std::string item;
                        while (std::getline(ss, item, ',')) {
                            std::size_t l = 0;
                            const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
                            if (b == std::string::npos || !parse_size(item.substr(b, e - b + 1), l)) return false;
                            c.probe_layers.push_back(l);
                        }
                        return true;
                    },
                    [](const ModelConfig& c) {
                        std::string s;
                        for (std::size_t i = 0; i < c.probe_layers.size(); ++i)
                            s += (i ? "," : "") + std::to_string(c.probe_layers[i]);
                        return s;
                    }},
        SMOE_SIZE_FIELD("rolling_window", rolling_window, false),
    };
    return fields;
}

#undef SMOE_SIZE_FIELD
#undef SMOE_REAL_FIELD

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

/// Sets one key from its textual value. Throws ConfigError naming the key.
inline void set_config_value(ModelConfig& cfg, const std::string& key, const std::string& value,
                             std::size_t line = 0) {
    for (const auto& f : detail::config_fields()) {
        if (key != f.name) continue;
        if (!f.set(cfg, value)) throw ConfigError("invalid value '" + value + "' for key '" + key + "'", line);
        return;
    }
    throw ConfigError("unknown key '" + key + "'", line);
}

/// Parses `key = value` lines; `#` starts a comment. Unknown or repeated
/// keys are errors.
inline ModelConfig parse_config(std::istream& in) {
    ModelConfig cfg;
    std::set<std::string> seen;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto hash = raw.find('#');
        const std::string line = detail::trim(std::string_view(raw).substr(0, hash));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("expected 'key = value'", line_no);
        const std::string key = detail::trim(std::string_view(line).substr(0, eq));
        const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
        if (key.empty()) throw ConfigError("missing key", line_no);
        if (!seen.insert(key).second) throw ConfigError("duplicate key '" + key + "'", line_no);
        set_config_value(cfg, key, value, line_no);
    }
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
    return cfg;
}

inline ModelConfig parse_config_text(const std::string& text) {
    std::istringstream in(text);
    return parse_config(in);
}

inline ModelConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    return parse_config(in);
}

/// Canonical text: every key in declaration order. Parsing it yields the
/// same config.
inline std::string config_to_text(const ModelConfig& cfg) {
    std::string out;
    for (const auto& f : detail::config_fields()) out += std::string(f.name) + " = " + f.get(cfg) + "\n";
    return out;
}

/// Hash of the architecture keys; checkpoints are only loadable into a
/// model with the same digest.
inline std::uint64_t config_digest(const ModelConfig& cfg) {
    std::string text;
    for (const auto& f : detail::config_fields())
        if (f.architecture) text += std::string(f.name) + "=" + f.get(cfg) + ";";
    return hash_label(text);
}

}  // namespace smoe
