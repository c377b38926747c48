#pragma once

// Training loop: forward, backward, AdamW, then the variant's balancing
// update. Writes metrics.csv every step, checkpoints and geometry probes at
// configured intervals, and a run summary at the end.

#include <smoe/checkpoint.hpp>
#include <smoe/data.hpp>
#include <smoe/model.hpp>
#include <smoe/optimizer.hpp>
#include <smoe/probes.hpp>

#include <json.hpp>

#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace smoe {

struct StepMetrics {
    std::size_t step = 0;  // 1-based count of completed steps
    double loss = 0.0;
    double lr = 0.0;
    std::vector<double> maxvio;
    double maxvio_mean = 0.0;
    std::optional<double> aux_loss, z_loss, seq_aux_loss;
    std::size_t expert_evaluations = 0;
};

inline std::string metrics_header(std::size_t layers) {
    std::string h = "step,loss,ppl,lr,maxvio_mean";
    for (std::size_t l = 0; l < layers; ++l) h += ",maxvio_l" + std::to_string(l);
    return h + ",aux_loss,z_loss,seq_aux_loss";
}

inline std::string metrics_row(const StepMetrics& m) {
    std::string r = std::to_string(m.step) + "," + format_real(m.loss) + "," + format_real(std::exp(m.loss)) + "," +
                    format_real(m.lr) + "," + format_real(m.maxvio_mean);
    for (double v : m.maxvio) r += "," + format_real(v);
    for (const auto* o : {&m.aux_loss, &m.z_loss, &m.seq_aux_loss}) r += "," + (*o ? format_real(**o) : "");
    return r;
}

/// Applies the variant's gradient-free routing update from this step's
/// routed tokens. Runs after the optimizer step.
inline void balancing_update(const ModelConfig& cfg, ModelState& model, const ForwardResult& fr) {
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        auto& layer = model.layers[l];
        const auto& lf = fr.layers[l];
        if (layer.centroids) {
            const auto assign = assignments_from(lf.tape.decisions, cfg.experts);
            *layer.centroids = centroid_update(std::move(*layer.centroids), lf.tape.x, assign);
            *layer.centroids = centroid_bias_update(std::move(*layer.centroids), lf.load);
        } else if (cfg.uses_bias_update()) {
            layer.router.bias = bias_update(layer.router.bias, lf.load, cfg.bias_rate);
        }
    }
}

inline StepMetrics step_metrics(const ModelConfig& cfg, const ForwardResult& fr, std::size_t step, double lr) {
    StepMetrics m;
    m.step = step;
    m.loss = fr.lm_loss;
    m.lr = lr;
    const auto stats = fr.load_stats();
    const auto mv = maxvio_report(stats);
    m.maxvio = mv.per_layer;
    m.maxvio_mean = mv.mean;
    m.expert_evaluations = fr.expert_evaluations;
    auto layer_mean = [&](auto field) {
        double s = 0.0;
        for (const auto& l : fr.layers) s += l.*field;
        return s / double(fr.layers.size());
    };
    if (cfg.uses_aux()) {
        m.aux_loss = layer_mean(&LayerForward::aux_loss);
        m.z_loss = layer_mean(&LayerForward::z_loss);
    }
    if (cfg.uses_seq_aux()) m.seq_aux_loss = layer_mean(&LayerForward::seq_aux_loss);
    return m;
}

/// Runs one optimizer step on `batch` and returns its metrics.
inline StepMetrics train_step(const ModelConfig& cfg, TrainState& st, ModelGrads& grads, const Batch& batch) {
    const double lr = learning_rate(cfg, st.step);
    const ForwardResult fr = forward_pass(cfg, st.model, batch);
    zero_grads(grads);
    backward_pass(cfg, st.model, fr, grads);
    if (cfg.grad_clip > 0.0) clip_global_norm(st.model, grads, cfg.grad_clip);
    st.optimizer.step(st.model, grads, lr);
    balancing_update(cfg, st.model, fr);
    ++st.step;
    return step_metrics(cfg, fr, st.step, lr);
}

inline TrainState fresh_train_state(const ModelConfig& cfg) {
    TrainState st;
    st.model = init_model(cfg);
    st.optimizer = AdamW(AdamWParams{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay});
    return st;
}

/// Router rows for learned variants, centroids for the K-Means router.
inline const Matrix& routing_directions(const LayerState& layer) {
    return layer.centroids ? layer.centroids->centroids : layer.router.w_r;
}

inline std::vector<GeometryReport> geometry_reports(const ModelConfig& cfg, const ModelState& model) {
    std::vector<GeometryReport> out;
    for (auto l : cfg.resolved_probe_layers())
        out.push_back(cosine_matrix(routing_directions(model.layers.at(l)), int(l)));
    return out;
}

inline std::vector<std::filesystem::path> write_geometry(const ModelConfig& cfg, const ModelState& model,
                                                         const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> files;
    for (const auto& rep : geometry_reports(cfg, model)) {
        files.push_back(dir / ("geometry_layer" + std::to_string(rep.layer) + ".csv"));
        write_geometry_csv(files.back(), rep);
    }
    return files;
}

struct EvalResult {
    double loss = 0.0;
    double ppl = 0.0;
    std::vector<LoadStats> load;
};

inline EvalResult evaluate_heldout(const ModelConfig& cfg, const ModelState& model, const DataStream& data) {
    const auto fr = forward_pass(cfg, model, data.eval_batch());
    return {fr.lm_loss, std::exp(fr.lm_loss), fr.load_stats()};
}

inline double rolling_tail_mean(std::span<const double> xs, std::size_t window) {
    if (xs.empty()) return 0.0;
    const std::size_t w = std::min(window, xs.size());
    double s = 0.0;
    for (std::size_t i = xs.size() - w; i < xs.size(); ++i) s += xs[i];
    return s / double(w);
}

struct TrainOptions {
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> resume;
    std::size_t stop_after = 0;  // stop once this many steps are complete (0 = cfg.steps)
    bool quiet = true;
};

struct TrainResult {
    TrainState state;
    std::vector<StepMetrics> metrics;  // steps run in this invocation
    std::optional<EvalResult> heldout;
    double final_rolling_maxvio = 0.0;
    std::vector<std::filesystem::path> files;
};

namespace detail {

/// Existing metrics rows up to and including `max_step`.
inline std::vector<std::string> kept_metric_rows(const std::filesystem::path& path, std::size_t max_step) {
    std::vector<std::string> rows;
    std::ifstream in(path);
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) continue;
        if (std::stoull(line.substr(0, line.find(','))) <= max_step) rows.push_back(line);
    }
    return rows;
}

inline std::vector<double> maxvio_means_from(const std::vector<std::string>& rows) {
    std::vector<double> out;
    for (const auto& r : rows) {
        std::stringstream ss(r);
        std::string cell;
        for (int c = 0; c < 5 && std::getline(ss, cell, ','); ++c)
            if (c == 4) out.push_back(std::stod(cell));
    }
    return out;
}

}  // namespace detail

inline TrainResult train_loop(const ModelConfig& cfg, const TrainOptions& opt) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(opt.out_dir);
    const DataStream data(cfg);
    TrainResult res;
    res.state = opt.resume ? checkpoint_load(*opt.resume, cfg) : fresh_train_state(cfg);
    auto& st = res.state;
    if (st.step > cfg.steps) throw std::runtime_error("checkpoint step exceeds configured steps");
    const std::size_t end = opt.stop_after ? std::min(opt.stop_after, cfg.steps) : cfg.steps;

    const fs::path metrics_path = opt.out_dir / "metrics.csv";
    const auto previous = opt.resume ? detail::kept_metric_rows(metrics_path, st.step) : std::vector<std::string>{};
    std::vector<double> maxvio_history = detail::maxvio_means_from(previous);
    std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write " + metrics_path.string());
    metrics << metrics_header(cfg.layers) << "\n";
    for (const auto& r : previous) metrics << r << "\n";
    metrics.flush();

    ModelGrads grads = ModelGrads::zeros_like(st.model);
    while (st.step < end) {
        const Batch batch = data.train_batch(st.step);
        StepMetrics m;
        try {
            m = train_step(cfg, st, grads, batch);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("training aborted at step " + std::to_string(st.step + 1) + ": " + e.what());
        }
        metrics << metrics_row(m) << "\n";
        metrics.flush();
        maxvio_history.push_back(m.maxvio_mean);
        if (!opt.quiet && (m.step % 100 == 0 || m.step == end))
            std::fprintf(stderr, "[%s] step %zu loss %.4f maxvio %.3f\n", to_string(cfg.variant), m.step, m.loss,
                         m.maxvio_mean);
        res.metrics.push_back(std::move(m));

        if (cfg.checkpoint_every && st.step % cfg.checkpoint_every == 0) {
            fs::create_directories(opt.out_dir / "checkpoints");
            const auto p = opt.out_dir / "checkpoints" / ("step_" + std::to_string(st.step) + ".ckpt");
            checkpoint_save(st, cfg, p);
            res.files.push_back(p);
        }
        if (cfg.probe_every && st.step % cfg.probe_every == 0) {
            auto f = write_geometry(cfg, st.model, opt.out_dir / "probes" / ("step_" + std::to_string(st.step)));
            res.files.insert(res.files.end(), f.begin(), f.end());
        }
    }
    metrics.close();
    res.files.push_back(metrics_path);
    res.final_rolling_maxvio = rolling_tail_mean(maxvio_history, cfg.rolling_window);

    if (st.step == cfg.steps) {
        const auto final_ckpt = opt.out_dir / "checkpoint_final.ckpt";
        checkpoint_save(st, cfg, final_ckpt);
        res.files.push_back(final_ckpt);

        res.heldout = evaluate_heldout(cfg, st.model, data);
        auto f = write_geometry(cfg, st.model, opt.out_dir / "probes" / "final");
        res.files.insert(res.files.end(), f.begin(), f.end());

        const auto maxvio_path = opt.out_dir / "maxvio.csv";
        {
            std::ifstream in(metrics_path);
            std::ofstream out(maxvio_path, std::ios::binary | std::ios::trunc);
            std::string line;
            bool header = true;
            while (std::getline(in, line)) {
                std::vector<std::string> cells;
                std::stringstream ss(line);
                std::string c;
                while (std::getline(ss, c, ',')) cells.push_back(c);
                // step, per-layer columns, mean
                out << cells[0];
                for (std::size_t l = 0; l < cfg.layers; ++l) out << "," << cells[5 + l];
                out << "," << (header ? std::string("maxvio_mean") : cells[4]) << "\n";
                header = false;
            }
        }
        res.files.push_back(maxvio_path);

        nlohmann::ordered_json summary;
        summary["variant"] = to_string(cfg.variant);
        summary["seed"] = cfg.seed;
        summary["steps"] = st.step;
        summary["learnable_params"] = count_learnable(st.model);
        summary["router_params"] = count_router_params(st.model);
        summary["final_train_loss"] = res.metrics.empty() ? nullptr : nlohmann::json(res.metrics.back().loss);
        summary["heldout_loss"] = res.heldout->loss;
        summary["heldout_ppl"] = res.heldout->ppl;
        summary["rolling_window"] = cfg.rolling_window;
        summary["final_rolling_maxvio"] = res.final_rolling_maxvio;
        const auto summary_path = opt.out_dir / "run_summary.json";
        std::ofstream(summary_path, std::ios::binary | std::ios::trunc) << summary.dump(2) << "\n";
        res.files.push_back(summary_path);
    }
    return res;
}

}  // namespace smoe
