#pragma once

// Subcommands behind the smoe_lab executable: train, gradcheck, probe,
// report. Each returns a process exit status and writes human output to the
// given streams, so tests can drive them without spawning processes.

#include <smoe/gradcheck.hpp>
#include <smoe/trainer.hpp>

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace smoe {

namespace fs = std::filesystem;

inline constexpr const char* kOutRootEnv = "SMOE_OUT_ROOT";

enum ExitCode : int {
    kExitOk = 0,
    kExitFailed = 1,      // a declared check did not hold
    kExitBadInput = 2,    // config, arguments, missing files
    kExitIncompatible = 3 // checkpoint does not match the config
};

// ---------------------------------------------------------------------------
// Shared helpers

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string file_digest(const fs::path& p) { return hex64(hash_label(read_file(p))); }

inline std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Exclusive marker that keeps two invocations out of one output directory.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".smoe_lab.lock") {
        std::FILE* f = std::fopen(path_.c_str(), "wx");
        if (!f)
            throw std::runtime_error("output directory " + dir.string() + " is locked by another run (remove " +
                                     path_.string() + " if it is stale)");
        std::fclose(f);
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
};

/// Key overrides applied on top of a config file, in application order.
using Overrides = std::vector<std::pair<std::string, std::string>>;

inline ModelConfig load_with_overrides(const fs::path& path, const Overrides& overrides) {
    ModelConfig cfg = load_config(path);
    for (const auto& [k, v] : overrides) {
        try {
            set_config_value(cfg, k, v);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("override --") + k + ": " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

/// Regular files under `dir`, relative and sorted, skipping the lock.
inline std::vector<std::string> list_artifacts(const fs::path& dir, const std::set<std::string>& skip = {}) {
    std::vector<std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string rel = fs::relative(e.path(), dir).generic_string();
        if (rel == ".smoe_lab.lock" || skip.count(rel) || rel.ends_with(".tmp")) continue;
        out.push_back(rel);
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline nlohmann::ordered_json artifact_entries(const fs::path& dir, const std::vector<std::string>& files) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& rel : files) {
        const fs::path p = dir / rel;
        arr.push_back({{"path", rel}, {"bytes", fs::file_size(p)}, {"fnv1a64", file_digest(p)}});
    }
    return arr;
}

// ---------------------------------------------------------------------------
// train

struct TrainCommand {
    fs::path config;
    std::optional<fs::path> out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> steps;
    std::optional<std::string> variant;
    std::optional<fs::path> resume;
    std::size_t stop_after = 0;
    bool quiet = false;
};

inline Overrides train_overrides(const TrainCommand& c) {
    Overrides o;
    if (c.seed) o.emplace_back("seed", std::to_string(*c.seed));
    if (c.steps) o.emplace_back("steps", std::to_string(*c.steps));
    if (c.variant) o.emplace_back("routing_variant", *c.variant);
    return o;
}

inline fs::path resolve_out_dir(const TrainCommand& c, const ModelConfig& cfg) {
    if (c.out) return *c.out;
    const char* root = std::getenv(kOutRootEnv);
    if (!root || !*root)
        throw std::invalid_argument(std::string("no output directory: pass --out or set ") + kOutRootEnv);
    return fs::path(root) / (c.config.stem().string() + "-" + to_string(cfg.variant) + "-seed" +
                             std::to_string(cfg.seed));
}

inline int cmd_train(const TrainCommand& c, std::ostream& out, std::ostream& err) {
    ModelConfig cfg;
    const Overrides overrides = train_overrides(c);
    try {
        cfg = load_with_overrides(c.config, overrides);
    } catch (const ConfigError& e) {
        err << "error: " << c.config.string() << ": " << e.what() << "\n";
        return kExitBadInput;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitBadInput;
    }

    fs::path dir;
    try {
        dir = resolve_out_dir(c, cfg);
        fs::create_directories(dir);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitBadInput;
    }

    try {
        DirLock lock(dir);
        const std::string started = utc_now();
        {
            std::ofstream snap(dir / "config.resolved", std::ios::binary | std::ios::trunc);
            snap << config_to_text(cfg);
        }
        TrainOptions opt;
        opt.out_dir = dir;
        opt.resume = c.resume;
        opt.stop_after = c.stop_after;
        opt.quiet = c.quiet;
        const TrainResult res = train_loop(cfg, opt);

        nlohmann::ordered_json m;
        m["command"] = "train";
        m["config_path"] = c.config.string();
        m["config_digest"] = hex64(config_digest(cfg));
        m["config"] = config_to_text(cfg);
        auto ov = nlohmann::ordered_json::object();
        for (const auto& [k, v] : overrides) ov[k] = v;
        m["overrides"] = ov;
        m["seed"] = cfg.seed;
        m["variant"] = to_string(cfg.variant);
        m["out_dir"] = dir.string();
        m["resumed_from"] = c.resume ? nlohmann::ordered_json(c.resume->string()) : nlohmann::ordered_json(nullptr);
        m["completed_steps"] = res.state.step;
        m["started_utc"] = started;
        m["finished_utc"] = utc_now();
        m["artifacts"] = artifact_entries(dir, list_artifacts(dir, {"manifest.json"}));
        std::ofstream(dir / "manifest.json", std::ios::binary | std::ios::trunc) << m.dump(2) << "\n";

        out << "trained " << to_string(cfg.variant) << " to step " << res.state.step << " in " << dir.string() << "\n";
        if (!res.metrics.empty())
            out << "final loss " << format_real(res.metrics.back().loss) << " rolling maxvio "
                << format_real(res.final_rolling_maxvio) << "\n";
        if (res.heldout) out << "held-out ppl " << format_real(res.heldout->ppl) << "\n";
        return kExitOk;
    } catch (const CheckpointError& e) {
        err << "error: " << e.what() << "\n";
        return kExitIncompatible;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailed;
    }
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckCommand {
    fs::path config;
    std::optional<std::string> variant;  // all variants when unset
    std::string corrupt_group;           // test fixture
    double tolerance = kGradcheckTolerance;
};

inline int cmd_gradcheck(const GradcheckCommand& c, std::ostream& out, std::ostream& err) {
    ModelConfig base;
    try {
        base = load_config(c.config);
    } catch (const std::exception& e) {
        err << "error: " << c.config.string() << ": " << e.what() << "\n";
        return kExitBadInput;
    }
    std::vector<RoutingVariant> variants;
    if (c.variant) {
        RoutingVariant v;
        if (!parse_variant(*c.variant, v)) {
            err << "error: unknown routing variant '" << *c.variant << "'\n";
            return kExitBadInput;
        }
        variants.push_back(v);
    } else {
        variants.assign(std::begin(kAllVariants), std::end(kAllVariants));
    }

    const auto t0 = std::chrono::steady_clock::now();
    GradcheckOptions opt;
    opt.tolerance = c.tolerance;
    opt.corrupt_group = c.corrupt_group;
    std::vector<GradcheckReport> reports;
    try {
        for (auto v : variants) {
            ModelConfig cfg = base;
            cfg.variant = v;
            cfg.validate();
            reports.push_back(gradcheck_layer(cfg, opt));
            reports.push_back(gradcheck_model(cfg, opt));
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailed;
    }
    for (const auto& r : reports) out << format_gradcheck(r);

    // max per parameter group over everything checked
    std::map<std::string, double> worst;
    bool ok = true;
    for (const auto& r : reports) {
        for (const auto& g : r.groups) {
            if (g.checked == 0) continue;
            worst[g.group] = std::max(worst[g.group], g.max_rel_err);
        }
        ok = ok && r.passed();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out << "summary (max relative error per group, tolerance " << format_real(c.tolerance) << ")\n";
    for (const char* g : {"w_r", "w_gate", "w_up", "w_down", "embedding", "head", "input"})
        if (worst.count(g)) out << "  " << g << " " << format_real(worst[g]) << "\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", secs);
    if (ok) {
        out << "gradcheck: PASS (" << buf << " s)\n";
        return kExitOk;
    }
    err << "gradcheck: FAIL, worst coordinates:\n";
    for (const auto& r : reports)
        for (const auto& g : r.groups)
            if (g.checked && g.max_rel_err > r.tolerance)
                err << "  " << r.scope << " " << to_string(r.variant) << " " << g.worst_name << "[" << g.worst_index
                    << "] analytic=" << format_real(g.worst_analytic) << " numeric=" << format_real(g.worst_numeric)
                    << " rel_err=" << format_real(g.max_rel_err) << "\n";
    return kExitFailed;
}

// ---------------------------------------------------------------------------
// probe

enum class ProbeKind { coupling, geometry, correlation };

inline bool parse_probe_kind(std::string_view s, ProbeKind& out) {
    if (s == "coupling") out = ProbeKind::coupling;
    else if (s == "geometry") out = ProbeKind::geometry;
    else if (s == "correlation") out = ProbeKind::correlation;
    else return false;
    return true;
}

struct ProbeCommand {
    ProbeKind kind = ProbeKind::geometry;
    fs::path config;
    std::optional<fs::path> checkpoint;  // untrained seeded model when unset
    std::string data = "synthetic";      // "synthetic" or a UTF-8 text file
    fs::path out;
    std::vector<std::size_t> layers;  // config's probe layers when empty
    std::size_t tokens = 2048;
    bool include_aux = false;          // coupling: add the aux balance loss
    std::size_t permutations = 10000;  // correlation
};

namespace detail {

/// Held-out batches covering at least `tokens` positions.
inline std::vector<Batch> probe_batches(const ModelConfig& cfg, std::size_t tokens) {
    const DataStream data(cfg);
    std::vector<Batch> out;
    std::size_t have = 0;
    for (std::size_t i = 0; have < tokens; ++i) {
        out.push_back(data.eval_batch(i));
        have += out.back().positions();
    }
    return out;
}

}  // namespace detail

inline int cmd_probe(const ProbeCommand& c, std::ostream& out, std::ostream& err) {
    ModelConfig cfg;
    try {
        cfg = load_config(c.config);
        if (c.data != "synthetic") {
            set_config_value(cfg, "data_source", "text_file");
            set_config_value(cfg, "data_path", c.data);
        }
        if (!c.layers.empty()) cfg.probe_layers = c.layers;
        cfg.validate();
    } catch (const std::exception& e) {
        err << "error: " << c.config.string() << ": " << e.what() << "\n";
        return kExitBadInput;
    }

    ModelState model;
    try {
        model = c.checkpoint ? checkpoint_load(*c.checkpoint, cfg).model : init_model(cfg);
    } catch (const CheckpointError& e) {
        err << "error: " << c.checkpoint->string() << ": " << e.what() << "\n";
        return kExitIncompatible;
    }

    try {
        fs::create_directories(c.out);
        DirLock lock(c.out);
        const auto layers = cfg.resolved_probe_layers();

        if (c.kind == ProbeKind::geometry) {
            for (auto l : layers) {
                const auto r = cosine_matrix(routing_directions(model.layers[l]), int(l));
                write_geometry_csv(c.out / ("geometry_layer" + std::to_string(l) + ".csv"), r);
                out << "layer " << l << " mu " << format_real(r.off_diagonal_mean) << "\n";
            }
            return kExitOk;
        }

        const auto batches = detail::probe_batches(cfg, c.tokens);

        if (c.kind == ProbeKind::coupling) {
            std::vector<Matrix> xs(cfg.layers), ups(cfg.layers);
            for (const auto& b : batches) {
                const auto fr = forward_pass(cfg, model, b);
                ModelGrads g = ModelGrads::zeros_like(model);
                std::vector<Matrix> upstream;
                BackwardOptions bo;
                bo.layer_upstream = &upstream;
                bo.lm_only = true;
                backward_pass(cfg, model, fr, g, bo);
                for (auto l : layers) {
                    const auto& x = fr.layers[l].tape.x;
                    auto append = [&](Matrix& dst, const Matrix& src) {
                        Matrix m(dst.rows() + src.rows(), src.cols());
                        std::copy(dst.flat().begin(), dst.flat().end(), m.flat().begin());
                        std::copy(src.flat().begin(), src.flat().end(), m.flat().begin() + std::ptrdiff_t(dst.size()));
                        dst = std::move(m);
                    };
                    append(xs[l], x);
                    append(ups[l], upstream[l]);
                }
            }
            std::vector<CouplingReport> reports;
            bool ok = true;
            for (auto l : layers) {
                const auto& layer = model.layers[l];
                CouplingOptions co;
                co.include_aux = c.include_aux;
                co.seed = cfg.seed;
                auto r = coupling_probe(layer.router, layer.experts, xs[l], ups[l], cfg.top_k, co,
                                        layer.centroids ? &*layer.centroids : nullptr);
                r.layer = int(l);
                out << "layer " << l << " tokens " << r.tokens;
                if (layer.learned_router()) out << " min_router_abs_cos " << format_real(r.min_router_abs_cos);
                out << " min_w_up_abs_cos " << format_real(r.min_up_abs_cos) << " min_w_gate_abs_cos "
                    << format_real(r.min_gate_abs_cos);
                if (c.include_aux && layer.learned_router())
                    out << " min_aux_abs_cos " << format_real(r.min_aux_abs_cos) << " aux_rows_zero "
                        << r.aux_rows_zero;
                out << " degenerate " << r.degenerate << " unselected_nonzero " << r.unselected_nonzero << "\n";
                ok = ok && r.unselected_nonzero == 0;
                reports.push_back(std::move(r));
            }
            write_coupling_csv(c.out / "coupling.csv", reports);
            double min_cos = 1.0;
            for (const auto& r : reports) min_cos = std::min(min_cos, r.min_abs_cosine());
            out << "min coupling abs cosine " << format_real(min_cos) << "\n";
            return ok ? kExitOk : kExitFailed;
        }

        // correlation
        std::vector<RoutedSample> samples;
        for (const auto& b : batches) {
            const auto fr = forward_pass(cfg, model, b);
            for (auto l : layers) collect_routed_samples(fr.layers[l].tape, int(l), samples);
        }
        CorrelationOptions co;
        co.permutations = c.permutations;
        co.seed = cfg.seed;
        const auto r = correlation_probe(samples, co);
        write_correlation_csv(c.out / "correlation_pairs.csv", r);
        out << "pairs " << r.pair_count() << " groups " << r.group_counts.size() - r.excluded_groups
            << " excluded_groups " << r.excluded_groups << "\n";
        out << "rho " << format_real(r.rho) << " p " << format_real(r.p_value) << "\n";
        if (r.insufficient) out << "insufficient: fewer than " << co.min_pairs << " pairs\n";
        if (r.degenerate) out << "degenerate: no rank variation\n";
        return kExitOk;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailed;
    }
}

// ---------------------------------------------------------------------------
// report

struct ReportCommand {
    std::vector<fs::path> runs;
    fs::path out;
    std::size_t window = 200;
};

struct RunSeries {
    std::string label;
    fs::path dir;
    std::vector<std::size_t> steps;
    std::vector<std::string> ppl, maxvio;  // verbatim cells
    std::vector<double> maxvio_values;
    nlohmann::json summary;  // empty when the run has none
};

inline RunSeries read_run(const fs::path& dir) {
    const fs::path metrics = dir / "metrics.csv";
    if (!fs::exists(metrics)) throw std::invalid_argument("run directory " + dir.string() + " has no metrics.csv");
    RunSeries s;
    s.dir = dir;
    std::ifstream in(metrics);
    std::string line;
    std::getline(in, line);
    if (!line.starts_with("step,loss,ppl,lr,maxvio_mean"))
        throw std::invalid_argument(metrics.string() + " does not have the metrics header");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() < 5) throw std::invalid_argument(metrics.string() + ": short row");
        s.steps.push_back(std::stoull(cells[0]));
        s.ppl.push_back(cells[2]);
        s.maxvio.push_back(cells[4]);
        s.maxvio_values.push_back(std::stod(cells[4]));
    }
    if (fs::exists(dir / "run_summary.json")) s.summary = nlohmann::json::parse(read_file(dir / "run_summary.json"));
    s.label = s.summary.contains("variant") ? s.summary["variant"].get<std::string>() : dir.filename().string();
    return s;
}

/// Trailing mean over the last min(window, i + 1) values at every index.
inline std::vector<double> rolling_mean(std::span<const double> xs, std::size_t window) {
    std::vector<double> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const std::size_t lo = i + 1 > window ? i + 1 - window : 0;
        double s = 0.0;
        for (std::size_t j = lo; j <= i; ++j) s += xs[j];
        out[i] = s / double(i + 1 - lo);
    }
    return out;
}

inline int cmd_report(const ReportCommand& c, std::ostream& out, std::ostream& err) {
    if (c.runs.empty()) {
        err << "error: report needs at least one run directory\n";
        return kExitBadInput;
    }
    if (c.window == 0) {
        err << "error: --window must be >= 1\n";
        return kExitBadInput;
    }
    std::vector<RunSeries> runs;
    try {
        for (const auto& d : c.runs) runs.push_back(read_run(d));
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitBadInput;
    }
    std::map<std::string, int> seen;
    for (const auto& r : runs) ++seen[r.label];
    for (auto& r : runs)
        if (seen[r.label] > 1) r.label += "@" + r.dir.filename().string();

    try {
        fs::create_directories(c.out);
        DirLock lock(c.out);
        std::vector<std::vector<double>> rolling;
        for (const auto& r : runs) rolling.push_back(rolling_mean(r.maxvio_values, c.window));

        // wide table aligned on step; a run missing a step leaves its cells empty
        std::set<std::size_t> steps;
        for (const auto& r : runs) steps.insert(r.steps.begin(), r.steps.end());
        std::ofstream csv(c.out / "comparison.csv", std::ios::binary | std::ios::trunc);
        csv << "step";
        const bool single = runs.size() == 1;
        for (const auto& r : runs) {
            const std::string p = single ? "" : r.label + ":";
            csv << "," << p << "ppl," << p << "maxvio_mean," << p << "maxvio_rolling";
        }
        csv << "\n";
        std::vector<std::size_t> cursor(runs.size(), 0);
        for (auto step : steps) {
            csv << step;
            for (std::size_t k = 0; k < runs.size(); ++k) {
                auto& i = cursor[k];
                const auto& r = runs[k];
                while (i < r.steps.size() && r.steps[i] < step) ++i;
                if (i < r.steps.size() && r.steps[i] == step)
                    csv << "," << r.ppl[i] << "," << r.maxvio[i] << "," << format_real(rolling[k][i]);
                else
                    csv << ",,,";
            }
            csv << "\n";
        }
        csv.close();

        std::ostringstream table;
        char buf[256];
        std::snprintf(buf, sizeof buf, "%-28s %14s %12s %12s %12s %18s\n", "method", "router_params", "final_loss",
                      "final_ppl", "heldout_ppl", "maxvio_rolling");
        table << buf;
        for (std::size_t k = 0; k < runs.size(); ++k) {
            const auto& r = runs[k];
            auto num = [&](const char* key) -> std::string {
                return r.summary.contains(key) && !r.summary[key].is_null() ? format_real(r.summary[key].get<double>())
                                                                           : std::string("-");
            };
            const std::string router = r.summary.contains("router_params")
                                           ? std::to_string(r.summary["router_params"].get<std::size_t>())
                                           : std::string("-");
            const std::string final_ppl = r.ppl.empty() ? "-" : r.ppl.back();
            const std::string mv = rolling[k].empty() ? "-" : format_real(rolling[k].back());
            std::snprintf(buf, sizeof buf, "%-28s %14s %12s %12s %12s %18s\n", r.label.c_str(), router.c_str(),
                          num("final_train_loss").c_str(), final_ppl.c_str(), num("heldout_ppl").c_str(), mv.c_str());
            table << buf;
        }
        table << "maxvio_rolling: trailing mean over the last " << c.window << " steps\n";
        std::ofstream(c.out / "summary.txt", std::ios::binary | std::ios::trunc) << table.str();
        out << table.str();
        return kExitOk;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailed;
    }
}

}  // namespace smoe
