// Acceptance checks. Prints one PASS/FAIL line per criterion; exit status
// is 0 only if every criterion passes.
//
//   smoe_acceptance [--work DIR] [--only 1,4,6]
//
// The desk-scale training runs are written under DIR and reused on later
// invocations when their manifest records the same resolved config.

#include <smoe/commands.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>

using namespace smoe;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

fs::path source_path(const std::string& rel) { return fs::path(SMOE_SOURCE_DIR) / rel; }

// ---------------------------------------------------------------------------

Outcome gradients() {
    GradcheckCommand c;
    c.config = source_path("configs/gradcheck_tiny.conf");
    std::ostringstream out, err;
    const auto t0 = std::chrono::steady_clock::now();
    const int code = cmd_gradcheck(c, out, err);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const ModelConfig base = load_config(c.config);
    double worst = 0.0;
    std::set<std::string> groups;
    for (auto v : kAllVariants) {
        ModelConfig cfg = base;
        cfg.variant = v;
        for (const auto& r : {gradcheck_layer(cfg), gradcheck_model(cfg)}) {
            worst = std::max(worst, r.max_rel_err());
            for (const auto& g : r.groups)
                if (g.checked) groups.insert(g.group);
        }
    }
    const bool all_groups = groups.count("w_r") && groups.count("w_gate") && groups.count("w_up") &&
                            groups.count("w_down") && groups.count("embedding") && groups.count("head");
    return {code == kExitOk && worst <= 2e-3 && all_groups && secs < 120.0,
            fmt("max rel err %.3g over %zu groups x 5 variants, exit %d, %.1f s", worst, groups.size(), code, secs)};
}

struct SeededLayer {
    ModelConfig cfg;
    ModelState model;
    Matrix x, upstream;
};

SeededLayer seeded_layer(std::size_t tokens) {
    SeededLayer s;
    s.cfg = load_config(source_path("configs/desk.conf"));
    s.model = init_model(s.cfg);
    Rng rng = Rng(s.cfg.seed).split("acceptance/tokens");
    s.x = random_normal(rng, tokens, s.cfg.hidden, 1.0);
    s.upstream = random_normal(rng, tokens, s.cfg.hidden, 1.0);
    return s;
}

Outcome coupling() {
    const auto s = seeded_layer(256);
    const auto& layer = s.model.layers[0];
    const auto r = coupling_probe(layer.router, layer.experts, s.x, s.upstream, s.cfg.top_k);
    std::size_t router = 0, rows = 0;
    for (const auto& m : r.measurements) (m.kind == CouplingKind::router ? router : rows)++;
    const double tol = 1.0 - 1e-5;
    const bool ok = r.tokens >= 256 && router > 0 && rows > 0 && r.min_router_abs_cos >= tol &&
                    r.min_up_abs_cos >= tol && r.min_gate_abs_cos >= tol && r.unselected_nonzero == 0;
    return {ok, fmt("%zu tokens, min |cos| router %.9f w_up %.9f w_gate %.9f, %zu measurements, "
                    "%zu degenerate, unselected nonzero %zu",
                    r.tokens, r.min_router_abs_cos, r.min_up_abs_cos, r.min_gate_abs_cos, r.measurements.size(),
                    r.degenerate, r.unselected_nonzero)};
}

Outcome interference() {
    const auto s = seeded_layer(256);
    const auto& layer = s.model.layers[0];
    CouplingOptions opt;
    opt.include_aux = true;
    const auto r = coupling_probe(layer.router, layer.experts, s.x, s.upstream, s.cfg.top_k, opt);
    std::size_t aux = 0;
    for (const auto& m : r.measurements) aux += m.kind == CouplingKind::aux_router;
    const bool ok = r.tokens >= 256 && r.aux_rows_zero == 0 && aux == r.tokens * s.cfg.experts &&
                    r.min_aux_abs_cos >= 1.0 - 1e-5;
    return {ok, fmt("%zu tokens, %zu/%zu router rows with zero accumulated aux gradient, %zu per-token "
                    "contributions, min |cos| %.9f",
                    r.tokens, r.aux_rows_zero, s.cfg.experts, aux, r.min_aux_abs_cos)};
}

// ---------------------------------------------------------------------------
// desk-scale runs

struct DeskRun {
    RoutingVariant variant;
    fs::path dir;
    ModelConfig cfg;
    double seconds = 0.0;
    bool reused = false;
    nlohmann::json summary;
};

std::string read_text(const fs::path& p) { return read_file(p); }

DeskRun desk_run(const fs::path& work, RoutingVariant v) {
    DeskRun r;
    r.variant = v;
    r.dir = work / (std::string("desk-") + to_string(v));
    TrainCommand c;
    c.config = source_path("configs/desk.conf");
    c.variant = to_string(v);
    c.out = r.dir;
    c.quiet = true;
    r.cfg = load_with_overrides(c.config, train_overrides(c));

    const fs::path manifest = r.dir / "manifest.json", timing = r.dir / "train_seconds.txt";
    if (fs::exists(manifest) && fs::exists(timing) && fs::exists(r.dir / "run_summary.json")) {
        const auto m = nlohmann::json::parse(read_text(manifest));
        if (m.value("config", "") == config_to_text(r.cfg) && m.value("completed_steps", 0u) == r.cfg.steps &&
            m["resumed_from"].is_null()) {
            r.reused = true;
            r.seconds = std::stod(read_text(timing));
        }
    }
    if (!r.reused) {
        fs::remove_all(r.dir);
        std::cerr << "training " << to_string(v) << " for " << r.cfg.steps << " steps in " << r.dir << "\n";
        std::ostringstream out, err;
        const auto t0 = std::chrono::steady_clock::now();
        const int code = cmd_train(c, out, err);
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (code != kExitOk) throw std::runtime_error("training " + std::string(to_string(v)) + " failed: " + err.str());
        std::ofstream(timing) << fmt("%.3f", r.seconds) << "\n";
    }
    r.summary = nlohmann::json::parse(read_text(r.dir / "run_summary.json"));
    return r;
}

ModelState trained_model(const DeskRun& r) { return checkpoint_load(r.dir / "checkpoint_final.ckpt", r.cfg).model; }

std::vector<double> losses(const DeskRun& r) {
    std::vector<double> out;
    std::istringstream in(read_text(r.dir / "metrics.csv"));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) out.push_back(std::stod(line.substr(line.find(',') + 1)));
    return out;
}

Outcome geometry(const DeskRun& aux, const DeskRun& lf) {
    const auto ga = geometry_reports(aux.cfg, trained_model(aux));
    const auto gl = geometry_reports(lf.cfg, trained_model(lf));
    std::string d;
    std::size_t wins = 0;
    for (std::size_t l = 0; l < aux.cfg.layers; ++l) {
        const double a = ga[l].off_diagonal_mean, b = gl[l].off_diagonal_mean;
        wins += a > b;
        d += fmt("layer %zu mu aux %.4f vs loss_free %.4f; ", l, a, b);
    }
    const bool fast = aux.seconds < 1800.0 && lf.seconds < 1800.0;
    d += fmt("train time %.0f s / %.0f s", aux.seconds, lf.seconds);
    return {wins == aux.cfg.layers && aux.cfg.layers == 2 && fast, d};
}

Outcome correlation(const DeskRun& lf) {
    const auto model = trained_model(lf);
    std::vector<RoutedSample> samples;
    for (const auto& b : detail::probe_batches(lf.cfg, 4096)) {
        const auto fr = forward_pass(lf.cfg, model, b);
        for (std::size_t l = 0; l < lf.cfg.layers; ++l) collect_routed_samples(fr.layers[l].tape, int(l), samples);
    }
    CorrelationOptions opt;
    opt.seed = lf.cfg.seed;
    const auto r = correlation_probe(samples, opt);
    return {r.pair_count() >= 5000 && r.rho > 0.0 && r.p_value < 0.01 && !r.degenerate,
            fmt("%zu pairs, rho %.4f, permutation p %.3g (%zu permutations)", r.pair_count(), r.rho, r.p_value,
                opt.permutations)};
}

Outcome load_balance(const DeskRun& none, const DeskRun& aux, const DeskRun& lf, const DeskRun& km) {
    auto mv = [](const DeskRun& r) { return r.summary["final_rolling_maxvio"].get<double>(); };
    const double m_none = mv(none), m_aux = mv(aux), m_lf = mv(lf), m_km = mv(km);
    const auto l = losses(km);
    bool finite = !l.empty();
    for (double v : l) finite = finite && std::isfinite(v);
    double head = 0.0, tail = 0.0;
    const std::size_t w = std::min<std::size_t>(200, l.size());
    for (std::size_t k = 0; k < w; ++k) {
        head += l[k] / double(w);
        tail += l[l.size() - w + k] / double(w);
    }
    const std::size_t router_params = km.summary["router_params"].get<std::size_t>();
    const bool a = m_lf * 2.0 <= m_none;
    const bool b = finite && tail < head && router_params == 0 && m_km <= m_lf;
    const bool c = m_aux > m_lf;
    return {a && b && c,
            fmt("rolling MaxVio none %.4f, aux_loss %.4f, loss_free %.4f, kmeans %.4f; "
                "(a) %s (b) %s [kmeans loss %.3f -> %.3f, router params %zu] (c) %s",
                m_none, m_aux, m_lf, m_km, a ? "ok" : "FAILED", b ? "ok" : "FAILED", head, tail, router_params,
                c ? "ok" : "FAILED")};
}

// ---------------------------------------------------------------------------

Outcome ema_oracle() {
    Rng rng(2024);
    const std::size_t n = 4, d = 16;
    const double alpha = 0.99;
    CentroidState st = centroid_init(rng, n, d, alpha, 1e-3);
    std::vector<std::vector<double>> c0(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) c0[i][j] = st.centroids(i, j);
    std::vector<std::vector<std::vector<double>>> means(n);
    for (int step = 0; step < 100; ++step) {
        const Matrix x = random_normal(rng, 12, d, 2.0);
        Assignments a(n);
        for (std::uint32_t t = 0; t < 12; ++t) a[t % n].push_back(t);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> m(d, 0.0);
            for (auto t : a[i])
                for (std::size_t j = 0; j < d; ++j) m[j] += double(x(t, j));
            for (auto& v : m) v /= double(a[i].size());
            means[i].push_back(std::move(m));
        }
        st = centroid_update(std::move(st), x, a);
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double v = std::pow(alpha, 100.0) * c0[i][j];
            for (int s = 1; s <= 100; ++s) v += (1.0 - alpha) * std::pow(alpha, 100.0 - s) * means[i][s - 1][j];
            worst = std::max(worst, std::abs(double(st.centroids(i, j)) - v));
        }

    bool unchanged = true;
    for (int step = 0; step < 20; ++step) {
        const Matrix before = st.centroids;
        st = centroid_update(std::move(st), random_normal(rng, 5, d, 1.0), Assignments(n));
        unchanged = unchanged && st.centroids == before;
    }
    return {worst <= 1e-6 && unchanged,
            fmt("max closed-form deviation %.3g after 100 steps; empty steps bitwise unchanged: %s", worst,
                unchanged ? "yes" : "no")};
}

Outcome metric_suite() {
    std::vector<std::string> failed;
    std::size_t checked = 0;
    auto check = [&](bool ok, const char* what) {
        ++checked;
        if (!ok) failed.push_back(what);
    };
    auto stats = [](std::vector<double> f) {
        LoadStats s;
        s.target = 1.0 / double(f.size());
        s.fractions = std::move(f);
        return s;
    };
    check(maxvio(stats({0.25, 0.25, 0.25, 0.25})) == 0.0, "maxvio uniform");
    check(std::abs(maxvio(stats({0.5, 0.3, 0.2})) - 0.5) <= 1e-12, "maxvio (0.5,0.3,0.2)");
    check(maxvio(stats({1, 0, 0, 0, 0, 0, 0, 0})) == 7.0, "maxvio one expert");

    check(aux_balance_loss(stats({0.5, 0.5}), Matrix(4, 2)).loss == 1.0, "aux uniform");
    check(aux_balance_loss(stats({1.0, 0.0}), Matrix(1, 2, {100, -100})).loss == 2.0, "aux collapsed");

    std::vector<double> f(64, 0.98 / 63.0);
    f[0] = 0.02;
    check(bias_update(Vector(64, 0.0f), stats(f), 1e-3)[0] == -0.001f, "bias overloaded");
    check(bias_update(Vector{0.5f, 0.5f}, stats({0.5, 0.5}), 1e-3) == Vector{0.5f, 0.5f}, "bias at target");
    check(bias_update(Vector{0, 0}, stats({1.0, 0.0}), 1e-3)[1] == 0.001f, "bias starved");

    const std::vector<std::uint32_t> s12{1, 2}, s1{1}, s02{0, 2};
    const auto p = masked_softmax(Vector{1, 2, 3}, s12);
    check(p[0] == 0.0f && std::abs(p[1] - 0.268941) <= 1e-6 && std::abs(p[2] - 0.731059) <= 1e-6,
          "masked_softmax (1,2,3)");
    check(masked_softmax(Vector{3, -2, 8}, s1) == Vector{0, 1, 0}, "masked_softmax single");
    check(masked_softmax(Vector{0.7f, 4, 0.7f}, s02) == Vector{0.5f, 0, 0.5f}, "masked_softmax equal");

    const auto id = cosine_matrix(Matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
    check(id.off_diagonal_mean == 0.0 && id.cosines[0][0] == 1.0 && id.cosines[0][1] == 0.0, "cosine identity");
    const auto eq = cosine_matrix(Matrix(2, 3, {1, 2, 3, 1, 2, 3}));
    check(std::abs(eq.off_diagonal_mean - 1.0) <= 1e-12, "cosine equal rows");
    check(std::abs(cosine_matrix(Matrix(2, 2, {1, 0, 1, 1})).off_diagonal_mean - 0.70711) <= 1e-5,
          "cosine (1,0),(1,1)");

    std::string d = std::to_string(checked) + " examples";
    for (const auto& s : failed) d += "; failed: " + s;
    return {failed.empty(), d};
}

Outcome persistence(const fs::path& work) {
    ModelConfig cfg = load_config(source_path("configs/desk.conf"));
    cfg.steps = 40;
    cfg.batch_sequences = 4;
    cfg.checkpoint_every = 20;
    const fs::path a = work / "persist-a", b = work / "persist-b", c = work / "persist-c";
    for (const auto& p : {a, b, c}) fs::remove_all(p);
    TrainOptions oa, ob, oc;
    oa.out_dir = a;
    ob.out_dir = b;
    oc.out_dir = c;
    const auto ra = train_loop(cfg, oa);
    train_loop(cfg, ob);
    const bool same_metrics = read_file(a / "metrics.csv") == read_file(b / "metrics.csv");

    checkpoint_save(ra.state, cfg, work / "roundtrip.ckpt");
    const auto back = checkpoint_load(work / "roundtrip.ckpt", cfg);
    checkpoint_save(back, cfg, work / "roundtrip2.ckpt");
    const bool roundtrip = read_file(work / "roundtrip.ckpt") == read_file(work / "roundtrip2.ckpt") &&
                           encode_checkpoint(back, config_digest(cfg)) ==
                               encode_checkpoint(ra.state, config_digest(cfg));

    oc.stop_after = 20;
    train_loop(cfg, oc);
    oc.stop_after = 0;
    oc.resume = c / "checkpoints" / "step_20.ckpt";
    train_loop(cfg, oc);
    const bool resumed = read_file(a / "metrics.csv") == read_file(c / "metrics.csv") &&
                         read_file(a / "checkpoint_final.ckpt") == read_file(c / "checkpoint_final.ckpt");
    return {same_metrics && roundtrip && resumed,
            fmt("identical metrics.csv: %s; checkpoint roundtrip bitwise: %s; resume at step 20 of 40 bitwise: %s",
                same_metrics ? "yes" : "no", roundtrip ? "yes" : "no", resumed ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
    fs::path work = fs::temp_directory_path() / "smoe_acceptance";
    std::set<int> only;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--work" && i + 1 < argc) {
            work = argv[++i];
        } else if (a == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            for (std::string t; std::getline(ss, t, ',');) only.insert(std::stoi(t));
        } else {
            std::cerr << "usage: smoe_acceptance [--work DIR] [--only 1,2,...]\n";
            return 2;
        }
    }
    fs::create_directories(work);
    auto wanted = [&](int k) { return only.empty() || only.count(k); };

    int failures = 0;
    auto report = [&](int k, const char* name, const std::function<Outcome()>& fn) {
        if (!wanted(k)) return;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << k << " " << name << ": " << o.detail << std::endl;
    };

    report(1, "gradient correctness", gradients);
    report(2, "coupling collinearity", coupling);
    report(3, "interference gradients", interference);

    if (wanted(4) || wanted(5) || wanted(6)) {
        std::map<RoutingVariant, DeskRun> runs;
        std::string error;
        try {
            for (auto v : {RoutingVariant::loss_free, RoutingVariant::aux_loss, RoutingVariant::none,
                           RoutingVariant::kmeans})
                runs.emplace(v, desk_run(work, v));
        } catch (const std::exception& e) {
            error = e.what();
        }
        auto need_runs = [&](auto fn) {
            return [&, fn]() -> Outcome {
                if (!error.empty()) return {false, "training failed: " + error};
                return fn();
            };
        };
        using V = RoutingVariant;
        report(4, "router geometry, aux vs loss-free", need_runs([&] { return geometry(runs.at(V::aux_loss), runs.at(V::loss_free)); }));
        report(5, "score/activation correlation", need_runs([&] { return correlation(runs.at(V::loss_free)); }));
        report(6, "load balance ordering", need_runs([&] {
                   return load_balance(runs.at(V::none), runs.at(V::aux_loss), runs.at(V::loss_free), runs.at(V::kmeans));
               }));
    }

    report(7, "centroid EMA oracle", ema_oracle);
    report(8, "metric unit suite", metric_suite);
    report(9, "determinism and persistence", [&] { return persistence(work); });

    std::cout << (failures ? "acceptance: " + std::to_string(failures) + (failures == 1 ? " criterion failed" : " criteria failed") : std::string("acceptance: all criteria passed"))
              << std::endl;
    return failures ? 1 : 0;
}
