#include "test_support.hpp"

#include <smoe/commands.hpp>

#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <sstream>

using namespace smoe;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out, err;
};

template <class Cmd, class Fn>
Run invoke(Fn fn, const Cmd& c) {
    std::ostringstream o, e;
    Run r;
    r.code = fn(c, o, e);
    r.out = o.str();
    r.err = e.str();
    return r;
}

fs::path write_config(const test::TempDir& dir, const std::string& name, const ModelConfig& cfg) {
    const auto p = dir / name;
    test::spit(p, config_to_text(cfg));
    return p;
}

std::vector<std::string> lines_of(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string c; std::getline(ss, c, ',');) out.push_back(c);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
}

nlohmann::json manifest(const fs::path& dir) { return nlohmann::json::parse(test::slurp(dir / "manifest.json")); }

std::string artifact_digest(const nlohmann::json& m, const std::string& path) {
    for (const auto& a : m["artifacts"])
        if (a["path"] == path) return a["fnv1a64"];
    return "";
}

}  // namespace

TEST_CASE("train on a minimal config", "[cli]") {
    test::TempDir dir("cli_min");
    test::spit(dir / "min.conf", "# smallest useful run\nsteps = 2\nbatch_sequences = 2\nseq_len = 16\n");
    TrainCommand c;
    c.config = dir / "min.conf";
    c.out = dir / "run";
    c.quiet = true;
    const auto r = invoke(cmd_train, c);
    INFO(r.err);
    REQUIRE(r.code == kExitOk);
    const auto metrics = lines_of(test::slurp(dir / "run" / "metrics.csv"));
    REQUIRE(metrics.size() == 3);
    CHECK(metrics[0] == "step,loss,ppl,lr,maxvio_mean,maxvio_l0,maxvio_l1,aux_loss,z_loss,seq_aux_loss");
    CHECK(metrics[1].starts_with("1,"));
    for (const char* f : {"config.resolved", "manifest.json", "checkpoint_final.ckpt", "maxvio.csv",
                          "run_summary.json", "probes/final/geometry_layer0.csv"})
        CHECK(fs::exists(dir / "run" / f));
    CHECK_FALSE(fs::exists(dir / "run" / ".smoe_lab.lock"));

    const auto m = manifest(dir / "run");
    CHECK(m["completed_steps"] == 2);
    for (const auto& a : m["artifacts"]) {
        const std::string rel = a["path"];
        CHECK(a["fnv1a64"] == file_digest(dir / "run" / rel));
        CHECK(a["bytes"] == fs::file_size(dir / "run" / rel));
    }
    CHECK(artifact_digest(m, "metrics.csv") != "");
}

TEST_CASE("unknown config key is rejected with its name and line", "[cli]") {
    test::TempDir dir("cli_bad");
    test::spit(dir / "bad.conf", "steps = 2\n\n# comment\nfoo=1\n");
    TrainCommand c;
    c.config = dir / "bad.conf";
    c.out = dir / "run";
    const auto r = invoke(cmd_train, c);
    CHECK(r.code == kExitBadInput);
    CHECK(r.err.find("foo") != std::string::npos);
    CHECK(r.err.find("line 4") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "run" / "metrics.csv"));

    test::spit(dir / "bad2.conf", "steps = many\n");
    c.config = dir / "bad2.conf";
    const auto r2 = invoke(cmd_train, c);
    CHECK(r2.code == kExitBadInput);
    CHECK(r2.err.find("line 1") != std::string::npos);
}

TEST_CASE("two runs with the same seed record identical metrics digests", "[cli]") {
    test::TempDir dir("cli_twice");
    const auto cfgp = write_config(dir, "small.conf", test::small_config());
    TrainCommand c;
    c.config = cfgp;
    c.quiet = true;
    c.out = dir / "a";
    REQUIRE(invoke(cmd_train, c).code == kExitOk);
    c.out = dir / "b";
    REQUIRE(invoke(cmd_train, c).code == kExitOk);
    const auto ma = manifest(dir / "a"), mb = manifest(dir / "b");
    CHECK(artifact_digest(ma, "metrics.csv") == artifact_digest(mb, "metrics.csv"));
    CHECK(artifact_digest(ma, "checkpoint_final.ckpt") == artifact_digest(mb, "checkpoint_final.ckpt"));
    CHECK(ma["config_digest"] == mb["config_digest"]);
    CHECK(ma["artifacts"] == mb["artifacts"]);

    // rerunning into the same directory overwrites with identical bytes
    c.out = dir / "a";
    const auto before = test::slurp(dir / "a" / "metrics.csv");
    REQUIRE(invoke(cmd_train, c).code == kExitOk);
    CHECK(test::slurp(dir / "a" / "metrics.csv") == before);
}

TEST_CASE("command-line overrides are applied and recorded", "[cli]") {
    test::TempDir dir("cli_over");
    const auto cfgp = write_config(dir, "small.conf", test::small_config());
    TrainCommand c;
    c.config = cfgp;
    c.quiet = true;
    c.out = dir / "run";
    c.seed = 99;
    c.steps = 4;
    c.variant = "kmeans";
    REQUIRE(invoke(cmd_train, c).code == kExitOk);
    const auto m = manifest(dir / "run");
    CHECK(m["seed"] == 99);
    CHECK(m["variant"] == "kmeans");
    CHECK(m["completed_steps"] == 4);
    CHECK(m["overrides"]["seed"] == "99");
    CHECK(m["overrides"]["steps"] == "4");
    CHECK(m["overrides"]["routing_variant"] == "kmeans");
    CHECK(test::slurp(dir / "run" / "config.resolved").find("routing_variant = kmeans") != std::string::npos);

    c.variant = "sigmoid";
    c.out = dir / "run2";
    CHECK(invoke(cmd_train, c).code == kExitBadInput);
}

TEST_CASE("output root from the environment", "[cli]") {
    test::TempDir dir("cli_env");
    const auto cfgp = write_config(dir, "small.conf", test::small_config());
    TrainCommand c;
    c.config = cfgp;
    c.quiet = true;
    ::unsetenv(kOutRootEnv);
    const auto none = invoke(cmd_train, c);
    CHECK(none.code == kExitBadInput);
    CHECK(none.err.find(kOutRootEnv) != std::string::npos);
    ::setenv(kOutRootEnv, (dir / "root").c_str(), 1);
    REQUIRE(invoke(cmd_train, c).code == kExitOk);
    ::unsetenv(kOutRootEnv);
    CHECK(fs::exists(dir / "root" / "small-loss_free-seed11" / "metrics.csv"));
}

TEST_CASE("a locked output directory is refused", "[cli]") {
    test::TempDir dir("cli_lock");
    const auto cfgp = write_config(dir, "small.conf", test::small_config());
    fs::create_directories(dir / "run");
    test::spit(dir / "run" / ".smoe_lab.lock", "");
    TrainCommand c;
    c.config = cfgp;
    c.quiet = true;
    c.out = dir / "run";
    const auto r = invoke(cmd_train, c);
    CHECK(r.code == kExitFailed);
    CHECK(r.err.find("locked") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "run" / "metrics.csv"));
}

TEST_CASE("resume through the command", "[cli]") {
    test::TempDir dir("cli_resume");
    auto cfg = test::small_config();
    cfg.checkpoint_every = 4;
    const auto cfgp = write_config(dir, "small.conf", cfg);
    TrainCommand c;
    c.config = cfgp;
    c.quiet = true;
    c.out = dir / "full";
    REQUIRE(invoke(cmd_train, c).code == kExitOk);
    c.out = dir / "part";
    c.stop_after = 8;
    REQUIRE(invoke(cmd_train, c).code == kExitOk);
    c.stop_after = 0;
    c.resume = dir / "part" / "checkpoints" / "step_8.ckpt";
    REQUIRE(invoke(cmd_train, c).code == kExitOk);
    CHECK(test::slurp(dir / "full" / "metrics.csv") == test::slurp(dir / "part" / "metrics.csv"));
    CHECK(manifest(dir / "part")["resumed_from"] == c.resume->string());

    auto other = cfg;
    other.hidden = 8;
    TrainCommand bad = c;
    bad.config = write_config(dir, "other.conf", other);
    bad.out = dir / "bad";
    const auto r = invoke(cmd_train, bad);
    CHECK(r.code == kExitIncompatible);
    CHECK(r.err.find("digest") != std::string::npos);
}

TEST_CASE("gradcheck on the tiny config", "[cli]") {
    GradcheckCommand c;
    c.config = fs::path(SMOE_SOURCE_DIR) / "configs" / "gradcheck_tiny.conf";
    const auto r = invoke(cmd_gradcheck, c);
    INFO(r.out << r.err);
    CHECK(r.code == kExitOk);
    for (const char* g : {"w_r", "w_gate", "w_up", "w_down", "embedding", "head"})
        CHECK(r.out.find(std::string("\n  ") + g + " ") != std::string::npos);
    CHECK(r.out.find("gradcheck: PASS") != std::string::npos);
}

TEST_CASE("gradcheck fails on a corrupted backward", "[cli]") {
    GradcheckCommand c;
    c.config = fs::path(SMOE_SOURCE_DIR) / "configs" / "gradcheck_tiny.conf";
    c.variant = "loss_free";
    c.corrupt_group = "w_down";
    const auto r = invoke(cmd_gradcheck, c);
    CHECK(r.code == kExitFailed);
    CHECK(r.err.find("worst coordinates") != std::string::npos);
    CHECK(r.err.find("w_down[") != std::string::npos);
    c.variant = "sigmoid";
    c.corrupt_group.clear();
    CHECK(invoke(cmd_gradcheck, c).code == kExitBadInput);
}

TEST_CASE("probe geometry on an untrained model", "[cli]") {
    test::TempDir dir("cli_geo");
    auto cfg = test::small_config();
    cfg.layers = 3;
    const auto cfgp = write_config(dir, "c.conf", cfg);
    ProbeCommand p;
    p.kind = ProbeKind::geometry;
    p.config = cfgp;
    p.out = dir / "geo";
    const auto r = invoke(cmd_probe, p);
    REQUIRE(r.code == kExitOk);
    for (int l = 0; l < 3; ++l) {
        const auto rows = lines_of(test::slurp(dir / "geo" / ("geometry_layer" + std::to_string(l) + ".csv")));
        REQUIRE(rows.size() == 1 + cfg.experts);
        CHECK(rows[0].starts_with("mu,"));
        for (std::size_t i = 0; i < cfg.experts; ++i)
            for (std::size_t j = 0; j < cfg.experts; ++j)
                CHECK(std::abs(std::stod(split(rows[1 + i])[j]) - std::stod(split(rows[1 + j])[i])) <= 1e-6);
        CHECK(r.out.find("layer " + std::to_string(l) + " mu ") != std::string::npos);
    }
    p.layers = {1};
    p.out = dir / "geo1";
    REQUIRE(invoke(cmd_probe, p).code == kExitOk);
    CHECK(fs::exists(dir / "geo1" / "geometry_layer1.csv"));
    CHECK_FALSE(fs::exists(dir / "geo1" / "geometry_layer0.csv"));
}

TEST_CASE("probe coupling reports no unselected gradient", "[cli]") {
    test::TempDir dir("cli_coup");
    const auto cfg = test::small_config();
    const auto cfgp = write_config(dir, "c.conf", cfg);
    TrainCommand t;
    t.config = cfgp;
    t.quiet = true;
    t.out = dir / "run";
    REQUIRE(invoke(cmd_train, t).code == kExitOk);
    ProbeCommand p;
    p.kind = ProbeKind::coupling;
    p.config = cfgp;
    p.checkpoint = dir / "run" / "checkpoint_final.ckpt";
    p.out = dir / "coup";
    p.tokens = 256;
    const auto r = invoke(cmd_probe, p);
    INFO(r.out << r.err);
    CHECK(r.code == kExitOk);
    CHECK(r.out.find("unselected_nonzero 0") != std::string::npos);
    CHECK(r.out.find("unselected_nonzero 1") == std::string::npos);
    const auto rows = lines_of(test::slurp(dir / "coup" / "coupling.csv"));
    CHECK(rows[0] == "layer,kind,token,expert,row,abs_cosine");
    CHECK(rows.size() > 256);

    const auto first = test::slurp(dir / "coup" / "coupling.csv");
    REQUIRE(invoke(cmd_probe, p).code == kExitOk);
    CHECK(test::slurp(dir / "coup" / "coupling.csv") == first);

    auto other = cfg;
    other.experts = 8;
    p.config = write_config(dir, "other.conf", other);
    const auto bad = invoke(cmd_probe, p);
    CHECK(bad.code == kExitIncompatible);
    CHECK(bad.err.find("digest") != std::string::npos);
}

TEST_CASE("probe correlation flags an insufficient sample", "[cli]") {
    test::TempDir dir("cli_corr");
    const auto cfgp = write_config(dir, "tiny.conf", test::tiny_config());
    ProbeCommand p;
    p.kind = ProbeKind::correlation;
    p.config = cfgp;
    p.out = dir / "corr";
    p.tokens = 16;
    p.permutations = 50;
    const auto r = invoke(cmd_probe, p);
    CHECK(r.code == kExitOk);
    CHECK(r.out.find("insufficient") != std::string::npos);
    CHECK(fs::exists(dir / "corr" / "correlation_pairs.csv"));
}

TEST_CASE("probe reads a text file through --data", "[cli]") {
    test::TempDir dir("cli_text");
    std::string text;
    for (int k = 0; k < 400; ++k) text += "the quick brown fox jumps over the lazy dog " + std::to_string(k) + "\n";
    test::spit(dir / "corpus.txt", text);
    auto cfg = test::small_config();
    cfg.vocab = 256;
    const auto cfgp = write_config(dir, "c.conf", cfg);
    ProbeCommand p;
    p.kind = ProbeKind::correlation;
    p.config = cfgp;
    p.data = (dir / "corpus.txt").string();
    p.out = dir / "corr";
    p.tokens = 512;
    p.permutations = 50;
    const auto r = invoke(cmd_probe, p);
    INFO(r.err);
    CHECK(r.code == kExitOk);
    CHECK(r.out.find("pairs ") != std::string::npos);
    p.data = (dir / "missing.txt").string();
    p.out = dir / "corr2";
    CHECK(invoke(cmd_probe, p).code != kExitOk);
}

TEST_CASE("report on a single run projects its metrics", "[cli]") {
    test::TempDir dir("cli_rep1");
    const auto cfgp = write_config(dir, "c.conf", test::small_config());
    TrainCommand t;
    t.config = cfgp;
    t.quiet = true;
    t.out = dir / "run";
    REQUIRE(invoke(cmd_train, t).code == kExitOk);
    ReportCommand c;
    c.runs = {dir / "run"};
    c.out = dir / "rep";
    c.window = 1;
    const auto r = invoke(cmd_report, c);
    REQUIRE(r.code == kExitOk);
    const auto metrics = lines_of(test::slurp(dir / "run" / "metrics.csv"));
    const auto cmp = lines_of(test::slurp(dir / "rep" / "comparison.csv"));
    REQUIRE(cmp.size() == metrics.size());
    CHECK(cmp[0] == "step,ppl,maxvio_mean,maxvio_rolling");
    for (std::size_t k = 1; k < cmp.size(); ++k) {
        const auto m = split(metrics[k]), c2 = split(cmp[k]);
        CHECK(c2[0] == m[0]);
        CHECK(c2[1] == m[2]);
        CHECK(c2[2] == m[4]);
        CHECK(std::stod(c2[3]) == std::stod(m[4]));
    }
    CHECK(fs::exists(dir / "rep" / "summary.txt"));
}

TEST_CASE("report rolling window and multi-run summary", "[cli]") {
    test::TempDir dir("cli_rep4");
    std::vector<fs::path> runs;
    for (auto v : {RoutingVariant::none, RoutingVariant::aux_loss, RoutingVariant::loss_free, RoutingVariant::kmeans}) {
        auto cfg = test::small_config(v);
        cfg.steps = 8;
        const auto cfgp = write_config(dir, std::string(to_string(v)) + ".conf", cfg);
        TrainCommand t;
        t.config = cfgp;
        t.quiet = true;
        t.out = dir / to_string(v);
        REQUIRE(invoke(cmd_train, t).code == kExitOk);
        runs.push_back(*t.out);
    }
    ReportCommand c;
    c.runs = runs;
    c.out = dir / "rep";
    c.window = 3;
    const auto r = invoke(cmd_report, c);
    REQUIRE(r.code == kExitOk);
    const auto summary = lines_of(test::slurp(dir / "rep" / "summary.txt"));
    for (const char* v : {"none", "aux_loss", "loss_free", "kmeans"}) {
        std::size_t rows = 0;
        for (const auto& l : summary) rows += l.starts_with(std::string(v) + " ");
        CHECK(rows == 1);
    }
    const auto cmp = lines_of(test::slurp(dir / "rep" / "comparison.csv"));
    REQUIRE(cmp.size() == 9);
    CHECK(cmp[0].find("kmeans:maxvio_rolling") != std::string::npos);
    // trailing mean over 3 steps for the loss_free columns
    const auto mv = [&](std::size_t k) { return std::stod(split(cmp[k])[3 * 2 + 2]); };
    const auto roll = std::stod(split(cmp[5])[3 * 2 + 3]);
    CHECK(std::abs(roll - (mv(3) + mv(4) + mv(5)) / 3.0) <= 1e-8);
    CHECK(std::abs(std::stod(split(cmp[1])[3 * 2 + 3]) - mv(1)) <= 1e-8);

    c.runs.push_back(dir / "nothing");
    const auto bad = invoke(cmd_report, c);
    CHECK(bad.code == kExitBadInput);
    CHECK(bad.err.find("nothing") != std::string::npos);
}

TEST_CASE("command-line binary exit codes", "[cli]") {
    test::TempDir dir("cli_bin");
    const std::string bin = SMOE_LAB_BIN;
    auto run = [&](const std::string& args) {
        const int s = std::system((bin + " " + args + " >" + (dir / "o.txt").string() + " 2>&1").c_str());
        return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
    };
    test::spit(dir / "bad.conf", "foo = 1\n");
    CHECK(run("train " + (dir / "bad.conf").string() + " --out " + (dir / "x").string()) == kExitBadInput);
    CHECK(test::slurp(dir / "o.txt").find("foo") != std::string::npos);
    CHECK(run("gradcheck " + (fs::path(SMOE_SOURCE_DIR) / "configs" / "gradcheck_tiny.conf").string() +
              " --variant kmeans") == kExitOk);
    CHECK(run("gradcheck " + (fs::path(SMOE_SOURCE_DIR) / "configs" / "gradcheck_tiny.conf").string() +
              " --variant aux_loss --corrupt w_r") == kExitFailed);
    CHECK(run("probe nonsense --config " + (dir / "bad.conf").string() + " --out " + (dir / "p").string()) != 0);
    CHECK(run("") != 0);
}
