// smoe_lab: train | gradcheck | probe <kind> | report

#include <smoe/commands.hpp>

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    using namespace smoe;
    CLI::App app{"Sparse mixture-of-experts routing lab"};
    app.require_subcommand(1);

    TrainCommand train;
    std::string resume;
    auto* t = app.add_subcommand("train", "train one model and write metrics, checkpoints and a manifest");
    t->add_option("config", train.config, "config file")->required()->check(CLI::ExistingFile);
    t->add_option("--out", train.out, std::string("output directory (default: $") + kOutRootEnv + "/<name>)");
    t->add_option("--seed", train.seed, "override the seed key");
    t->add_option("--steps", train.steps, "override the steps key");
    t->add_option("--variant", train.variant, "override routing_variant");
    t->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);
    t->add_option("--stop-after", train.stop_after, "stop once this many steps are complete");
    t->add_flag("--quiet", train.quiet, "no progress lines");

    GradcheckCommand gc;
    auto* g = app.add_subcommand("gradcheck", "finite-difference check of all analytic gradients");
    g->add_option("config", gc.config, "config file")->required()->check(CLI::ExistingFile);
    g->add_option("--variant", gc.variant, "check only this routing variant");
    g->add_option("--tolerance", gc.tolerance, "maximum relative error");
    g->add_option("--corrupt", gc.corrupt_group, "scale one group's analytic gradient (negative control)")
        ->group("");

    ProbeCommand probe;
    std::string kind, checkpoint;
    auto* p = app.add_subcommand("probe", "run a probe on a checkpoint");
    p->add_option("kind", kind, "coupling | geometry | correlation")
        ->required()
        ->check(CLI::IsMember({"coupling", "geometry", "correlation"}));
    p->add_option("--config", probe.config, "config the checkpoint was trained with")
        ->required()
        ->check(CLI::ExistingFile);
    p->add_option("--checkpoint", checkpoint, "checkpoint file (default: untrained seeded model)")
        ->check(CLI::ExistingFile);
    p->add_option("--data", probe.data, "'synthetic' or a UTF-8 text file");
    p->add_option("--out", probe.out, "output directory")->required();
    p->add_option("--layers", probe.layers, "layer indices (default: first, middle, last)")->delimiter(',');
    p->add_option("--tokens", probe.tokens, "minimum number of probed token positions");
    p->add_option("--permutations", probe.permutations, "permutations for the correlation p-value");
    p->add_flag("--aux", probe.include_aux, "coupling: include the aux balance loss contributions");

    ReportCommand report;
    auto* r = app.add_subcommand("report", "compare runs");
    r->add_option("runs", report.runs, "run directories")->required();
    r->add_option("--out", report.out, "output directory")->required();
    r->add_option("--window", report.window, "rolling-mean window for MaxVio");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*t) {
            if (!resume.empty()) train.resume = resume;
            return cmd_train(train, std::cout, std::cerr);
        }
        if (*g) return cmd_gradcheck(gc, std::cout, std::cerr);
        if (*p) {
            parse_probe_kind(kind, probe.kind);
            if (!checkpoint.empty()) probe.checkpoint = checkpoint;
            return cmd_probe(probe, std::cout, std::cerr);
        }
        return cmd_report(report, std::cout, std::cerr);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailed;
    }
}
