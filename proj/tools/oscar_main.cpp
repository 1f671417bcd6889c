#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "oscar/cli/cli.hpp"

using namespace oscar;

namespace {

// Standalone metric evaluation over two image directories, no run manifest.
int evaluate_direct(const std::string& pred, const std::string& ref,
                    const std::string& teacher, const std::string& out_path, bool strict) {
    try {
        MetricReport report = evaluate_run(pred, ref, teacher, strict);
        write_json(out_path, report.to_json());
        std::cout << report.table();
        std::cout << "report written to " << out_path << "\n";
        return 0;
    } catch (const ArtifactError& e) {
        std::cerr << "artifact error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"oscar: SAR-to-optical translation pipeline (synthetic desk scale)"};
    app.require_subcommand(1);

    std::string config_path, input_dir, pred, ref, teacher, out = "report.json";
    bool strict = false;

    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "experiment config JSON")->required();
    };
    add_config(app.add_subcommand("synth", "generate the paired SAR/optical dataset"));
    add_config(app.add_subcommand("train-teacher", "fine-tune the optical teacher encoder"));
    add_config(app.add_subcommand("distill", "distill the SAR student from the teacher"));
    CLI::App* tr = app.add_subcommand("train-translator",
                                      "train the guided diffusion translator");
    add_config(tr);
    CLI::App* tl = app.add_subcommand("translate", "run DDIM translation on the test split");
    add_config(tl);
    tl->add_option("--input", input_dir, "dataset directory (default: the run's dataset)");

    CLI::App* ev = app.add_subcommand("evaluate", "score translated images against references");
    ev->add_option("--config", config_path, "experiment config JSON (run mode)");
    ev->add_option("--pred", pred, "predicted image directory (direct mode)");
    ev->add_option("--ref", ref, "reference image directory (direct mode)");
    ev->add_option("--teacher", teacher, "teacher checkpoint directory (direct mode)");
    ev->add_option("--out", out, "report output path (direct mode)");
    ev->add_flag("--strict", strict, "fail on unmatched files");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    if (command == "evaluate" && !pred.empty()) {
        if (ref.empty() || teacher.empty()) {
            std::cerr << "error: direct evaluate needs --pred, --ref and --teacher\n";
            return 2;
        }
        return evaluate_direct(pred, ref, teacher, out, strict);
    }
    if (config_path.empty()) {
        std::cerr << "error: --config is required (or --pred/--ref/--teacher for direct "
                     "evaluate)\n";
        return 2;
    }

    ExperimentConfig cfg;
    try {
        cfg = load_experiment_config(config_path);
    } catch (const ArtifactError& e) {
        std::cerr << "artifact error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return run_command(command, cfg, input_dir, strict);
}
