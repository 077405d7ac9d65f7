#include <cmath>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "consloss/commands.hpp"
#include "consloss/errors.hpp"

using namespace consloss;

namespace {

std::vector<double> parse_bases(const std::vector<std::string>& items) {
    std::vector<double> out;
    for (const auto& s : items) {
        if (s == "e") {
            out.push_back(kEuler);
            continue;
        }
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(s, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != s.size()) throw ConfigError("--bases", "'" + s + "' is not a number or 'e'");
        out.push_back(v);
    }
    return out;
}

template <class F>
int guarded(F&& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return kExitNumericAbort;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const StructuralError& e) {
        std::cerr << "structural error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const DomainError& e) {
        std::cerr << "domain error: " << e.what() << "\n";
        return kExitConfigError;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conservative loss laboratory: loss curves, gradient checks, synthetic domains and adaptation runs"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every command");

    // plot-loss
    PlotLossOptions plot;
    std::vector<std::string> bases{"2", "e", "3", "4"};
    auto* plot_cmd = app.add_subcommand("plot-loss", "Plot Conservative loss curves and the cubic family as SVG");
    plot_cmd->add_option("--out", plot.out, "Output directory")->required();
    plot_cmd->add_option("--bases", bases, "Logarithm bases, numbers or 'e' (default 2 e 3 4)")->delimiter(',');
    plot_cmd->add_option("--lambda", plot.lambda, "Balance weight of the base plot")->capture_default_str();
    plot_cmd->add_option("--roster", plot.roster, "conservative | homogeneous | all")->capture_default_str();

    // gradcheck
    GradcheckOptions grad;
    std::string grad_out;
    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference checks of loss and network gradients");
    grad_cmd->add_option("--out", grad_out, "Directory for gradcheck.txt (optional)");
    grad_cmd->add_option("--seed-override", grad.seed, "Seed for sampled points and nets")->capture_default_str();
    grad_cmd->add_flag("--plant-fault", grad.plant_fault, "Test mode: corrupt one analytic gradient per check");

    // run-style commands share their options
    RunOptions run;
    std::string config_path, dataset_path, checkpoint_path;
    std::uint64_t seed_override = 0;
    std::size_t stride = 0;
    auto add_common = [&](CLI::App* cmd, bool seed, bool parallel) {
        cmd->add_option("--config", config_path, "Experiment config (JSON); defaults when omitted")->check(CLI::ExistingFile);
        cmd->add_option("--out", run.out, "Output directory")->required();
        if (seed) cmd->add_option("--seed-override", seed_override, "Override the run seed");
        if (parallel) cmd->add_option("--parallel", run.parallel, "Concurrent training runs")->capture_default_str();
    };
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic source/target dataset");
    add_common(gen_cmd, true, false);
    auto* train_cmd = app.add_subcommand("train", "Train one configuration; history CSV, checkpoint, mIoU SVG");
    add_common(train_cmd, true, false);
    train_cmd->add_option("--dataset", dataset_path, "Dataset directory from gen-data (else generated inline)")
        ->check(CLI::ExistingDirectory);
    auto* cmp_cmd = app.add_subcommand("compare", "Run the ablation battery over a seed panel");
    add_common(cmp_cmd, true, true);
    auto* exp_cmd = app.add_subcommand("export-features", "Export per-pixel encoder embeddings as CSV");
    add_common(exp_cmd, false, false);
    exp_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint directory from train")
        ->required()
        ->check(CLI::ExistingDirectory);
    exp_cmd->add_option("--dataset", dataset_path, "Dataset directory (else generated from the config)")
        ->check(CLI::ExistingDirectory);
    exp_cmd->add_option("--stride", stride, "Pixel stride (default from config, 4)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfigError;
    }

    auto finish_run_options = [&](CLI::App* cmd) {
        if (!config_path.empty()) run.config = config_path;
        if (!dataset_path.empty()) run.dataset = dataset_path;
        if (!checkpoint_path.empty()) run.checkpoint = checkpoint_path;
        auto given = [cmd](const char* name) {
            const auto* opt = cmd->get_option_no_throw(name);
            return opt != nullptr && opt->count() > 0;
        };
        if (given("--seed-override")) run.seed_override = seed_override;
        if (given("--stride")) run.stride = stride;
    };

    return guarded([&]() -> int {
        if (*plot_cmd) {
            plot.bases = parse_bases(bases);
            return cmd_plot_loss(plot, std::cout);
        }
        if (*grad_cmd) {
            if (!grad_out.empty()) grad.out = grad_out;
            return cmd_gradcheck(grad, std::cout);
        }
        if (*gen_cmd) {
            finish_run_options(gen_cmd);
            return cmd_gen_data(run, std::cout);
        }
        if (*train_cmd) {
            finish_run_options(train_cmd);
            return cmd_train(run, std::cout);
        }
        if (*cmp_cmd) {
            finish_run_options(cmp_cmd);
            return cmd_compare(run, std::cout);
        }
        finish_run_options(exp_cmd);
        return cmd_export_features(run, std::cout);
    });
}
