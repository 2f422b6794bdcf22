#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ltood/errors.hpp"
#include "ltood/experiment.hpp"

namespace fs = std::filesystem;
using namespace ltood;

namespace {

std::string run_dir_name(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os << to_string(cfg.condition) << "_k" << cfg.k << "_lam" << cfg.lambda;
    if (cfg.batch_size.has_value()) os << "_b" << *cfg.batch_size;
    os << "_seed" << cfg.seed;
    return os.str();
}

void print_report(const MetricsReport& r) {
    std::cout << "auroc=" << r.auroc << " aupr=" << r.aupr << " fpr95=" << r.fpr95
              << " acc=" << r.acc << " acc_head=" << r.acc_head << " acc_tail=";
    if (r.acc_tail.has_value()) std::cout << *r.acc_tail;
    else std::cout << "na";
    std::cout << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Graph-based out-of-distribution detection for long-tailed recognition"};
    app.require_subcommand(1);

    // --- gen ---
    auto* gen = app.add_subcommand("gen", "Generate synthetic dataset files");
    std::string gen_out;
    DatasetSpec gen_spec;
    int gen_test_per_class = 100;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--K", gen_spec.k_classes, "Number of ID classes");
    gen->add_option("--n-max", gen_spec.n_max, "Largest class size");
    gen->add_option("--rho", gen_spec.rho, "Imbalance ratio");
    gen->add_option("--dim", gen_spec.dim, "Feature dimensionality");
    gen->add_option("--n-oe", gen_spec.n_oe, "Outlier-exposure rows");
    gen->add_option("--n-ood-test", gen_spec.n_ood_test, "Test OOD rows");
    gen->add_option("--n-test-per-class", gen_test_per_class, "Balanced ID test rows per class");
    gen->add_option("--seed", gen_spec.seed, "RNG seed");

    // --- run / sweep shared flags ---
    auto add_run_flags = [](CLI::App* cmd, std::string& config_path,
                            std::vector<std::pair<CLI::Option*, std::string>>& flag_keys) {
        cmd->add_option("--config", config_path, "key=value config file");
        auto bind = [&](const char* flag, const char* key, const char* help) {
            auto* opt = cmd->add_option(flag)->description(help);
            flag_keys.emplace_back(opt, key);
        };
        bind("--condition", "condition", "Pipeline condition");
        bind("--k", "k", "k-NN graph neighbours");
        bind("--lambda", "lambda", "OE loss weight");
        bind("--batch-size", "batch_size", "Batch-wise inference size");
        bind("--seed", "seed", "Run seed");
        bind("--out", "out", "Output directory");
    };
    auto collect_overrides = [](const std::vector<std::pair<CLI::Option*, std::string>>& flags) {
        std::vector<std::pair<std::string, std::string>> overrides;
        for (const auto& [opt, key] : flags) {
            if (opt->count() > 0) overrides.emplace_back(key, opt->results().front());
        }
        return overrides;
    };

    auto* run = app.add_subcommand("run", "Run a single experiment");
    std::string run_config;
    std::vector<std::pair<CLI::Option*, std::string>> run_flags;
    add_run_flags(run, run_config, run_flags);

    auto* sweep = app.add_subcommand("sweep", "Sweep one axis over several seeds");
    std::string sweep_config, sweep_axis;
    std::vector<double> sweep_values;
    std::vector<std::uint64_t> sweep_seeds;
    std::vector<std::pair<CLI::Option*, std::string>> sweep_flags;
    add_run_flags(sweep, sweep_config, sweep_flags);
    sweep->add_option("--axis", sweep_axis, "Axis to sweep: k, lambda or batch_size")
        ->required();
    sweep->add_option("--values", sweep_values, "Axis values")->required()->expected(-1);
    sweep->add_option("--seeds", sweep_seeds, "Seeds (one full run per value x seed)")
        ->required()
        ->expected(-1);

    auto* report = app.add_subcommand("report", "Aggregate run directories into a table");
    std::string report_runs, report_out;
    report->add_option("--runs", report_runs, "Directory containing run outputs")->required();
    report->add_option("--out", report_out, "CSV output path (stdout when omitted)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            ExperimentConfig cfg;
            cfg.data = gen_spec;
            cfg.seed = gen_spec.seed;
            cfg.n_test_per_class = gen_test_per_class;
            fs::create_directories(gen_out);
            const LabeledDataset train = make_train_set(cfg);
            const LabeledDataset test = make_test_set(cfg);
            write_embeddings((fs::path(gen_out) / "train.gemb").string(), train.features,
                             train.roles);
            write_spec_sidecar((fs::path(gen_out) / "train.spec").string(), train.spec);
            write_embeddings((fs::path(gen_out) / "test.gemb").string(), test.features,
                             test.roles);
            write_spec_sidecar((fs::path(gen_out) / "test.spec").string(), test.spec);
            std::cout << "wrote " << train.rows() << " train rows and " << test.rows()
                      << " test rows to " << gen_out << "\n";
        } else if (run->parsed()) {
            ExperimentConfig cfg = parse_config(run_config, collect_overrides(run_flags));
            cfg.out_dir = (fs::path(cfg.out_dir) / run_dir_name(cfg)).string();
            const MetricsReport result = run_experiment(cfg);
            std::cout << "run dir: " << cfg.out_dir << "\n";
            print_report(result);
        } else if (sweep->parsed()) {
            ExperimentConfig base = parse_config(sweep_config, collect_overrides(sweep_flags));
            const SweepAxis axis = sweep_axis_from_string(sweep_axis);
            const SweepResult result = run_sweep(base, axis, sweep_values, sweep_seeds);
            int failed = 0;
            for (const auto& cell : result.cells) failed += !cell.report.has_value();
            std::cout << "sweep finished: " << result.cells.size() - failed << "/"
                      << result.cells.size() << " cells ok, results in " << base.out_dir
                      << "\n";
        } else if (report->parsed()) {
            const std::string csv = aggregate_reports_csv(report_runs);
            if (report_out.empty()) {
                std::cout << csv;
            } else {
                std::ofstream os(report_out);
                os << csv;
                std::cout << "wrote " << report_out << "\n";
            }
        }
    } catch (const StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
