// Command-line front end: dataset partitioning, experiment runs, and
// plot-ready CSV reports.
//
// Exit codes: 0 ok, 2 config error, 3 dataset/capacity error,
// 4 training divergence, 5 corrupt run data.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ssfl/orchestrator.hpp"
#include "ssfl/report.hpp"

namespace fs = std::filesystem;
using namespace ssfl;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDiverged = 4;
constexpr int kExitCorrupt = 5;

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& seed_overrides) {
    auto cfg = config_from_kv(parse_config_file(path));
    for (const auto& spec : seed_overrides) apply_seed_override(cfg, spec);
    cfg.validate();
    return cfg;
}

int cmd_partition(const std::string& config_path, const std::string& out_path,
                  const std::vector<std::string>& seed_overrides) {
    const auto cfg = load_config(config_path, seed_overrides);
    const auto data = load_dataset(cfg.dataset);
    const auto plan = make_plan(data.train.class_counts(), cfg.users, cfg.noniid_r, cfg.server_samples);
    const auto assignment = synthesize_assignment(data.train.labels, plan, cfg.partition_seed);

    const auto j = assignment_to_json(assignment, cfg.noniid_r);
    std::ofstream out(out_path);
    if (!out) throw FormatError("cannot write " + out_path);
    out << j.dump(2) << "\n";

    const double realized = j.at("realized_r").get<double>();
    std::cout << "target R   " << cfg.noniid_r << "\n";
    std::cout << "realized R " << realized << "\n";
    std::cout << "server samples " << assignment.server_indices.size() << "\n\n";
    std::cout << "user main  total  histogram\n";
    for (std::size_t u = 0; u < assignment.user_indices.size(); ++u) {
        std::cout << std::setw(4) << u << std::setw(5) << assignment.main_class[u] << std::setw(7)
                  << assignment.user_indices[u].size() << "  ";
        for (double p : assignment.user_histograms[u].probabilities)
            std::cout << std::fixed << std::setprecision(3) << p << " ";
        std::cout.unsetf(std::ios::fixed);
        std::cout << "\n";
    }
    std::cout << "\nwrote " << out_path << "\n";
    return 0;
}

int cmd_run(const std::string& config_path, const std::string& out_dir, int threads,
            const std::vector<std::string>& seed_overrides) {
    const auto cfg = load_config(config_path, seed_overrides);
    fs::create_directories(out_dir);

    {
        std::ofstream manifest(fs::path(out_dir) / "manifest.json");
        if (!manifest) throw FormatError("cannot write manifest.json in " + out_dir);
        manifest << config_to_manifest_json(cfg).dump(2) << "\n";
    }

    std::ofstream jsonl(fs::path(out_dir) / "rounds.jsonl");
    if (!jsonl) throw FormatError("cannot write rounds.jsonl in " + out_dir);
    const auto result = run_experiment(cfg, threads, [&](const RoundRecord& r) {
        jsonl << round_record_to_json(r).dump() << "\n";
        if (r.test_accuracy)
            std::cout << "round " << r.round << "  lr " << r.lr << "  accuracy " << *r.test_accuracy << "\n";
    });
    jsonl.close();

    write_checkpoint((fs::path(out_dir) / "checkpoint").string(), result.final_state);
    std::cout << "rounds " << result.records.size();
    if (result.records.back().test_accuracy)
        std::cout << "  final accuracy " << *result.records.back().test_accuracy;
    std::cout << "\nwrote " << out_dir << "\n";
    return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
    std::vector<RunData> runs;
    runs.reserve(run_dirs.size());
    for (const auto& dir : run_dirs) runs.push_back(load_run_dir(dir));
    write_report_csvs(runs, out_dir);
    std::cout << "wrote " << out_dir << "/accuracy.csv, losses.csv, diversity.csv (" << runs.size() << " runs)\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale semi-supervised federated learning simulator"};
    app.require_subcommand(1);

    std::string config_path, out_path;
    std::vector<std::string> seed_overrides;
    int threads = 1;
    std::vector<std::string> run_dirs;

    auto* partition = app.add_subcommand("partition", "Synthesize a non-iid data assignment and report realized R");
    partition->add_option("--config", config_path, "experiment config file")->required();
    partition->add_option("--out", out_path, "assignment JSON path")->required();
    partition->add_option("--seed-override", seed_overrides, "override a seed, e.g. partition=5");

    auto* run = app.add_subcommand("run", "Run an experiment and write JSONL metrics plus a checkpoint");
    run->add_option("--config", config_path, "experiment config file")->required();
    run->add_option("--out", out_path, "run directory")->required();
    run->add_option("--threads", threads, "parallelism for user updates (does not affect results)");
    run->add_option("--seed-override", seed_overrides, "override a seed, e.g. schedule=7");

    auto* report = app.add_subcommand("report", "Summarize run directories into plot-ready CSV tables");
    report->add_option("runs", run_dirs, "run directories")->required()->expected(-1);
    report->add_option("--out", out_path, "report output directory")->required();

    try {
        app.parse(argc, argv);
        if (partition->parsed()) return cmd_partition(config_path, out_path, seed_overrides);
        if (run->parsed()) return cmd_run(config_path, out_path, threads, seed_overrides);
        return cmd_report(run_dirs, out_path);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitConfig;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const CapacityError& e) {
        std::cerr << "capacity error: " << e.what() << "\n";
        return kExitData;
    } catch (const TrainingDivergedError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const FormatError& e) {
        // Malformed run data (report) exits 5; unreadable datasets exit 3.
        const bool reporting = report->parsed();
        std::cerr << (reporting ? "report error: " : "data error: ") << e.what() << "\n";
        return reporting ? kExitCorrupt : kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
