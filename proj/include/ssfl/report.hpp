#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssfl/config.hpp"
#include "ssfl/errors.hpp"

namespace ssfl {

struct RunData {
    std::string run_id;
    std::vector<nlohmann::ordered_json> rounds;
};

/// Reads <run_dir>/rounds.jsonl. Corrupt lines are reported with their
/// file and line number.
inline RunData load_run_dir(const std::string& run_dir) {
    namespace fs = std::filesystem;
    const fs::path path = fs::path(run_dir) / "rounds.jsonl";
    std::ifstream in(path);
    if (!in) throw FormatError("report: cannot open " + path.string());
    RunData run;
    run.run_id = fs::path(run_dir).filename().string();
    if (run.run_id.empty()) run.run_id = fs::path(run_dir).parent_path().filename().string();
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            run.rounds.push_back(nlohmann::ordered_json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("report: corrupt JSONL at " + path.string() + ":" + std::to_string(lineno) + ": " +
                              e.what());
        }
        if (!run.rounds.back().contains("round"))
            throw FormatError("report: missing round index at " + path.string() + ":" + std::to_string(lineno));
    }
    if (run.rounds.empty()) throw FormatError("report: no rounds in " + path.string());
    return run;
}

namespace detail {

inline std::string csv_value(const nlohmann::ordered_json& v) {
    if (v.is_number()) return format_double(v.get<double>());
    return v.get<std::string>();
}

} // namespace detail

/// Long-format CSV tables (run_id, round, metric, value), one file per
/// metric family: accuracy.csv, losses.csv, diversity.csv.
inline void write_report_csvs(const std::vector<RunData>& runs, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    std::ofstream acc(fs::path(out_dir) / "accuracy.csv");
    std::ofstream losses(fs::path(out_dir) / "losses.csv");
    std::ofstream div(fs::path(out_dir) / "diversity.csv");
    acc << "run_id,round,metric,value\n";
    losses << "run_id,round,metric,value\n";
    div << "run_id,round,metric,value\n";

    for (const auto& run : runs) {
        for (const auto& r : run.rounds) {
            const auto round = r.at("round").get<long long>();
            const std::string prefix = run.run_id + "," + std::to_string(round) + ",";
            if (r.contains("test_accuracy"))
                acc << prefix << "test_accuracy," << detail::csv_value(r.at("test_accuracy")) << "\n";
            for (const char* metric : {"mean_user_loss", "server_loss", "lr"})
                if (r.contains(metric)) losses << prefix << metric << "," << detail::csv_value(r.at(metric)) << "\n";
            if (r.contains("diversity"))
                for (const auto& [name, value] : r.at("diversity").items())
                    div << prefix << name << "," << detail::csv_value(value) << "\n";
        }
    }
}

} // namespace ssfl
