#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssfl/config.hpp"
#include "ssfl/errors.hpp"
#include "ssfl/model.hpp"
#include "ssfl/partitioner.hpp"

namespace ssfl {

using ordered_json = nlohmann::ordered_json;

namespace detail {

inline void write_le_doubles(std::ostream& out, const std::vector<double>& values) {
    for (double v : values) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
        out.write(b, 8);
    }
}

inline std::vector<double> read_le_doubles(std::istream& in, std::size_t count, const std::string& path) {
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
        unsigned char b[8];
        in.read(reinterpret_cast<char*>(b), 8);
        if (!in) throw FormatError("checkpoint: truncated data in " + path);
        std::uint64_t bits = 0;
        for (int j = 0; j < 8; ++j) bits |= static_cast<std::uint64_t>(b[j]) << (8 * j);
        values[i] = std::bit_cast<double>(bits);
    }
    return values;
}

} // namespace detail

inline ordered_json model_spec_to_json(const ModelSpec& spec) {
    ordered_json j;
    j["arch"] = spec.arch == Arch::mlp ? "mlp" : "tiny_cnn";
    j["norm"] = spec.norm == Norm::none ? "none" : (spec.norm == Norm::batch_norm ? "batch_norm" : "group_norm");
    j["groups"] = spec.group_count;
    j["input_shape"] = spec.input_shape;
    j["class_count"] = spec.class_count;
    return j;
}

inline ModelSpec model_spec_from_json(const ordered_json& j) {
    ModelSpec spec;
    const std::string arch = j.at("arch").get<std::string>();
    spec.arch = arch == "mlp" ? Arch::mlp : Arch::tiny_cnn;
    const std::string norm = j.at("norm").get<std::string>();
    spec.norm = norm == "none" ? Norm::none : (norm == "batch_norm" ? Norm::batch_norm : Norm::group_norm);
    spec.group_count = j.at("groups").get<int>();
    spec.input_shape = j.at("input_shape").get<std::vector<int>>();
    spec.class_count = j.at("class_count").get<int>();
    return spec;
}

/// Checkpoint = <base>.bin (weights | momentum | norm_stats as little-endian
/// 64-bit floats) + <base>.json (spec, counts and the slice layout).
inline void write_checkpoint(const std::string& base_path, const ParameterState& state) {
    std::ofstream bin(base_path + ".bin", std::ios::binary);
    if (!bin) throw FormatError("checkpoint: cannot write " + base_path + ".bin");
    detail::write_le_doubles(bin, state.weights);
    detail::write_le_doubles(bin, state.momentum);
    detail::write_le_doubles(bin, state.norm_stats);

    ordered_json j;
    j["format"] = "ssfl-checkpoint-v1";
    j["spec"] = model_spec_to_json(state.spec());
    j["weights"] = state.weights.size();
    j["momentum"] = state.momentum.size();
    j["norm_stats"] = state.norm_stats.size();
    auto slices = ordered_json::array();
    for (const auto& s : state.plan->weight_slices) {
        ordered_json js;
        js["name"] = s.name;
        js["offset"] = s.offset;
        js["count"] = s.count;
        js["shape"] = s.shape;
        slices.push_back(js);
    }
    j["weight_layout"] = slices;
    auto stat_slices = ordered_json::array();
    for (const auto& s : state.plan->stat_slices) {
        ordered_json js;
        js["name"] = s.name;
        js["offset"] = s.offset;
        js["count"] = s.count;
        stat_slices.push_back(js);
    }
    j["stat_layout"] = stat_slices;

    std::ofstream meta(base_path + ".json");
    if (!meta) throw FormatError("checkpoint: cannot write " + base_path + ".json");
    meta << j.dump(2) << "\n";
}

inline ParameterState read_checkpoint(const std::string& base_path) {
    std::ifstream meta(base_path + ".json");
    if (!meta) throw FormatError("checkpoint: cannot open " + base_path + ".json");
    ordered_json j;
    try {
        meta >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint: bad metadata in " + base_path + ".json: " + e.what());
    }
    if (j.value("format", "") != "ssfl-checkpoint-v1")
        throw FormatError("checkpoint: unknown format in " + base_path + ".json");

    ParameterState state;
    state.plan = std::make_shared<const ModelPlan>(build_model_plan(model_spec_from_json(j.at("spec"))));
    const auto weights = j.at("weights").get<std::size_t>();
    const auto momentum = j.at("momentum").get<std::size_t>();
    const auto stats = j.at("norm_stats").get<std::size_t>();
    if (weights != state.plan->weight_count || momentum != weights || stats != state.plan->stat_count)
        throw FormatError("checkpoint: counts do not match the spec in " + base_path + ".json");

    std::ifstream bin(base_path + ".bin", std::ios::binary);
    if (!bin) throw FormatError("checkpoint: cannot open " + base_path + ".bin");
    state.weights = detail::read_le_doubles(bin, weights, base_path + ".bin");
    state.momentum = detail::read_le_doubles(bin, momentum, base_path + ".bin");
    state.norm_stats = detail::read_le_doubles(bin, stats, base_path + ".bin");
    return state;
}

/// Assignment document for the `partition` subcommand: id lists plus exact
/// histograms and the realized non-iid level.
inline ordered_json assignment_to_json(const Assignment& assignment, double target_r) {
    ordered_json j;
    j["target_r"] = target_r;
    j["realized_r"] = compute_noniid_r(assignment.user_histograms);
    j["server_indices"] = assignment.server_indices;
    auto users = ordered_json::array();
    for (std::size_t u = 0; u < assignment.user_indices.size(); ++u) {
        ordered_json ju;
        ju["id"] = u;
        ju["main_class"] = assignment.main_class[u];
        ju["class_counts"] = assignment.user_class_counts[u];
        ju["histogram"] = assignment.user_histograms[u].probabilities;
        ju["indices"] = assignment.user_indices[u];
        users.push_back(ju);
    }
    j["users"] = users;
    return j;
}

inline ordered_json config_to_manifest_json(const ExperimentConfig& config) {
    ordered_json j;
    for (const auto& [section, entries] : config_to_kv(config)) {
        ordered_json js;
        for (const auto& [key, value] : entries) js[key] = value;
        j[section] = js;
    }
    return j;
}

inline ExperimentConfig config_from_manifest_json(const ordered_json& j) {
    ConfigKv kv;
    for (const auto& [section, entries] : j.items())
        for (const auto& [key, value] : entries.items()) kv[section][key] = value.get<std::string>();
    return config_from_kv(kv);
}

} // namespace ssfl
