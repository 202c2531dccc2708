#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "ssfl/augment.hpp"
#include "ssfl/dataset.hpp"
#include "ssfl/errors.hpp"
#include "ssfl/losses.hpp"
#include "ssfl/model.hpp"
#include "ssfl/optim.hpp"

namespace ssfl {

using ConfigKv = std::map<std::string, std::map<std::string, std::string>>;

enum class Averaging { fedavg, grouping };

inline std::string to_string(Averaging a) { return a == Averaging::fedavg ? "fedavg" : "grouping"; }

inline Averaging averaging_from_string(const std::string& s) {
    if (s == "fedavg") return Averaging::fedavg;
    if (s == "grouping") return Averaging::grouping;
    throw ConfigError("unknown averaging method: " + s);
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

} // namespace detail

/// Parses the flat `[section]` / `key = value` experiment-config format.
/// Full-line comments start with '#'.
inline ConfigKv parse_config_text(std::istream& in) {
    ConfigKv kv;
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section");
            section = detail::trim(t.substr(1, t.size() - 2));
            if (section.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty section name");
            kv[section];
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        if (section.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": key before any section");
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string value = detail::trim(t.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        kv[section][key] = value;
    }
    return kv;
}

inline ConfigKv parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    return parse_config_text(in);
}

inline std::string write_config_text(const ConfigKv& kv) {
    std::ostringstream out;
    bool first = true;
    for (const auto& [section, entries] : kv) {
        if (!first) out << "\n";
        first = false;
        out << "[" << section << "]\n";
        for (const auto& [key, value] : entries) out << key << " = " << value << "\n";
    }
    return out.str();
}

/// All environmental factors and hyperparameters of one experiment. The
/// degree of parallelism is deliberately not part of the config: outputs
/// are a pure function of this struct.
struct ExperimentConfig {
    DatasetSource dataset;

    double noniid_r = 0.0;          // R
    long long server_samples = 1000; // Ns
    std::uint64_t partition_seed = 2019;

    Arch arch = Arch::mlp;
    Norm norm = Norm::group_norm;
    int model_groups = 0;

    Objective objective = Objective::crl;
    double tau = 0.95;

    AugmentConfig augment;

    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double cosine_c = 1.0;
    double lr_floor = 1e-4;
    int warmup_epochs = 0;

    int users = 10;         // K
    int participants = 10;  // C
    int local_steps = 16;   // T
    Averaging averaging = Averaging::fedavg;
    int groups = 2;         // S

    int epochs = 1;             // E
    long long samples_per_epoch = 0; // M; 0 means the train-set size
    int batch_size = 64;        // B
    int eval_every = 5;
    std::uint64_t weight_seed = 1;
    std::uint64_t schedule_seed = 3;

    void validate() const {
        if (users < 1) throw ConfigError("federation.users must be >= 1");
        if (participants < 1 || participants > users)
            throw ConfigError("federation.participants must satisfy 1 <= C <= K");
        if (local_steps < 1) throw ConfigError("federation.local_steps must be >= 1");
        if (averaging == Averaging::grouping && (groups < 1 || groups > participants))
            throw ConfigError("federation.groups must satisfy 1 <= S <= C");
        if (tau <= 0.0 || tau >= 1.0) throw ConfigError("objective.tau must be in (0,1)");
        if (noniid_r < 0.0 || noniid_r > 1.0) throw ConfigError("partition.r must be in [0,1]");
        if (epochs < 1) throw ConfigError("run.epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("run.batch_size must be >= 1");
        if (eval_every < 1) throw ConfigError("run.eval_every must be >= 1");
        if (lr <= 0.0) throw ConfigError("optimizer.lr must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("optimizer.momentum must be in [0,1)");
        if (weight_decay < 0.0) throw ConfigError("optimizer.weight_decay must be >= 0");
        if (lr_floor <= 0.0 || lr_floor >= 1.0) throw ConfigError("optimizer.lr_floor must be in (0,1)");
        if (warmup_epochs < 0 || warmup_epochs >= epochs) throw ConfigError("optimizer.warmup_epochs must be in [0, epochs)");
        augment.validate();
    }
};

namespace detail {

class KvReader {
public:
    explicit KvReader(const ConfigKv& kv) : kv_(kv) {}

    bool has(const std::string& section, const std::string& key) const {
        const auto s = kv_.find(section);
        return s != kv_.end() && s->second.count(key) > 0;
    }

    std::string str(const std::string& section, const std::string& key, const std::string& fallback) {
        mark(section, key);
        const auto s = kv_.find(section);
        if (s == kv_.end()) return fallback;
        const auto it = s->second.find(key);
        return it == s->second.end() ? fallback : it->second;
    }

    double num(const std::string& section, const std::string& key, double fallback) {
        const std::string v = str(section, key, "");
        if (v.empty()) return fallback;
        char* end = nullptr;
        const double parsed = std::strtod(v.c_str(), &end);
        if (end == v.c_str() || *end != '\0')
            throw ConfigError(section + "." + key + ": not a number: " + v);
        return parsed;
    }

    long long integer(const std::string& section, const std::string& key, long long fallback) {
        const std::string v = str(section, key, "");
        if (v.empty()) return fallback;
        long long parsed = 0;
        const auto res = std::from_chars(v.data(), v.data() + v.size(), parsed);
        if (res.ec != std::errc() || res.ptr != v.data() + v.size())
            throw ConfigError(section + "." + key + ": not an integer: " + v);
        return parsed;
    }

    bool boolean(const std::string& section, const std::string& key, bool fallback) {
        const std::string v = str(section, key, "");
        if (v.empty()) return fallback;
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ConfigError(section + "." + key + ": not a boolean: " + v);
    }

    // Every key present in the input must have been consumed by a reader.
    void check_unknown() const {
        for (const auto& [section, entries] : kv_)
            for (const auto& [key, value] : entries)
                if (!seen_.count(section + "." + key))
                    throw ConfigError("unknown config key: " + section + "." + key);
    }

private:
    void mark(const std::string& section, const std::string& key) { seen_.insert(section + "." + key); }

    const ConfigKv& kv_;
    std::set<std::string> seen_;
};

} // namespace detail

inline ExperimentConfig config_from_kv(const ConfigKv& kv) {
    detail::KvReader r(kv);
    ExperimentConfig c;

    c.dataset.kind = dataset_kind_from_string(r.str("dataset", "kind", "synthetic_blobs"));
    c.dataset.classes = static_cast<int>(r.integer("dataset", "classes", c.dataset.classes));
    c.dataset.dims = static_cast<int>(r.integer("dataset", "dims", c.dataset.dims));
    c.dataset.train_samples = r.integer("dataset", "train_samples", c.dataset.train_samples);
    c.dataset.test_samples = r.integer("dataset", "test_samples", c.dataset.test_samples);
    c.dataset.seed = static_cast<std::uint64_t>(r.integer("dataset", "seed", static_cast<long long>(c.dataset.seed)));
    c.dataset.blob_std = r.num("dataset", "blob_std", c.dataset.blob_std);
    c.dataset.train_images = r.str("dataset", "train_images", "");
    c.dataset.train_labels = r.str("dataset", "train_labels", "");
    c.dataset.test_images = r.str("dataset", "test_images", "");
    c.dataset.test_labels = r.str("dataset", "test_labels", "");
    c.dataset.csv_path = r.str("dataset", "path", "");
    c.dataset.label_column = r.str("dataset", "label_column", "");
    c.dataset.test_fraction = r.num("dataset", "test_fraction", c.dataset.test_fraction);
    c.dataset.split_seed = static_cast<std::uint64_t>(r.integer("dataset", "split_seed", static_cast<long long>(c.dataset.split_seed)));

    c.noniid_r = r.num("partition", "r", c.noniid_r);
    c.server_samples = r.integer("partition", "server_samples", c.server_samples);
    c.partition_seed = static_cast<std::uint64_t>(r.integer("partition", "seed", static_cast<long long>(c.partition_seed)));

    const std::string arch = r.str("model", "arch", "mlp");
    if (arch == "mlp") c.arch = Arch::mlp;
    else if (arch == "tiny_cnn") c.arch = Arch::tiny_cnn;
    else throw ConfigError("model.arch must be mlp or tiny_cnn, got " + arch);
    const std::string norm = r.str("model", "norm", "group_norm");
    if (norm == "none") c.norm = Norm::none;
    else if (norm == "batch_norm") c.norm = Norm::batch_norm;
    else if (norm == "group_norm") c.norm = Norm::group_norm;
    else throw ConfigError("model.norm must be none, batch_norm or group_norm, got " + norm);
    c.model_groups = static_cast<int>(r.integer("model", "groups", c.model_groups));

    c.objective = objective_from_string(r.str("objective", "kind", "crl"));
    c.tau = r.num("objective", "tau", c.tau);

    c.augment.weak_max_shift = static_cast<int>(r.integer("augment", "weak_max_shift", c.augment.weak_max_shift));
    c.augment.weak_hflip = r.boolean("augment", "weak_hflip", c.augment.weak_hflip);
    c.augment.strong_ops_per_sample =
        static_cast<int>(r.integer("augment", "strong_ops", c.augment.strong_ops_per_sample));

    c.lr = r.num("optimizer", "lr", c.lr);
    c.momentum = r.num("optimizer", "momentum", c.momentum);
    c.weight_decay = r.num("optimizer", "weight_decay", c.weight_decay);
    c.cosine_c = r.num("optimizer", "cosine_c", c.cosine_c);
    c.lr_floor = r.num("optimizer", "lr_floor", c.lr_floor);
    c.warmup_epochs = static_cast<int>(r.integer("optimizer", "warmup_epochs", c.warmup_epochs));

    c.users = static_cast<int>(r.integer("federation", "users", c.users));
    c.participants = static_cast<int>(r.integer("federation", "participants", c.participants));
    c.local_steps = static_cast<int>(r.integer("federation", "local_steps", c.local_steps));
    c.averaging = averaging_from_string(r.str("federation", "averaging", "fedavg"));
    c.groups = static_cast<int>(r.integer("federation", "groups", c.groups));

    c.epochs = static_cast<int>(r.integer("run", "epochs", c.epochs));
    c.samples_per_epoch = r.integer("run", "samples_per_epoch", c.samples_per_epoch);
    c.batch_size = static_cast<int>(r.integer("run", "batch_size", c.batch_size));
    c.eval_every = static_cast<int>(r.integer("run", "eval_every", c.eval_every));
    c.weight_seed = static_cast<std::uint64_t>(r.integer("run", "weight_seed", static_cast<long long>(c.weight_seed)));
    c.schedule_seed = static_cast<std::uint64_t>(r.integer("run", "schedule_seed", static_cast<long long>(c.schedule_seed)));

    r.check_unknown();
    c.validate();
    return c;
}

/// Canonical key-value image of a config: every key present, values
/// normalized. Re-parsing yields an equal config.
inline ConfigKv config_to_kv(const ExperimentConfig& c) {
    using detail::format_double;
    ConfigKv kv;
    auto& ds = kv["dataset"];
    ds["kind"] = to_string(c.dataset.kind);
    ds["classes"] = std::to_string(c.dataset.classes);
    ds["dims"] = std::to_string(c.dataset.dims);
    ds["train_samples"] = std::to_string(c.dataset.train_samples);
    ds["test_samples"] = std::to_string(c.dataset.test_samples);
    ds["seed"] = std::to_string(c.dataset.seed);
    ds["blob_std"] = format_double(c.dataset.blob_std);
    ds["train_images"] = c.dataset.train_images;
    ds["train_labels"] = c.dataset.train_labels;
    ds["test_images"] = c.dataset.test_images;
    ds["test_labels"] = c.dataset.test_labels;
    ds["path"] = c.dataset.csv_path;
    ds["label_column"] = c.dataset.label_column;
    ds["test_fraction"] = format_double(c.dataset.test_fraction);
    ds["split_seed"] = std::to_string(c.dataset.split_seed);

    auto& part = kv["partition"];
    part["r"] = format_double(c.noniid_r);
    part["server_samples"] = std::to_string(c.server_samples);
    part["seed"] = std::to_string(c.partition_seed);

    auto& model = kv["model"];
    model["arch"] = c.arch == Arch::mlp ? "mlp" : "tiny_cnn";
    model["norm"] = c.norm == Norm::none ? "none" : (c.norm == Norm::batch_norm ? "batch_norm" : "group_norm");
    model["groups"] = std::to_string(c.model_groups);

    auto& obj = kv["objective"];
    obj["kind"] = to_string(c.objective);
    obj["tau"] = format_double(c.tau);

    auto& aug = kv["augment"];
    aug["weak_max_shift"] = std::to_string(c.augment.weak_max_shift);
    aug["weak_hflip"] = c.augment.weak_hflip ? "true" : "false";
    aug["strong_ops"] = std::to_string(c.augment.strong_ops_per_sample);

    auto& opt = kv["optimizer"];
    opt["lr"] = format_double(c.lr);
    opt["momentum"] = format_double(c.momentum);
    opt["weight_decay"] = format_double(c.weight_decay);
    opt["cosine_c"] = format_double(c.cosine_c);
    opt["lr_floor"] = format_double(c.lr_floor);
    opt["warmup_epochs"] = std::to_string(c.warmup_epochs);

    auto& fed = kv["federation"];
    fed["users"] = std::to_string(c.users);
    fed["participants"] = std::to_string(c.participants);
    fed["local_steps"] = std::to_string(c.local_steps);
    fed["averaging"] = to_string(c.averaging);
    fed["groups"] = std::to_string(c.groups);

    auto& run = kv["run"];
    run["epochs"] = std::to_string(c.epochs);
    run["samples_per_epoch"] = std::to_string(c.samples_per_epoch);
    run["batch_size"] = std::to_string(c.batch_size);
    run["eval_every"] = std::to_string(c.eval_every);
    run["weight_seed"] = std::to_string(c.weight_seed);
    run["schedule_seed"] = std::to_string(c.schedule_seed);
    return kv;
}

/// Applies `--seed-override name=value` pairs: partition, weights, schedule
/// or dataset.
inline void apply_seed_override(ExperimentConfig& c, const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw ConfigError("seed override must look like name=value: " + spec);
    const std::string name = spec.substr(0, eq);
    const std::string value = spec.substr(eq + 1);
    long long parsed = 0;
    const auto res = std::from_chars(value.data(), value.data() + value.size(), parsed);
    if (res.ec != std::errc() || res.ptr != value.data() + value.size())
        throw ConfigError("seed override value is not an integer: " + spec);
    if (name == "partition") c.partition_seed = static_cast<std::uint64_t>(parsed);
    else if (name == "weights") c.weight_seed = static_cast<std::uint64_t>(parsed);
    else if (name == "schedule") c.schedule_seed = static_cast<std::uint64_t>(parsed);
    else if (name == "dataset") c.dataset.seed = static_cast<std::uint64_t>(parsed);
    else throw ConfigError("unknown seed override target: " + name);
}

} // namespace ssfl
