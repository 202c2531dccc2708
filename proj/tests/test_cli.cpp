#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include "ssfl/report.hpp"
#include "ssfl/serialize.hpp"

using namespace ssfl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("ssfl_cli_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

int run_cli(const std::string& args) {
    const std::string cmd = std::string(SSFL_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

void write_tiny_config(const fs::path& path, const std::string& extra = "") {
    std::ofstream out(path);
    out << R"([dataset]
kind = synthetic_blobs
classes = 3
dims = 4
train_samples = 450
test_samples = 90
seed = 5

[partition]
r = 0.4
server_samples = 60

[model]
arch = mlp
norm = group_norm

[objective]
kind = crl
tau = 0.6

[optimizer]
lr = 0.05

[federation]
users = 3
participants = 2
local_steps = 2
averaging = grouping
groups = 2

[run]
epochs = 1
samples_per_epoch = 64
batch_size = 8
eval_every = 2
)" << extra;
}

} // namespace

TEST_CASE("partition subcommand writes the assignment and reports realized R") {
    TempDir tmp;
    const auto cfg = tmp.path / "exp.ini";
    write_tiny_config(cfg);
    const auto out = tmp.path / "assignment.json";
    REQUIRE(run_cli("partition --config " + cfg.string() + " --out " + out.string()) == 0);

    std::ifstream in(out);
    nlohmann::ordered_json j;
    in >> j;
    REQUIRE(j.at("target_r") == 0.4);
    REQUIRE(j.at("users").size() == 3);
    REQUIRE(std::abs(j.at("realized_r").get<double>() - 0.4) < 0.1);
    REQUIRE(j.at("server_indices").size() == 60);
}

TEST_CASE("malformed configs exit 2") {
    TempDir tmp;
    const auto cfg = tmp.path / "bad.ini";
    {
        std::ofstream out(cfg);
        out << "[federation]\nusers = not_a_number\n";
    }
    REQUIRE(run_cli("partition --config " + cfg.string() + " --out " + (tmp.path / "a.json").string()) == 2);
    REQUIRE(run_cli("run --config " + (tmp.path / "missing.ini").string() + " --out " + tmp.path.string()) == 2);
}

TEST_CASE("capacity errors exit 3") {
    TempDir tmp;
    const auto cfg = tmp.path / "exp.ini";
    {
        std::ofstream out(cfg);
        out << "[dataset]\nkind = synthetic_blobs\nclasses = 3\ndims = 4\ntrain_samples = 450\n"
               "[partition]\nserver_samples = 100000\n[federation]\nusers = 3\nparticipants = 2\n";
    }
    REQUIRE(run_cli("partition --config " + cfg.string() + " --out " + (tmp.path / "a.json").string()) == 3);
}

TEST_CASE("missing dataset files exit 3") {
    TempDir tmp;
    const auto cfg = tmp.path / "exp.ini";
    {
        std::ofstream out(cfg);
        out << "[dataset]\nkind = idx_images\ntrain_images = /nonexistent/img\ntrain_labels = /nonexistent/lab\n"
               "test_images = /nonexistent/img\ntest_labels = /nonexistent/lab\n"
               "[federation]\nusers = 2\nparticipants = 2\n";
    }
    REQUIRE(run_cli("run --config " + cfg.string() + " --out " + (tmp.path / "run").string()) == 3);
}

TEST_CASE("run reruns are byte-identical and the manifest round-trips") {
    TempDir tmp;
    const auto cfg = tmp.path / "exp.ini";
    write_tiny_config(cfg);

    REQUIRE(run_cli("run --config " + cfg.string() + " --out " + (tmp.path / "run_a").string()) == 0);
    REQUIRE(run_cli("run --config " + cfg.string() + " --out " + (tmp.path / "run_b").string() + " --threads 3") == 0);
    REQUIRE(slurp(tmp.path / "run_a" / "rounds.jsonl") == slurp(tmp.path / "run_b" / "rounds.jsonl"));

    // Manifest re-parses to an equal config.
    std::ifstream manifest(tmp.path / "run_a" / "manifest.json");
    nlohmann::ordered_json mj;
    manifest >> mj;
    const auto echoed = config_from_manifest_json(mj);
    const auto original = config_from_kv(parse_config_file(cfg.string()));
    REQUIRE(config_to_kv(echoed) == config_to_kv(original));

    // The checkpoint loads and matches the model spec.
    const auto state = read_checkpoint((tmp.path / "run_a" / "checkpoint").string());
    REQUIRE(state.spec().class_count == 3);
    REQUIRE(state.weights.size() == state.momentum.size());

    // Seed overrides change the trajectory.
    REQUIRE(run_cli("run --config " + cfg.string() + " --out " + (tmp.path / "run_c").string() +
                    " --seed-override schedule=99") == 0);
    REQUIRE(slurp(tmp.path / "run_a" / "rounds.jsonl") != slurp(tmp.path / "run_c" / "rounds.jsonl"));
}

TEST_CASE("report emits long-format CSVs covering every run") {
    TempDir tmp;
    const auto cfg = tmp.path / "exp.ini";
    write_tiny_config(cfg);
    REQUIRE(run_cli("run --config " + cfg.string() + " --out " + (tmp.path / "runs" / "alpha").string()) == 0);
    REQUIRE(run_cli("run --config " + cfg.string() + " --out " + (tmp.path / "runs" / "beta").string() +
                    " --seed-override schedule=4") == 0);

    const auto report_dir = tmp.path / "report";
    REQUIRE(run_cli("report " + (tmp.path / "runs" / "alpha").string() + " " + (tmp.path / "runs" / "beta").string() +
                    " --out " + report_dir.string()) == 0);

    const std::string diversity = slurp(report_dir / "diversity.csv");
    REQUIRE(diversity.find("alpha") != std::string::npos);
    REQUIRE(diversity.find("beta") != std::string::npos);
    REQUIRE(diversity.find("div_sq_l2_users_fullgrad") != std::string::npos);

    // Cardinality: header + runs x rounds x 16 variants.
    const auto alpha = load_run_dir((tmp.path / "runs" / "alpha").string());
    const auto beta = load_run_dir((tmp.path / "runs" / "beta").string());
    const std::size_t expected = 1 + 16 * (alpha.rounds.size() + beta.rounds.size());
    REQUIRE(static_cast<std::size_t>(std::count(diversity.begin(), diversity.end(), '\n')) == expected);

    const std::string losses = slurp(report_dir / "losses.csv");
    REQUIRE(static_cast<std::size_t>(std::count(losses.begin(), losses.end(), '\n')) ==
            1 + 3 * (alpha.rounds.size() + beta.rounds.size()));
}

TEST_CASE("corrupt or empty run data exits 5 naming the line") {
    TempDir tmp;
    const auto run_dir = tmp.path / "broken";
    fs::create_directories(run_dir);
    {
        std::ofstream out(run_dir / "rounds.jsonl");
        out << "{\"round\": 0}\nnot json at all\n";
    }
    REQUIRE(run_cli("report " + run_dir.string() + " --out " + (tmp.path / "rep").string()) == 5);
    try {
        load_run_dir(run_dir.string());
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        REQUIRE(std::string(e.what()).find(":2") != std::string::npos);
    }

    const auto empty_dir = tmp.path / "empty";
    fs::create_directories(empty_dir);
    REQUIRE(run_cli("report " + empty_dir.string() + " --out " + (tmp.path / "rep2").string()) == 5);
}
