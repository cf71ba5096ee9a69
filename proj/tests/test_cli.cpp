#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "qjfuse/commands.hpp"
#include "qjfuse/config.hpp"

using namespace qjfuse;
namespace fs = std::filesystem;

namespace {

struct TempRun {
    fs::path dir;
    TempRun() {
        dir = fs::temp_directory_path() / ("qjfuse_cli_" + std::to_string(::getpid()) + "_" +
                                           std::to_string(reinterpret_cast<uintptr_t>(this)));
        fs::create_directories(dir);
    }
    ~TempRun() { fs::remove_all(dir); }
    std::string write(const std::string& name, const std::string& text) const {
        const std::string p = (dir / name).string();
        std::ofstream(p) << text;
        return p;
    }
    std::string read(const std::string& name) const {
        std::ifstream is(dir / name);
        std::stringstream ss;
        ss << is.rdbuf();
        return ss.str();
    }
};

const char* kTinyConfig = R"({
  "dataset": {"synthetic": {"kind": "marginal", "n": 50, "dim": 8, "noise": 0.2, "seed": 4}},
  "model": {"state_dim": 4, "channels": 2, "measurements": 8, "time_steps": 3, "hidden": 8,
             "dropout": 0.0},
  "train": {"batch_size": 16, "epochs": 2, "patience": 2, "seed": 7,
             "learning_rates": {"default": 0.002}}
})";

} // namespace

TEST_CASE("config parsing rejects unknown keys and bad values") {
    CHECK_THROWS_AS(config::parse_run_config(R"({"dataste": {}})"), ConfigError);
    CHECK_THROWS_AS(config::parse_run_config(R"({"dataset": {"synthetic": {"kind": "nope"}}})"),
                    ConfigError);
    CHECK_THROWS_AS(
        config::parse_run_config(
            R"({"dataset": {"synthetic": {}}, "model": {"state_dim": 4, "typo": 1}})"),
        ConfigError);
    CHECK_THROWS_AS(
        config::parse_run_config(
            R"({"dataset": {"synthetic": {}}, "train": {"learning_rates": {"default": -1}}})"),
        ConfigError);
    CHECK_THROWS_AS(config::parse_run_config("not json"), ConfigError);

    auto cfg = config::parse_run_config(kTinyConfig);
    CHECK(cfg.model.state_dim == 4);
    CHECK(cfg.train.batch_size == 16);
    CHECK(cfg.eval.mask_rates.size() == 6);
}

TEST_CASE("entropy report: row count, step zero, and the no-jump baseline") {
    TempRun tmp;
    const std::string cfg_path = tmp.write("config.json", kTinyConfig);

    cli::CommonArgs args;
    args.config_path = cfg_path;
    args.out_dir = (tmp.dir / "run").string();
    args.quiet = true;
    REQUIRE(cli::cmd_train(args) == 0);

    REQUIRE(cli::cmd_entropy_report(args, "") == 0);
    std::istringstream is(tmp.read("run/entropy_report.csv"));
    std::string line;
    std::getline(is, line);
    CHECK(line == "step,mean_entropy,mean_jump_rate,accuracy_truncated");
    std::vector<std::vector<std::string>> rows;
    while (std::getline(is, line)) {
        std::vector<std::string> cells;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    REQUIRE(rows.size() == 4); // steps 0..3
    CHECK(rows[0][0] == "0");
    CHECK(std::stod(rows[0][1]) < 1e-9);  // product states before evolution
    CHECK(std::stod(rows[0][2]) == 0.0);  // no jumps at step zero

    // A no-jump variant reports an all-zero entropy column.
    std::string noqj_cfg = kTinyConfig;
    noqj_cfg.replace(noqj_cfg.find("\"dropout\": 0.0"), 14,
                     "\"dropout\": 0.0, \"variant\": \"no_qj\"");
    const std::string cfg2 = tmp.write("config2.json", noqj_cfg);
    cli::CommonArgs args2;
    args2.config_path = cfg2;
    args2.out_dir = (tmp.dir / "run2").string();
    args2.quiet = true;
    REQUIRE(cli::cmd_train(args2) == 0);
    REQUIRE(cli::cmd_entropy_report(args2, "") == 0);
    std::istringstream is2(tmp.read("run2/entropy_report.csv"));
    std::getline(is2, line);
    while (std::getline(is2, line)) {
        const auto comma = line.find(',');
        const auto comma2 = line.find(',', comma + 1);
        CHECK(std::stod(line.substr(comma + 1, comma2 - comma - 1)) < 1e-9);
    }
}

TEST_CASE("grad-check command passes on a tiny config and lists groups") {
    TempRun tmp;
    const std::string cfg_path = tmp.write("config.json", kTinyConfig);
    cli::CommonArgs args;
    args.config_path = cfg_path;
    args.out_dir = (tmp.dir / "gc").string();
    args.quiet = true;
    CHECK(cli::cmd_grad_check(args) == 0);

    // Oversized models are rejected before any work happens.
    std::string big = kTinyConfig;
    big.replace(big.find("\"state_dim\": 4"), 14, "\"state_dim\": 10");
    const std::string big_path = tmp.write("big.json", big);
    cli::CommonArgs bad;
    bad.config_path = big_path;
    CHECK_THROWS_AS(cli::cmd_grad_check(bad), ConfigError);
}

TEST_CASE("trajectory-validate runs both reference systems") {
    cli::TrajectoryValidateArgs args;
    args.n_traj = 2000;
    args.dt = 0.02;
    args.steps = 50;
    args.seed = 10;
    args.quiet = true;

    args.system = "amplitude_damping";
    CHECK(cli::cmd_trajectory_validate(args) == 0);
    args.system = "dephasing";
    CHECK(cli::cmd_trajectory_validate(args) == 0);
    args.system = "other";
    CHECK_THROWS_AS(cli::cmd_trajectory_validate(args), ConfigError);
}

TEST_CASE("a diverging run aborts with a diagnostic instead of silent garbage") {
    TempRun tmp;
    // An absurd learning rate overflows the parameters within a few steps.
    std::string cfg = kTinyConfig;
    cfg.replace(cfg.find("\"default\": 0.002"), 16, "\"default\": 1e9");
    const std::string cfg_path = tmp.write("config.json", cfg);
    cli::CommonArgs args;
    args.config_path = cfg_path;
    args.out_dir = (tmp.dir / "bad").string();
    args.quiet = true;
    CHECK(cli::cmd_train(args) == 1);
    const std::string diag = tmp.read("bad/diagnostic.json");
    CHECK(diag.find("non-finite") != std::string::npos);
    CHECK(diag.find("batch") != std::string::npos);
}

TEST_CASE("ablate command writes the comparison table") {
    TempRun tmp;
    const std::string cfg_path = tmp.write("config.json", kTinyConfig);
    cli::CommonArgs args;
    args.config_path = cfg_path;
    args.out_dir = (tmp.dir / "ab").string();
    args.quiet = true;
    REQUIRE(cli::cmd_ablate(args, {"full", "no_qj", "unitary_only"}) == 0);
    const std::string csv = tmp.read("ab/ablate.csv");
    CHECK(csv.find("full,") != std::string::npos);
    CHECK(csv.find("no_qj,") != std::string::npos);
    CHECK(csv.find("unitary_only,") != std::string::npos);
    const std::string md = tmp.read("ab/ablate.md");
    CHECK(md.find("| full |") != std::string::npos);
}
