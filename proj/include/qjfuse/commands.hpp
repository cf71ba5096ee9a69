// Command implementations shared by the CLI binary and the test suites.
// Each returns a process exit code: 0 success, 1 validation failure,
// 2 configuration error.

#pragma once

#include <string>
#include <vector>

#include "qjfuse/config.hpp"

namespace qjfuse::cli {

// Caps OpenMP parallelism from the QJFUSE_THREADS environment variable.
void apply_thread_cap();

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::optional<uint64_t> seed; // overrides train.seed
    bool entropy_bits = false;
    bool quiet = false;
};

int cmd_train(const CommonArgs& args);
int cmd_eval(const CommonArgs& args, const std::string& checkpoint,
             const std::vector<double>& mask_rates_override = {});
int cmd_entropy_report(const CommonArgs& args, const std::string& checkpoint);
int cmd_ablate(const CommonArgs& args, const std::vector<std::string>& variants);
int cmd_grad_check(const CommonArgs& args);

struct TrajectoryValidateArgs {
    std::string system = "amplitude_damping"; // or "dephasing"
    int64_t n_traj = 10000;
    double dt = 0.01;
    int steps = 100;
    double gamma = 1.0;
    uint64_t seed = 1;
    std::string out_dir; // optional: records.csv + report
    bool quiet = false;
};
int cmd_trajectory_validate(const TrajectoryValidateArgs& args);

} // namespace qjfuse::cli
