// qjfuse command-line interface.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qjfuse/commands.hpp"
#include "qjfuse/errors.hpp"

int main(int argc, char** argv) {
    CLI::App app{"quantum-jump multimodal fusion pipeline"};
    app.require_subcommand(1);

    qjfuse::cli::CommonArgs common;
    uint64_t seed_value = 0;
    bool seed_given = false;

    auto add_common = [&](CLI::App* sub, bool needs_config = true) {
        auto* copt = sub->add_option("--config", common.config_path, "JSON run configuration");
        if (needs_config) copt->required();
        sub->add_option("--out", common.out_dir, "output directory");
        sub->add_option("--seed", seed_value, "seed override")->each([&](const std::string&) {
            seed_given = true;
        });
        sub->add_flag("--entropy-bits", common.entropy_bits, "report entropy in bits");
        sub->add_flag("--quiet", common.quiet, "suppress progress output");
    };

    auto* train = app.add_subcommand("train", "train a model and save the best checkpoint");
    add_common(train);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint across masking rates");
    add_common(eval);
    std::string checkpoint;
    std::vector<double> mask_rates;
    eval->add_option("--checkpoint", checkpoint, "checkpoint path (default <out>/checkpoint.qjf)");
    eval->add_option("--mask-rates", mask_rates, "masking rates to evaluate")->delimiter(',');

    auto* entropy = app.add_subcommand("entropy-report", "per-time-step entanglement report");
    add_common(entropy);
    std::string entropy_ckpt;
    entropy->add_option("--checkpoint", entropy_ckpt, "checkpoint path");

    auto* ablate = app.add_subcommand("ablate", "train and compare model variants");
    add_common(ablate);
    std::vector<std::string> variants;
    ablate->add_option("--variant", variants, "variants (full, no_qj, unitary_only, dm_concat, dm_add, single:<mod>)")
        ->required();

    auto* gradcheck = app.add_subcommand("grad-check", "finite-difference gradient audit");
    add_common(gradcheck);

    auto* tv = app.add_subcommand("trajectory-validate",
                                  "compare trajectory averages against the master equation");
    qjfuse::cli::TrajectoryValidateArgs tva;
    tv->add_option("--system", tva.system, "amplitude_damping or dephasing");
    tv->add_option("--n-traj", tva.n_traj, "trajectory count");
    tv->add_option("--dt", tva.dt, "time step");
    tv->add_option("--steps", tva.steps, "step count");
    tv->add_option("--gamma", tva.gamma, "channel rate");
    tv->add_option("--seed", tva.seed, "trajectory seed");
    tv->add_option("--out", tva.out_dir, "optional output directory");
    tv->add_flag("--quiet", tva.quiet, "suppress output");

    CLI11_PARSE(app, argc, argv);
    if (seed_given) common.seed = seed_value;

    try {
        if (train->parsed()) return qjfuse::cli::cmd_train(common);
        if (eval->parsed()) return qjfuse::cli::cmd_eval(common, checkpoint, mask_rates);
        if (entropy->parsed()) return qjfuse::cli::cmd_entropy_report(common, entropy_ckpt);
        if (ablate->parsed()) return qjfuse::cli::cmd_ablate(common, variants);
        if (gradcheck->parsed()) return qjfuse::cli::cmd_grad_check(common);
        if (tv->parsed()) return qjfuse::cli::cmd_trajectory_validate(tva);
    } catch (const qjfuse::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const qjfuse::DataError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const qjfuse::Error& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return 2;
}
