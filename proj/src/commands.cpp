#include "qjfuse/commands.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "qjfuse/errors.hpp"
#include "qjfuse/qjump.hpp"
#include "qjfuse/quantum.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace qjfuse::cli {

using nlohmann::json;
namespace fs = std::filesystem;

void apply_thread_cap() {
#ifdef _OPENMP
    if (const char* env = std::getenv("QJFUSE_THREADS")) {
        const int cap = std::atoi(env);
        if (cap > 0) omp_set_num_threads(std::min(cap, omp_get_max_threads()));
    }
#endif
}

namespace {

config::RunConfig load_config_with_seed(const CommonArgs& args) {
    config::RunConfig cfg = config::load_run_config(args.config_path);
    if (args.seed) cfg.train.seed = *args.seed;
    return cfg;
}

json metrics_to_json(const train::Metrics& m) {
    json j;
    j["accuracy"] = m.accuracy;
    j["f1_weighted"] = m.f1_weighted;
    j["mae"] = m.mae;
    j["corr"] = m.corr;
    j["task_loss"] = m.task_loss;
    j["count"] = m.count;
    for (const auto& [k, v] : m.extra) j[k] = v;
    return j;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path);
    os << text;
}

std::string format_csv_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

} // namespace

int cmd_train(const CommonArgs& args) {
    apply_thread_cap();
    config::RunConfig cfg = load_config_with_seed(args);
    data::Dataset ds = config::materialize_dataset(cfg);
    fs::create_directories(args.out_dir);

    model::FusionModel m(cfg.model);
    m.init_params(cfg.train.seed);
    cfg.train.verbose = !args.quiet;

    train::TrainResult res;
    try {
        res = train::train_model(m, ds, cfg.train);
    } catch (const NonFiniteError& e) {
        json diag;
        diag["error"] = e.what();
        write_text(args.out_dir + "/diagnostic.json", diag.dump(2) + "\n");
        std::cerr << "train aborted: " << e.what() << "\n";
        return 1;
    }

    m.save_checkpoint(args.out_dir + "/checkpoint.qjf", cfg.train.seed);

    json out;
    out["seed"] = cfg.train.seed;
    out["best_epoch"] = res.best_epoch;
    out["best_val_loss"] = res.best_val_loss;
    out["epochs_run"] = res.curve.size();
    out["test"] = metrics_to_json(res.test_metrics);
    out["test_mean_entropy"] = res.test_eval.mean_final_entropy;
    out["variant"] = model::variant_to_string(cfg.model.variant);
    write_text(args.out_dir + "/metrics.json", out.dump(2) + "\n");

    std::string curves = "epoch,train_total,train_task,train_con,val_task,val_acc,alpha,beta,jumps\n";
    for (const auto& st : res.curve) {
        curves += std::to_string(st.epoch) + "," + format_csv_double(st.train_total) + "," +
                  format_csv_double(st.train_task) + "," + format_csv_double(st.train_con) +
                  "," + format_csv_double(st.val_task) + "," +
                  format_csv_double(st.val_accuracy) + "," + format_csv_double(st.alpha) +
                  "," + format_csv_double(st.beta) + "," + std::to_string(st.jumps) + "\n";
    }
    write_text(args.out_dir + "/curves.csv", curves);

    std::string report;
    report += "# Training report\n\n";
    report += "- variant: " + model::variant_to_string(cfg.model.variant) + "\n";
    report += "- seed: " + std::to_string(cfg.train.seed) + "\n";
    report += "- epochs run: " + std::to_string(res.curve.size()) + "\n";
    report += "- best epoch: " + std::to_string(res.best_epoch) + "\n";
    report += "- test accuracy: " + format_csv_double(res.test_metrics.accuracy) + "\n";
    report += "- test weighted F1: " + format_csv_double(res.test_metrics.f1_weighted) + "\n";
    report += "- test MAE: " + format_csv_double(res.test_metrics.mae) + "\n";
    report += "- test Pearson corr: " + format_csv_double(res.test_metrics.corr) + "\n";
    report += "- mean final entanglement entropy (nats): " +
              format_csv_double(res.test_eval.mean_final_entropy) + "\n";
    write_text(args.out_dir + "/report.md", report);

    if (!args.quiet)
        std::cout << "test accuracy " << res.test_metrics.accuracy << ", metrics in "
                  << args.out_dir << "/metrics.json\n";
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint,
             const std::vector<double>& mask_rates_override) {
    apply_thread_cap();
    config::RunConfig cfg = load_config_with_seed(args);
    data::Dataset ds = config::materialize_dataset(cfg);
    fs::create_directories(args.out_dir);

    const std::string ckpt = checkpoint.empty() ? args.out_dir + "/checkpoint.qjf" : checkpoint;
    model::FusionModel m = model::FusionModel::load_checkpoint(ckpt);
    if (m.config().classes != cfg.model.classes)
        throw ConfigError("checkpoint classes do not match dataset");
    for (const auto& [name, dim] : cfg.model.feature_dims) {
        auto it = m.config().feature_dims.find(name);
        if (it == m.config().feature_dims.end() || it->second != dim)
            throw ConfigError("checkpoint feature dims do not match dataset modality '" + name +
                              "'");
    }

    auto splits = data::split_dataset(ds, cfg.train.train_ratio, cfg.train.val_ratio,
                                      cfg.train.test_ratio, cfg.train.seed);
    const std::vector<double>& rates =
        mask_rates_override.empty() ? cfg.eval.mask_rates : mask_rates_override;

    train::MaskTable table =
        train::masking_table(m, ds, splits.test, cfg.train.seed, cfg.train.batch_size, rates,
                             cfg.eval.mask_seeds, cfg.eval.binned_accs, cfg.train.parallel);

    std::string csv = "rate,accuracy,f1_weighted,mae,corr,task_loss\n";
    for (const auto& row : table.rows)
        csv += format_csv_double(row.rate) + "," + format_csv_double(row.metrics.accuracy) +
               "," + format_csv_double(row.metrics.f1_weighted) + "," +
               format_csv_double(row.metrics.mae) + "," + format_csv_double(row.metrics.corr) +
               "," + format_csv_double(row.metrics.task_loss) + "\n";
    csv += "avg_drop_rate_pct," + format_csv_double(table.avg_drop_rate_pct["accuracy"]) + "," +
           format_csv_double(table.avg_drop_rate_pct["f1_weighted"]) + ",," +
           format_csv_double(table.avg_drop_rate_pct["corr"]) + ",\n";
    write_text(args.out_dir + "/eval.csv", csv);

    json out;
    json rows = json::array();
    for (const auto& row : table.rows) {
        json r;
        r["rate"] = row.rate;
        r["metrics"] = metrics_to_json(row.metrics);
        rows.push_back(std::move(r));
    }
    out["rows"] = std::move(rows);
    out["avg_drop_rate_pct"] = table.avg_drop_rate_pct;
    write_text(args.out_dir + "/metrics.json", out.dump(2) + "\n");

    if (!args.quiet) std::cout << "eval table in " << args.out_dir << "/eval.csv\n";
    return 0;
}

int cmd_entropy_report(const CommonArgs& args, const std::string& checkpoint) {
    apply_thread_cap();
    config::RunConfig cfg = load_config_with_seed(args);
    data::Dataset ds = config::materialize_dataset(cfg);
    fs::create_directories(args.out_dir);

    const std::string ckpt = checkpoint.empty() ? args.out_dir + "/checkpoint.qjf" : checkpoint;
    model::FusionModel m = model::FusionModel::load_checkpoint(ckpt);

    auto splits = data::split_dataset(ds, cfg.train.train_ratio, cfg.train.val_ratio,
                                      cfg.train.test_ratio, cfg.train.seed);
    auto rows = train::entropy_report(m, ds, splits.test, cfg.train.seed,
                                      cfg.train.batch_size, cfg.train.parallel);

    const double unit = args.entropy_bits ? 1.0 / std::log(2.0) : 1.0;
    std::string csv = "step,mean_entropy,mean_jump_rate,accuracy_truncated\n";
    for (const auto& r : rows)
        csv += std::to_string(r.step) + "," + format_csv_double(r.mean_entropy * unit) + "," +
               format_csv_double(r.jump_rate) + "," +
               format_csv_double(r.accuracy_truncated) + "\n";
    write_text(args.out_dir + "/entropy_report.csv", csv);
    if (!args.quiet) std::cout << "entropy report in " << args.out_dir << "/entropy_report.csv\n";
    return 0;
}

int cmd_ablate(const CommonArgs& args, const std::vector<std::string>& variants) {
    apply_thread_cap();
    if (variants.empty()) throw ConfigError("ablate: at least one --variant required");
    config::RunConfig base = load_config_with_seed(args);
    data::Dataset ds = config::materialize_dataset(base);
    fs::create_directories(args.out_dir);

    std::string csv = "variant,accuracy,f1_weighted,mae,corr,mean_entropy,jumps,epochs\n";
    std::string md = "# Ablation comparison\n\n| variant | accuracy | F1 | MAE | corr | mean entropy | jumps |\n"
                     "|---|---|---|---|---|---|---|\n";
    for (const std::string& vs : variants) {
        config::RunConfig cfg = base;
        cfg.model.variant = model::variant_from_string(vs);
        if (cfg.model.variant == model::Variant::SingleModality)
            cfg.model.single_modality = vs.substr(7);
        model::FusionModel m(cfg.model);
        m.init_params(cfg.train.seed);
        train::TrainResult res = train::train_model(m, ds, cfg.train);
        csv += vs + "," + format_csv_double(res.test_metrics.accuracy) + "," +
               format_csv_double(res.test_metrics.f1_weighted) + "," +
               format_csv_double(res.test_metrics.mae) + "," +
               format_csv_double(res.test_metrics.corr) + "," +
               format_csv_double(res.test_eval.mean_final_entropy) + "," +
               std::to_string(res.test_eval.jumps) + "," + std::to_string(res.curve.size()) +
               "\n";
        md += "| " + vs + " | " + format_csv_double(res.test_metrics.accuracy) + " | " +
              format_csv_double(res.test_metrics.f1_weighted) + " | " +
              format_csv_double(res.test_metrics.mae) + " | " +
              format_csv_double(res.test_metrics.corr) + " | " +
              format_csv_double(res.test_eval.mean_final_entropy) + " | " +
              std::to_string(res.test_eval.jumps) + " |\n";
        if (!args.quiet)
            std::cout << vs << ": accuracy " << res.test_metrics.accuracy << "\n";
    }
    write_text(args.out_dir + "/ablate.csv", csv);
    write_text(args.out_dir + "/ablate.md", md);
    return 0;
}

int cmd_grad_check(const CommonArgs& args) {
    apply_thread_cap();
    config::RunConfig cfg = load_config_with_seed(args);
    if (cfg.model.state_dim > 4 || cfg.model.channels > 2 || cfg.model.time_steps > 3)
        throw ConfigError("grad-check requires a tiny model (state_dim <= 4, channels <= 2, "
                          "time_steps <= 3)");
    data::Dataset ds = config::materialize_dataset(cfg);

    model::FusionModel m(cfg.model);
    m.init_params(cfg.train.seed);

    std::vector<int64_t> batch;
    for (int64_t i = 0; i < std::min<int64_t>(2, ds.size()); ++i) batch.push_back(i);

    // Freeze the sampled branches so the graph stays fixed under perturbation.
    std::vector<model::BranchPlan> plans(batch.size());
    {
        model::BatchOptions bo;
        bo.train = true;
        bo.compute_grad = false;
        bo.captured_branches = &plans;
        bo.parallel = false;
        m.run_batch(ds, batch, cfg.train.seed, bo);
    }

    auto loss_fn = [&]() {
        model::BatchOptions bo;
        bo.train = true;
        bo.compute_grad = false;
        bo.forced_branches = &plans;
        bo.parallel = false;
        return m.run_batch(ds, batch, cfg.train.seed, bo).total_loss;
    };
    auto grad_fn = [&]() {
        model::BatchOptions bo;
        bo.train = true;
        bo.compute_grad = true;
        bo.forced_branches = &plans;
        bo.parallel = false;
        m.params().zero_grad();
        m.run_batch(ds, batch, cfg.train.seed, bo);
        return m.params().grads_by_array();
    };

    ad::GradCheckReport report =
        ad::grad_check(m.params(), loss_fn, grad_fn, 1e-4, 1e-4, 24, cfg.train.seed);
    for (const auto& g : report.groups)
        std::cout << (g.pass ? "[pass] " : "[FAIL] ") << g.name << "  max rel err "
                  << g.max_rel_err << "  (" << g.checked << " coords)\n";
    std::cout << (report.pass ? "gradient check passed" : "gradient check FAILED") << "\n";
    return report.pass ? 0 : 1;
}

int cmd_trajectory_validate(const TrajectoryValidateArgs& args) {
    apply_thread_cap();
    using lin::CMat;
    using lin::CVec;
    using lin::cplx;

    CMat h(2, 2); // free evolution off; dissipation only
    std::vector<CMat> ls;
    CVec psi0(2);
    if (args.system == "amplitude_damping") {
        CMat l(2, 2);
        l.at(0, 1) = 1.0; // lowering operator |g><e|
        ls.push_back(l);
        psi0[1] = 1.0; // start excited
    } else if (args.system == "dephasing") {
        CMat l(2, 2);
        l.at(0, 0) = 1.0;
        l.at(1, 1) = -1.0; // sigma_z
        ls.push_back(l);
        psi0[0] = psi0[1] = 1.0 / std::sqrt(2.0);
    } else {
        throw ConfigError("system must be amplitude_damping or dephasing");
    }
    std::vector<double> gammas{args.gamma};

    qjump::TrajectoryConfig tcfg;
    tcfg.dt = args.dt;
    tcfg.steps = args.steps;
    tcfg.seed = args.seed;
    auto avg = qjump::trajectory_average_density(h, ls, gammas, psi0, tcfg, args.n_traj,
                                                 qjump::Convention::Standard, true);

    // Reference: RK4 master-equation integration on the same grid.
    CMat rho = lin::outer(psi0, psi0);
    std::vector<CMat> reference{rho};
    for (int s = 0; s < args.steps; ++s) {
        rho = qjump::master_equation_step(rho, h, ls, gammas, args.dt);
        reference.push_back(rho);
    }

    bool pass = true;
    double worst_dev = 0.0, worst_bound = 0.0;
    int worst_step = 0;
    for (int s = 0; s <= args.steps; ++s) {
        const CMat& mc = avg.per_step[static_cast<size_t>(s)];
        const CMat& ref = reference[static_cast<size_t>(s)];
        // Monte Carlo uncertainty for the monitored entry.
        double dev, sigma;
        if (args.system == "amplitude_damping") {
            const double p = ref.at(1, 1).real();
            dev = std::fabs(mc.at(1, 1).real() - p);
            sigma = std::sqrt(std::max(p * (1.0 - p), 1e-12) /
                              static_cast<double>(args.n_traj));
        } else {
            const double x = ref.at(0, 1).real(); // coherence, per-trajectory +-1/2
            dev = std::fabs(mc.at(0, 1).real() - x);
            sigma = std::sqrt(std::max(0.25 - x * x, 1e-12) / static_cast<double>(args.n_traj));
        }
        const double bound = 3.0 * sigma + 1e-9;
        if (dev > worst_dev) {
            worst_dev = dev;
            worst_bound = bound;
            worst_step = s;
        }
        if (dev > bound) pass = false;
    }

    double closed_form_dev = 0.0;
    const double t_final = args.dt * args.steps;
    if (args.system == "amplitude_damping") {
        const double exact = std::exp(-args.gamma * t_final);
        closed_form_dev = std::fabs(avg.rho.at(1, 1).real() - exact);
    } else {
        const double exact = 0.5 * std::exp(-2.0 * args.gamma * t_final);
        closed_form_dev = std::fabs(avg.rho.at(0, 1).real() - exact);
    }

    if (!args.quiet) {
        std::cout << "system " << args.system << ", n_traj " << args.n_traj << ", dt "
                  << args.dt << ", steps " << args.steps << "\n";
        std::cout << "worst |mc - rk4| " << worst_dev << " at step " << worst_step
                  << " (3-sigma bound " << worst_bound << ")\n";
        std::cout << "final closed-form deviation " << closed_form_dev << "\n";
        std::cout << "jumps " << avg.jumps << ", clamped steps " << avg.clamped_steps << "\n";
        std::cout << (pass ? "PASS" : "FAIL") << "\n";
    }

    if (!args.out_dir.empty()) {
        fs::create_directories(args.out_dir);
        json rep;
        rep["system"] = args.system;
        rep["n_traj"] = args.n_traj;
        rep["dt"] = args.dt;
        rep["steps"] = args.steps;
        rep["worst_deviation"] = worst_dev;
        rep["worst_step"] = worst_step;
        rep["closed_form_deviation"] = closed_form_dev;
        rep["pass"] = pass;
        write_text(args.out_dir + "/validate_report.json", rep.dump(2) + "\n");
    }
    return pass ? 0 : 1;
}

} // namespace qjfuse::cli
