// Optimization loop, evaluation metrics, masking robustness tables and the
// per-step entropy report.

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qjfuse/data.hpp"
#include "qjfuse/model.hpp"
#include "qjfuse/params.hpp"

namespace qjfuse::train {

struct OptimizerConfig {
    std::map<std::string, double> learning_rates; // group -> lr, "default" fallback
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 5e-3;
};

// Adam moments with decoupled weight decay and per-group learning rates.
class AdamW {
public:
    AdamW(ad::ParamStore& params, OptimizerConfig cfg);
    void step();
    int64_t steps_taken() const { return t_; }
    double rate_for_group(const std::string& group) const;

private:
    ad::ParamStore& params_;
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;
};

struct Metrics {
    double accuracy = 0.0; // argmax accuracy over the configured classes
    double f1_weighted = 0.0;
    double mae = 0.0;
    double corr = 0.0;
    double task_loss = 0.0;
    std::map<std::string, double> extra; // binned accuracies etc.
    int64_t count = 0;
};

// Aggregates per-sample outputs against labels/scores.
Metrics compute_metrics(const std::vector<std::vector<double>>& probs,
                        const std::vector<int>& labels,
                        const std::vector<std::optional<double>>& scores,
                        const std::vector<double>& score_centers,
                        const std::vector<int>& binned_accs);

struct EvalResult {
    Metrics metrics;
    std::vector<model::SampleOutput> outputs;
    double mean_final_entropy = 0.0;
    int64_t jumps = 0;
    int64_t substituted = 0;
};

EvalResult evaluate(model::FusionModel& m, const data::Dataset& ds,
                    const std::vector<int64_t>& indices, uint64_t seed,
                    int64_t batch_size, const std::vector<int>& binned_accs = {},
                    bool record_entropy = false, bool capture_steps = false,
                    bool parallel = true);

struct TrainConfig {
    int64_t batch_size = 32;
    int epochs = 50;
    int patience = 5;
    double min_delta = 1e-4;
    double train_ratio = 0.8, val_ratio = 0.1, test_ratio = 0.1;
    uint64_t seed = 1;
    OptimizerConfig optimizer;
    std::vector<int> binned_accs;
    bool parallel = true;
    bool verbose = false; // per-epoch progress on stdout
};

struct EpochStats {
    int epoch = 0;
    double train_total = 0.0, train_task = 0.0, train_con = 0.0;
    double val_task = 0.0;
    double val_accuracy = 0.0;
    double alpha = 0.0, beta = 0.0;
    int64_t jumps = 0;
};

struct TrainResult {
    std::vector<EpochStats> curve;
    int best_epoch = -1;
    double best_val_loss = 0.0;
    Metrics test_metrics;
    EvalResult test_eval;
    data::Splits splits;
};

// Full run: split, optimize with early stopping on validation task loss,
// restore the best parameters, evaluate on the test split.
TrainResult train_model(model::FusionModel& m, const data::Dataset& ds,
                        const TrainConfig& cfg);

// Per-time-step aggregate over an evaluation set.
struct StepReportRow {
    int step = 0;
    double mean_entropy = 0.0;
    double jump_rate = 0.0;           // fraction of (sample, pair) jumps
    double accuracy_truncated = 0.0;  // head re-run on step-t states
};
std::vector<StepReportRow> entropy_report(model::FusionModel& m, const data::Dataset& ds,
                                          const std::vector<int64_t>& indices, uint64_t seed,
                                          int64_t batch_size, bool parallel = true);

// Masking robustness: metrics at each rate, rates > 0 averaged over
// `mask_seeds` seeds.
struct MaskTableRow {
    double rate = 0.0;
    Metrics metrics;
};
struct MaskTable {
    std::vector<MaskTableRow> rows;
    std::map<std::string, double> avg_drop_rate_pct; // higher-is-better metrics
};
MaskTable masking_table(model::FusionModel& m, const data::Dataset& ds,
                        const std::vector<int64_t>& indices, uint64_t seed,
                        int64_t batch_size, const std::vector<double>& rates,
                        int mask_seeds, const std::vector<int>& binned_accs = {},
                        bool parallel = true);

} // namespace qjfuse::train
