// Run configuration: one JSON file, unknown keys rejected.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "qjfuse/data.hpp"
#include "qjfuse/model.hpp"
#include "qjfuse/train.hpp"

namespace qjfuse::config {

struct DatasetConfig {
    // Either synthetic generation or a feature file + manifest.
    std::optional<data::SyntheticSpec> synthetic;
    std::string path;     // JSONL features
    std::string manifest; // sidecar JSON
    double train_ratio = 0.8, val_ratio = 0.1, test_ratio = 0.1;
};

struct EvalConfig {
    std::vector<double> mask_rates = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
    int mask_seeds = 5;
    std::vector<int> binned_accs;
};

struct RunConfig {
    DatasetConfig dataset;
    model::ModelConfig model;
    train::TrainConfig train;
    EvalConfig eval;
};

RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const std::string& json_text);

// Loads (or generates) the dataset this config names and fills in the
// model's modality/feature-dim fields.
data::Dataset materialize_dataset(RunConfig& cfg);

} // namespace qjfuse::config
