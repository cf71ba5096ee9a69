// Synthetic multimodal dataset generation, JSONL feature ingestion,
// deterministic splits/batches and the feature-masking protocol.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace qjfuse::data {

struct SampleRecord {
    std::string id;
    std::map<std::string, std::vector<double>> features; // modality -> vector
    int label = 0;
    std::optional<double> score; // continuous target in [-3, 3] when present
};

enum class Coupling { Marginal, XorJoint };

struct SyntheticSpec {
    int64_t n_samples = 1000;
    std::vector<std::string> modalities = {"text", "video", "audio"};
    int64_t dim = 32;       // per-modality feature width
    Coupling coupling = Coupling::XorJoint;
    double noise = 0.3;
    uint64_t seed = 7;
};

struct DatasetManifest {
    std::vector<std::pair<std::string, int64_t>> modalities; // name, dim
    int classes = 2;
    int64_t count = 0;
    std::string format = "qjd1";
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<SampleRecord> records;

    int64_t size() const { return static_cast<int64_t>(records.size()); }
};

// Hidden generative state exposed so tests can evaluate the exact classifier.
struct SyntheticGround {
    std::vector<std::vector<double>> directions; // per modality, unit vectors
    std::vector<std::pair<int, int>> bits;       // latent bits per sample
};

Dataset generate_synthetic(const SyntheticSpec& spec, SyntheticGround* ground = nullptr);

// Closed-form optimal decision rule evaluated on the generative model.
double bayes_oracle_accuracy(const Dataset& ds, const SyntheticSpec& spec,
                             const SyntheticGround& ground);

// JSON Lines: {"id","label","score","features":{mod:[...]}} per line.
void save_jsonl(const Dataset& ds, const std::string& path);
void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);
Dataset load_jsonl(const std::string& path, const DatasetManifest& manifest);

// Zeroes a uniformly chosen floor(p * d_m) subset of entries per record and
// modality.  Deterministic under (seed, record index, modality).
Dataset mask_features(const Dataset& ds, double rate, uint64_t seed);

struct Splits {
    std::vector<int64_t> train, val, test;
};

// Deterministic shuffled split by ratios (must sum to 1).
Splits split_dataset(const Dataset& ds, double train_ratio, double val_ratio,
                     double test_ratio, uint64_t seed);

// Batch index lists for one epoch; training epochs reshuffle under seeds
// derived from (seed, epoch).  The final partial batch is kept.
std::vector<std::vector<int64_t>> make_batches(const std::vector<int64_t>& indices,
                                               int64_t batch_size, uint64_t seed,
                                               int64_t epoch, bool shuffle);

} // namespace qjfuse::data
