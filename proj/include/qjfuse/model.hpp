// End-to-end fusion pipeline: modality adapters encode features as unit
// complex states, cyclic pairing forms product states, stochastic
// dissipative evolution entangles them, a trainable measurement bank
// extracts probabilities, and a small head predicts the class.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qjfuse/autodiff.hpp"
#include "qjfuse/data.hpp"
#include "qjfuse/losses.hpp"
#include "qjfuse/params.hpp"
#include "qjfuse/qjump.hpp"

namespace qjfuse::model {

enum class Variant { Full, NoQj, UnitaryOnly, DmConcat, DmAdd, SingleModality };

Variant variant_from_string(const std::string& s);
std::string variant_to_string(Variant v);

struct ModelConfig {
    int64_t state_dim = 10;   // per-modality amplitude dimension
    int64_t channels = 4;     // collapse channels
    int64_t measurements = 32;
    int classes = 2;
    int time_steps = 20;
    double dt = 0.1;
    qjump::Convention convention = qjump::Convention::Paper;
    int64_t hidden = 0;       // classifier hidden width; 0 means `measurements`
    Variant variant = Variant::Full;
    std::string single_modality;     // used when variant == SingleModality
    bool shared_generators = true;   // one generator set for all pairs
    double dropout = 0.1;
    double temperature = 0.07;
    bool contrastive = true;
    std::vector<std::string> modalities;        // order defines the pairing cycle
    std::map<std::string, int64_t> feature_dims;

    // Initialization scales.
    double init_hamiltonian = 0.05;
    double init_lindblad = 0.35;
    double init_rate = 0.55;
    double init_bias = 0.02;

    int64_t joint_dim() const { return state_dim * state_dim; }
    int64_t hidden_width() const { return hidden > 0 ? hidden : measurements; }
    int64_t num_pairs() const;
    std::vector<std::string> active_modalities() const;
    void validate() const;
};

// Per-sample forward diagnostics.
struct SampleOutput {
    std::vector<double> probs;                    // [C]
    int predicted = 0;
    std::vector<double> pair_entropies;           // final state, per pair
    std::vector<std::vector<double>> step_entropies; // [pair][0..T] when requested
    std::vector<std::vector<int>> step_branches;  // [pair][0..T-1], -1 unitary
    std::vector<std::vector<double>> step_probs;  // [0..T][C] truncated predictions
    int jumps = 0;
    int clamped_steps = 0;
    int annihilated_steps = 0;
    int substituted_states = 0;                   // degenerate-input fallbacks
};

struct BatchOutput {
    double total_loss = 0.0;
    double task_loss = 0.0;
    double contrastive_loss = 0.0;
    double alpha = 0.0, beta = 0.0;
    std::vector<SampleOutput> samples; // aligned with the batch indices
};

// Per-sample branch plans: [pair][step]; -1 unitary, k jump channel.
using BranchPlan = std::vector<std::vector<int>>;

struct BatchOptions {
    bool train = false;          // dropout + per-epoch trajectory draws
    bool compute_grad = false;
    int64_t epoch = 0;
    bool record_entropy = false; // per-step entanglement entropy
    bool capture_steps = false;  // truncated per-step predictions
    bool parallel = true;        // OpenMP over samples
    const std::vector<BranchPlan>* forced_branches = nullptr; // per sample
    std::vector<BranchPlan>* captured_branches = nullptr;
};

class FusionModel {
public:
    explicit FusionModel(ModelConfig cfg);

    void init_params(uint64_t seed);
    const ModelConfig& config() const { return cfg_; }
    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }

    // Forward (and optionally backward) over one batch.  Gradients are
    // accumulated into the parameter store in ascending dataset-index order
    // regardless of thread count.
    BatchOutput run_batch(const data::Dataset& ds, std::span<const int64_t> indices,
                          uint64_t seed, const BatchOptions& opt);

    // Class-expectation score centers used for MAE / correlation metrics.
    void set_score_centers(std::vector<double> centers) { score_centers_ = std::move(centers); }
    const std::vector<double>& score_centers() const { return score_centers_; }

    void save_checkpoint(const std::string& path, uint64_t seed) const;
    static FusionModel load_checkpoint(const std::string& path, uint64_t* seed = nullptr);

private:
    ModelConfig cfg_;
    ad::ParamStore params_;
    std::vector<double> score_centers_;

    friend struct BatchRunner;
};

} // namespace qjfuse::model
