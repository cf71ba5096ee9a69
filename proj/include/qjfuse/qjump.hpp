// Stochastic dissipative state evolution: a learnable Hamiltonian drives
// unitary steps through a differentiable matrix exponential, learnable
// collapse operators fire stochastic jumps, and an independent
// master-equation integrator validates the trajectory statistics.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "qjfuse/autodiff.hpp"
#include "qjfuse/linalg.hpp"
#include "qjfuse/rng.hpp"

namespace qjfuse::qjump {

// Branch-probability convention.
//   Paper:    p_k = gamma_k * |<psi|L_k|psi>|^2
//   Standard: p_k = gamma_k * <psi|L_k^dagger L_k|psi>
// Only Standard reproduces the master equation in trajectory averages.
enum class Convention { Paper, Standard };

struct TrajectoryConfig {
    double dt = 0.1;
    int steps = 20;
    uint64_t seed = 0;
    bool record_entropy = false;
};

struct JumpRecord {
    int step = 0;
    int channel = -1; // -1: unitary branch, else collapse channel index
    double gamma_total = 0.0;
    std::optional<double> entropy;
    bool annihilated_fallback = false;

    bool is_jump() const { return channel >= 0; }
};

// Operators materialized on a tape for one optimization step: the unitary
// propagator is built once and reused across samples and time steps.
struct JumpOperators {
    ad::CVar unitary;                // exp(-i H dt)
    std::vector<ad::CVar> lindblads; // K collapse operators
    std::vector<double> gammas;      // softplus of the rate seeds (values)
    Convention convention = Convention::Paper;
};

// H = (A + A^dagger)/2, Hermitian by construction.
ad::CVar build_hamiltonian(ad::Tape& t, ad::CVar a);

// psi' = exp(-i H dt) psi.  Checks that H is Hermitian (within 1e-9).
ad::CVar unitary_step(ad::Tape& t, ad::CVar h, ad::CVar psi, double dt);

// Raw branch probabilities for the current state.
struct JumpProbabilities {
    std::vector<double> p;
    double gamma_total = 0.0;
};

// Shared primitive over flat (re, im) buffers; the tape wrapper and the
// batched fusion loop both call this so their statistics cannot drift apart.
struct RawOperator {
    const double* re = nullptr;
    const double* im = nullptr;
};
JumpProbabilities branch_probabilities(std::span<const double> psi_re,
                                       std::span<const double> psi_im,
                                       std::span<const RawOperator> lindblads,
                                       std::span<const double> gammas, Convention conv);

JumpProbabilities jump_probabilities(const ad::Tape& t, const JumpOperators& ops,
                                     ad::CVar psi, double dt);

// Differentiable variant (for tests; the trajectory loop never needs the
// probabilities on the tape because sampling is detached).
struct JumpProbabilitiesVar {
    std::vector<ad::Var> p;
    ad::Var gamma_total;
};
JumpProbabilitiesVar jump_probabilities_var(ad::Tape& t, std::span<const ad::CVar> lindblads,
                                            std::span<const ad::Var> gammas, ad::CVar psi,
                                            Convention conv);

// psi' = L_k psi / ||L_k psi||.  Throws AnnihilatedState when the channel
// annihilates the state.
ad::CVar apply_jump(ad::Tape& t, const JumpOperators& ops, int channel, ad::CVar psi);

// Draws the branch for one step: jump iff u < clamp(gamma_total*dt, 0, 1),
// channel from the categorical distribution p_k / gamma_total.
// Returns -1 for the unitary branch.  `clamped` reports gamma_total*dt > 1.
int sample_branch(double gamma_total, double dt, std::span<const double> p,
                  rng::Stream& stream, bool* clamped = nullptr);

struct EvolveOptions {
    bool record_entropy = false;
    int64_t entropy_factor_dim = 0;          // required when record_entropy
    const std::vector<int>* forced_branches = nullptr;
    std::vector<int>* captured_branches = nullptr;
    std::vector<ad::CVar>* captured_states = nullptr; // steps 0..T
    bool pure_unitary = false;               // skip probabilities, never jump
};

struct TrajectoryResult {
    ad::CVar state;
    std::vector<JumpRecord> records;
    int jumps = 0;
    int clamped_steps = 0;
    int annihilated_steps = 0;
};

TrajectoryResult evolve_trajectory(ad::Tape& t, const JumpOperators& ops, ad::CVar psi0,
                                   int steps, double dt, rng::Stream stream,
                                   const EvolveOptions& opts = {});

// ----- master-equation oracle (value layer, not differentiable) -----

// One RK4 step of d rho/dt = -i[H,rho] + sum_k gamma_k (L rho L^+ - {L^+L, rho}/2).
lin::CMat master_equation_step(const lin::CMat& rho, const lin::CMat& h,
                               const std::vector<lin::CMat>& lindblads,
                               const std::vector<double>& gammas, double dt);

struct TrajectoryAverage {
    lin::CMat rho;                   // final-step average projector
    std::vector<lin::CMat> per_step; // averages at steps 0..T when requested
    int64_t jumps = 0;
    int64_t clamped_steps = 0;
};

// Average of outer(psi_T) over n_traj independently seeded trajectories.
// Requires the Standard convention.  The parallel version splits work into
// fixed blocks so results do not depend on the thread count; the serial
// version is the plain reference loop.
TrajectoryAverage trajectory_average_density(
    const lin::CMat& h, const std::vector<lin::CMat>& lindblads,
    const std::vector<double>& gammas, const lin::CVec& psi0,
    const TrajectoryConfig& cfg, int64_t n_traj, Convention conv,
    bool per_step = false);
TrajectoryAverage trajectory_average_density_serial(
    const lin::CMat& h, const std::vector<lin::CMat>& lindblads,
    const std::vector<double>& gammas, const lin::CVec& psi0,
    const TrajectoryConfig& cfg, int64_t n_traj, Convention conv,
    bool per_step = false);

// CSV export: step,branch,channel,gamma_total,entropy
void export_records_csv(std::span<const JumpRecord> records, std::ostream& os);

} // namespace qjfuse::qjump
