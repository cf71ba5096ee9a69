// Pure-state algebra: normalization, tensor products, measurement
// probabilities, density matrices, partial trace, Schmidt values and
// von Neumann entanglement entropy.
//
// Two layers share the same formulas:
//   * tape ops (differentiable) for everything the training path touches;
//   * value ops on lin:: containers for analysis and oracles.  Entropy and
//     Schmidt values live only here; they are never differentiated.

#pragma once

#include <cstdint>
#include <vector>

#include "qjfuse/autodiff.hpp"
#include "qjfuse/linalg.hpp"

namespace qjfuse::quant {

// Unit-norm complex amplitude vector over a D-dimensional basis.
struct PureState {
    lin::CVec amplitudes;

    int64_t dim() const { return amplitudes.size(); }
};

// State over a D*D product space of two isomorphic D-dimensional factors.
struct JointState {
    lin::CVec amplitudes;
    int64_t factor_dim = 0;

    int64_t dim() const { return amplitudes.size(); }
};

struct DensityMatrix {
    lin::CMat matrix;

    int64_t dim() const { return matrix.rows; }
};

enum class Subsystem { A, B };

// ----- value layer -----

PureState normalize(const lin::CVec& v, double eps = 1e-12);
JointState tensor_product(const PureState& a, const PureState& b);
double measure_prob(const lin::CVec& m, const JointState& s);
DensityMatrix density_from_pure(const std::vector<lin::CVec>& states,
                                const std::vector<double>& probs);
DensityMatrix partial_trace(const JointState& s, Subsystem keep);
DensityMatrix partial_trace(const DensityMatrix& rho, int64_t factor_dim, Subsystem keep);

// Singular values of the D x D reshape of the joint amplitudes, descending.
std::vector<double> schmidt_coefficients(const JointState& s);

// S = -sum lambda_i^2 ln lambda_i^2, natural log, 0*ln 0 := 0.
// Schmidt values below 1e-12 are treated as exact zeros.
double von_neumann_entropy(const JointState& s);
double entropy_from_schmidt(const std::vector<double>& lambdas);

// ----- tape layer (differentiable) -----

ad::CVar normalize(ad::Tape& t, ad::CVar v, double eps = 1e-12);
ad::CVar tensor_product(ad::Tape& t, ad::CVar a, ad::CVar b);
ad::Var measure_prob(ad::Tape& t, ad::CVar m, ad::CVar s);
ad::CVar density_from_pure(ad::Tape& t, std::span<const ad::CVar> states,
                           std::span<const ad::Var> probs);

// Copy helpers between tape slots and value containers.
lin::CVec cvec_from_tape(const ad::Tape& t, ad::CVar v);
JointState joint_from_tape(const ad::Tape& t, ad::CVar v, int64_t factor_dim);

} // namespace qjfuse::quant
