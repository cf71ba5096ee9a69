// Plain complex dense linear algebra on value buffers (no tape).
// Used by the analysis path (entropy, Schmidt values), by test oracles
// (Hermitian eigendecomposition) and by the master-equation integrator.

#pragma once

#include <complex>
#include <cstdint>
#include <vector>

namespace qjfuse::lin {

using cplx = std::complex<double>;

struct CVec {
    std::vector<cplx> v;

    CVec() = default;
    explicit CVec(int64_t n) : v(static_cast<size_t>(n)) {}
    int64_t size() const { return static_cast<int64_t>(v.size()); }
    cplx& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
    const cplx& operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }
};

struct CMat {
    int64_t rows = 0, cols = 0;
    std::vector<cplx> v;

    CMat() = default;
    CMat(int64_t r, int64_t c) : rows(r), cols(c), v(static_cast<size_t>(r * c)) {}
    cplx& at(int64_t i, int64_t j) { return v[static_cast<size_t>(i * cols + j)]; }
    const cplx& at(int64_t i, int64_t j) const { return v[static_cast<size_t>(i * cols + j)]; }

    static CMat identity(int64_t n);
};

double norm(const CVec& a);
cplx inner(const CVec& a, const CVec& b); // <a|b>
CVec normalized(const CVec& a);
CVec matvec(const CMat& a, const CVec& x);
CMat matmul(const CMat& a, const CMat& b);
CMat adjoint(const CMat& a);
CMat add(const CMat& a, const CMat& b);
CMat scale(const CMat& a, cplx s);
cplx trace(const CMat& a);
double max_abs(const CMat& a);
double frobenius(const CMat& a);
CMat outer(const CVec& a, const CVec& b); // a b^dagger

// Eigendecomposition of a Hermitian matrix by cyclic complex Jacobi
// rotations.  Eigenvalues ascending; columns of `vectors` are eigenvectors.
struct HermEig {
    std::vector<double> values;
    CMat vectors;
};
HermEig hermitian_eig(const CMat& a, double tol = 1e-13, int max_sweeps = 60);

// Singular values of a general complex matrix, descending (via the
// eigenvalues of A^dagger A).
std::vector<double> singular_values(const CMat& a);

// exp(i * t * H) for Hermitian H through its eigendecomposition.
// Test oracle for the differentiable series-based exponential.
CMat matrix_exp_herm(const CMat& h, double t);

} // namespace qjfuse::lin
