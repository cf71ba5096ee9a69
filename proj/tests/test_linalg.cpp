#include <doctest.h>

#include <cmath>

#include "qjfuse/linalg.hpp"
#include "qjfuse/rng.hpp"

using namespace qjfuse;
using lin::CMat;
using lin::cplx;

namespace {

CMat random_hermitian(int64_t n, uint64_t seed, double scale = 1.0) {
    rng::Stream s(seed);
    CMat a(n, n);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) a.at(i, j) = {scale * s.gaussian(), scale * s.gaussian()};
    CMat h(n, n);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) h.at(i, j) = 0.5 * (a.at(i, j) + std::conj(a.at(j, i)));
    return h;
}

} // namespace

TEST_CASE("hermitian eigendecomposition: known 2x2") {
    // [[1, i], [-i, 1]] has eigenvalues 0 and 2.
    CMat a(2, 2);
    a.at(0, 0) = 1.0;
    a.at(0, 1) = cplx(0.0, 1.0);
    a.at(1, 0) = cplx(0.0, -1.0);
    a.at(1, 1) = 1.0;
    auto eig = lin::hermitian_eig(a);
    CHECK(eig.values[0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(eig.values[1] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("hermitian eigendecomposition: residuals and orthogonality") {
    for (int64_t n : {3, 8, 17}) {
        CMat h = random_hermitian(n, 100 + static_cast<uint64_t>(n));
        auto eig = lin::hermitian_eig(h);
        // A v = lambda v
        double worst = 0.0;
        for (int64_t k = 0; k < n; ++k) {
            lin::CVec v(n);
            for (int64_t i = 0; i < n; ++i) v[i] = eig.vectors.at(i, k);
            lin::CVec av = lin::matvec(h, v);
            for (int64_t i = 0; i < n; ++i)
                worst = std::max(worst,
                                 std::abs(av[i] - eig.values[static_cast<size_t>(k)] * v[i]));
        }
        CHECK(worst < 1e-9);
        // V^dagger V = I
        CMat vtv = lin::matmul(lin::adjoint(eig.vectors), eig.vectors);
        CMat eye = CMat::identity(n);
        CHECK(lin::max_abs(lin::add(vtv, lin::scale(eye, -1.0))) < 1e-10);
        // Ascending order.
        for (size_t k = 1; k < eig.values.size(); ++k)
            CHECK(eig.values[k] >= eig.values[k - 1]);
    }
}

TEST_CASE("singular values: diagonal and unitary invariance") {
    CMat d(3, 3);
    d.at(0, 0) = 3.0;
    d.at(1, 1) = cplx(0.0, 2.0); // |.| = 2
    d.at(2, 2) = -1.0;
    auto sv = lin::singular_values(d);
    REQUIRE(sv.size() == 3);
    CHECK(sv[0] == doctest::Approx(3.0).epsilon(1e-10));
    CHECK(sv[1] == doctest::Approx(2.0).epsilon(1e-10));
    CHECK(sv[2] == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("matrix exponential oracle is unitary and inverts") {
    CMat h = random_hermitian(6, 321);
    CMat u = lin::matrix_exp_herm(h, -0.7);
    CMat uinv = lin::matrix_exp_herm(h, 0.7);
    CMat prod = lin::matmul(u, uinv);
    CHECK(lin::max_abs(lin::add(prod, lin::scale(CMat::identity(6), -1.0))) < 1e-10);
    CMat udag_u = lin::matmul(lin::adjoint(u), u);
    CHECK(lin::max_abs(lin::add(udag_u, lin::scale(CMat::identity(6), -1.0))) < 1e-10);
}
