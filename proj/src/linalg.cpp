#include "qjfuse/linalg.hpp"

#include <algorithm>
#include <cmath>

#include "qjfuse/errors.hpp"

namespace qjfuse::lin {

CMat CMat::identity(int64_t n) {
    CMat m(n, n);
    for (int64_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

double norm(const CVec& a) {
    double s = 0.0;
    for (const cplx& z : a.v) s += std::norm(z);
    return std::sqrt(s);
}

cplx inner(const CVec& a, const CVec& b) {
    if (a.size() != b.size()) throw ShapeError("inner: vector sizes differ");
    cplx s = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) s += std::conj(a[i]) * b[i];
    return s;
}

CVec normalized(const CVec& a) {
    const double n = norm(a);
    if (n <= 1e-12) throw NearZeroNorm("cannot normalize");
    CVec out(a.size());
    for (int64_t i = 0; i < a.size(); ++i) out[i] = a[i] / n;
    return out;
}

CVec matvec(const CMat& a, const CVec& x) {
    if (a.cols != x.size()) throw ShapeError("matvec: dims differ");
    CVec y(a.rows);
    for (int64_t i = 0; i < a.rows; ++i) {
        cplx s = 0.0;
        for (int64_t j = 0; j < a.cols; ++j) s += a.at(i, j) * x[j];
        y[i] = s;
    }
    return y;
}

CMat matmul(const CMat& a, const CMat& b) {
    if (a.cols != b.rows) throw ShapeError("matmul: dims differ");
    CMat c(a.rows, b.cols);
    for (int64_t i = 0; i < a.rows; ++i)
        for (int64_t l = 0; l < a.cols; ++l) {
            const cplx av = a.at(i, l);
            for (int64_t j = 0; j < b.cols; ++j) c.at(i, j) += av * b.at(l, j);
        }
    return c;
}

CMat adjoint(const CMat& a) {
    CMat c(a.cols, a.rows);
    for (int64_t i = 0; i < a.rows; ++i)
        for (int64_t j = 0; j < a.cols; ++j) c.at(j, i) = std::conj(a.at(i, j));
    return c;
}

CMat add(const CMat& a, const CMat& b) {
    CMat c(a.rows, a.cols);
    for (size_t i = 0; i < c.v.size(); ++i) c.v[i] = a.v[i] + b.v[i];
    return c;
}

CMat scale(const CMat& a, cplx s) {
    CMat c(a.rows, a.cols);
    for (size_t i = 0; i < c.v.size(); ++i) c.v[i] = s * a.v[i];
    return c;
}

cplx trace(const CMat& a) {
    cplx s = 0.0;
    for (int64_t i = 0; i < std::min(a.rows, a.cols); ++i) s += a.at(i, i);
    return s;
}

double max_abs(const CMat& a) {
    double m = 0.0;
    for (const cplx& z : a.v) m = std::max(m, std::abs(z));
    return m;
}

double frobenius(const CMat& a) {
    double s = 0.0;
    for (const cplx& z : a.v) s += std::norm(z);
    return std::sqrt(s);
}

CMat outer(const CVec& a, const CVec& b) {
    CMat c(a.size(), b.size());
    for (int64_t i = 0; i < a.size(); ++i)
        for (int64_t j = 0; j < b.size(); ++j) c.at(i, j) = a[i] * std::conj(b[j]);
    return c;
}

HermEig hermitian_eig(const CMat& a_in, double tol, int max_sweeps) {
    if (a_in.rows != a_in.cols) throw ShapeError("hermitian_eig: matrix not square");
    const int64_t n = a_in.rows;
    CMat a = a_in;
    CMat vmat = CMat::identity(n);

    auto off_norm = [&]() {
        double s = 0.0;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j)
                if (i != j) s += std::norm(a.at(i, j));
        return std::sqrt(s);
    };
    const double scale_ref = std::max(frobenius(a), 1e-300);

    for (int sweep = 0; sweep < max_sweeps && off_norm() > tol * scale_ref; ++sweep) {
        for (int64_t p = 0; p < n - 1; ++p) {
            for (int64_t q = p + 1; q < n; ++q) {
                const cplx apq = a.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double app = a.at(p, p).real();
                const double aqq = a.at(q, q).real();
                const double phi = std::arg(apq);
                const double mag = std::abs(apq);
                // Phase-align the block with D = diag(1, e^{-i phi}), then a
                // real rotation G(theta) zeroes the off-diagonal; the combined
                // update is A <- U^dagger A U with U = D G:
                //   U = [[c, s], [-s e^{-i phi}, c e^{-i phi}]]
                const double theta = 0.5 * std::atan2(2.0 * mag, aqq - app);
                const double c = std::cos(theta);
                const double s = std::sin(theta);
                const cplx eip = std::polar(1.0, phi);  // e^{+i phi}
                const cplx eim = std::conj(eip);        // e^{-i phi}
                for (int64_t i = 0; i < n; ++i) {
                    const cplx aip = a.at(i, p), aiq = a.at(i, q);
                    a.at(i, p) = c * aip - s * eim * aiq;
                    a.at(i, q) = s * aip + c * eim * aiq;
                    const cplx vip = vmat.at(i, p), viq = vmat.at(i, q);
                    vmat.at(i, p) = c * vip - s * eim * viq;
                    vmat.at(i, q) = s * vip + c * eim * viq;
                }
                for (int64_t j = 0; j < n; ++j) {
                    const cplx apj = a.at(p, j), aqj = a.at(q, j);
                    a.at(p, j) = c * apj - s * eip * aqj;
                    a.at(q, j) = s * apj + c * eip * aqj;
                }
            }
        }
    }

    HermEig out;
    out.values.resize(static_cast<size_t>(n));
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        out.values[static_cast<size_t>(i)] = a.at(i, i).real();
        order[static_cast<size_t>(i)] = i;
    }
    std::sort(order.begin(), order.end(), [&](int64_t x, int64_t y) {
        return a.at(x, x).real() < a.at(y, y).real();
    });
    HermEig sorted;
    sorted.values.resize(static_cast<size_t>(n));
    sorted.vectors = CMat(n, n);
    for (int64_t j = 0; j < n; ++j) {
        sorted.values[static_cast<size_t>(j)] = a.at(order[static_cast<size_t>(j)],
                                                     order[static_cast<size_t>(j)]).real();
        for (int64_t i = 0; i < n; ++i)
            sorted.vectors.at(i, j) = vmat.at(i, order[static_cast<size_t>(j)]);
    }
    return sorted;
}

std::vector<double> singular_values(const CMat& a) {
    const CMat ata = matmul(adjoint(a), a);
    HermEig eig = hermitian_eig(ata);
    std::vector<double> sv;
    sv.reserve(eig.values.size());
    for (auto it = eig.values.rbegin(); it != eig.values.rend(); ++it)
        sv.push_back(std::sqrt(std::max(*it, 0.0)));
    return sv;
}

CMat matrix_exp_herm(const CMat& h, double t) {
    HermEig eig = hermitian_eig(h);
    const int64_t n = h.rows;
    CMat out(n, n);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) {
            cplx s = 0.0;
            for (int64_t k = 0; k < n; ++k)
                s += eig.vectors.at(i, k) *
                     std::polar(1.0, t * eig.values[static_cast<size_t>(k)]) *
                     std::conj(eig.vectors.at(j, k));
            out.at(i, j) = s;
        }
    return out;
}

} // namespace qjfuse::lin
