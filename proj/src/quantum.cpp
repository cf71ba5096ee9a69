#include "qjfuse/quantum.hpp"

#include <cmath>

#include "qjfuse/errors.hpp"

namespace qjfuse::quant {

PureState normalize(const lin::CVec& v, double eps) {
    const double n = lin::norm(v);
    if (n <= eps) throw NearZeroNorm("normalize: input norm below threshold");
    PureState out;
    out.amplitudes = lin::CVec(v.size());
    for (int64_t i = 0; i < v.size(); ++i) out.amplitudes[i] = v[i] / n;
    return out;
}

JointState tensor_product(const PureState& a, const PureState& b) {
    if (a.dim() != b.dim()) throw ShapeError("tensor_product: factor dims differ");
    const int64_t d = a.dim();
    JointState out;
    out.factor_dim = d;
    out.amplitudes = lin::CVec(d * d);
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < d; ++j)
            out.amplitudes[i * d + j] = a.amplitudes[i] * b.amplitudes[j];
    return out;
}

double measure_prob(const lin::CVec& m, const JointState& s) {
    return std::norm(lin::inner(m, s.amplitudes));
}

DensityMatrix density_from_pure(const std::vector<lin::CVec>& states,
                                const std::vector<double>& probs) {
    if (states.empty() || states.size() != probs.size())
        throw ShapeError("density_from_pure: states/probs mismatch");
    double psum = 0.0;
    for (double p : probs) {
        if (p < 0.0) throw Error("density_from_pure: negative probability");
        psum += p;
    }
    if (std::fabs(psum - 1.0) > 1e-9)
        throw Error("density_from_pure: probabilities do not sum to 1");
    const int64_t d = states[0].size();
    DensityMatrix rho;
    rho.matrix = lin::CMat(d, d);
    for (size_t k = 0; k < states.size(); ++k) {
        if (states[k].size() != d) throw ShapeError("density_from_pure: state dims differ");
        for (int64_t i = 0; i < d; ++i)
            for (int64_t j = 0; j < d; ++j)
                rho.matrix.at(i, j) += probs[k] * states[k][i] * std::conj(states[k][j]);
    }
    return rho;
}

DensityMatrix partial_trace(const JointState& s, Subsystem keep) {
    const int64_t d = s.factor_dim;
    DensityMatrix rho;
    rho.matrix = lin::CMat(d, d);
    if (keep == Subsystem::A) {
        // rho_A[i,i'] = sum_j psi[i*d+j] conj(psi[i'*d+j])
        for (int64_t i = 0; i < d; ++i)
            for (int64_t ip = 0; ip < d; ++ip) {
                lin::cplx acc = 0.0;
                for (int64_t j = 0; j < d; ++j)
                    acc += s.amplitudes[i * d + j] * std::conj(s.amplitudes[ip * d + j]);
                rho.matrix.at(i, ip) = acc;
            }
    } else {
        for (int64_t j = 0; j < d; ++j)
            for (int64_t jp = 0; jp < d; ++jp) {
                lin::cplx acc = 0.0;
                for (int64_t i = 0; i < d; ++i)
                    acc += s.amplitudes[i * d + j] * std::conj(s.amplitudes[i * d + jp]);
                rho.matrix.at(j, jp) = acc;
            }
    }
    return rho;
}

DensityMatrix partial_trace(const DensityMatrix& rho_in, int64_t factor_dim, Subsystem keep) {
    const int64_t d = factor_dim;
    if (rho_in.dim() != d * d) throw ShapeError("partial_trace: dim is not factor_dim^2");
    DensityMatrix rho;
    rho.matrix = lin::CMat(d, d);
    if (keep == Subsystem::A) {
        for (int64_t i = 0; i < d; ++i)
            for (int64_t ip = 0; ip < d; ++ip) {
                lin::cplx acc = 0.0;
                for (int64_t j = 0; j < d; ++j)
                    acc += rho_in.matrix.at(i * d + j, ip * d + j);
                rho.matrix.at(i, ip) = acc;
            }
    } else {
        for (int64_t j = 0; j < d; ++j)
            for (int64_t jp = 0; jp < d; ++jp) {
                lin::cplx acc = 0.0;
                for (int64_t i = 0; i < d; ++i)
                    acc += rho_in.matrix.at(i * d + j, i * d + jp);
                rho.matrix.at(j, jp) = acc;
            }
    }
    return rho;
}

std::vector<double> schmidt_coefficients(const JointState& s) {
    const int64_t d = s.factor_dim;
    lin::CMat m(d, d);
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < d; ++j) m.at(i, j) = s.amplitudes[i * d + j];
    for (const lin::cplx& z : m.v)
        if (!std::isfinite(z.real()) || !std::isfinite(z.imag()))
            throw NonFiniteError("schmidt_coefficients input");
    return lin::singular_values(m);
}

double entropy_from_schmidt(const std::vector<double>& lambdas) {
    double s = 0.0;
    for (double l : lambdas) {
        if (l < 1e-12) continue;
        const double p = l * l;
        s -= p * std::log(p);
    }
    return s < 0.0 ? 0.0 : s;
}

double von_neumann_entropy(const JointState& s) {
    return entropy_from_schmidt(schmidt_coefficients(s));
}

// ----- tape layer -----

ad::CVar normalize(ad::Tape& t, ad::CVar v, double eps) { return t.cnormalize(v, eps); }

ad::CVar tensor_product(ad::Tape& t, ad::CVar a, ad::CVar b) {
    if (a.size() != b.size()) throw ShapeError("tensor_product: factor dims differ");
    return t.ckron(a, b);
}

ad::Var measure_prob(ad::Tape& t, ad::CVar m, ad::CVar s) {
    return t.cmod2(t.cinner(m, s));
}

ad::CVar density_from_pure(ad::Tape& t, std::span<const ad::CVar> states,
                           std::span<const ad::Var> probs) {
    if (states.empty() || states.size() != probs.size())
        throw ShapeError("density_from_pure: states/probs mismatch");
    ad::CVar rho;
    for (size_t k = 0; k < states.size(); ++k) {
        ad::CVar term = t.cscale_real(t.couter_conj(states[k], states[k]), probs[k]);
        rho = k == 0 ? term : t.cadd(rho, term);
    }
    return rho;
}

lin::CVec cvec_from_tape(const ad::Tape& t, ad::CVar v) {
    auto re = t.val(v.re);
    auto im = t.val(v.im);
    lin::CVec out(static_cast<int64_t>(re.size()));
    for (size_t i = 0; i < re.size(); ++i) out[static_cast<int64_t>(i)] = {re[i], im[i]};
    return out;
}

JointState joint_from_tape(const ad::Tape& t, ad::CVar v, int64_t factor_dim) {
    JointState s;
    s.amplitudes = cvec_from_tape(t, v);
    s.factor_dim = factor_dim;
    return s;
}

} // namespace qjfuse::quant
