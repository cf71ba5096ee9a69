#include "qjfuse/qjump.hpp"

#include <cmath>
#include <ostream>

#include "qjfuse/errors.hpp"
#include "qjfuse/quantum.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace qjfuse::qjump {

ad::CVar build_hamiltonian(ad::Tape& t, ad::CVar a) {
    return t.cscale(t.cadd(a, t.cadjoint(a)), 0.5, 0.0);
}

namespace {

void require_hermitian(const ad::Tape& t, ad::CVar h, double tol) {
    const auto re = t.val(h.re);
    const auto im = t.val(h.im);
    const int64_t n = h.rows();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i; j < n; ++j) {
            const double dre = re[i * n + j] - re[j * n + i];
            const double dim = im[i * n + j] + im[j * n + i];
            if (std::fabs(dre) > tol || std::fabs(dim) > tol)
                throw Error("unitary_step: Hamiltonian is not Hermitian");
        }
}

} // namespace

ad::CVar unitary_step(ad::Tape& t, ad::CVar h, ad::CVar psi, double dt) {
    require_hermitian(t, h, 1e-9);
    return t.cmatvec(t.matrix_exp_i(h, dt), psi);
}

JumpProbabilities branch_probabilities(std::span<const double> psi_re,
                                       std::span<const double> psi_im,
                                       std::span<const RawOperator> lindblads,
                                       std::span<const double> gammas, Convention conv) {
    const int64_t n = static_cast<int64_t>(psi_re.size());
    const double* __restrict pr = psi_re.data();
    const double* __restrict pi = psi_im.data();
    JumpProbabilities out;
    out.p.resize(lindblads.size());
    for (size_t k = 0; k < lindblads.size(); ++k) {
        const double* __restrict lr = lindblads[k].re;
        const double* __restrict li = lindblads[k].im;
        double expect_re = 0.0, expect_im = 0.0; // <psi|L|psi>
        double lpsi_sq = 0.0;                    // ||L psi||^2
        for (int64_t i = 0; i < n; ++i) {
            const double* __restrict lri = lr + i * n;
            const double* __restrict lii = li + i * n;
            double yr = 0.0, yi = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                yr += lri[j] * pr[j] - lii[j] * pi[j];
                yi += lri[j] * pi[j] + lii[j] * pr[j];
            }
            expect_re += pr[i] * yr + pi[i] * yi;
            expect_im += pr[i] * yi - pi[i] * yr;
            lpsi_sq += yr * yr + yi * yi;
        }
        const double rate = conv == Convention::Paper
                                ? expect_re * expect_re + expect_im * expect_im
                                : lpsi_sq;
        out.p[k] = gammas[k] * rate;
        out.gamma_total += out.p[k];
    }
    return out;
}

JumpProbabilities jump_probabilities(const ad::Tape& t, const JumpOperators& ops,
                                     ad::CVar psi, double dt) {
    (void)dt;
    std::vector<RawOperator> raw(ops.lindblads.size());
    for (size_t k = 0; k < ops.lindblads.size(); ++k)
        raw[k] = {t.val(ops.lindblads[k].re).data(), t.val(ops.lindblads[k].im).data()};
    return branch_probabilities(t.val(psi.re), t.val(psi.im), raw, ops.gammas,
                                ops.convention);
}

JumpProbabilitiesVar jump_probabilities_var(ad::Tape& t, std::span<const ad::CVar> lindblads,
                                            std::span<const ad::Var> gammas, ad::CVar psi,
                                            Convention conv) {
    JumpProbabilitiesVar out;
    ad::Var total;
    for (size_t k = 0; k < lindblads.size(); ++k) {
        ad::CVar lpsi = t.cmatvec(lindblads[k], psi);
        // Paper: |<psi|L psi>|^2.  Standard: <L psi|L psi>, real by construction.
        ad::Var rate = conv == Convention::Paper ? t.cmod2(t.cinner(psi, lpsi))
                                                 : t.cinner(lpsi, lpsi).re;
        ad::Var pk = t.mul(gammas[k], rate);
        out.p.push_back(pk);
        total = k == 0 ? pk : t.add(total, pk);
    }
    out.gamma_total = total;
    return out;
}

ad::CVar apply_jump(ad::Tape& t, const JumpOperators& ops, int channel, ad::CVar psi) {
    if (channel < 0 || channel >= static_cast<int>(ops.lindblads.size()))
        throw Error("apply_jump: channel out of range");
    ad::CVar lpsi = t.cmatvec(ops.lindblads[static_cast<size_t>(channel)], psi);
    ad::Var nrm = t.cnorm(lpsi);
    if (t.val0(nrm) <= 1e-12) throw AnnihilatedState("collapse channel annihilated the state");
    return t.cscale_real(lpsi, t.recip(nrm));
}

int sample_branch(double gamma_total, double dt, std::span<const double> p,
                  rng::Stream& stream, bool* clamped) {
    double trigger = gamma_total * dt;
    if (clamped) *clamped = trigger > 1.0;
    trigger = std::min(std::max(trigger, 0.0), 1.0);
    const double u = stream.uniform();
    if (u >= trigger) return -1;
    if (!(gamma_total > 0.0)) throw Error("sample_branch: jump drawn with zero total rate");
    // Categorical draw over p_k / gamma_total.
    const double v = stream.uniform() * gamma_total;
    double acc = 0.0;
    for (size_t k = 0; k < p.size(); ++k) {
        acc += p[k];
        if (v < acc) return static_cast<int>(k);
    }
    return static_cast<int>(p.size()) - 1;
}

TrajectoryResult evolve_trajectory(ad::Tape& t, const JumpOperators& ops, ad::CVar psi0,
                                   int steps, double dt, rng::Stream stream,
                                   const EvolveOptions& opts) {
    if (steps < 1) throw Error("evolve_trajectory: steps must be >= 1");
    TrajectoryResult res;
    res.state = psi0;
    if (opts.captured_states) opts.captured_states->push_back(psi0);
    const bool want_probs = !opts.pure_unitary;

    for (int step = 0; step < steps; ++step) {
        JumpProbabilities probs;
        if (want_probs) probs = jump_probabilities(t, ops, res.state, dt);

        int branch = -1;
        bool clamped = false;
        if (opts.forced_branches) {
            branch = (*opts.forced_branches)[static_cast<size_t>(step)];
        } else if (want_probs) {
            rng::Stream step_stream = stream.child(static_cast<uint64_t>(step));
            branch = sample_branch(probs.gamma_total, dt, probs.p, step_stream, &clamped);
        }
        if (clamped) ++res.clamped_steps;

        JumpRecord rec;
        rec.step = step;
        rec.gamma_total = probs.gamma_total;
        if (branch >= 0) {
            try {
                res.state = apply_jump(t, ops, branch, res.state);
                rec.channel = branch;
                ++res.jumps;
            } catch (const AnnihilatedState&) {
                // Channel annihilated the state: fall back to the unitary
                // branch for this step and count the event.
                res.state = t.cmatvec(ops.unitary, res.state);
                rec.channel = -1;
                rec.annihilated_fallback = true;
                ++res.annihilated_steps;
            }
        } else {
            res.state = t.cmatvec(ops.unitary, res.state);
        }
        if (opts.captured_branches) opts.captured_branches->push_back(rec.channel);
        if (opts.record_entropy) {
            rec.entropy = quant::von_neumann_entropy(
                quant::joint_from_tape(t, res.state, opts.entropy_factor_dim));
        }
        if (opts.captured_states) opts.captured_states->push_back(res.state);
        res.records.push_back(std::move(rec));
    }
    return res;
}

// ----- master-equation oracle -----

namespace {

lin::CMat lindblad_rhs(const lin::CMat& rho, const lin::CMat& h,
                       const std::vector<lin::CMat>& ls,
                       const std::vector<lin::CMat>& ldl,
                       const std::vector<double>& gammas) {
    using lin::cplx;
    const int64_t n = rho.rows;
    lin::CMat out(n, n);
    // -i [H, rho]
    lin::CMat hr = lin::matmul(h, rho);
    lin::CMat rh = lin::matmul(rho, h);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = cplx(0.0, -1.0) * (hr.v[i] - rh.v[i]);
    for (size_t k = 0; k < ls.size(); ++k) {
        lin::CMat lrl = lin::matmul(lin::matmul(ls[k], rho), lin::adjoint(ls[k]));
        lin::CMat ar = lin::matmul(ldl[k], rho);
        lin::CMat ra = lin::matmul(rho, ldl[k]);
        for (size_t i = 0; i < out.v.size(); ++i)
            out.v[i] += gammas[k] * (lrl.v[i] - 0.5 * (ar.v[i] + ra.v[i]));
    }
    return out;
}

} // namespace

lin::CMat master_equation_step(const lin::CMat& rho, const lin::CMat& h,
                               const std::vector<lin::CMat>& lindblads,
                               const std::vector<double>& gammas, double dt) {
    std::vector<lin::CMat> ldl;
    ldl.reserve(lindblads.size());
    for (const auto& l : lindblads) ldl.push_back(lin::matmul(lin::adjoint(l), l));

    auto axpy = [](const lin::CMat& a, const lin::CMat& b, double s) {
        lin::CMat out(a.rows, a.cols);
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = a.v[i] + s * b.v[i];
        return out;
    };
    lin::CMat k1 = lindblad_rhs(rho, h, lindblads, ldl, gammas);
    lin::CMat k2 = lindblad_rhs(axpy(rho, k1, dt / 2.0), h, lindblads, ldl, gammas);
    lin::CMat k3 = lindblad_rhs(axpy(rho, k2, dt / 2.0), h, lindblads, ldl, gammas);
    lin::CMat k4 = lindblad_rhs(axpy(rho, k3, dt), h, lindblads, ldl, gammas);
    lin::CMat out(rho.rows, rho.cols);
    for (size_t i = 0; i < out.v.size(); ++i)
        out.v[i] = rho.v[i] + dt / 6.0 * (k1.v[i] + 2.0 * k2.v[i] + 2.0 * k3.v[i] + k4.v[i]);

    const double drift = std::fabs(lin::trace(out).real() - lin::trace(rho).real());
    if (drift > 1e-6) throw Error("master_equation_step: trace drift exceeds 1e-6");
    return out;
}

// ----- trajectory averaging -----

namespace {

struct ValueTrajectoryScratch {
    ad::Tape tape;
};

// Runs one value-level trajectory and accumulates outer products.
void run_one_trajectory(const lin::CMat& u_value, const std::vector<lin::CMat>& lindblads,
                        const std::vector<double>& gammas, const lin::CVec& psi0,
                        const TrajectoryConfig& cfg, Convention conv, uint64_t traj_index,
                        bool per_step, lin::CMat& rho_acc, std::vector<lin::CMat>* step_acc,
                        int64_t& jumps, int64_t& clamped) {
    const int64_t n = psi0.size();
    lin::CVec psi = psi0;
    rng::Stream stream(rng::mix(cfg.seed, traj_index));

    auto accumulate = [n](lin::CMat& acc, const lin::CVec& v) {
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j) acc.at(i, j) += v[i] * std::conj(v[j]);
    };
    if (per_step) accumulate((*step_acc)[0], psi);

    std::vector<double> p(lindblads.size());
    for (int step = 0; step < cfg.steps; ++step) {
        double gamma_total = 0.0;
        for (size_t k = 0; k < lindblads.size(); ++k) {
            lin::CVec lpsi = lin::matvec(lindblads[k], psi);
            double rate;
            if (conv == Convention::Paper) {
                rate = std::norm(lin::inner(psi, lpsi));
            } else {
                double s = 0.0;
                for (const auto& z : lpsi.v) s += std::norm(z);
                rate = s;
            }
            p[k] = gammas[k] * rate;
            gamma_total += p[k];
        }
        rng::Stream step_stream = stream.child(static_cast<uint64_t>(step));
        bool was_clamped = false;
        const int branch = sample_branch(gamma_total, cfg.dt, p, step_stream, &was_clamped);
        if (was_clamped) ++clamped;
        if (branch >= 0) {
            lin::CVec lpsi = lin::matvec(lindblads[static_cast<size_t>(branch)], psi);
            const double nrm = lin::norm(lpsi);
            if (nrm <= 1e-12) {
                psi = lin::matvec(u_value, psi);
            } else {
                for (auto& z : lpsi.v) z /= nrm;
                psi = std::move(lpsi);
                ++jumps;
            }
        } else {
            psi = lin::matvec(u_value, psi);
        }
        if (per_step) accumulate((*step_acc)[static_cast<size_t>(step + 1)], psi);
    }
    accumulate(rho_acc, psi);
}

lin::CMat propagator_value(const lin::CMat& h, double dt) {
    // Build the propagator once with the same series the tape layer uses.
    ad::Tape t;
    const int64_t n = h.rows;
    std::vector<double> re(static_cast<size_t>(n * n)), im(re.size());
    for (size_t i = 0; i < re.size(); ++i) {
        re[i] = h.v[i].real();
        im[i] = h.v[i].imag();
    }
    ad::CVar hv = t.cleaf(n, n, re, im, false);
    ad::CVar u = t.matrix_exp_i(hv, dt);
    lin::CMat out(n, n);
    auto ur = t.val(u.re);
    auto ui = t.val(u.im);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = {ur[i], ui[i]};
    return out;
}

} // namespace

TrajectoryAverage trajectory_average_density_serial(
    const lin::CMat& h, const std::vector<lin::CMat>& lindblads,
    const std::vector<double>& gammas, const lin::CVec& psi0,
    const TrajectoryConfig& cfg, int64_t n_traj, Convention conv, bool per_step) {
    if (conv != Convention::Standard)
        throw Error("trajectory_average_density: Standard convention required");
    const int64_t n = psi0.size();
    const lin::CMat u = propagator_value(h, cfg.dt);

    TrajectoryAverage out;
    out.rho = lin::CMat(n, n);
    std::vector<lin::CMat> steps;
    if (per_step) {
        steps.assign(static_cast<size_t>(cfg.steps + 1), lin::CMat(n, n));
        out.per_step.assign(static_cast<size_t>(cfg.steps + 1), lin::CMat(n, n));
    }
    for (int64_t i = 0; i < n_traj; ++i)
        run_one_trajectory(u, lindblads, gammas, psi0, cfg, conv, static_cast<uint64_t>(i),
                           per_step, out.rho, per_step ? &steps : nullptr, out.jumps,
                           out.clamped_steps);

    const double inv = 1.0 / static_cast<double>(n_traj);
    for (auto& z : out.rho.v) z *= inv;
    if (per_step)
        for (size_t s = 0; s < steps.size(); ++s)
            for (size_t i = 0; i < steps[s].v.size(); ++i)
                out.per_step[s].v[i] = steps[s].v[i] * inv;
    return out;
}

TrajectoryAverage trajectory_average_density(
    const lin::CMat& h, const std::vector<lin::CMat>& lindblads,
    const std::vector<double>& gammas, const lin::CVec& psi0,
    const TrajectoryConfig& cfg, int64_t n_traj, Convention conv, bool per_step) {
    if (conv != Convention::Standard)
        throw Error("trajectory_average_density: Standard convention required");
    const int64_t n = psi0.size();
    const lin::CMat u = propagator_value(h, cfg.dt);

    // Fixed-size blocks keep the reduction order independent of scheduling.
    constexpr int64_t kBlock = 64;
    const int64_t n_blocks = (n_traj + kBlock - 1) / kBlock;

    struct BlockAcc {
        lin::CMat rho;
        std::vector<lin::CMat> steps;
        int64_t jumps = 0, clamped = 0;
    };
    std::vector<BlockAcc> blocks(static_cast<size_t>(n_blocks));

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (int64_t b = 0; b < n_blocks; ++b) {
        BlockAcc& acc = blocks[static_cast<size_t>(b)];
        acc.rho = lin::CMat(n, n);
        if (per_step) acc.steps.assign(static_cast<size_t>(cfg.steps + 1), lin::CMat(n, n));
        const int64_t lo = b * kBlock;
        const int64_t hi = std::min(lo + kBlock, n_traj);
        for (int64_t i = lo; i < hi; ++i)
            run_one_trajectory(u, lindblads, gammas, psi0, cfg, conv,
                               static_cast<uint64_t>(i), per_step, acc.rho,
                               per_step ? &acc.steps : nullptr, acc.jumps, acc.clamped);
    }

    TrajectoryAverage out;
    out.rho = lin::CMat(n, n);
    if (per_step) out.per_step.assign(static_cast<size_t>(cfg.steps + 1), lin::CMat(n, n));
    for (const BlockAcc& acc : blocks) {
        for (size_t i = 0; i < out.rho.v.size(); ++i) out.rho.v[i] += acc.rho.v[i];
        if (per_step)
            for (size_t s = 0; s < acc.steps.size(); ++s)
                for (size_t i = 0; i < acc.steps[s].v.size(); ++i)
                    out.per_step[s].v[i] += acc.steps[s].v[i];
        out.jumps += acc.jumps;
        out.clamped_steps += acc.clamped;
    }
    const double inv = 1.0 / static_cast<double>(n_traj);
    for (auto& z : out.rho.v) z *= inv;
    if (per_step)
        for (auto& m : out.per_step)
            for (auto& z : m.v) z *= inv;
    return out;
}

void export_records_csv(std::span<const JumpRecord> records, std::ostream& os) {
    os << "step,branch,channel,gamma_total,entropy\n";
    for (const JumpRecord& r : records) {
        os << r.step << ',' << (r.is_jump() ? "jump" : "unitary") << ','
           << r.channel << ',' << r.gamma_total << ',';
        if (r.entropy) os << *r.entropy;
        os << '\n';
    }
}

} // namespace qjfuse::qjump
