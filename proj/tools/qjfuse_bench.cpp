// Benchmark: serial reference vs OpenMP kernels for trajectory averaging
// and one training batch.

#include <chrono>
#include <cstdio>

#include "qjfuse/data.hpp"
#include "qjfuse/model.hpp"
#include "qjfuse/qjump.hpp"
#include "qjfuse/train.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace qjfuse;

namespace {

double seconds(std::chrono::steady_clock::time_point a,
               std::chrono::steady_clock::time_point b) {
    return std::chrono::duration<double>(b - a).count();
}

} // namespace

int main() {
#ifdef _OPENMP
    std::printf("openmp enabled, max threads %d\n", omp_get_max_threads());
#else
    std::printf("openmp disabled (serial build)\n");
#endif

    // Trajectory averaging: two-level amplitude damping.
    {
        lin::CMat h(2, 2);
        lin::CMat l(2, 2);
        l.at(0, 1) = 1.0;
        std::vector<lin::CMat> ls{l};
        std::vector<double> gammas{1.0};
        lin::CVec psi0(2);
        psi0[1] = 1.0;
        qjump::TrajectoryConfig cfg;
        cfg.dt = 0.01;
        cfg.steps = 100;
        cfg.seed = 11;
        const int64_t n = 20000;

        auto t0 = std::chrono::steady_clock::now();
        auto serial = qjump::trajectory_average_density_serial(
            h, ls, gammas, psi0, cfg, n, qjump::Convention::Standard);
        auto t1 = std::chrono::steady_clock::now();
        auto parallel = qjump::trajectory_average_density(
            h, ls, gammas, psi0, cfg, n, qjump::Convention::Standard);
        auto t2 = std::chrono::steady_clock::now();

        const double dev = lin::max_abs(lin::add(serial.rho, lin::scale(parallel.rho, -1.0)));
        const double ts = seconds(t0, t1), tp = seconds(t1, t2);
        std::printf("trajectory averaging (n=%lld, T=%d)\n", static_cast<long long>(n),
                    cfg.steps);
        std::printf("  serial   %8.3f s\n", ts);
        std::printf("  parallel %8.3f s   speedup %.2fx   max |diff| %.3g\n", tp, ts / tp, dev);
    }

    // One training batch of the fusion model.
    {
        data::SyntheticSpec spec;
        spec.n_samples = 64;
        spec.seed = 3;
        data::Dataset ds = data::generate_synthetic(spec);

        model::ModelConfig mc;
        mc.modalities = spec.modalities;
        for (const auto& m : spec.modalities) mc.feature_dims[m] = spec.dim;
        model::FusionModel m(mc);
        m.init_params(5);

        std::vector<int64_t> batch(64);
        for (int64_t i = 0; i < 64; ++i) batch[i] = i;

        model::BatchOptions bo;
        bo.train = true;
        bo.compute_grad = true;

        bo.parallel = false;
        m.params().zero_grad();
        auto t0 = std::chrono::steady_clock::now();
        auto serial_out = m.run_batch(ds, batch, 9, bo);
        auto t1 = std::chrono::steady_clock::now();

        bo.parallel = true;
        m.params().zero_grad();
        auto parallel_out = m.run_batch(ds, batch, 9, bo);
        auto t2 = std::chrono::steady_clock::now();

        const double ts = seconds(t0, t1), tp = seconds(t1, t2);
        std::printf("fusion batch forward+backward (B=64, D=%lld, T=%d)\n",
                    static_cast<long long>(mc.state_dim), mc.time_steps);
        std::printf("  serial   %8.3f s   loss %.6f\n", ts, serial_out.total_loss);
        std::printf("  parallel %8.3f s   loss %.6f   speedup %.2fx\n", tp,
                    parallel_out.total_loss, ts / tp);
    }
    return 0;
}
