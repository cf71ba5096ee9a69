#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "qjfuse/autodiff.hpp"
#include "qjfuse/rng.hpp"

namespace testutil {

inline std::vector<double> random_vec(size_t n, uint64_t key, double scale = 1.0) {
    qjfuse::rng::Stream s(key);
    std::vector<double> v(n);
    for (double& x : v) x = scale * s.gaussian();
    return v;
}

// Central finite differences against analytic leaf gradients for a scalar
// graph rebuilt from flat input buffers.  `build` must register every input
// as a requires_grad leaf (in order) and return the scalar loss.
struct GraphCheck {
    std::vector<std::pair<int64_t, int64_t>> shapes;
    std::function<qjfuse::ad::Var(qjfuse::ad::Tape&, const std::vector<std::vector<double>>&,
                                  std::vector<qjfuse::ad::Var>&)>
        build;

    double max_rel_err(std::vector<std::vector<double>> inputs, double h = 1e-5) const {
        using namespace qjfuse;
        // Analytic gradients.
        std::vector<std::vector<double>> analytic(inputs.size());
        {
            ad::Tape t;
            std::vector<ad::Var> leaves;
            ad::Var loss = build(t, inputs, leaves);
            t.backward(loss);
            for (size_t i = 0; i < leaves.size(); ++i) {
                auto g = t.grad(leaves[i]);
                analytic[i].assign(inputs[i].size(), 0.0);
                if (!g.empty()) analytic[i].assign(g.begin(), g.end());
            }
        }
        auto value = [&](const std::vector<std::vector<double>>& ins) {
            ad::Tape t;
            std::vector<ad::Var> leaves;
            ad::Var loss = build(t, ins, leaves);
            return t.val0(loss);
        };
        double worst = 0.0;
        for (size_t i = 0; i < inputs.size(); ++i) {
            for (size_t j = 0; j < inputs[i].size(); ++j) {
                auto plus = inputs, minus = inputs;
                plus[i][j] += h;
                minus[i][j] -= h;
                const double gn = (value(plus) - value(minus)) / (2.0 * h);
                const double ga = analytic[i][j];
                const double denom = std::max({std::fabs(ga), std::fabs(gn), 1e-8});
                worst = std::max(worst, std::fabs(ga - gn) / denom);
            }
        }
        return worst;
    }
};

} // namespace testutil
