#include <doctest.h>

#include <cmath>

#include "qjfuse/autodiff.hpp"
#include "qjfuse/linalg.hpp"
#include "test_helpers.hpp"

using namespace qjfuse;
using ad::CVar;
using ad::Tape;
using ad::Var;
using testutil::GraphCheck;
using testutil::random_vec;

namespace {

// Deterministic scalarizer: loss = sum(out .* w) with fixed pseudo-random w.
Var scalarize(Tape& t, Var out, uint64_t key) {
    auto w = random_vec(static_cast<size_t>(out.size()), key);
    return t.dot(t.reshape(out, out.size(), 1), t.constant(out.size(), 1, w));
}

} // namespace

TEST_CASE("every real op matches central finite differences") {
    struct Case {
        const char* name;
        GraphCheck check;
    };
    std::vector<Case> cases;

    cases.push_back({"add/mul/tanh chain",
                     {{{6, 1}, {6, 1}},
                      [](Tape& t, const std::vector<std::vector<double>>& in,
                         std::vector<Var>& leaves) {
                          Var a = t.leaf(6, 1, in[0], true);
                          Var b = t.leaf(6, 1, in[1], true);
                          leaves = {a, b};
                          return scalarize(t, t.tanh(t.mul(t.add(a, b), t.sub(a, b))), 11);
                      }}});
    cases.push_back({"matmul",
                     {{{4, 5}, {5, 3}},
                      [](Tape& t, const std::vector<std::vector<double>>& in,
                         std::vector<Var>& leaves) {
                          Var a = t.leaf(4, 5, in[0], true);
                          Var b = t.leaf(5, 3, in[1], true);
                          leaves = {a, b};
                          return scalarize(t, t.matmul(a, b), 12);
                      }}});
    cases.push_back({"matmul_nt + transpose",
                     {{{4, 5}, {3, 5}},
                      [](Tape& t, const std::vector<std::vector<double>>& in,
                         std::vector<Var>& leaves) {
                          Var a = t.leaf(4, 5, in[0], true);
                          Var b = t.leaf(3, 5, in[1], true);
                          leaves = {a, b};
                          return scalarize(t, t.transpose(t.matmul_nt(a, b)), 13);
                      }}});
    cases.push_back({"matvec + relu + softplus",
                     {{{4, 6}, {6, 1}},
                      [](Tape& t, const std::vector<std::vector<double>>& in,
                         std::vector<Var>& leaves) {
                          Var a = t.leaf(4, 6, in[0], true);
                          Var x = t.leaf(6, 1, in[1], true);
                          leaves = {a, x};
                          return scalarize(t, t.softplus(t.relu(t.matvec(a, x))), 14);
                      }}});
    cases.push_back({"exp/log/sqrt/recip",
                     {{{5, 1}},
                      [](Tape& t, const std::vector<std::vector<double>>& in,
                         std::vector<Var>& leaves) {
                          Var a = t.leaf(5, 1, in[0], true);
                          leaves = {a};
                          // Positive on-tape quantity keeps log and sqrt in domain.
                          Var pos = t.add_const(t.softplus(a), 0.5);
                          return scalarize(t, t.recip(t.sqrt(t.log(t.exp(pos)))), 15);
                      }}});
    cases.push_back({"softmax + clamp + layernorm",
                     {{{7, 1}, {7, 1}, {7, 1}},
                      [](Tape& t, const std::vector<std::vector<double>>& in,
                         std::vector<Var>& leaves) {
                          Var x = t.leaf(7, 1, in[0], true);
                          Var g = t.leaf(7, 1, in[1], true);
                          Var b = t.leaf(7, 1, in[2], true);
                          leaves = {x, g, b};
                          return scalarize(t, t.softmax(t.clamp_min(t.layer_norm(x, g, b), -0.4)),
                                           16);
                      }}});
    cases.push_back({"row ops (max/sum/diag/sub_colvec/mul_colvec)",
                     {{{4, 4}, {4, 1}},
                      [](Tape& t, const std::vector<std::vector<double>>& in,
                         std::vector<Var>& leaves) {
                          Var a = t.leaf(4, 4, in[0], true);
                          Var v = t.leaf(4, 1, in[1], true);
                          leaves = {a, v};
                          Var s = t.mul_colvec(t.sub_colvec(a, v), t.row_max(a));
                          Var mix = t.add(t.row_sum(s), t.diag(a));
                          return scalarize(t, mix, 17);
                      }}});
    cases.push_back({"concat/slice/mean/l2norm/scale_var",
                     {{{5, 1}, {3, 1}},
                      [](Tape& t, const std::vector<std::vector<double>>& in,
                         std::vector<Var>& leaves) {
                          Var a = t.leaf(5, 1, in[0], true);
                          Var b = t.leaf(3, 1, in[1], true);
                          leaves = {a, b};
                          std::array<Var, 2> parts{a, b};
                          Var c = t.concat(parts);
                          Var piece = t.slice(c, 2, 4);
                          Var scl = t.add_const(t.l2norm(b), 0.3);
                          return t.add(t.mean(t.scale_var(piece, scl)), t.sum(t.scale(a, 0.25)));
                      }}});

    for (auto& c : cases) {
        CAPTURE(std::string(c.name));
        std::vector<std::vector<double>> inputs;
        for (size_t i = 0; i < c.check.shapes.size(); ++i)
            inputs.push_back(random_vec(
                static_cast<size_t>(c.check.shapes[i].first * c.check.shapes[i].second),
                1000 + 31 * i));
        CHECK(c.check.max_rel_err(inputs) < 1e-4);
    }
}

TEST_CASE("complex ops match central finite differences") {
    struct Case {
        const char* name;
        GraphCheck check;
    };
    std::vector<Case> cases;

    auto cleaf = [](Tape& t, const std::vector<std::vector<double>>& in, size_t i, int64_t r,
                    int64_t c, std::vector<Var>& leaves) {
        Var re = t.leaf(r, c, in[2 * i], true);
        Var im = t.leaf(r, c, in[2 * i + 1], true);
        leaves.push_back(re);
        leaves.push_back(im);
        return CVar{re, im};
    };

    cases.push_back({"cmatmul + cadjoint",
                     {{{3, 4}, {3, 4}, {4, 3}, {4, 3}},
                      [&](Tape& t, const std::vector<std::vector<double>>& in,
                          std::vector<Var>& leaves) {
                          CVar a = cleaf(t, in, 0, 3, 4, leaves);
                          CVar b = cleaf(t, in, 1, 4, 3, leaves);
                          CVar c = t.cmatmul(t.cadjoint(t.cmatmul(a, b)), a);
                          return t.add(scalarize(t, c.re, 21), scalarize(t, c.im, 22));
                      }}});
    cases.push_back({"cmatvec + cnorm + cscale_real",
                     {{{4, 4}, {4, 4}, {4, 1}, {4, 1}},
                      [&](Tape& t, const std::vector<std::vector<double>>& in,
                          std::vector<Var>& leaves) {
                          CVar a = cleaf(t, in, 0, 4, 4, leaves);
                          CVar x = cleaf(t, in, 1, 4, 1, leaves);
                          CVar y = t.cmatvec(a, x);
                          CVar yn = t.cscale_real(y, t.recip(t.cnorm(y)));
                          return t.add(scalarize(t, yn.re, 23), scalarize(t, yn.im, 24));
                      }}});
    cases.push_back({"cinner + cmod2 + ckron",
                     {{{3, 1}, {3, 1}, {3, 1}, {3, 1}},
                      [&](Tape& t, const std::vector<std::vector<double>>& in,
                          std::vector<Var>& leaves) {
                          CVar a = cleaf(t, in, 0, 3, 1, leaves);
                          CVar b = cleaf(t, in, 1, 3, 1, leaves);
                          CVar k = t.ckron(a, b);
                          Var q = t.cmod2(t.cinner(k, k));
                          return t.add(t.sum(q), t.sum(t.cmod2(t.cinner(a, b))));
                      }}});
    cases.push_back({"couter_conj + cadd_identity + cscale",
                     {{{3, 1}, {3, 1}},
                      [&](Tape& t, const std::vector<std::vector<double>>& in,
                          std::vector<Var>& leaves) {
                          CVar a = cleaf(t, in, 0, 3, 1, leaves);
                          CVar rho = t.cadd_identity(t.cscale(t.couter_conj(a, a), 0.7, -0.2));
                          return t.add(scalarize(t, rho.re, 25), scalarize(t, rho.im, 26));
                      }}});
    cases.push_back({"cmeasure_bank",
                     {{{5, 9}, {5, 9}, {9, 1}, {9, 1}},
                      [&](Tape& t, const std::vector<std::vector<double>>& in,
                          std::vector<Var>& leaves) {
                          CVar bank = cleaf(t, in, 0, 5, 9, leaves);
                          CVar psi = cleaf(t, in, 1, 9, 1, leaves);
                          return scalarize(t, t.cmeasure_bank(bank, psi), 27);
                      }}});
    cases.push_back({"matrix_exp_i through measurement",
                     {{{4, 4}, {4, 4}, {4, 1}, {4, 1}},
                      [&](Tape& t, const std::vector<std::vector<double>>& in,
                          std::vector<Var>& leaves) {
                          CVar a = cleaf(t, in, 0, 4, 4, leaves);
                          CVar x = cleaf(t, in, 1, 4, 1, leaves);
                          // Hermitian input for the propagator.  Project onto a
                          // fixed vector so the loss is not a unitary invariant.
                          CVar h = t.cscale(t.cadd(a, t.cadjoint(a)), 0.5, 0.0);
                          CVar u = t.matrix_exp_i(h, 0.3);
                          CVar y = t.cmatvec(u, x);
                          CVar m = {t.constant(4, 1, random_vec(4, 71)),
                                    t.constant(4, 1, random_vec(4, 72))};
                          return t.cmod2(t.cinner(m, y));
                      }}});

    for (auto& c : cases) {
        CAPTURE(std::string(c.name));
        std::vector<std::vector<double>> inputs;
        for (size_t i = 0; i < c.check.shapes.size(); ++i)
            inputs.push_back(random_vec(
                static_cast<size_t>(c.check.shapes[i].first * c.check.shapes[i].second),
                2000 + 47 * i, 0.6));
        CHECK(c.check.max_rel_err(inputs) < 1e-4);
    }
}

TEST_CASE("complex matmul agrees with the expanded real block form") {
    const int64_t n = 6;
    auto ar = random_vec(static_cast<size_t>(n * n), 31);
    auto ai = random_vec(static_cast<size_t>(n * n), 32);
    auto br = random_vec(static_cast<size_t>(n * n), 33);
    auto bi = random_vec(static_cast<size_t>(n * n), 34);

    Tape t;
    CVar a = t.cleaf(n, n, ar, ai, false);
    CVar b = t.cleaf(n, n, br, bi, false);
    CVar c = t.cmatmul(a, b);

    // Block form [[Re, -Im], [Im, Re]] acting on stacked [[Br], [Bi]].
    std::vector<double> block(static_cast<size_t>(4 * n * n));
    std::vector<double> stacked(static_cast<size_t>(2 * n * n));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) {
            block[static_cast<size_t>(i * 2 * n + j)] = ar[static_cast<size_t>(i * n + j)];
            block[static_cast<size_t>(i * 2 * n + n + j)] = -ai[static_cast<size_t>(i * n + j)];
            block[static_cast<size_t>((n + i) * 2 * n + j)] = ai[static_cast<size_t>(i * n + j)];
            block[static_cast<size_t>((n + i) * 2 * n + n + j)] =
                ar[static_cast<size_t>(i * n + j)];
            stacked[static_cast<size_t>(i * n + j)] = br[static_cast<size_t>(i * n + j)];
            stacked[static_cast<size_t>((n + i) * n + j)] = bi[static_cast<size_t>(i * n + j)];
        }
    Var bm = t.constant(2 * n, 2 * n, block);
    Var sm = t.constant(2 * n, n, stacked);
    Var prod = t.matmul(bm, sm);

    auto pr = t.val(prod);
    auto cr = t.val(c.re);
    auto ci = t.val(c.im);
    double worst = 0.0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) {
            worst = std::max(worst, std::fabs(pr[static_cast<size_t>(i * n + j)] -
                                              cr[static_cast<size_t>(i * n + j)]));
            worst = std::max(worst, std::fabs(pr[static_cast<size_t>((n + i) * n + j)] -
                                              ci[static_cast<size_t>(i * n + j)]));
        }
    CHECK(worst < 1e-12);
}

TEST_CASE("unit-state identities") {
    Tape t;
    // <a|a> = 1 for a unit vector.
    std::vector<double> re{0.6, 0.0}, im{0.0, 0.8};
    CVar a = t.cleaf(2, 1, re, im, false);
    CVar ip = t.cinner(a, a);
    CHECK(t.val0(ip.re) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(t.val0(ip.im) == doctest::Approx(0.0).epsilon(1e-12));

    // |(3 + 4i)/5|^2 = 1.
    std::vector<double> zr{0.6}, zi{0.8};
    CVar z = t.cleaf(1, 1, zr, zi, false);
    CHECK(t.val0(t.cmod2(z)) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("row max: value, argmax routing, tie to lowest index") {
    Tape t;
    std::vector<double> row{0.2, 0.9, 0.1};
    Var a = t.leaf(1, 3, row, true);
    Var mx = t.row_max(a);
    CHECK(t.val0(mx) == doctest::Approx(0.9));
    t.backward(mx);
    auto g = t.grad(a);
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 1.0);
    CHECK(g[2] == 0.0);

    Tape t2;
    std::vector<double> tie{0.5, 0.5, 0.3};
    Var b = t2.leaf(1, 3, tie, true);
    t2.backward(t2.row_max(b));
    auto g2 = t2.grad(b);
    CHECK(g2[0] == 1.0); // lowest index wins the tie
    CHECK(g2[1] == 0.0);
}

TEST_CASE("backward basics") {
    SUBCASE("sum gradient is all ones") {
        Tape t;
        std::vector<double> w{1.0, -2.0, 3.0};
        Var a = t.leaf(3, 1, w, true);
        t.backward(t.sum(a));
        auto g = t.grad(a);
        for (double v : g) CHECK(v == 1.0);
    }
    SUBCASE("norm of a normalized vector has zero gradient") {
        std::vector<double> re = random_vec(5, 77);
        std::vector<double> im = random_vec(5, 78);
        Tape t;
        CVar v = t.cleaf(5, 1, re, im, true);
        CVar psi = t.cnormalize(v);
        t.backward(t.cmod2(t.cinner(psi, psi)));
        double gmax = 0.0;
        for (double g : t.grad(v.re)) gmax = std::max(gmax, std::fabs(g));
        for (double g : t.grad(v.im)) gmax = std::max(gmax, std::fabs(g));
        CHECK(gmax < 1e-8);
    }
    SUBCASE("no requires_grad leaves: empty map, no error") {
        Tape t;
        std::vector<double> w{1.0, 2.0};
        Var a = t.leaf(2, 1, w, false);
        t.backward(t.sum(a));
        CHECK(t.leaf_gradients().empty());
    }
    SUBCASE("backward twice throws") {
        Tape t;
        std::vector<double> w{1.0};
        Var a = t.leaf(1, 1, w, true);
        Var l = t.sum(a);
        t.backward(l);
        CHECK_THROWS_AS(t.backward(l), TapeConsumed);
    }
    SUBCASE("non-finite forward output throws") {
        Tape t;
        std::vector<double> big{1000.0};
        Var a = t.leaf(1, 1, big, true);
        CHECK_THROWS_AS(t.exp(a), NonFiniteError);
    }
}

TEST_CASE("randomized composite graph passes gradient check at 1e-4") {
    // matmul -> matrix exponential -> measurement -> cross-entropy loss.
    GraphCheck check{
        {{4, 4}, {4, 4}, {4, 1}, {4, 1}, {3, 8}},
        [](Tape& t, const std::vector<std::vector<double>>& in, std::vector<Var>& leaves) {
            CVar a{t.leaf(4, 4, in[0], true), t.leaf(4, 4, in[1], true)};
            CVar x{t.leaf(4, 1, in[2], true), t.leaf(4, 1, in[3], true)};
            Var w = t.leaf(3, 8, in[4], true);
            leaves = {a.re, a.im, x.re, x.im, w};
            CVar h = t.cscale(t.cadd(a, t.cadjoint(a)), 0.5, 0.0);
            CVar u = t.matrix_exp_i(h, 0.4);
            CVar psi = t.cnormalize(t.cmatvec(u, x));
            std::array<Var, 2> parts{t.cmod2(psi), psi.re};
            Var feats = t.concat(parts);
            Var probs = t.softmax(t.matvec(w, feats));
            return t.scale(t.log(t.clamp_min(t.slice(probs, 1, 1), 1e-12)), -1.0);
        }};
    std::vector<std::vector<double>> inputs;
    const std::vector<std::pair<int64_t, int64_t>> shapes = check.shapes;
    for (size_t i = 0; i < shapes.size(); ++i)
        inputs.push_back(random_vec(
            static_cast<size_t>(shapes[i].first * shapes[i].second), 4000 + 13 * i, 0.7));
    CHECK(check.max_rel_err(inputs, 1e-4) < 1e-4);
}

TEST_CASE("grad_check utility") {
    SUBCASE("quadratic loss is exact") {
        ad::ParamStore ps;
        auto& w = ps.add("opt", "w", 2, 1);
        w.value = {1.0, 2.0};
        auto loss = [&]() {
            return 0.5 * (w.value[0] * w.value[0] + w.value[1] * w.value[1]);
        };
        auto grads = [&]() {
            std::map<std::string, std::vector<double>> g;
            g["opt/w"] = {w.value[0], w.value[1]};
            return g;
        };
        auto report = ad::grad_check(ps, loss, grads, 1e-8);
        REQUIRE(report.groups.size() == 1);
        CHECK(report.pass);
        CHECK(report.groups[0].max_rel_err < 1e-8);
    }
    SUBCASE("corrupted analytic gradient is caught") {
        ad::ParamStore ps;
        auto& w = ps.add("opt", "w", 2, 1);
        w.value = {0.7, -0.4};
        auto loss = [&]() {
            return 0.5 * (w.value[0] * w.value[0] + w.value[1] * w.value[1]);
        };
        auto bad_grads = [&]() {
            std::map<std::string, std::vector<double>> g;
            g["opt/w"] = {w.value[0], 0.0}; // missing second component
            return g;
        };
        auto report = ad::grad_check(ps, loss, bad_grads, 1e-4);
        CHECK_FALSE(report.pass);
    }
}
