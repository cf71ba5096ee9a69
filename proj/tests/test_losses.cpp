#include <doctest.h>

#include <array>
#include <cmath>

#include "qjfuse/losses.hpp"
#include "test_helpers.hpp"

using namespace qjfuse;
using ad::CVar;
using ad::Tape;
using ad::Var;
using testutil::GraphCheck;
using testutil::random_vec;

TEST_CASE("task loss fixtures") {
    SUBCASE("perfect one-hot prediction costs zero") {
        Tape t;
        std::vector<double> p1{0.0, 1.0, 0.0};
        std::array<Var, 1> probs{t.leaf(3, 1, p1, false)};
        std::array<int, 1> labels{1};
        CHECK(t.val0(losses::task_loss(t, probs, labels)) == doctest::Approx(0.0));
    }
    SUBCASE("uniform prediction over 3 classes costs ln 3") {
        Tape t;
        std::vector<double> u(3, 1.0 / 3.0);
        std::array<Var, 2> probs{t.leaf(3, 1, u, false), t.leaf(3, 1, u, false)};
        std::array<int, 2> labels{0, 2};
        CHECK(t.val0(losses::task_loss(t, probs, labels)) ==
              doctest::Approx(std::log(3.0)).epsilon(1e-12));
    }
    SUBCASE("zero probability on the true class is clamped finite") {
        Tape t;
        std::vector<double> p{1.0, 0.0};
        std::array<Var, 1> probs{t.leaf(2, 1, p, false)};
        std::array<int, 1> labels{1};
        const double loss = t.val0(losses::task_loss(t, probs, labels));
        CHECK(loss <= -std::log(1e-12) + 1e-9);
        CHECK(loss == doctest::Approx(-std::log(1e-12)));
    }
    SUBCASE("invalid label throws") {
        Tape t;
        std::vector<double> p{0.5, 0.5};
        std::array<Var, 1> probs{t.leaf(2, 1, p, false)};
        std::array<int, 1> labels{2};
        CHECK_THROWS(losses::task_loss(t, probs, labels));
    }
}

namespace {

CVar unit_state(Tape& t, uint64_t seed, int64_t d, bool rg, std::vector<Var>* leaves) {
    Var re = t.leaf(d, 1, random_vec(static_cast<size_t>(d), seed), rg);
    Var im = t.leaf(d, 1, random_vec(static_cast<size_t>(d), seed + 1), rg);
    if (leaves) {
        leaves->push_back(re);
        leaves->push_back(im);
    }
    return t.cnormalize({re, im});
}

} // namespace

TEST_CASE("cross attention") {
    SUBCASE("identical states give identical vectors") {
        Tape t;
        CVar s = unit_state(t, 51, 6, false, nullptr);
        losses::AttentionParams ap{t.leaf(3, 3, random_vec(9, 60), false),
                                   t.leaf(3, 3, random_vec(9, 61), false),
                                   t.leaf(3, 3, random_vec(9, 62), false)};
        Var za = losses::cross_attention(t, s, s, ap);
        Var zb = losses::cross_attention(t, s, s, ap);
        auto a = t.val(za);
        auto b = t.val(zb);
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-14));
    }
    SUBCASE("zero value weights give zero vectors") {
        Tape t;
        CVar s1 = unit_state(t, 70, 6, false, nullptr);
        CVar s2 = unit_state(t, 72, 6, false, nullptr);
        std::vector<double> zeros(9, 0.0);
        losses::AttentionParams ap{t.leaf(3, 3, random_vec(9, 74), false),
                                   t.leaf(3, 3, random_vec(9, 75), false),
                                   t.leaf(3, 3, zeros, false)};
        Var z = losses::cross_attention(t, s1, s2, ap);
        for (double v : t.val(z)) CHECK(v == 0.0);
    }
    SUBCASE("gradients match finite differences") {
        GraphCheck check{
            {{6, 1}, {6, 1}, {6, 1}, {6, 1}, {3, 3}, {3, 3}, {3, 3}},
            [](Tape& t, const std::vector<std::vector<double>>& in, std::vector<Var>& leaves) {
                Var re1 = t.leaf(6, 1, in[0], true);
                Var im1 = t.leaf(6, 1, in[1], true);
                Var re2 = t.leaf(6, 1, in[2], true);
                Var im2 = t.leaf(6, 1, in[3], true);
                losses::AttentionParams ap{t.leaf(3, 3, in[4], true), t.leaf(3, 3, in[5], true),
                                           t.leaf(3, 3, in[6], true)};
                leaves = {re1, im1, re2, im2, ap.wq, ap.wk, ap.wv};
                CVar a = t.cnormalize({re1, im1});
                CVar b = t.cnormalize({re2, im2});
                Var za = losses::cross_attention(t, a, b, ap);
                Var zb = losses::cross_attention(t, b, a, ap);
                return t.add(t.l2norm(za), t.sum(zb));
            }};
        std::vector<std::vector<double>> inputs;
        for (size_t i = 0; i < check.shapes.size(); ++i)
            inputs.push_back(random_vec(
                static_cast<size_t>(check.shapes[i].first * check.shapes[i].second),
                900 + 7 * i, 0.8));
        CHECK(check.max_rel_err(inputs) < 1e-4);
    }
}

TEST_CASE("contrastive loss fixtures") {
    SUBCASE("batch of one is exactly zero") {
        Tape t;
        std::array<Var, 1> za{t.leaf(4, 1, random_vec(4, 31), false)};
        std::array<Var, 1> zb{t.leaf(4, 1, random_vec(4, 32), false)};
        CHECK(t.val0(losses::contrastive_loss(t, za, zb, {0.07})) == 0.0);
    }
    SUBCASE("orthogonal negative at tau 0.07") {
        Tape t;
        std::vector<double> e0{1.0, 0.0}, e1{0.0, 1.0};
        std::array<Var, 2> za{t.leaf(2, 1, e0, false), t.leaf(2, 1, e1, false)};
        std::array<Var, 2> zb{t.leaf(2, 1, e0, false), t.leaf(2, 1, e1, false)};
        const double loss = t.val0(losses::contrastive_loss(t, za, zb, {0.07}));
        const double expect = std::log(1.0 + std::exp(-1.0 / 0.07));
        CHECK(loss == doctest::Approx(expect).epsilon(1e-9));
        CHECK(loss < 1e-5);
    }
    SUBCASE("identical positives across the batch cost ln M") {
        Tape t;
        std::vector<double> v{0.3, -0.7, 0.2};
        std::array<Var, 4> za{t.leaf(3, 1, v, false), t.leaf(3, 1, v, false),
                              t.leaf(3, 1, v, false), t.leaf(3, 1, v, false)};
        std::array<Var, 4> zb = za;
        CHECK(t.val0(losses::contrastive_loss(t, za, zb, {0.07})) ==
              doctest::Approx(std::log(4.0)).epsilon(1e-9));
    }
    SUBCASE("invariant to positive rescaling (cosine homogeneity)") {
        Tape t;
        std::vector<Var> za, zb, za_s, zb_s;
        for (uint64_t i = 0; i < 5; ++i) {
            auto a = random_vec(6, 400 + i);
            auto b = random_vec(6, 500 + i);
            auto a_s = a;
            auto b_s = b;
            for (auto& v : a_s) v *= 3.7;
            for (auto& v : b_s) v *= 0.2;
            za.push_back(t.leaf(6, 1, a, false));
            zb.push_back(t.leaf(6, 1, b, false));
            za_s.push_back(t.leaf(6, 1, a_s, false));
            zb_s.push_back(t.leaf(6, 1, b_s, false));
        }
        const double l1 = t.val0(losses::contrastive_loss(t, za, zb, {0.07}));
        const double l2 = t.val0(losses::contrastive_loss(t, za_s, zb_s, {0.07}));
        CHECK(std::fabs(l1 - l2) < 1e-9);
    }
    SUBCASE("gradients match finite differences") {
        GraphCheck check{
            {{4, 1}, {4, 1}, {4, 1}, {4, 1}, {4, 1}, {4, 1}},
            [](Tape& t, const std::vector<std::vector<double>>& in, std::vector<Var>& leaves) {
                std::vector<Var> za, zb;
                for (size_t i = 0; i < 3; ++i) za.push_back(t.leaf(4, 1, in[i], true));
                for (size_t i = 3; i < 6; ++i) zb.push_back(t.leaf(4, 1, in[i], true));
                leaves.insert(leaves.end(), za.begin(), za.end());
                leaves.insert(leaves.end(), zb.begin(), zb.end());
                return losses::contrastive_loss(t, za, zb, {0.1});
            }};
        std::vector<std::vector<double>> inputs;
        for (size_t i = 0; i < 6; ++i) inputs.push_back(random_vec(4, 600 + 3 * i));
        CHECK(check.max_rel_err(inputs) < 1e-4);
    }
}

TEST_CASE("total loss with trainable weights") {
    const double softplus_inv_1 = std::log(std::exp(1.0) - 1.0);
    SUBCASE("unit weights reduce to the plain sum") {
        Tape t;
        Var task = t.scalar(0.42);
        Var con = t.scalar(1.37);
        Var wt = t.scalar(softplus_inv_1, true);
        Var wc = t.scalar(softplus_inv_1, true);
        auto tl = losses::total_loss(t, task, con, wt, wc);
        CHECK(t.val0(tl.alpha) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(t.val0(tl.beta) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(t.val0(tl.total) == doctest::Approx(0.42 + 1.37).epsilon(1e-12));
    }
    SUBCASE("zero losses leave only the barrier") {
        Tape t;
        Var wt = t.scalar(0.2, true);
        Var wc = t.scalar(-0.3, true);
        auto tl = losses::total_loss(t, t.scalar(0.0), t.scalar(0.0), wt, wc);
        const double a = std::log1p(std::exp(0.2));
        const double b = std::log1p(std::exp(-0.3));
        CHECK(t.val0(tl.total) == doctest::Approx(-0.5 * (std::log(a) + std::log(b))));
    }
    SUBCASE("gradient pushes alpha toward 1/(2 task)") {
        // With fixed task loss l, d total / d alpha = l - 1/(2 alpha):
        // positive at alpha = 1 for l = 2, and the stationary alpha is 1/(2l).
        Tape t;
        Var task = t.scalar(2.0);
        Var con = t.scalar(0.0);
        Var wt = t.scalar(softplus_inv_1, true);
        Var wc = t.scalar(softplus_inv_1, true);
        auto tl = losses::total_loss(t, task, con, wt, wc);
        t.backward(tl.total);
        const double g = t.grad(wt)[0];
        CHECK(g > 0.0);
        // Numeric check of the stationary point alpha* = 1/(2*2) = 0.25.
        auto total_at = [&](double alpha) { return alpha * 2.0 - 0.5 * std::log(alpha); };
        const double at_star = total_at(0.25);
        CHECK(total_at(0.25 + 1e-4) > at_star);
        CHECK(total_at(0.25 - 1e-4) > at_star);
    }
    SUBCASE("gradients match finite differences") {
        GraphCheck check{{{1, 1}, {1, 1}, {1, 1}, {1, 1}},
                         [](Tape& t, const std::vector<std::vector<double>>& in,
                            std::vector<Var>& leaves) {
                             Var task = t.leaf(1, 1, in[0], true);
                             Var con = t.leaf(1, 1, in[1], true);
                             Var wt = t.leaf(1, 1, in[2], true);
                             Var wc = t.leaf(1, 1, in[3], true);
                             leaves = {task, con, wt, wc};
                             return losses::total_loss(t, t.cmod2({task, con}),
                                                       t.softplus(con), wt, wc)
                                 .total;
                         }};
        std::vector<std::vector<double>> inputs{{0.9}, {0.4}, {0.3}, {-0.2}};
        CHECK(check.max_rel_err(inputs) < 1e-4);
    }
}
