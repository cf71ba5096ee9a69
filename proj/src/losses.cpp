#include "qjfuse/losses.hpp"

#include <array>
#include <cmath>

#include "qjfuse/errors.hpp"

namespace qjfuse::losses {

ad::Var task_loss(ad::Tape& t, std::span<const ad::Var> probs, std::span<const int> labels) {
    if (probs.empty() || probs.size() != labels.size())
        throw ShapeError("task_loss: batch sizes differ");
    ad::Var acc;
    for (size_t m = 0; m < probs.size(); ++m) {
        const int y = labels[m];
        if (y < 0 || y >= probs[m].size()) throw Error("task_loss: label out of range");
        ad::Var py = t.slice(probs[m], y, 1);
        ad::Var nll = t.scale(t.log(t.clamp_min(py, 1e-12)), -1.0);
        acc = m == 0 ? nll : t.add(acc, nll);
    }
    return t.scale(acc, 1.0 / static_cast<double>(probs.size()));
}

ad::Var cross_attention(ad::Tape& t, ad::CVar state_a, ad::CVar state_b,
                        const AttentionParams& p) {
    const int64_t d = state_a.size();
    if ((2 * d) % 4 != 0) throw ShapeError("cross_attention: 2D must be divisible by 4");
    const int64_t chunk = (2 * d) / 4;

    auto tokens = [&](ad::CVar s) {
        std::array<ad::Var, 2> parts{s.re, s.im};
        ad::Var flat = t.concat(std::span<const ad::Var>(parts.data(), parts.size()));
        return t.reshape(flat, 4, chunk); // 4 tokens of `chunk` dims
    };
    ad::Var xa = tokens(state_a);
    ad::Var xb = tokens(state_b);

    // Q from the query side, K/V from the context side.
    ad::Var q = t.matmul_nt(xa, p.wq);            // [4, chunk]
    ad::Var kk = t.matmul_nt(xb, p.wk);
    ad::Var vv = t.matmul_nt(xb, p.wv);
    ad::Var scores = t.scale(t.matmul_nt(q, kk), 1.0 / std::sqrt(static_cast<double>(chunk)));
    // Row-wise softmax over the 4 context tokens.
    std::vector<ad::Var> rows;
    for (int64_t i = 0; i < 4; ++i)
        rows.push_back(t.softmax(t.slice(t.reshape(scores, 16, 1), i * 4, 4)));
    ad::Var attn = t.reshape(t.concat(rows), 4, 4);
    ad::Var z = t.matmul(attn, vv); // [4, chunk]
    return t.reshape(z, 4 * chunk, 1);
}

ad::Var contrastive_loss(ad::Tape& t, std::span<const ad::Var> za,
                         std::span<const ad::Var> zb, const ContrastiveConfig& cfg) {
    if (za.empty() || za.size() != zb.size())
        throw ShapeError("contrastive_loss: batch sizes differ");
    if (cfg.temperature <= 0.0) throw Error("contrastive_loss: temperature must be > 0");
    const int64_t m = static_cast<int64_t>(za.size());
    const int64_t h = za[0].size();
    // With a single sample the positive is the whole partition function and
    // the loss is identically zero as a function of the inputs.
    if (m == 1) return t.scalar(0.0);

    // Cosine similarity == dot product of L2-normalized vectors.
    auto normalize_rows = [&](std::span<const ad::Var> zs) {
        std::vector<ad::Var> rows;
        rows.reserve(zs.size());
        for (const ad::Var& z : zs)
            rows.push_back(t.scale_var(z, t.recip(t.add_const(t.l2norm(z), 1e-12))));
        return t.reshape(t.concat(rows), m, h);
    };
    ad::Var a_mat = normalize_rows(za);
    ad::Var b_mat = normalize_rows(zb);

    ad::Var sims = t.scale(t.matmul_nt(a_mat, b_mat), 1.0 / cfg.temperature); // [m,m]
    // loss_i = log(sum_k exp(s_ik)) - s_ii ; |s| <= 1/tau so plain exp is safe.
    ad::Var lse = t.log(t.row_sum(t.exp(sims)));
    ad::Var diag = t.diag(sims);
    return t.mean(t.sub(lse, diag));
}

TotalLoss total_loss(ad::Tape& t, ad::Var task, ad::Var con, ad::Var w_task, ad::Var w_con) {
    TotalLoss out;
    out.alpha = t.softplus(w_task);
    out.beta = t.softplus(w_con);
    ad::Var weighted = t.add(t.mul(out.alpha, task), t.mul(out.beta, con));
    ad::Var barrier = t.scale(t.add(t.log(out.alpha), t.log(out.beta)), -0.5);
    out.total = t.add(weighted, barrier);
    return out;
}

} // namespace qjfuse::losses
