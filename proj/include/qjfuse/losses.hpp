// Task cross-entropy, cross-attention alignment vectors, in-batch
// contrastive loss and the trainable-weight composite objective.

#pragma once

#include <span>
#include <vector>

#include "qjfuse/autodiff.hpp"

namespace qjfuse::losses {

struct ContrastiveConfig {
    double temperature = 0.07;
};

// Mean over the batch of -log p_label with probabilities clamped to
// [1e-12, 1].  `probs` holds one probability vector per sample.
ad::Var task_loss(ad::Tape& t, std::span<const ad::Var> probs, std::span<const int> labels);

// Single-head scaled-dot attention over a 4-chunk tokenization of the
// concatenated (re, im) state vector.  Returns the attended vector for the
// (query=a, context=b) direction; call twice with roles swapped for the pair.
struct AttentionParams {
    ad::Var wq, wk, wv; // [chunk, chunk]
};
ad::Var cross_attention(ad::Tape& t, ad::CVar state_a, ad::CVar state_b,
                        const AttentionParams& p);

// InfoNCE with in-batch negatives over cosine similarity:
//   -(1/M) sum_m log exp(sim(za_m, zb_m)/tau) / sum_k exp(sim(za_m, zb_k)/tau)
ad::Var contrastive_loss(ad::Tape& t, std::span<const ad::Var> za,
                         std::span<const ad::Var> zb, const ContrastiveConfig& cfg);

// alpha * task + beta * con - (log alpha + log beta)/2 with
// alpha = softplus(w_task), beta = softplus(w_con).  The log barrier keeps
// the trainable weights away from the degenerate zero solution.
struct TotalLoss {
    ad::Var total, alpha, beta;
};
TotalLoss total_loss(ad::Tape& t, ad::Var task, ad::Var con, ad::Var w_task, ad::Var w_con);

} // namespace qjfuse::losses
