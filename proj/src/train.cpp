#include "qjfuse/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "qjfuse/errors.hpp"
#include "qjfuse/rng.hpp"

namespace qjfuse::train {

AdamW::AdamW(ad::ParamStore& params, OptimizerConfig cfg)
    : params_(params), cfg_(std::move(cfg)) {
    for (const auto& a : params_.arrays()) {
        m_.emplace_back(a.value.size(), 0.0);
        v_.emplace_back(a.value.size(), 0.0);
    }
}

double AdamW::rate_for_group(const std::string& group) const {
    auto it = cfg_.learning_rates.find(group);
    if (it != cfg_.learning_rates.end()) return it->second;
    it = cfg_.learning_rates.find("default");
    if (it != cfg_.learning_rates.end()) return it->second;
    throw ConfigError("no learning rate for group '" + group + "' and no default");
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto& arrays = params_.arrays();
    for (size_t a = 0; a < arrays.size(); ++a) {
        const double lr = rate_for_group(arrays[a].group);
        auto& val = arrays[a].value;
        auto& grad = arrays[a].grad;
        auto& m = m_[a];
        auto& v = v_[a];
        for (size_t i = 0; i < val.size(); ++i) {
            const double g = grad[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            // Decoupled decay: shrink first, then apply the Adam update.
            val[i] = val[i] * (1.0 - lr * cfg_.weight_decay) -
                     lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

namespace {

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const size_t n = x.size();
    if (n < 2) return 0.0;
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx <= 0.0 || syy <= 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

int bin_of(double score, int k) {
    // Uniform bins over [-3, 3].
    const double t = (score + 3.0) / 6.0;
    int b = static_cast<int>(std::floor(t * k));
    return std::min(std::max(b, 0), k - 1);
}

} // namespace

Metrics compute_metrics(const std::vector<std::vector<double>>& probs,
                        const std::vector<int>& labels,
                        const std::vector<std::optional<double>>& scores,
                        const std::vector<double>& score_centers,
                        const std::vector<int>& binned_accs) {
    if (probs.size() != labels.size()) throw Error("compute_metrics: size mismatch");
    Metrics m;
    m.count = static_cast<int64_t>(probs.size());
    if (probs.empty()) return m;
    const int classes = static_cast<int>(probs[0].size());

    std::vector<int64_t> tp(static_cast<size_t>(classes), 0);
    std::vector<int64_t> fp(static_cast<size_t>(classes), 0);
    std::vector<int64_t> fn(static_cast<size_t>(classes), 0);
    std::vector<int64_t> support(static_cast<size_t>(classes), 0);
    int64_t correct = 0;
    double loss = 0.0;

    std::vector<double> exp_scores, true_scores;
    for (size_t i = 0; i < probs.size(); ++i) {
        int pred = 0;
        for (int c = 1; c < classes; ++c)
            if (probs[i][static_cast<size_t>(c)] > probs[i][static_cast<size_t>(pred)]) pred = c;
        const int y = labels[i];
        ++support[static_cast<size_t>(y)];
        if (pred == y) {
            ++correct;
            ++tp[static_cast<size_t>(y)];
        } else {
            ++fp[static_cast<size_t>(pred)];
            ++fn[static_cast<size_t>(y)];
        }
        loss += -std::log(std::max(probs[i][static_cast<size_t>(y)], 1e-12));

        if (!score_centers.empty()) {
            double se = 0.0;
            for (int c = 0; c < classes; ++c)
                se += probs[i][static_cast<size_t>(c)] * score_centers[static_cast<size_t>(c)];
            exp_scores.push_back(se);
            const double ts = scores[i] ? *scores[i] : static_cast<double>(y);
            true_scores.push_back(ts);
        }
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(m.count);
    m.task_loss = loss / static_cast<double>(m.count);
    m.extra["acc_" + std::to_string(classes)] = m.accuracy;

    double f1_sum = 0.0;
    for (int c = 0; c < classes; ++c) {
        const double tpc = static_cast<double>(tp[static_cast<size_t>(c)]);
        const double prec = tpc + static_cast<double>(fp[static_cast<size_t>(c)]) > 0
                                ? tpc / (tpc + static_cast<double>(fp[static_cast<size_t>(c)]))
                                : 0.0;
        const double rec = tpc + static_cast<double>(fn[static_cast<size_t>(c)]) > 0
                               ? tpc / (tpc + static_cast<double>(fn[static_cast<size_t>(c)]))
                               : 0.0;
        const double f1 = prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
        f1_sum += f1 * static_cast<double>(support[static_cast<size_t>(c)]);
    }
    m.f1_weighted = f1_sum / static_cast<double>(m.count);

    if (!exp_scores.empty()) {
        double mae = 0.0;
        for (size_t i = 0; i < exp_scores.size(); ++i) mae += std::fabs(exp_scores[i] - true_scores[i]);
        m.mae = mae / static_cast<double>(exp_scores.size());
        m.corr = pearson(exp_scores, true_scores);
        for (int k : binned_accs) {
            int64_t ok = 0;
            for (size_t i = 0; i < exp_scores.size(); ++i)
                if (bin_of(exp_scores[i], k) == bin_of(true_scores[i], k)) ++ok;
            m.extra["acc_" + std::to_string(k) + "_binned"] =
                static_cast<double>(ok) / static_cast<double>(exp_scores.size());
        }
    }
    return m;
}

EvalResult evaluate(model::FusionModel& m, const data::Dataset& ds,
                    const std::vector<int64_t>& indices, uint64_t seed,
                    int64_t batch_size, const std::vector<int>& binned_accs,
                    bool record_entropy, bool capture_steps, bool parallel) {
    EvalResult out;
    model::BatchOptions opt;
    opt.train = false;
    opt.compute_grad = false;
    opt.record_entropy = record_entropy;
    opt.capture_steps = capture_steps;
    opt.parallel = parallel;

    auto batches = data::make_batches(indices, batch_size, seed, 0, false);
    std::vector<std::vector<double>> probs;
    std::vector<int> labels;
    std::vector<std::optional<double>> scores;
    double entropy_sum = 0.0;
    int64_t entropy_n = 0;
    for (const auto& batch : batches) {
        auto bo = m.run_batch(ds, batch, seed, opt);
        for (size_t i = 0; i < batch.size(); ++i) {
            const auto& rec = ds.records[static_cast<size_t>(batch[i])];
            probs.push_back(bo.samples[i].probs);
            labels.push_back(rec.label);
            scores.push_back(rec.score);
            for (double e : bo.samples[i].pair_entropies) {
                entropy_sum += e;
                ++entropy_n;
            }
            out.jumps += bo.samples[i].jumps;
            out.substituted += bo.samples[i].substituted_states;
            out.outputs.push_back(std::move(bo.samples[i]));
        }
    }
    out.metrics = compute_metrics(probs, labels, scores, m.score_centers(), binned_accs);
    out.mean_final_entropy = entropy_n > 0 ? entropy_sum / static_cast<double>(entropy_n) : 0.0;
    return out;
}

TrainResult train_model(model::FusionModel& m, const data::Dataset& ds,
                        const TrainConfig& cfg) {
    TrainResult res;
    res.splits = data::split_dataset(ds, cfg.train_ratio, cfg.val_ratio, cfg.test_ratio,
                                     cfg.seed);

    // Class score centers from the training split.
    {
        const int classes = m.config().classes;
        std::vector<double> sum(static_cast<size_t>(classes), 0.0);
        std::vector<int64_t> cnt(static_cast<size_t>(classes), 0);
        for (int64_t idx : res.splits.train) {
            const auto& rec = ds.records[static_cast<size_t>(idx)];
            const double s = rec.score ? *rec.score : static_cast<double>(rec.label);
            sum[static_cast<size_t>(rec.label)] += s;
            ++cnt[static_cast<size_t>(rec.label)];
        }
        std::vector<double> centers(static_cast<size_t>(classes), 0.0);
        for (int c = 0; c < classes; ++c)
            centers[static_cast<size_t>(c)] =
                cnt[static_cast<size_t>(c)] > 0
                    ? sum[static_cast<size_t>(c)] / static_cast<double>(cnt[static_cast<size_t>(c)])
                    : static_cast<double>(c);
        m.set_score_centers(std::move(centers));
    }

    AdamW opt(m.params(), cfg.optimizer);

    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best_params;
    int patience_left = cfg.patience;

    auto snapshot = [&]() {
        best_params.clear();
        for (const auto& a : m.params().arrays()) best_params.push_back(a.value);
    };
    auto restore = [&]() {
        if (best_params.empty()) return;
        auto& arrays = m.params().arrays();
        for (size_t i = 0; i < arrays.size(); ++i) arrays[i].value = best_params[i];
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto batches = data::make_batches(res.splits.train, cfg.batch_size, cfg.seed, epoch, true);
        double total = 0.0, task = 0.0, con = 0.0;
        double alpha = 0.0, beta = 0.0;
        int64_t jumps = 0;
        int64_t batch_id = 0;
        for (const auto& batch : batches) {
            model::BatchOptions bo;
            bo.train = true;
            bo.compute_grad = true;
            bo.epoch = epoch;
            bo.parallel = cfg.parallel;
            m.params().zero_grad();
            model::BatchOutput outb;
            try {
                outb = m.run_batch(ds, batch, cfg.seed, bo);
            } catch (const NonFiniteError& e) {
                std::string ids;
                for (int64_t idx : batch) {
                    if (!ids.empty()) ids += ",";
                    ids += ds.records[static_cast<size_t>(idx)].id;
                }
                throw NonFiniteError(std::string(e.what()) + " [epoch " +
                                     std::to_string(epoch) + " batch " +
                                     std::to_string(batch_id) + " samples " + ids + "]");
            }
            opt.step();
            total += outb.total_loss * static_cast<double>(batch.size());
            task += outb.task_loss * static_cast<double>(batch.size());
            con += outb.contrastive_loss * static_cast<double>(batch.size());
            alpha = outb.alpha;
            beta = outb.beta;
            for (const auto& s : outb.samples) jumps += s.jumps;
            ++batch_id;
        }
        const double n_train = static_cast<double>(res.splits.train.size());

        EvalResult val = evaluate(m, ds, res.splits.val, cfg.seed, cfg.batch_size, {},
                                  false, false, cfg.parallel);
        EpochStats st;
        st.epoch = epoch;
        st.train_total = total / n_train;
        st.train_task = task / n_train;
        st.train_con = con / n_train;
        st.val_task = val.metrics.task_loss;
        st.val_accuracy = val.metrics.accuracy;
        st.alpha = alpha;
        st.beta = beta;
        st.jumps = jumps;
        res.curve.push_back(st);
        if (cfg.verbose) {
            std::printf("epoch %3d  train %.4f  val %.4f  val-acc %.4f  jumps %lld\n",
                        epoch, st.train_task, st.val_task, st.val_accuracy,
                        static_cast<long long>(jumps));
            std::fflush(stdout);
        }

        if (val.metrics.task_loss < best_val - cfg.min_delta) {
            best_val = val.metrics.task_loss;
            res.best_epoch = epoch;
            snapshot();
            patience_left = cfg.patience;
        } else {
            --patience_left;
            if (patience_left <= 0) break;
        }
    }
    restore();
    res.best_val_loss = best_val;

    res.test_eval = evaluate(m, ds, res.splits.test, cfg.seed, cfg.batch_size,
                             cfg.binned_accs, false, false, cfg.parallel);
    res.test_metrics = res.test_eval.metrics;
    return res;
}

std::vector<StepReportRow> entropy_report(model::FusionModel& m, const data::Dataset& ds,
                                          const std::vector<int64_t>& indices, uint64_t seed,
                                          int64_t batch_size, bool parallel) {
    EvalResult ev = evaluate(m, ds, indices, seed, batch_size, {}, true, true, parallel);
    const int steps = m.config().time_steps;
    std::vector<StepReportRow> rows(static_cast<size_t>(steps + 1));
    std::vector<int64_t> jump_counts(static_cast<size_t>(steps + 1), 0);
    std::vector<int64_t> branch_counts(static_cast<size_t>(steps + 1), 0);
    std::vector<double> entropy_sums(static_cast<size_t>(steps + 1), 0.0);
    std::vector<int64_t> entropy_counts(static_cast<size_t>(steps + 1), 0);
    std::vector<int64_t> correct(static_cast<size_t>(steps + 1), 0);

    for (size_t s = 0; s < ev.outputs.size(); ++s) {
        const auto& out = ev.outputs[s];
        const int label = ds.records[static_cast<size_t>(indices[s])].label;
        for (const auto& per_pair : out.step_entropies)
            for (size_t t = 0; t < per_pair.size(); ++t) {
                entropy_sums[t] += per_pair[t];
                ++entropy_counts[t];
            }
        for (const auto& br : out.step_branches)
            for (size_t t = 0; t < br.size(); ++t) {
                if (br[t] >= 0) ++jump_counts[t + 1];
                ++branch_counts[t + 1];
            }
        for (size_t t = 0; t < out.step_probs.size(); ++t) {
            int pred = 0;
            for (size_t c = 1; c < out.step_probs[t].size(); ++c)
                if (out.step_probs[t][c] > out.step_probs[t][static_cast<size_t>(pred)])
                    pred = static_cast<int>(c);
            if (pred == label) ++correct[t];
        }
    }
    for (int t = 0; t <= steps; ++t) {
        auto& row = rows[static_cast<size_t>(t)];
        row.step = t;
        row.mean_entropy = entropy_counts[static_cast<size_t>(t)] > 0
                               ? entropy_sums[static_cast<size_t>(t)] /
                                     static_cast<double>(entropy_counts[static_cast<size_t>(t)])
                               : 0.0;
        row.jump_rate = branch_counts[static_cast<size_t>(t)] > 0
                            ? static_cast<double>(jump_counts[static_cast<size_t>(t)]) /
                                  static_cast<double>(branch_counts[static_cast<size_t>(t)])
                            : 0.0;
        row.accuracy_truncated =
            ev.outputs.empty() ? 0.0
                               : static_cast<double>(correct[static_cast<size_t>(t)]) /
                                     static_cast<double>(ev.outputs.size());
    }
    return rows;
}

MaskTable masking_table(model::FusionModel& m, const data::Dataset& ds,
                        const std::vector<int64_t>& indices, uint64_t seed,
                        int64_t batch_size, const std::vector<double>& rates,
                        int mask_seeds, const std::vector<int>& binned_accs, bool parallel) {
    if (mask_seeds < 1) throw ConfigError("mask_seeds must be >= 1");
    MaskTable table;
    for (double rate : rates) {
        MaskTableRow row;
        row.rate = rate;
        if (rate == 0.0) {
            row.metrics = evaluate(m, ds, indices, seed, batch_size, binned_accs, false,
                                   false, parallel)
                              .metrics;
        } else {
            // Average the metric values over independent mask draws.
            Metrics acc;
            for (int ms = 0; ms < mask_seeds; ++ms) {
                data::Dataset masked =
                    data::mask_features(ds, rate, rng::mix(seed, static_cast<uint64_t>(ms + 1)));
                Metrics mm = evaluate(m, masked, indices, seed, batch_size, binned_accs,
                                      false, false, parallel)
                                 .metrics;
                acc.accuracy += mm.accuracy;
                acc.f1_weighted += mm.f1_weighted;
                acc.mae += mm.mae;
                acc.corr += mm.corr;
                acc.task_loss += mm.task_loss;
                acc.count = mm.count;
                for (const auto& [k, v] : mm.extra) acc.extra[k] += v;
            }
            const double inv = 1.0 / static_cast<double>(mask_seeds);
            acc.accuracy *= inv;
            acc.f1_weighted *= inv;
            acc.mae *= inv;
            acc.corr *= inv;
            acc.task_loss *= inv;
            for (auto& [k, v] : acc.extra) v *= inv;
            row.metrics = acc;
        }
        table.rows.push_back(std::move(row));
    }
    // Average relative decline versus the unmasked row, higher-is-better metrics.
    const Metrics* base = nullptr;
    for (const auto& r : table.rows)
        if (r.rate == 0.0) base = &r.metrics;
    if (base) {
        auto drop = [&](auto get) {
            double s = 0.0;
            int64_t n = 0;
            for (const auto& r : table.rows) {
                if (r.rate == 0.0) continue;
                const double b = get(*base);
                if (b != 0.0) {
                    s += (b - get(r.metrics)) / b * 100.0;
                    ++n;
                }
            }
            return n > 0 ? s / static_cast<double>(n) : 0.0;
        };
        table.avg_drop_rate_pct["accuracy"] = drop([](const Metrics& x) { return x.accuracy; });
        table.avg_drop_rate_pct["f1_weighted"] =
            drop([](const Metrics& x) { return x.f1_weighted; });
        table.avg_drop_rate_pct["corr"] = drop([](const Metrics& x) { return x.corr; });
    }
    return table;
}

} // namespace qjfuse::train
