#include "qjfuse/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <numeric>

#include <json.hpp>

#include "qjfuse/errors.hpp"
#include "qjfuse/quantum.hpp"
#include "qjfuse/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace qjfuse::model {

using ad::CVar;
using ad::Tape;
using ad::Var;
using nlohmann::json;

Variant variant_from_string(const std::string& s) {
    if (s == "full") return Variant::Full;
    if (s == "no_qj") return Variant::NoQj;
    if (s == "unitary_only") return Variant::UnitaryOnly;
    if (s == "dm_concat") return Variant::DmConcat;
    if (s == "dm_add") return Variant::DmAdd;
    if (s.rfind("single:", 0) == 0) return Variant::SingleModality;
    throw ConfigError("unknown variant '" + s + "'");
}

std::string variant_to_string(Variant v) {
    switch (v) {
        case Variant::Full: return "full";
        case Variant::NoQj: return "no_qj";
        case Variant::UnitaryOnly: return "unitary_only";
        case Variant::DmConcat: return "dm_concat";
        case Variant::DmAdd: return "dm_add";
        case Variant::SingleModality: return "single";
    }
    return "?";
}

std::vector<std::string> ModelConfig::active_modalities() const {
    if (variant == Variant::SingleModality) {
        if (single_modality.empty()) throw ConfigError("single-modality variant needs a modality");
        return {single_modality};
    }
    return modalities;
}

int64_t ModelConfig::num_pairs() const {
    const auto act = active_modalities();
    return act.size() == 1 ? 1 : static_cast<int64_t>(act.size());
}

void ModelConfig::validate() const {
    if (state_dim < 2) throw ConfigError("state_dim must be >= 2");
    if ((2 * state_dim) % 4 != 0) throw ConfigError("state_dim must be even for attention chunks");
    if (channels < 1) throw ConfigError("channels must be >= 1");
    if (measurements < 1) throw ConfigError("measurements must be >= 1");
    if (classes < 2) throw ConfigError("classes must be >= 2");
    if (time_steps < 1) throw ConfigError("time_steps must be >= 1");
    if (dt <= 0.0) throw ConfigError("dt must be > 0");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
    if (modalities.size() < 2) throw ConfigError("need at least 2 modalities");
    for (const auto& m : modalities)
        if (!feature_dims.count(m)) throw ConfigError("missing feature dim for '" + m + "'");
    if (variant == Variant::SingleModality) {
        bool known = false;
        for (const auto& m : modalities) known = known || m == single_modality;
        if (!known) throw ConfigError("single modality '" + single_modality + "' not in modalities");
    }
}

namespace {

struct PairSpec {
    int a = 0, b = 0;
    uint64_t key = 0; // stable across modality-order rotations
};

std::vector<PairSpec> make_pairs(const std::vector<std::string>& mods) {
    std::vector<PairSpec> out;
    const int n = static_cast<int>(mods.size());
    if (n == 1) {
        out.push_back({0, 0, rng::hash_str(mods[0] + "|" + mods[0])});
        return out;
    }
    for (int i = 0; i < n; ++i) {
        const int j = (i + 1) % n;
        out.push_back({i, j, rng::hash_str(mods[static_cast<size_t>(i)] + "|" +
                                           mods[static_cast<size_t>(j)])});
    }
    return out;
}

bool uses_trajectory(Variant v) {
    return v == Variant::Full || v == Variant::UnitaryOnly || v == Variant::SingleModality;
}
bool uses_measurement(Variant v) { return v != Variant::DmConcat && v != Variant::DmAdd; }
bool uses_generators(Variant v) { return uses_trajectory(v); }

void fill_gaussian(std::vector<double>& v, rng::Stream s, double scale) {
    for (double& x : v) x = scale * s.gaussian();
}

} // namespace

FusionModel::FusionModel(ModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

void FusionModel::init_params(uint64_t seed) {
    params_ = ad::ParamStore();
    rng::Stream root(rng::mix(seed, rng::hash_str("init")));
    const int64_t d = cfg_.state_dim;
    const int64_t jdim = cfg_.joint_dim();

    for (const auto& mod : cfg_.modalities) {
        const int64_t dm = cfg_.feature_dims.at(mod);
        auto& lng = params_.add(mod, "ln_gamma", dm, 1);
        std::fill(lng.value.begin(), lng.value.end(), 1.0);
        params_.add(mod, "ln_beta", dm, 1);
        auto& w = params_.add(mod, "W", 2 * d, dm);
        fill_gaussian(w.value, root.child(mod).child("W"),
                      1.0 / std::sqrt(static_cast<double>(dm)));
        auto& b = params_.add(mod, "b", 2 * d, 1);
        fill_gaussian(b.value, root.child(mod).child("b"), cfg_.init_bias);
    }

    if (uses_generators(cfg_.variant)) {
        const int64_t gens = cfg_.shared_generators ? 1 : cfg_.num_pairs();
        for (int64_t g = 0; g < gens; ++g) {
            const std::string tag = std::to_string(g);
            auto& are = params_.add("qjump", "A" + tag + "_re", jdim, jdim);
            auto& aim = params_.add("qjump", "A" + tag + "_im", jdim, jdim);
            fill_gaussian(are.value, root.child("A_re").child(static_cast<uint64_t>(g)),
                          cfg_.init_hamiltonian);
            fill_gaussian(aim.value, root.child("A_im").child(static_cast<uint64_t>(g)),
                          cfg_.init_hamiltonian);
            for (int64_t k = 0; k < cfg_.channels; ++k) {
                auto& lre = params_.add("qjump", "L" + tag + "_" + std::to_string(k) + "_re",
                                        jdim, jdim);
                auto& lim = params_.add("qjump", "L" + tag + "_" + std::to_string(k) + "_im",
                                        jdim, jdim);
                const uint64_t kk = static_cast<uint64_t>(g * cfg_.channels + k);
                fill_gaussian(lre.value, root.child("L_re").child(kk), cfg_.init_lindblad);
                fill_gaussian(lim.value, root.child("L_im").child(kk), cfg_.init_lindblad);
            }
            auto& rates = params_.add("qjump", "rates" + tag, cfg_.channels, 1);
            std::fill(rates.value.begin(), rates.value.end(), cfg_.init_rate);
        }
    }

    if (uses_measurement(cfg_.variant)) {
        auto& bre = params_.add("bank", "re", cfg_.measurements, jdim);
        auto& bim = params_.add("bank", "im", cfg_.measurements, jdim);
        fill_gaussian(bre.value, root.child("bank_re"), 1.0 / std::sqrt(static_cast<double>(jdim)));
        fill_gaussian(bim.value, root.child("bank_im"), 1.0 / std::sqrt(static_cast<double>(jdim)));

        const int64_t hw = cfg_.hidden_width();
        auto& w1 = params_.add("head", "w1", hw, cfg_.measurements);
        fill_gaussian(w1.value, root.child("head_w1"),
                      1.0 / std::sqrt(static_cast<double>(cfg_.measurements)));
        params_.add("head", "b1", hw, 1);
        auto& w2 = params_.add("head", "w2", cfg_.classes, hw);
        fill_gaussian(w2.value, root.child("head_w2"), 1.0 / std::sqrt(static_cast<double>(hw)));
        params_.add("head", "b2", cfg_.classes, 1);
    } else {
        // Density-matrix fusion variants use one linear readout.
        const int64_t per = 2 * d * d;
        const int64_t width = cfg_.variant == Variant::DmConcat
                                  ? per * static_cast<int64_t>(cfg_.modalities.size())
                                  : per;
        auto& w = params_.add("head", "dm_w", cfg_.classes, width);
        fill_gaussian(w.value, root.child("dm_w"), 1.0 / std::sqrt(static_cast<double>(width)));
        params_.add("head", "dm_b", cfg_.classes, 1);
        if (cfg_.variant == Variant::DmAdd)
            params_.add("head", "dm_mix", static_cast<int64_t>(cfg_.modalities.size()), 1);
    }

    const bool con_active = cfg_.contrastive && cfg_.active_modalities().size() >= 2;
    if (con_active) {
        const int64_t chunk = (2 * d) / 4;
        for (const char* nm : {"wq", "wk", "wv"}) {
            auto& w = params_.add("attention", nm, chunk, chunk);
            fill_gaussian(w.value, root.child("attention").child(nm),
                          1.0 / std::sqrt(static_cast<double>(chunk)));
        }
    }

    auto& wt = params_.add("loss", "w_task", 1, 1);
    wt.value[0] = std::log(std::exp(1.0) - 1.0); // softplus^-1(1)
    if (con_active) {
        auto& wc = params_.add("loss", "w_con", 1, 1);
        wc.value[0] = std::log(std::exp(1.0) - 1.0);
    }
}

// ---------------------------------------------------------------------------
// Batch execution

namespace {

struct SharedGenerator {
    CVar a_leaf;
    std::vector<CVar> l_leaves;
    Var rate_leaf;
    CVar unitary;
    CVar unitary_power; // U^T for the jump-free variant
    bool has_power = false;
    std::vector<double> gammas;
};

struct SharedBuild {
    Tape tape;
    std::vector<SharedGenerator> gens;
    CVar bank_leaf;
    CVar bank_hat;
    bool has_bank = false;
};

struct SampleRun {
    std::unique_ptr<Tape> tape;
    Var nll;
    std::vector<Var> z_vecs;                  // 2 per contrastive pair
    std::vector<std::pair<std::string, Var>> direct_leaves;
    // Cut-tensor leaves (copies of shared outputs used by this sample).
    std::vector<std::optional<CVar>> u_leaf;  // per generator
    std::vector<std::optional<CVar>> u_power_leaf;
    std::vector<std::vector<std::optional<CVar>>> l_leaf;
    std::optional<CVar> bank_leaf;
    Var head_w1, head_b1, head_w2, head_b2;   // cached head leaves
    SampleOutput out;
    int64_t ds_index = 0;
    int64_t ds_index_in_batch = 0;
};

CVar leaf_from(Tape& dst, const Tape& src, CVar v, bool requires_grad) {
    return dst.cleaf(v.rows(), v.cols(), src.val(v.re), src.val(v.im), requires_grad);
}

} // namespace

struct BatchRunner {
    FusionModel& m;
    const ModelConfig& cfg;
    const data::Dataset& ds;
    std::span<const int64_t> indices;
    uint64_t seed;
    const BatchOptions& opt;

    std::vector<std::string> active;
    std::vector<PairSpec> pairs;
    std::vector<std::pair<int, int>> con_pairs; // unordered modality index pairs
    bool con_active = false;

    BatchRunner(FusionModel& model, const data::Dataset& dataset,
                std::span<const int64_t> idx, uint64_t sd, const BatchOptions& o)
        : m(model), cfg(model.cfg_), ds(dataset), indices(idx), seed(sd), opt(o) {
        active = cfg.active_modalities();
        pairs = make_pairs(active);
        if (cfg.contrastive && active.size() >= 2)
            for (size_t i = 0; i < active.size(); ++i)
                for (size_t j = i + 1; j < active.size(); ++j)
                    con_pairs.push_back({static_cast<int>(i), static_cast<int>(j)});
        con_active = !con_pairs.empty();
    }

    bool opts_need_steps() const {
        return opt.capture_steps || opt.record_entropy || opt.forced_branches != nullptr ||
               opt.captured_branches != nullptr;
    }

    SharedBuild build_shared() {
        SharedBuild sb;
        Tape& t = sb.tape;
        if (uses_generators(cfg.variant)) {
            const int64_t gens = cfg.shared_generators ? 1 : cfg.num_pairs();
            for (int64_t g = 0; g < gens; ++g) {
                const std::string tag = std::to_string(g);
                SharedGenerator sg;
                auto& are = m.params_.at("qjump/A" + tag + "_re");
                auto& aim = m.params_.at("qjump/A" + tag + "_im");
                sg.a_leaf = t.cleaf(are.rows, are.cols, are.value, aim.value, true);
                CVar h = qjump::build_hamiltonian(t, sg.a_leaf);
                sg.unitary = t.matrix_exp_i(h, cfg.dt);
                for (int64_t k = 0; k < cfg.channels; ++k) {
                    auto& lre = m.params_.at("qjump/L" + tag + "_" + std::to_string(k) + "_re");
                    auto& lim = m.params_.at("qjump/L" + tag + "_" + std::to_string(k) + "_im");
                    sg.l_leaves.push_back(t.cleaf(lre.rows, lre.cols, lre.value, lim.value, true));
                }
                auto& rates = m.params_.at("qjump/rates" + tag);
                sg.rate_leaf = t.leaf(rates.rows, rates.cols, rates.value, true);
                Var gam = t.softplus(sg.rate_leaf);
                auto gv = t.val(gam);
                if (cfg.variant == Variant::UnitaryOnly) {
                    sg.gammas.assign(static_cast<size_t>(cfg.channels), 0.0);
                    // Constant propagator: precompute U^T by squaring so each
                    // sample needs a single apply.
                    CVar base = sg.unitary;
                    CVar acc;
                    bool has = false;
                    int e = cfg.time_steps;
                    while (e > 0) {
                        if (e & 1) {
                            acc = has ? t.cmatmul(acc, base) : base;
                            has = true;
                        }
                        e >>= 1;
                        if (e) base = t.cmatmul(base, base);
                    }
                    sg.unitary_power = acc;
                    sg.has_power = true;
                } else {
                    sg.gammas.assign(gv.begin(), gv.end());
                }
                sb.gens.push_back(std::move(sg));
            }
        }
        if (uses_measurement(cfg.variant)) {
            auto& bre = m.params_.at("bank/re");
            auto& bim = m.params_.at("bank/im");
            sb.bank_leaf = t.cleaf(bre.rows, bre.cols, bre.value, bim.value, true);
            Var norms2 = t.add(t.row_sum(t.mul(sb.bank_leaf.re, sb.bank_leaf.re)),
                               t.row_sum(t.mul(sb.bank_leaf.im, sb.bank_leaf.im)));
            Var inv = t.recip(t.sqrt(t.clamp_min(norms2, 1e-24)));
            sb.bank_hat = {t.mul_colvec(sb.bank_leaf.re, inv),
                           t.mul_colvec(sb.bank_leaf.im, inv)};
            sb.has_bank = true;
        }
        return sb;
    }

    Var param_leaf(SampleRun& run, const std::string& key) {
        auto& p = m.params_.at(key);
        Var v = run.tape->leaf(p.rows, p.cols, p.value, true);
        run.direct_leaves.push_back({key, v});
        return v;
    }

    CVar encode_modality(SampleRun& run, const std::string& mod,
                         const std::vector<double>& features) {
        Tape& t = *run.tape;
        const int64_t d = cfg.state_dim;
        Var x = t.constant(static_cast<int64_t>(features.size()), 1, features);
        Var g = param_leaf(run, mod + "/ln_gamma");
        Var b = param_leaf(run, mod + "/ln_beta");
        Var z = t.layer_norm(x, g, b);
        Var w = param_leaf(run, mod + "/W");
        Var bias = param_leaf(run, mod + "/b");
        Var act = t.tanh(t.add(t.matvec(w, z), bias));
        CVar cv{t.slice(act, 0, d), t.slice(act, d, d)};
        Var nrm = t.cnorm(cv);
        if (t.val0(nrm) <= 1e-12) {
            // Degenerate input (for instance a fully masked modality):
            // substitute the uniform superposition and count the event.
            ++run.out.substituted_states;
            std::vector<double> re(static_cast<size_t>(d), 1.0 / std::sqrt(static_cast<double>(d)));
            std::vector<double> im(static_cast<size_t>(d), 0.0);
            return t.cleaf(d, 1, re, im, false);
        }
        return t.cscale_real(cv, t.recip(nrm));
    }

    // Evolves one pair state; returns the final state and fills diagnostics.
    CVar evolve_pair(SampleRun& run, const SharedBuild& sb, int pair_idx, CVar psi0,
                     rng::Stream traj_stream, std::vector<CVar>* step_states) {
        Tape& t = *run.tape;
        const int gen = cfg.shared_generators ? 0 : pair_idx;
        const SharedGenerator& sg = sb.gens[static_cast<size_t>(gen)];
        const bool pure_unitary = cfg.variant == Variant::UnitaryOnly;

        auto ensure_u = [&]() -> CVar {
            auto& slot = run.u_leaf[static_cast<size_t>(gen)];
            if (!slot) slot = leaf_from(t, sb.tape, sg.unitary, true);
            return *slot;
        };
        auto ensure_l = [&](int k) -> CVar {
            auto& slot = run.l_leaf[static_cast<size_t>(gen)][static_cast<size_t>(k)];
            if (!slot) slot = leaf_from(t, sb.tape, sg.l_leaves[static_cast<size_t>(k)], true);
            return *slot;
        };

        std::vector<qjump::RawOperator> raw(sg.l_leaves.size());
        for (size_t k = 0; k < sg.l_leaves.size(); ++k)
            raw[k] = {sb.tape.val(sg.l_leaves[k].re).data(),
                      sb.tape.val(sg.l_leaves[k].im).data()};

        const std::vector<int>* forced = nullptr;
        if (opt.forced_branches) forced = &(*opt.forced_branches)[static_cast<size_t>(
            run.ds_index_in_batch)][static_cast<size_t>(pair_idx)];

        CVar psi = psi0;
        auto& branches = run.out.step_branches[static_cast<size_t>(pair_idx)];
        auto& entropies = run.out.step_entropies[static_cast<size_t>(pair_idx)];

        // Jump-free evolution with no per-step hooks collapses to one apply
        // of the precomputed power.
        if (pure_unitary && sg.has_power && !opts_need_steps()) {
            auto& slot = run.u_power_leaf[static_cast<size_t>(gen)];
            if (!slot) slot = leaf_from(t, sb.tape, sg.unitary_power, true);
            branches.assign(static_cast<size_t>(cfg.time_steps), -1);
            return t.cmatvec(*slot, psi);
        }

        if (step_states) step_states->push_back(psi);
        if (opt.record_entropy)
            entropies.push_back(quant::von_neumann_entropy(
                quant::joint_from_tape(t, psi, cfg.state_dim)));

        for (int step = 0; step < cfg.time_steps; ++step) {
            int branch = -1;
            if (forced) {
                branch = (*forced)[static_cast<size_t>(step)];
            } else if (!pure_unitary) {
                auto probs = qjump::branch_probabilities(t.val(psi.re), t.val(psi.im), raw,
                                                         sg.gammas, cfg.convention);
                rng::Stream step_stream = traj_stream.child(static_cast<uint64_t>(step));
                bool clamped = false;
                branch = qjump::sample_branch(probs.gamma_total, cfg.dt, probs.p, step_stream,
                                              &clamped);
                if (clamped) ++run.out.clamped_steps;
            }
            if (branch >= 0) {
                CVar lpsi = t.cmatvec(ensure_l(branch), psi);
                Var nrm = t.cnorm(lpsi);
                if (t.val0(nrm) <= 1e-12) {
                    ++run.out.annihilated_steps;
                    branch = -1;
                    psi = t.cmatvec(ensure_u(), psi);
                } else {
                    psi = t.cscale_real(lpsi, t.recip(nrm));
                    ++run.out.jumps;
                }
            } else {
                psi = t.cmatvec(ensure_u(), psi);
            }
            branches.push_back(branch);
            if (opt.record_entropy)
                entropies.push_back(quant::von_neumann_entropy(
                    quant::joint_from_tape(t, psi, cfg.state_dim)));
            if (step_states) step_states->push_back(psi);
        }
        return psi;
    }

    Var measure_pool_head(SampleRun& run, CVar bank_hat, std::span<const CVar> states,
                          rng::Stream drop_stream, bool with_dropout,
                          std::vector<double>* probs_out) {
        Tape& t = *run.tape;
        std::vector<Var> qcols;
        qcols.reserve(states.size());
        for (const CVar& s : states) qcols.push_back(t.cmeasure_bank(bank_hat, s));
        Var stacked = t.reshape(t.concat(qcols), static_cast<int64_t>(states.size()),
                                cfg.measurements);
        Var pooled = t.row_max(t.transpose(stacked)); // [M]: max over pairs per row
        if (with_dropout && cfg.dropout > 0.0) pooled = apply_dropout(t, pooled, drop_stream, 0);

        Var w1 = run.head_w1.valid() ? run.head_w1 : (run.head_w1 = param_leaf(run, "head/w1"));
        Var b1 = run.head_b1.valid() ? run.head_b1 : (run.head_b1 = param_leaf(run, "head/b1"));
        Var w2 = run.head_w2.valid() ? run.head_w2 : (run.head_w2 = param_leaf(run, "head/w2"));
        Var b2 = run.head_b2.valid() ? run.head_b2 : (run.head_b2 = param_leaf(run, "head/b2"));
        Var h1 = t.relu(t.add(t.matvec(w1, pooled), b1));
        if (with_dropout && cfg.dropout > 0.0) h1 = apply_dropout(t, h1, drop_stream, 1);
        Var logits = t.add(t.matvec(w2, h1), b2);
        Var probs = t.softmax(logits);
        if (probs_out) {
            auto pv = t.val(probs);
            probs_out->assign(pv.begin(), pv.end());
        }
        return probs;
    }

    Var apply_dropout(Tape& t, Var x, rng::Stream stream, int layer) {
        rng::Stream s = stream.child("dropout").child(static_cast<uint64_t>(layer));
        const double keep = 1.0 - cfg.dropout;
        std::vector<double> mask(static_cast<size_t>(x.size()));
        for (double& v : mask) v = s.uniform() < keep ? 1.0 / keep : 0.0;
        return t.mul(x, t.constant(x.size(), 1, mask));
    }

    void forward_sample(SampleRun& run, const SharedBuild& sb) {
        Tape& t = *run.tape;
        const auto& rec = ds.records[static_cast<size_t>(run.ds_index)];
        // Trajectory draws depend only on (run seed, sample id): independent
        // of batch order, thread count and epoch.  Dropout masks re-sample
        // per epoch through their own stream.
        rng::Stream sample_stream(
            rng::mix(rng::mix(seed, rng::hash_str("fwd")), rng::hash_str(rec.id)));
        rng::Stream drop_stream = sample_stream.child("epoch").child(
            opt.train ? static_cast<uint64_t>(opt.epoch) : rng::hash_str("eval"));

        // Encode every configured modality (contrastive vectors may need
        // modalities the active pipeline does not).
        std::map<std::string, CVar> states;
        for (const auto& mod : cfg.modalities)
            states[mod] = encode_modality(run, mod, rec.features.at(mod));

        run.out.step_branches.assign(static_cast<size_t>(pairs.size()), {});
        run.out.step_entropies.assign(static_cast<size_t>(pairs.size()), {});

        Var probs;
        if (uses_measurement(cfg.variant)) {
            CVar bank = *run.bank_leaf;
            std::vector<CVar> entangled;
            std::vector<std::vector<CVar>> step_states(pairs.size());
            if (opt.captured_branches)
                (*opt.captured_branches)[static_cast<size_t>(run.ds_index_in_batch)]
                    .assign(pairs.size(), {});
            for (size_t n = 0; n < pairs.size(); ++n) {
                const auto& pr = pairs[n];
                CVar psi0 = t.ckron(states[active[static_cast<size_t>(pr.a)]],
                                    states[active[static_cast<size_t>(pr.b)]]);
                CVar fin = psi0;
                if (uses_trajectory(cfg.variant)) {
                    rng::Stream traj = sample_stream.child("traj").child(pr.key);
                    fin = evolve_pair(run, sb, static_cast<int>(n), psi0, traj,
                                      opt.capture_steps ? &step_states[n] : nullptr);
                } else {
                    // Tensor product only: no evolution.
                    if (opt.record_entropy) {
                        const double e0 = quant::von_neumann_entropy(
                            quant::joint_from_tape(t, psi0, cfg.state_dim));
                        run.out.step_entropies[n].assign(
                            static_cast<size_t>(cfg.time_steps + 1), e0);
                    }
                    if (opt.capture_steps)
                        step_states[n].assign(static_cast<size_t>(cfg.time_steps + 1), psi0);
                }
                if (opt.captured_branches)
                    (*opt.captured_branches)[static_cast<size_t>(run.ds_index_in_batch)][n] =
                        run.out.step_branches[n];
                entangled.push_back(fin);
                run.out.pair_entropies.push_back(quant::von_neumann_entropy(
                    quant::joint_from_tape(t, fin, cfg.state_dim)));
            }
            probs = measure_pool_head(run, bank, entangled, drop_stream, opt.train,
                                      &run.out.probs);
            if (opt.capture_steps) {
                run.out.step_probs.resize(static_cast<size_t>(cfg.time_steps + 1));
                for (int st = 0; st <= cfg.time_steps; ++st) {
                    std::vector<CVar> at_step;
                    at_step.reserve(pairs.size());
                    for (size_t n = 0; n < pairs.size(); ++n)
                        at_step.push_back(step_states[n][static_cast<size_t>(st)]);
                    measure_pool_head(run, bank, at_step, drop_stream, false,
                                      &run.out.step_probs[static_cast<size_t>(st)]);
                }
            }
        } else {
            // Density-matrix fusion baselines.
            std::vector<Var> feats;
            std::vector<CVar> rhos;
            for (const auto& mod : cfg.modalities)
                rhos.push_back(t.couter_conj(states[mod], states[mod]));
            if (cfg.variant == Variant::DmConcat) {
                for (const CVar& r : rhos) {
                    feats.push_back(r.re);
                    feats.push_back(r.im);
                }
            } else {
                Var mixw = t.softmax(param_leaf(run, "head/dm_mix"));
                CVar mix;
                for (size_t i = 0; i < rhos.size(); ++i) {
                    CVar term = t.cscale_real(rhos[i], t.slice(mixw, static_cast<int64_t>(i), 1));
                    mix = i == 0 ? term : t.cadd(mix, term);
                }
                feats.push_back(mix.re);
                feats.push_back(mix.im);
            }
            std::vector<Var> flat;
            for (Var f : feats) flat.push_back(t.reshape(f, f.size(), 1));
            Var x = t.concat(flat);
            Var logits = t.add(t.matvec(param_leaf(run, "head/dm_w"), x),
                               param_leaf(run, "head/dm_b"));
            Var pv = t.softmax(logits);
            auto vals = t.val(pv);
            run.out.probs.assign(vals.begin(), vals.end());
            probs = pv;
            run.out.pair_entropies.assign(pairs.size(), 0.0);
            if (opt.record_entropy)
                for (auto& se : run.out.step_entropies)
                    se.assign(static_cast<size_t>(cfg.time_steps + 1), 0.0);
            if (opt.capture_steps)
                run.out.step_probs.assign(static_cast<size_t>(cfg.time_steps + 1),
                                          run.out.probs);
        }

        run.out.predicted = 0;
        for (size_t c = 1; c < run.out.probs.size(); ++c)
            if (run.out.probs[c] > run.out.probs[static_cast<size_t>(run.out.predicted)])
                run.out.predicted = static_cast<int>(c);

        std::array<Var, 1> batch1{probs};
        std::array<int, 1> label1{rec.label};
        run.nll = losses::task_loss(t, batch1, label1);

        if (con_active) {
            losses::AttentionParams ap{param_leaf(run, "attention/wq"),
                                       param_leaf(run, "attention/wk"),
                                       param_leaf(run, "attention/wv")};
            for (const auto& [i, j] : con_pairs) {
                CVar sa = states[active[static_cast<size_t>(i)]];
                CVar sb2 = states[active[static_cast<size_t>(j)]];
                run.z_vecs.push_back(losses::cross_attention(t, sa, sb2, ap));
                run.z_vecs.push_back(losses::cross_attention(t, sb2, sa, ap));
            }
        }
    }

    BatchOutput run() {
        SharedBuild sb = build_shared();
        const size_t nb = indices.size();
        std::vector<SampleRun> runs(nb);

        const int64_t gens = uses_generators(cfg.variant)
                                 ? (cfg.shared_generators ? 1 : cfg.num_pairs())
                                 : 0;
        for (size_t i = 0; i < nb; ++i) {
            runs[i].tape = std::make_unique<Tape>();
            runs[i].ds_index = indices[i];
            runs[i].ds_index_in_batch = static_cast<int64_t>(i);
            runs[i].u_leaf.assign(static_cast<size_t>(gens), std::nullopt);
            runs[i].u_power_leaf.assign(static_cast<size_t>(gens), std::nullopt);
            runs[i].l_leaf.assign(static_cast<size_t>(gens),
                                  std::vector<std::optional<CVar>>(
                                      static_cast<size_t>(cfg.channels), std::nullopt));
            if (sb.has_bank)
                runs[i].bank_leaf = leaf_from(*runs[i].tape, sb.tape, sb.bank_hat, true);
        }

        // Parallel forward: samples are independent; all shared state is
        // read-only.  Exceptions are stashed and rethrown after the join.
        std::exception_ptr first_error = nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) if (opt.parallel)
#endif
        for (int64_t i = 0; i < static_cast<int64_t>(nb); ++i) {
            if (first_error) continue;
            try {
                forward_sample(runs[static_cast<size_t>(i)], sb);
            } catch (...) {
#ifdef _OPENMP
#pragma omp critical
#endif
                if (!first_error) first_error = std::current_exception();
            }
        }
        if (first_error) std::rethrow_exception(first_error);

        // Batch tape: combine per-sample losses and contrastive vectors.
        Tape bt;
        std::vector<Var> nll_leaves(nb);
        for (size_t i = 0; i < nb; ++i)
            nll_leaves[i] = bt.leaf(1, 1, runs[i].tape->val(runs[i].nll), true);
        Var task = bt.mean(bt.concat(nll_leaves));

        std::vector<std::vector<Var>> z_leaves(nb);
        Var con;
        if (con_active && nb >= 1) {
            for (size_t i = 0; i < nb; ++i)
                for (const Var& z : runs[i].z_vecs)
                    z_leaves[i].push_back(
                        bt.leaf(z.size(), 1, runs[i].tape->val(z), true));
            for (size_t pp = 0; pp < con_pairs.size(); ++pp) {
                std::vector<Var> za, zb;
                for (size_t i = 0; i < nb; ++i) {
                    za.push_back(z_leaves[i][2 * pp]);
                    zb.push_back(z_leaves[i][2 * pp + 1]);
                }
                Var l = losses::contrastive_loss(bt, za, zb, {cfg.temperature});
                con = pp == 0 ? l : bt.add(con, l);
            }
            con = bt.scale(con, 1.0 / static_cast<double>(con_pairs.size()));
        }

        BatchOutput out;
        Var total, alpha, beta;
        Var wt = bt.leaf(1, 1, m.params_.at("loss/w_task").value, true);
        if (con_active) {
            Var wc = bt.leaf(1, 1, m.params_.at("loss/w_con").value, true);
            auto tl = losses::total_loss(bt, task, con, wt, wc);
            total = tl.total;
            alpha = tl.alpha;
            beta = tl.beta;
            out.contrastive_loss = bt.val0(con);
            out.beta = bt.val0(beta);
            if (opt.compute_grad) {
                bt.backward(total);
                auto g = bt.grad(wc);
                if (!g.empty()) m.params_.at("loss/w_con").grad[0] += g[0];
            }
        } else {
            alpha = bt.softplus(wt);
            total = bt.add(bt.mul(alpha, task), bt.scale(bt.log(alpha), -0.5));
            if (opt.compute_grad) bt.backward(total);
        }
        out.total_loss = bt.val0(total);
        out.task_loss = bt.val0(task);
        out.alpha = bt.val0(alpha);

        if (opt.compute_grad) {
            auto gwt = bt.grad(wt);
            if (!gwt.empty()) m.params_.at("loss/w_task").grad[0] += gwt[0];

            // Seed each sample tape with its cotangents and sweep (parallel).
            for (size_t i = 0; i < nb; ++i) {
                auto gn = bt.grad(nll_leaves[i]);
                if (!gn.empty()) runs[i].tape->seed_grad(runs[i].nll, gn);
                for (size_t z = 0; z < z_leaves[i].size(); ++z) {
                    auto gz = bt.grad(z_leaves[i][z]);
                    if (!gz.empty()) runs[i].tape->seed_grad(runs[i].z_vecs[z], gz);
                }
            }
            first_error = nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) if (opt.parallel)
#endif
            for (int64_t i = 0; i < static_cast<int64_t>(nb); ++i) {
                if (first_error) continue;
                try {
                    runs[static_cast<size_t>(i)].tape->backward_from_seeds();
                } catch (...) {
#ifdef _OPENMP
#pragma omp critical
#endif
                    if (!first_error) first_error = std::current_exception();
                }
            }
            if (first_error) std::rethrow_exception(first_error);

            reduce_gradients(sb, runs);
        }

        out.samples.resize(nb);
        for (size_t i = 0; i < nb; ++i) out.samples[i] = std::move(runs[i].out);
        return out;
    }

    // Deterministic reduction: ascending dataset index, then the shared tape.
    void reduce_gradients(SharedBuild& sb, std::vector<SampleRun>& runs) {
        std::vector<size_t> order(runs.size());
        std::iota(order.begin(), order.end(), size_t{0});
        std::sort(order.begin(), order.end(), [&](size_t x, size_t y) {
            return runs[x].ds_index < runs[y].ds_index;
        });

        auto accumulate = [&](const Tape& t, Var leaf, std::vector<double>& dst) {
            auto g = t.grad(leaf);
            if (g.empty()) return;
            for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        };

        for (size_t oi : order) {
            SampleRun& r = runs[oi];
            const Tape& t = *r.tape;
            for (const auto& [name, leaf] : r.direct_leaves)
                accumulate(t, leaf, m.params_.at(name).grad);
            // Cut tensors: seed the shared tape.
            for (size_t g = 0; g < r.u_leaf.size(); ++g)
                if (r.u_leaf[g]) {
                    const CVar& lf = *r.u_leaf[g];
                    if (t.has_grad(lf.re)) sb.tape.seed_grad(sb.gens[g].unitary.re, t.grad(lf.re));
                    if (t.has_grad(lf.im)) sb.tape.seed_grad(sb.gens[g].unitary.im, t.grad(lf.im));
                }
            for (size_t g = 0; g < r.u_power_leaf.size(); ++g)
                if (r.u_power_leaf[g]) {
                    const CVar& lf = *r.u_power_leaf[g];
                    if (t.has_grad(lf.re))
                        sb.tape.seed_grad(sb.gens[g].unitary_power.re, t.grad(lf.re));
                    if (t.has_grad(lf.im))
                        sb.tape.seed_grad(sb.gens[g].unitary_power.im, t.grad(lf.im));
                }
            for (size_t g = 0; g < r.l_leaf.size(); ++g)
                for (size_t k = 0; k < r.l_leaf[g].size(); ++k)
                    if (r.l_leaf[g][k]) {
                        const CVar& lf = *r.l_leaf[g][k];
                        if (t.has_grad(lf.re))
                            sb.tape.seed_grad(sb.gens[g].l_leaves[k].re, t.grad(lf.re));
                        if (t.has_grad(lf.im))
                            sb.tape.seed_grad(sb.gens[g].l_leaves[k].im, t.grad(lf.im));
                    }
            if (r.bank_leaf && sb.has_bank) {
                const CVar& lf = *r.bank_leaf;
                if (t.has_grad(lf.re)) sb.tape.seed_grad(sb.bank_hat.re, t.grad(lf.re));
                if (t.has_grad(lf.im)) sb.tape.seed_grad(sb.bank_hat.im, t.grad(lf.im));
            }
        }

        sb.tape.backward_from_seeds();
        const int64_t gens = static_cast<int64_t>(sb.gens.size());
        for (int64_t g = 0; g < gens; ++g) {
            const std::string tag = std::to_string(g);
            const SharedGenerator& sg = sb.gens[static_cast<size_t>(g)];
            accumulate(sb.tape, sg.a_leaf.re, m.params_.at("qjump/A" + tag + "_re").grad);
            accumulate(sb.tape, sg.a_leaf.im, m.params_.at("qjump/A" + tag + "_im").grad);
            for (int64_t k = 0; k < cfg.channels; ++k) {
                const std::string lk = "qjump/L" + tag + "_" + std::to_string(k);
                accumulate(sb.tape, sg.l_leaves[static_cast<size_t>(k)].re,
                           m.params_.at(lk + "_re").grad);
                accumulate(sb.tape, sg.l_leaves[static_cast<size_t>(k)].im,
                           m.params_.at(lk + "_im").grad);
            }
            accumulate(sb.tape, sg.rate_leaf, m.params_.at("qjump/rates" + tag).grad);
        }
        if (sb.has_bank) {
            accumulate(sb.tape, sb.bank_leaf.re, m.params_.at("bank/re").grad);
            accumulate(sb.tape, sb.bank_leaf.im, m.params_.at("bank/im").grad);
        }
    }
};

BatchOutput FusionModel::run_batch(const data::Dataset& ds, std::span<const int64_t> indices,
                                   uint64_t seed, const BatchOptions& opt) {
    if (indices.empty()) throw Error("run_batch: empty batch");
    BatchRunner runner(*this, ds, indices, seed, opt);
    return runner.run();
}

// ---------------------------------------------------------------------------
// Checkpoint: "QJF1" magic, u64 header length, JSON header, float64 arrays.

namespace {

json config_to_json(const ModelConfig& c) {
    json j;
    j["state_dim"] = c.state_dim;
    j["channels"] = c.channels;
    j["measurements"] = c.measurements;
    j["classes"] = c.classes;
    j["time_steps"] = c.time_steps;
    j["dt"] = c.dt;
    j["convention"] = c.convention == qjump::Convention::Paper ? "paper" : "standard";
    j["hidden"] = c.hidden;
    j["variant"] = variant_to_string(c.variant);
    j["single_modality"] = c.single_modality;
    j["shared_generators"] = c.shared_generators;
    j["dropout"] = c.dropout;
    j["temperature"] = c.temperature;
    j["contrastive"] = c.contrastive;
    j["modalities"] = c.modalities;
    j["feature_dims"] = c.feature_dims;
    j["init_hamiltonian"] = c.init_hamiltonian;
    j["init_lindblad"] = c.init_lindblad;
    j["init_rate"] = c.init_rate;
    j["init_bias"] = c.init_bias;
    return j;
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.state_dim = j.at("state_dim").get<int64_t>();
    c.channels = j.at("channels").get<int64_t>();
    c.measurements = j.at("measurements").get<int64_t>();
    c.classes = j.at("classes").get<int>();
    c.time_steps = j.at("time_steps").get<int>();
    c.dt = j.at("dt").get<double>();
    c.convention = j.at("convention").get<std::string>() == "paper"
                       ? qjump::Convention::Paper
                       : qjump::Convention::Standard;
    c.hidden = j.at("hidden").get<int64_t>();
    const std::string var = j.at("variant").get<std::string>();
    c.single_modality = j.at("single_modality").get<std::string>();
    c.variant = var == "single" ? Variant::SingleModality : variant_from_string(var);
    c.shared_generators = j.at("shared_generators").get<bool>();
    c.dropout = j.at("dropout").get<double>();
    c.temperature = j.at("temperature").get<double>();
    c.contrastive = j.at("contrastive").get<bool>();
    c.modalities = j.at("modalities").get<std::vector<std::string>>();
    c.feature_dims = j.at("feature_dims").get<std::map<std::string, int64_t>>();
    c.init_hamiltonian = j.at("init_hamiltonian").get<double>();
    c.init_lindblad = j.at("init_lindblad").get<double>();
    c.init_rate = j.at("init_rate").get<double>();
    c.init_bias = j.value("init_bias", 0.02);
    return c;
}

} // namespace

void FusionModel::save_checkpoint(const std::string& path, uint64_t seed) const {
    json header;
    header["format"] = "qjf1";
    header["seed"] = seed;
    header["config"] = config_to_json(cfg_);
    header["score_centers"] = score_centers_;
    json arrays = json::array();
    int64_t offset = 0;
    for (const auto& a : params_.arrays()) {
        arrays.push_back({{"name", a.name},
                          {"rows", a.rows},
                          {"cols", a.cols},
                          {"offset", offset}});
        offset += a.size();
    }
    header["arrays"] = std::move(arrays);
    const std::string hs = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open " + path + " for writing");
    os.write("QJF1", 4);
    const uint64_t hlen = hs.size();
    os.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& a : params_.arrays())
        os.write(reinterpret_cast<const char*>(a.value.data()),
                 static_cast<std::streamsize>(a.value.size() * sizeof(double)));
    if (!os) throw CheckpointError("write failure for " + path);
}

FusionModel FusionModel::load_checkpoint(const std::string& path, uint64_t* seed) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "QJF1", 4) != 0)
        throw CheckpointError("bad magic in " + path);
    uint64_t hlen = 0;
    is.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    is.read(hs.data(), static_cast<std::streamsize>(hlen));
    json header;
    try {
        header = json::parse(hs);
    } catch (const json::parse_error& e) {
        throw CheckpointError("header parse failure: " + std::string(e.what()));
    }
    if (header.value("format", "") != "qjf1")
        throw CheckpointError("unsupported checkpoint format");

    FusionModel m(config_from_json(header.at("config")));
    m.init_params(header.value("seed", uint64_t{0}));
    m.score_centers_ = header.value("score_centers", std::vector<double>{});
    if (seed) *seed = header.value("seed", uint64_t{0});

    for (const auto& a : header.at("arrays")) {
        const std::string name = a.at("name").get<std::string>();
        auto& p = m.params_.at(name);
        if (p.rows != a.at("rows").get<int64_t>() || p.cols != a.at("cols").get<int64_t>())
            throw CheckpointError("array shape mismatch for " + name);
    }
    for (auto& p : m.params_.arrays()) {
        is.read(reinterpret_cast<char*>(p.value.data()),
                static_cast<std::streamsize>(p.value.size() * sizeof(double)));
        if (!is) throw CheckpointError("truncated checkpoint data");
    }
    return m;
}

} // namespace qjfuse::model
