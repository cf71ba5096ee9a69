#include "qjfuse/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "qjfuse/errors.hpp"

namespace qjfuse::config {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed,
                    const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("bad value for '" + key + "': " + e.what());
    }
}

DatasetConfig parse_dataset(const json& j) {
    reject_unknown(j, {"synthetic", "path", "manifest", "ratios"}, "dataset");
    DatasetConfig d;
    if (j.contains("synthetic")) {
        const json& s = j.at("synthetic");
        reject_unknown(s, {"kind", "n", "dim", "noise", "seed", "modalities"},
                       "dataset.synthetic");
        data::SyntheticSpec spec;
        const std::string kind = get_or<std::string>(s, "kind", "xor_joint");
        if (kind == "xor_joint")
            spec.coupling = data::Coupling::XorJoint;
        else if (kind == "marginal")
            spec.coupling = data::Coupling::Marginal;
        else
            throw ConfigError("synthetic kind must be xor_joint or marginal");
        spec.n_samples = get_or<int64_t>(s, "n", spec.n_samples);
        spec.dim = get_or<int64_t>(s, "dim", spec.dim);
        spec.noise = get_or<double>(s, "noise", spec.noise);
        spec.seed = get_or<uint64_t>(s, "seed", spec.seed);
        spec.modalities = get_or<std::vector<std::string>>(s, "modalities", spec.modalities);
        d.synthetic = spec;
    } else {
        d.path = get_or<std::string>(j, "path", "");
        d.manifest = get_or<std::string>(j, "manifest", "");
        if (d.path.empty() || d.manifest.empty())
            throw ConfigError("dataset needs either 'synthetic' or 'path' + 'manifest'");
    }
    if (j.contains("ratios")) {
        auto r = j.at("ratios").get<std::vector<double>>();
        if (r.size() != 3) throw ConfigError("dataset.ratios must have 3 entries");
        d.train_ratio = r[0];
        d.val_ratio = r[1];
        d.test_ratio = r[2];
    }
    return d;
}

model::ModelConfig parse_model(const json& j) {
    reject_unknown(j,
                   {"state_dim", "channels", "measurements", "classes", "time_steps", "dt",
                    "convention", "hidden", "variant", "shared_generators", "dropout",
                    "temperature", "contrastive", "init_hamiltonian", "init_lindblad",
                    "init_rate", "init_bias"},
                   "model");
    model::ModelConfig m;
    m.state_dim = get_or<int64_t>(j, "state_dim", m.state_dim);
    m.channels = get_or<int64_t>(j, "channels", m.channels);
    m.measurements = get_or<int64_t>(j, "measurements", m.measurements);
    m.classes = get_or<int>(j, "classes", m.classes);
    m.time_steps = get_or<int>(j, "time_steps", m.time_steps);
    m.dt = get_or<double>(j, "dt", m.dt);
    const std::string conv = get_or<std::string>(j, "convention", "paper");
    if (conv == "paper")
        m.convention = qjump::Convention::Paper;
    else if (conv == "standard")
        m.convention = qjump::Convention::Standard;
    else
        throw ConfigError("model.convention must be paper or standard");
    m.hidden = get_or<int64_t>(j, "hidden", m.hidden);
    const std::string var = get_or<std::string>(j, "variant", "full");
    m.variant = model::variant_from_string(var);
    if (m.variant == model::Variant::SingleModality) m.single_modality = var.substr(7);
    m.shared_generators = get_or<bool>(j, "shared_generators", m.shared_generators);
    m.dropout = get_or<double>(j, "dropout", m.dropout);
    m.temperature = get_or<double>(j, "temperature", m.temperature);
    m.contrastive = get_or<bool>(j, "contrastive", m.contrastive);
    m.init_hamiltonian = get_or<double>(j, "init_hamiltonian", m.init_hamiltonian);
    m.init_lindblad = get_or<double>(j, "init_lindblad", m.init_lindblad);
    m.init_rate = get_or<double>(j, "init_rate", m.init_rate);
    m.init_bias = get_or<double>(j, "init_bias", m.init_bias);
    return m;
}

train::TrainConfig parse_train(const json& j) {
    reject_unknown(j,
                   {"batch_size", "epochs", "patience", "min_delta", "seed", "weight_decay",
                    "learning_rates", "beta1", "beta2", "eps"},
                   "train");
    train::TrainConfig t;
    t.batch_size = get_or<int64_t>(j, "batch_size", t.batch_size);
    t.epochs = get_or<int>(j, "epochs", t.epochs);
    t.patience = get_or<int>(j, "patience", t.patience);
    t.min_delta = get_or<double>(j, "min_delta", t.min_delta);
    t.seed = get_or<uint64_t>(j, "seed", t.seed);
    t.optimizer.weight_decay = get_or<double>(j, "weight_decay", t.optimizer.weight_decay);
    t.optimizer.beta1 = get_or<double>(j, "beta1", t.optimizer.beta1);
    t.optimizer.beta2 = get_or<double>(j, "beta2", t.optimizer.beta2);
    t.optimizer.eps = get_or<double>(j, "eps", t.optimizer.eps);
    if (t.epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (t.patience < 1) throw ConfigError("train.patience must be >= 1");
    if (j.contains("learning_rates")) {
        for (auto it = j.at("learning_rates").begin(); it != j.at("learning_rates").end(); ++it) {
            const double lr = it.value().get<double>();
            if (lr <= 0.0) throw ConfigError("learning rate for '" + it.key() + "' must be > 0");
            t.optimizer.learning_rates[it.key()] = lr;
        }
    }
    if (!t.optimizer.learning_rates.count("default"))
        t.optimizer.learning_rates["default"] = 1e-3;
    return t;
}

EvalConfig parse_eval(const json& j) {
    reject_unknown(j, {"mask_rates", "mask_seeds", "binned_accs"}, "eval");
    EvalConfig e;
    e.mask_rates = get_or<std::vector<double>>(j, "mask_rates", e.mask_rates);
    e.mask_seeds = get_or<int>(j, "mask_seeds", e.mask_seeds);
    e.binned_accs = get_or<std::vector<int>>(j, "binned_accs", e.binned_accs);
    for (double r : e.mask_rates)
        if (r < 0.0 || r > 1.0) throw ConfigError("mask rates must be in [0,1]");
    return e;
}

} // namespace

RunConfig parse_run_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config parse failure: ") + e.what());
    }
    reject_unknown(j, {"dataset", "model", "train", "eval"}, "config root");
    RunConfig cfg;
    if (!j.contains("dataset")) throw ConfigError("config needs a 'dataset' section");
    cfg.dataset = parse_dataset(j.at("dataset"));
    cfg.model = parse_model(j.contains("model") ? j.at("model") : json::object());
    cfg.train = parse_train(j.contains("train") ? j.at("train") : json::object());
    cfg.eval = parse_eval(j.contains("eval") ? j.at("eval") : json::object());
    cfg.train.train_ratio = cfg.dataset.train_ratio;
    cfg.train.val_ratio = cfg.dataset.val_ratio;
    cfg.train.test_ratio = cfg.dataset.test_ratio;
    cfg.train.binned_accs = cfg.eval.binned_accs;
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_run_config(ss.str());
}

data::Dataset materialize_dataset(RunConfig& cfg) {
    data::Dataset ds;
    if (cfg.dataset.synthetic) {
        ds = data::generate_synthetic(*cfg.dataset.synthetic);
    } else {
        auto manifest = data::load_manifest(cfg.dataset.manifest);
        ds = data::load_jsonl(cfg.dataset.path, manifest);
    }
    cfg.model.modalities.clear();
    cfg.model.feature_dims.clear();
    for (const auto& [name, dim] : ds.manifest.modalities) {
        cfg.model.modalities.push_back(name);
        cfg.model.feature_dims[name] = dim;
    }
    cfg.model.classes = ds.manifest.classes;
    return ds;
}

} // namespace qjfuse::config
