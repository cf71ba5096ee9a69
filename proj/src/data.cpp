#include "qjfuse/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "qjfuse/errors.hpp"
#include "qjfuse/rng.hpp"

namespace qjfuse::data {

using nlohmann::json;

Dataset generate_synthetic(const SyntheticSpec& spec, SyntheticGround* ground) {
    if (spec.n_samples < 1) throw DataError("synthetic: n_samples must be >= 1");
    if (spec.noise < 0.0) throw DataError("synthetic: noise must be >= 0");
    if (spec.modalities.size() < 2) throw DataError("synthetic: need at least 2 modalities");

    const size_t n_mod = spec.modalities.size();
    rng::Stream base(rng::mix(spec.seed, rng::hash_str("synthetic")));

    // Fixed unit directions, one per modality.
    std::vector<std::vector<double>> dirs(n_mod);
    for (size_t m = 0; m < n_mod; ++m) {
        rng::Stream ds = base.child("dir").child(static_cast<uint64_t>(m));
        dirs[m].resize(static_cast<size_t>(spec.dim));
        double nrm = 0.0;
        for (auto& v : dirs[m]) {
            v = ds.gaussian();
            nrm += v * v;
        }
        nrm = std::sqrt(nrm);
        for (auto& v : dirs[m]) v /= nrm;
    }

    Dataset out;
    out.manifest.classes = 2;
    out.manifest.count = spec.n_samples;
    for (const auto& name : spec.modalities) out.manifest.modalities.push_back({name, spec.dim});
    out.records.reserve(static_cast<size_t>(spec.n_samples));
    if (ground) {
        ground->directions = dirs;
        ground->bits.clear();
        ground->bits.reserve(static_cast<size_t>(spec.n_samples));
    }

    for (int64_t i = 0; i < spec.n_samples; ++i) {
        rng::Stream rs = base.child("sample").child(static_cast<uint64_t>(i));
        SampleRecord rec;
        rec.id = "syn-" + std::to_string(i);

        const int b1 = rs.uniform() < 0.5 ? 0 : 1;
        const int b2 = rs.uniform() < 0.5 ? 0 : 1;
        int label;
        if (spec.coupling == Coupling::XorJoint) {
            label = b1 ^ b2;
        } else {
            label = b1;
        }
        rec.label = label;
        rec.score = label == 0 ? -1.0 : 1.0;
        if (ground) ground->bits.push_back({b1, b2});

        for (size_t m = 0; m < n_mod; ++m) {
            std::vector<double> x(static_cast<size_t>(spec.dim));
            rng::Stream ms = rs.child(spec.modalities[m]);
            double sign = 0.0;
            bool informative = false;
            if (spec.coupling == Coupling::XorJoint) {
                // Modality 0 carries b1, modality 1 carries b2; the rest is
                // pure noise so no single modality predicts the parity label.
                if (m == 0) {
                    sign = b1 == 0 ? -1.0 : 1.0;
                    informative = true;
                } else if (m == 1) {
                    sign = b2 == 0 ? -1.0 : 1.0;
                    informative = true;
                }
            } else {
                // Marginal: every modality encodes the label redundantly.
                sign = label == 0 ? -1.0 : 1.0;
                informative = true;
            }
            for (int64_t d = 0; d < spec.dim; ++d) {
                double v = spec.noise * ms.gaussian();
                if (informative) v += sign * dirs[m][static_cast<size_t>(d)];
                x[static_cast<size_t>(d)] = v;
            }
            if (spec.coupling == Coupling::XorJoint && !informative) {
                // Unit-scale noise keeps the uninformative modality active.
                for (auto& v : x) v += ms.gaussian();
            }
            rec.features[spec.modalities[m]] = std::move(x);
        }
        out.records.push_back(std::move(rec));
    }
    return out;
}

double bayes_oracle_accuracy(const Dataset& ds, const SyntheticSpec& spec,
                             const SyntheticGround& ground) {
    int64_t correct = 0;
    for (const auto& rec : ds.records) {
        int pred;
        if (spec.coupling == Coupling::XorJoint) {
            // Optimal rule: decode each latent bit by its projection sign,
            // label is the parity.
            const auto& x1 = rec.features.at(spec.modalities[0]);
            const auto& x2 = rec.features.at(spec.modalities[1]);
            double p1 = 0.0, p2 = 0.0;
            for (size_t d = 0; d < x1.size(); ++d) p1 += x1[d] * ground.directions[0][d];
            for (size_t d = 0; d < x2.size(); ++d) p2 += x2[d] * ground.directions[1][d];
            // b1 == b2 -> both projections share a sign -> parity label 0.
            pred = (p1 * p2) >= 0.0 ? 0 : 1;
        } else {
            const auto& x1 = rec.features.at(spec.modalities[0]);
            double p1 = 0.0;
            for (size_t d = 0; d < x1.size(); ++d) p1 += x1[d] * ground.directions[0][d];
            pred = p1 >= 0.0 ? 1 : 0;
        }
        if (pred == rec.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

void save_jsonl(const Dataset& ds, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open " + path + " for writing");
    for (const auto& rec : ds.records) {
        json j;
        j["id"] = rec.id;
        j["label"] = rec.label;
        if (rec.score) j["score"] = *rec.score;
        json feats = json::object();
        for (const auto& [name, vec] : rec.features) feats[name] = vec;
        j["features"] = std::move(feats);
        os << j.dump() << '\n';
    }
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    json j;
    j["format"] = m.format;
    j["classes"] = m.classes;
    j["count"] = m.count;
    json mods = json::array();
    for (const auto& [name, dim] : m.modalities) mods.push_back({{"name", name}, {"dim", dim}});
    j["modalities"] = std::move(mods);
    std::ofstream os(path);
    if (!os) throw DataError("cannot open " + path + " for writing");
    os << j.dump(2) << '\n';
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open manifest " + path);
    json j;
    try {
        is >> j;
    } catch (const json::parse_error& e) {
        throw DataError("manifest parse failure: " + std::string(e.what()));
    }
    DatasetManifest m;
    m.format = j.value("format", "");
    if (m.format != "qjd1") throw DataError("manifest format " + m.format + " unsupported");
    m.classes = j.at("classes").get<int>();
    m.count = j.value("count", int64_t{0});
    for (const auto& mod : j.at("modalities"))
        m.modalities.push_back({mod.at("name").get<std::string>(), mod.at("dim").get<int64_t>()});
    return m;
}

Dataset load_jsonl(const std::string& path, const DatasetManifest& manifest) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open dataset " + path);
    Dataset out;
    out.manifest = manifest;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw DataError("line " + std::to_string(lineno) + ": malformed record: " + e.what());
        }
        SampleRecord rec;
        try {
            rec.id = j.at("id").get<std::string>();
            rec.label = j.at("label").get<int>();
            if (j.contains("score") && !j["score"].is_null())
                rec.score = j["score"].get<double>();
            const auto& feats = j.at("features");
            for (const auto& [name, dim] : manifest.modalities) {
                if (!feats.contains(name))
                    throw DataError("line " + std::to_string(lineno) + ": missing modality '" +
                                    name + "'");
                auto vec = feats.at(name).get<std::vector<double>>();
                if (static_cast<int64_t>(vec.size()) != dim)
                    throw DataError("line " + std::to_string(lineno) + ": modality '" + name +
                                    "' has dim " + std::to_string(vec.size()) + ", expected " +
                                    std::to_string(dim));
                for (double v : vec)
                    if (!std::isfinite(v))
                        throw DataError("line " + std::to_string(lineno) +
                                        ": non-finite feature in '" + name + "'");
                rec.features[name] = std::move(vec);
            }
            for (auto it = feats.begin(); it != feats.end(); ++it) {
                bool known = false;
                for (const auto& [name, dim] : manifest.modalities)
                    if (name == it.key()) known = true;
                if (!known)
                    throw DataError("line " + std::to_string(lineno) + ": unknown modality '" +
                                    it.key() + "'");
            }
            if (rec.label < 0 || rec.label >= manifest.classes)
                throw DataError("line " + std::to_string(lineno) + ": label out of range");
        } catch (const json::exception& e) {
            throw DataError("line " + std::to_string(lineno) + ": " + e.what());
        }
        out.records.push_back(std::move(rec));
    }
    out.manifest.count = out.size();
    return out;
}

Dataset mask_features(const Dataset& ds, double rate, uint64_t seed) {
    if (rate < 0.0 || rate > 1.0) throw DataError("mask rate must be in [0,1]");
    Dataset out = ds;
    if (rate == 0.0) return out;
    for (size_t r = 0; r < out.records.size(); ++r) {
        for (auto& [name, vec] : out.records[r].features) {
            const int64_t d = static_cast<int64_t>(vec.size());
            const int64_t n_mask = static_cast<int64_t>(std::floor(rate * static_cast<double>(d)));
            if (n_mask <= 0) continue;
            std::vector<int64_t> idx(static_cast<size_t>(d));
            for (int64_t i = 0; i < d; ++i) idx[static_cast<size_t>(i)] = i;
            rng::Stream s(rng::mix(rng::mix(seed, rng::hash_str("mask")),
                                   rng::mix(static_cast<uint64_t>(r), rng::hash_str(name))));
            rng::shuffle(idx, s);
            for (int64_t i = 0; i < n_mask; ++i) vec[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 0.0;
        }
    }
    return out;
}

Splits split_dataset(const Dataset& ds, double train_ratio, double val_ratio,
                     double test_ratio, uint64_t seed) {
    if (std::fabs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9)
        throw DataError("split ratios must sum to 1");
    const int64_t n = ds.size();
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    rng::shuffle(idx, rng::Stream(rng::mix(seed, rng::hash_str("split"))));

    const int64_t n_train = static_cast<int64_t>(std::llround(train_ratio * static_cast<double>(n)));
    const int64_t n_val = static_cast<int64_t>(std::llround(val_ratio * static_cast<double>(n)));
    Splits out;
    out.train.assign(idx.begin(), idx.begin() + n_train);
    out.val.assign(idx.begin() + n_train, idx.begin() + std::min(n, n_train + n_val));
    out.test.assign(idx.begin() + std::min(n, n_train + n_val), idx.end());
    if (out.train.empty() || out.val.empty() || out.test.empty())
        throw DataError("a split is empty; adjust ratios or dataset size");
    return out;
}

std::vector<std::vector<int64_t>> make_batches(const std::vector<int64_t>& indices,
                                               int64_t batch_size, uint64_t seed,
                                               int64_t epoch, bool shuffle) {
    if (batch_size < 1) throw DataError("batch size must be >= 1");
    std::vector<int64_t> idx = indices;
    if (shuffle)
        rng::shuffle(idx, rng::Stream(rng::mix(rng::mix(seed, rng::hash_str("shuffle")),
                                               static_cast<uint64_t>(epoch))));
    std::vector<std::vector<int64_t>> out;
    for (size_t i = 0; i < idx.size(); i += static_cast<size_t>(batch_size)) {
        const size_t hi = std::min(idx.size(), i + static_cast<size_t>(batch_size));
        out.emplace_back(idx.begin() + static_cast<int64_t>(i), idx.begin() + static_cast<int64_t>(hi));
    }
    return out;
}

} // namespace qjfuse::data
