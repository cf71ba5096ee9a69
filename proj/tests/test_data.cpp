#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <unistd.h>

#include "qjfuse/data.hpp"
#include "qjfuse/errors.hpp"

using namespace qjfuse;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("qjfuse_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

} // namespace

TEST_CASE("synthetic: XOR construction at zero noise") {
    data::SyntheticSpec spec;
    spec.n_samples = 600;
    spec.noise = 0.0;
    spec.seed = 5;
    data::SyntheticGround ground;
    data::Dataset ds = data::generate_synthetic(spec, &ground);

    // Pair rule is perfect; single-modality projections are uninformative.
    CHECK(data::bayes_oracle_accuracy(ds, spec, ground) == doctest::Approx(1.0));
    int match1 = 0;
    for (int64_t i = 0; i < ds.size(); ++i) {
        const auto& x1 = ds.records[static_cast<size_t>(i)].features.at("text");
        double p = 0.0;
        for (size_t d = 0; d < x1.size(); ++d) p += x1[d] * ground.directions[0][d];
        const int guess = p >= 0 ? 1 : 0;
        if (guess == ds.records[static_cast<size_t>(i)].label) ++match1;
    }
    const double single_acc = static_cast<double>(match1) / static_cast<double>(ds.size());
    CHECK(single_acc > 0.4);
    CHECK(single_acc < 0.6);
}

TEST_CASE("synthetic: marginal coupling is single-modality solvable") {
    data::SyntheticSpec spec;
    spec.coupling = data::Coupling::Marginal;
    spec.n_samples = 400;
    spec.noise = 0.0;
    spec.seed = 6;
    data::SyntheticGround ground;
    data::Dataset ds = data::generate_synthetic(spec, &ground);
    CHECK(data::bayes_oracle_accuracy(ds, spec, ground) == doctest::Approx(1.0));
}

TEST_CASE("synthetic: Bayes oracle exceeds 95% at the acceptance noise level") {
    data::SyntheticSpec spec;
    spec.n_samples = 4000;
    spec.noise = 0.3;
    spec.seed = 7;
    data::SyntheticGround ground;
    data::Dataset ds = data::generate_synthetic(spec, &ground);
    CHECK(data::bayes_oracle_accuracy(ds, spec, ground) >= 0.95);
}

TEST_CASE("synthetic: bit-reproducible under a fixed seed") {
    data::SyntheticSpec spec;
    spec.n_samples = 50;
    spec.seed = 11;
    data::Dataset a = data::generate_synthetic(spec);
    data::Dataset b = data::generate_synthetic(spec);
    REQUIRE(a.size() == b.size());
    for (int64_t i = 0; i < a.size(); ++i) {
        CHECK(a.records[static_cast<size_t>(i)].label == b.records[static_cast<size_t>(i)].label);
        for (const auto& [mod, vec] : a.records[static_cast<size_t>(i)].features)
            CHECK(vec == b.records[static_cast<size_t>(i)].features.at(mod));
    }
}

TEST_CASE("synthetic: single-modality mutual information is near zero") {
    data::SyntheticSpec spec;
    spec.n_samples = 10000;
    spec.noise = 0.0;
    spec.seed = 13;
    data::SyntheticGround ground;
    data::Dataset ds = data::generate_synthetic(spec, &ground);

    // Bin the sign of the text projection against the label.
    double joint[2][2] = {{0, 0}, {0, 0}};
    for (int64_t i = 0; i < ds.size(); ++i) {
        const auto& x = ds.records[static_cast<size_t>(i)].features.at("text");
        double p = 0.0;
        for (size_t d = 0; d < x.size(); ++d) p += x[d] * ground.directions[0][d];
        joint[p >= 0 ? 1 : 0][ds.records[static_cast<size_t>(i)].label] += 1.0;
    }
    const double n = static_cast<double>(ds.size());
    double mi = 0.0;
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
            const double pab = joint[a][b] / n;
            const double pa = (joint[a][0] + joint[a][1]) / n;
            const double pb = (joint[0][b] + joint[1][b]) / n;
            if (pab > 0.0) mi += pab * std::log(pab / (pa * pb));
        }
    CHECK(mi < 0.02);
}

TEST_CASE("jsonl round trip") {
    TempDir tmp;
    data::SyntheticSpec spec;
    spec.n_samples = 25;
    spec.seed = 17;
    data::Dataset ds = data::generate_synthetic(spec);
    data::save_jsonl(ds, tmp.file("data.jsonl"));
    data::save_manifest(ds.manifest, tmp.file("manifest.json"));

    auto manifest = data::load_manifest(tmp.file("manifest.json"));
    data::Dataset loaded = data::load_jsonl(tmp.file("data.jsonl"), manifest);
    REQUIRE(loaded.size() == ds.size());
    for (int64_t i = 0; i < ds.size(); ++i) {
        const auto& a = ds.records[static_cast<size_t>(i)];
        const auto& b = loaded.records[static_cast<size_t>(i)];
        CHECK(a.id == b.id);
        CHECK(a.label == b.label);
        REQUIRE(a.score.has_value());
        REQUIRE(b.score.has_value());
        CHECK(*a.score == *b.score);
        for (const auto& [mod, vec] : a.features) CHECK(vec == b.features.at(mod)); // bit exact
    }
}

TEST_CASE("jsonl error reporting") {
    TempDir tmp;
    data::DatasetManifest manifest;
    manifest.modalities = {{"text", 2}, {"audio", 2}};
    manifest.classes = 2;

    SUBCASE("empty file loads as an empty dataset") {
        std::ofstream(tmp.file("empty.jsonl")).close();
        data::Dataset ds = data::load_jsonl(tmp.file("empty.jsonl"), manifest);
        CHECK(ds.size() == 0);
    }
    SUBCASE("missing modality names the modality and line") {
        std::ofstream os(tmp.file("bad.jsonl"));
        os << R"({"id":"a","label":0,"features":{"text":[0.0,1.0]}})" << "\n";
        os.close();
        try {
            data::load_jsonl(tmp.file("bad.jsonl"), manifest);
            FAIL("expected DataError");
        } catch (const DataError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("audio") != std::string::npos);
            CHECK(msg.find("line 1") != std::string::npos);
        }
    }
    SUBCASE("dimension mismatch is rejected") {
        std::ofstream os(tmp.file("dim.jsonl"));
        os << R"({"id":"a","label":0,"features":{"text":[0.0],"audio":[0.0,1.0]}})" << "\n";
        os.close();
        CHECK_THROWS_AS(data::load_jsonl(tmp.file("dim.jsonl"), manifest), DataError);
    }
    SUBCASE("unknown modality is rejected") {
        std::ofstream os(tmp.file("unk.jsonl"));
        os << R"({"id":"a","label":0,"features":{"text":[0,1],"audio":[0,1],"video":[0,1]}})"
           << "\n";
        os.close();
        CHECK_THROWS_AS(data::load_jsonl(tmp.file("unk.jsonl"), manifest), DataError);
    }
    SUBCASE("malformed line reports its number") {
        std::ofstream os(tmp.file("mal.jsonl"));
        os << R"({"id":"a","label":0,"features":{"text":[0,1],"audio":[0,1]}})" << "\n";
        os << "{not json\n";
        os.close();
        try {
            data::load_jsonl(tmp.file("mal.jsonl"), manifest);
            FAIL("expected DataError");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find("line 2") != std::string::npos);
        }
    }
}

TEST_CASE("mask_features") {
    data::SyntheticSpec spec;
    spec.n_samples = 30;
    spec.dim = 10;
    spec.seed = 23;
    data::Dataset ds = data::generate_synthetic(spec);

    SUBCASE("rate 0 is the identity") {
        data::Dataset masked = data::mask_features(ds, 0.0, 9);
        for (int64_t i = 0; i < ds.size(); ++i)
            for (const auto& [mod, vec] : ds.records[static_cast<size_t>(i)].features)
                CHECK(vec == masked.records[static_cast<size_t>(i)].features.at(mod));
    }
    SUBCASE("rate 1 zeroes everything") {
        data::Dataset masked = data::mask_features(ds, 1.0, 9);
        for (const auto& rec : masked.records)
            for (const auto& [mod, vec] : rec.features)
                for (double v : vec) CHECK(v == 0.0);
    }
    SUBCASE("rate 0.3 with width 10 zeroes exactly 3 entries per modality") {
        data::Dataset masked = data::mask_features(ds, 0.3, 9);
        for (int64_t i = 0; i < ds.size(); ++i) {
            for (const auto& [mod, vec] : masked.records[static_cast<size_t>(i)].features) {
                const auto& orig = ds.records[static_cast<size_t>(i)].features.at(mod);
                int zeroed = 0;
                for (size_t d = 0; d < vec.size(); ++d) {
                    if (vec[d] == 0.0 && orig[d] != 0.0) ++zeroed;
                    if (vec[d] != 0.0) CHECK(vec[d] == orig[d]); // untouched entries intact
                }
                CHECK(zeroed == 3);
            }
        }
    }
    SUBCASE("labels, ids and scores are never altered; masking is seed-deterministic") {
        data::Dataset m1 = data::mask_features(ds, 0.4, 41);
        data::Dataset m2 = data::mask_features(ds, 0.4, 41);
        data::Dataset m3 = data::mask_features(ds, 0.4, 42);
        bool any_diff = false;
        for (int64_t i = 0; i < ds.size(); ++i) {
            CHECK(m1.records[static_cast<size_t>(i)].id == ds.records[static_cast<size_t>(i)].id);
            CHECK(m1.records[static_cast<size_t>(i)].label ==
                  ds.records[static_cast<size_t>(i)].label);
            for (const auto& [mod, vec] : m1.records[static_cast<size_t>(i)].features) {
                CHECK(vec == m2.records[static_cast<size_t>(i)].features.at(mod));
                if (vec != m3.records[static_cast<size_t>(i)].features.at(mod)) any_diff = true;
            }
        }
        CHECK(any_diff);
    }
}

TEST_CASE("splits and batches") {
    data::SyntheticSpec spec;
    spec.n_samples = 100;
    spec.seed = 29;
    data::Dataset ds = data::generate_synthetic(spec);

    auto splits = data::split_dataset(ds, 0.8, 0.1, 0.1, 77);
    CHECK(splits.train.size() == 80);
    CHECK(splits.val.size() == 10);
    CHECK(splits.test.size() == 10);

    auto splits2 = data::split_dataset(ds, 0.8, 0.1, 0.1, 77);
    CHECK(splits.train == splits2.train);
    CHECK(splits.test == splits2.test);

    std::vector<int64_t> hundred(100);
    for (int64_t i = 0; i < 100; ++i) hundred[static_cast<size_t>(i)] = i;
    auto batches = data::make_batches(hundred, 32, 1, 0, true);
    REQUIRE(batches.size() == 4);
    CHECK(batches[0].size() == 32);
    CHECK(batches[1].size() == 32);
    CHECK(batches[2].size() == 32);
    CHECK(batches[3].size() == 4);

    // Epoch reshuffles change order but keep membership.
    auto b0 = data::make_batches(hundred, 32, 1, 0, true);
    auto b1 = data::make_batches(hundred, 32, 1, 1, true);
    CHECK(b0[0] != b1[0]);

    CHECK_THROWS_AS(data::split_dataset(ds, 0.5, 0.2, 0.2, 1), DataError);
}
