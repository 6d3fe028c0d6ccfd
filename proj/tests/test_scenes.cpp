#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gat/scenes.hpp"

using namespace gat;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/gat_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("relation oracle rules", "[scenes]") {
    const Box a{0.1, 0.6, 0.3, 0.8};
    const Box b{0.1, 0.1, 0.3, 0.3};
    REQUIRE(relation_oracle(a, b) == Relation::under);
    REQUIRE(relation_oracle(b, a) == Relation::above);

    const Box inner{0.4, 0.4, 0.5, 0.5};
    const Box outer{0.2, 0.2, 0.8, 0.8};
    REQUIRE(relation_oracle(inner, outer) == Relation::inside);
    REQUIRE(relation_oracle(outer, inner) == Relation::larger_than);

    const Box left{0.05, 0.3, 0.25, 0.5};
    const Box right{0.6, 0.35, 0.9, 0.6};
    REQUIRE(relation_oracle(left, right) == Relation::left_of);
    REQUIRE(relation_oracle(right, left) == Relation::right_of);
}

TEST_CASE("relation oracle antisymmetry under swap", "[scenes]") {
    Rng rng(41);
    for (int i = 0; i < 200; ++i) {
        Box a{rng.uniform(0.01, 0.5), rng.uniform(0.01, 0.5), 0, 0};
        a.x_max = a.x_min + rng.uniform(0.05, 0.45);
        a.y_max = a.y_min + rng.uniform(0.05, 0.45);
        Box b{rng.uniform(0.01, 0.5), rng.uniform(0.01, 0.5), 0, 0};
        b.x_max = b.x_min + rng.uniform(0.05, 0.45);
        b.y_max = b.y_min + rng.uniform(0.05, 0.45);
        // antisymmetry applies to separated boxes; overlaps may resolve to size
        const bool separated = a.x_max < b.x_min || b.x_max < a.x_min || a.y_max < b.y_min ||
                               b.y_max < a.y_min;
        if (!separated) continue;
        const Relation fwd = relation_oracle(a, b);
        const Relation rev = relation_oracle(b, a);
        if (fwd == Relation::left_of) REQUIRE(rev == Relation::right_of);
        if (fwd == Relation::right_of) REQUIRE(rev == Relation::left_of);
        if (fwd == Relation::above) REQUIRE(rev == Relation::under);
        if (fwd == Relation::under) REQUIRE(rev == Relation::above);
    }
}

TEST_CASE("generation is deterministic", "[scenes]") {
    GenParams gp;
    gp.seed = 7;
    gp.n_scenes = 20;
    const auto s1 = generate(gp);
    const auto s2 = generate(gp);
    REQUIRE(s1.size() == 20);
    for (std::size_t i = 0; i < s1.size(); ++i) {
        REQUIRE(s1[i].pair.regions.appearance.identical(s2[i].pair.regions.appearance));
        REQUIRE(s1[i].pair.regions.geometry_raw.identical(s2[i].pair.regions.geometry_raw));
        REQUIRE(s1[i].pair.refs == s2[i].pair.refs);
    }

    TempFile f1("gen1.jsonl"), f2("gen2.jsonl");
    write_jsonl(f1.path, s1);
    write_jsonl(f2.path, s2);
    REQUIRE(slurp(f1.path) == slurp(f2.path));
}

TEST_CASE("zero noise gives identical prototype rows", "[scenes]") {
    GenParams gp;
    gp.seed = 9;
    gp.n_scenes = 60;
    gp.noise_sigma = 0.0;
    const auto scenes = generate(gp);
    int compared = 0;
    for (std::size_t i = 0; i < scenes.size() && compared < 5; ++i) {
        for (std::size_t j = i + 1; j < scenes.size() && compared < 5; ++j) {
            for (std::size_t oi = 0; oi < scenes[i].spec.objects.size(); ++oi) {
                for (std::size_t oj = 0; oj < scenes[j].spec.objects.size(); ++oj) {
                    const auto& a = scenes[i].spec.objects[oi];
                    const auto& b = scenes[j].spec.objects[oj];
                    if (a.category != b.category || a.color != b.color) continue;
                    const auto fa = scenes[i].pair.regions.appearance;
                    const auto fb = scenes[j].pair.regions.appearance;
                    for (std::size_t k = 0; k < fa.cols(); ++k)
                        REQUIRE(fa.at(oi, k) == fb.at(oj, k));
                    ++compared;
                }
            }
        }
    }
    REQUIRE(compared > 0);
}

TEST_CASE("declared relation matches oracle and caption word", "[scenes]") {
    GenParams gp;
    gp.seed = 11;
    gp.n_scenes = 120;
    for (const Scene& s : generate(gp)) {
        const Box& sub = s.spec.objects[s.spec.subject].box;
        const Box& obj = s.spec.objects[s.spec.object].box;
        REQUIRE(relation_oracle(sub, obj) == s.spec.relation);
        for (const auto& ref : s.pair.refs) {
            const auto rel = find_relation_word(ref);
            REQUIRE(rel.has_value());
            REQUIRE(*rel == s.spec.relation);
        }
        // S is exactly the box area in the unit image
        for (std::size_t i = 0; i < s.spec.objects.size(); ++i) {
            REQUIRE(std::abs(s.pair.regions.geometry_raw.at(i, 4) -
                             s.spec.objects[i].box.area()) <= 1e-9);
        }
    }
}

TEST_CASE("jsonl round-trip is lossless", "[scenes]") {
    GenParams gp;
    gp.seed = 13;
    gp.n_scenes = 15;
    const auto scenes = generate(gp);
    TempFile f("roundtrip.jsonl");
    write_jsonl(f.path, scenes);
    const auto pairs = read_jsonl(f.path);
    REQUIRE(pairs.size() == scenes.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        REQUIRE(pairs[i].refs == scenes[i].pair.refs);
        const auto &a = scenes[i].pair.regions, &b = pairs[i].regions;
        REQUIRE(a.appearance.shape() == b.appearance.shape());
        for (std::size_t k = 0; k < a.appearance.size(); ++k)
            REQUIRE(std::abs(a.appearance[k] - b.appearance[k]) <= 1e-12);
        for (std::size_t k = 0; k < a.geometry_raw.size(); ++k)
            REQUIRE(std::abs(a.geometry_raw[k] - b.geometry_raw[k]) <= 1e-12);
    }
}

TEST_CASE("bad dataset lines are rejected", "[scenes]") {
    TempFile f("bad.jsonl");
    {
        std::ofstream out(f.path);
        out << R"({"regions":[{"feat":[1,2,3,4,5,6,7,8],"box":[0.5,0.2,0.3,0.4],"size":0.1}],)"
            << R"("refs":[["a"]]})" << '\n';
    }
    REQUIRE_THROWS_AS(read_jsonl(f.path), ValidationError);
    REQUIRE_THROWS_AS(read_jsonl("/nonexistent/nowhere.jsonl"), IoError);
}

TEST_CASE("vocabulary reserved ids and stable order", "[scenes]") {
    GenParams gp;
    gp.seed = 17;
    gp.n_scenes = 200;
    const auto scenes = generate(gp);
    std::vector<CaptionPair> pairs;
    for (const auto& s : scenes) pairs.push_back(s.pair);
    const Vocabulary vocab = Vocabulary::from_pairs(pairs);
    REQUIRE(vocab.id("<pad>") == Vocabulary::kPad);
    REQUIRE(vocab.id("<bos>") == Vocabulary::kBos);
    REQUIRE(vocab.id("<eos>") == Vocabulary::kEos);
    REQUIRE(vocab.id("<unk>") == Vocabulary::kUnk);
    REQUIRE(vocab.id("never-seen-word") == Vocabulary::kUnk);
    REQUIRE(vocab.size() >= 20);
    REQUIRE(vocab.size() <= 32);

    const Vocabulary again = Vocabulary::from_joined(vocab.joined());
    REQUIRE(again == vocab);

    const std::vector<std::string> words = {"a", "red", "box"};
    REQUIRE(vocab.decode(vocab.encode(words)) == words);
}

TEST_CASE("spatial accuracy identity, contradiction, chance", "[scenes]") {
    GenParams gp;
    gp.seed = 19;
    gp.n_scenes = 50;
    const auto scenes = generate(gp);
    std::vector<std::vector<std::vector<std::string>>> refs;
    std::vector<std::vector<std::string>> exact, wrong;
    for (const auto& s : scenes) {
        refs.push_back(s.pair.refs);
        exact.push_back(s.pair.refs[0]);
        auto flipped = s.pair.refs[0];
        for (auto& w : flipped) {
            const auto rel = relation_from_word(w);
            if (!rel) continue;
            switch (*rel) {
                case Relation::left_of: w = relation_word(Relation::right_of); break;
                case Relation::right_of: w = relation_word(Relation::left_of); break;
                case Relation::above: w = relation_word(Relation::under); break;
                case Relation::under: w = relation_word(Relation::above); break;
                case Relation::inside: w = relation_word(Relation::larger_than); break;
                case Relation::larger_than: w = relation_word(Relation::inside); break;
            }
        }
        wrong.push_back(flipped);
    }
    REQUIRE(spatial_accuracy(exact, refs) == 1.0);
    REQUIRE(spatial_accuracy(wrong, refs) == 0.0);

    // random relation word: expectation 1/6
    GenParams big;
    big.seed = 23;
    big.n_scenes = 2000;
    big.feature_dim = 8;
    const auto many = generate(big);
    Rng rng(29);
    std::vector<std::vector<std::vector<std::string>>> refs2;
    std::vector<std::vector<std::string>> guesses;
    for (const auto& s : many) {
        refs2.push_back(s.pair.refs);
        guesses.push_back({"a", kRelationWords[rng.below(6)], "thing"});
    }
    const double acc = spatial_accuracy(guesses, refs2);
    REQUIRE(acc > 1.0 / 6.0 - 0.05);
    REQUIRE(acc < 1.0 / 6.0 + 0.05);
}

TEST_CASE("features are uncorrelated with box position", "[scenes]") {
    GenParams gp;
    gp.seed = 31;
    gp.n_scenes = 2000;
    gp.feature_dim = 16;
    const auto scenes = generate(gp);

    std::vector<std::vector<double>> feats;
    std::vector<double> cx, cy;
    for (const auto& s : scenes) {
        const auto& f = s.pair.regions.appearance;
        for (std::size_t i = 0; i < f.rows(); ++i) {
            std::vector<double> row(16);
            for (std::size_t j = 0; j < 16; ++j) row[j] = f.at(i, j);
            feats.push_back(std::move(row));
            const auto& g = s.pair.regions.geometry_raw;
            cx.push_back(0.5 * (g.at(i, 0) + g.at(i, 2)));
            cy.push_back(0.5 * (g.at(i, 1) + g.at(i, 3)));
        }
    }
    const std::size_t n = feats.size(), d = 16;

    std::vector<double> mu(d, 0.0);
    for (const auto& f : feats)
        for (std::size_t j = 0; j < d; ++j) mu[j] += f[j];
    for (double& v : mu) v /= static_cast<double>(n);
    std::vector<double> cov(d * d, 0.0);
    for (const auto& f : feats)
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j)
                cov[i * d + j] += (f[i] - mu[i]) * (f[j] - mu[j]);
    for (double& v : cov) v /= static_cast<double>(n);

    const auto pearson = [n](const std::vector<double>& a, const std::vector<double>& b) {
        double ma = 0, mb = 0;
        for (std::size_t i = 0; i < n; ++i) ma += a[i], mb += b[i];
        ma /= static_cast<double>(n);
        mb /= static_cast<double>(n);
        double sab = 0, saa = 0, sbb = 0;
        for (std::size_t i = 0; i < n; ++i) {
            sab += (a[i] - ma) * (b[i] - mb);
            saa += (a[i] - ma) * (a[i] - ma);
            sbb += (b[i] - mb) * (b[i] - mb);
        }
        return sab / std::sqrt(saa * sbb);
    };

    // top-2 principal components by power iteration with deflation
    std::vector<double> pc1(d, 1.0), pc2(d);
    const auto matvec = [&](const std::vector<double>& v) {
        std::vector<double> out(d, 0.0);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) out[i] += cov[i * d + j] * v[j];
        return out;
    };
    const auto normalize = [](std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x * x;
        s = std::sqrt(s);
        for (double& x : v) x /= s;
    };
    for (int it = 0; it < 100; ++it) {
        pc1 = matvec(pc1);
        normalize(pc1);
    }
    pc2.assign(d, 0.0);
    pc2[1] = 1.0;
    for (int it = 0; it < 100; ++it) {
        pc2 = matvec(pc2);
        double dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += pc2[j] * pc1[j];
        for (std::size_t j = 0; j < d; ++j) pc2[j] -= dot * pc1[j];
        normalize(pc2);
    }

    for (const auto& pc : {pc1, pc2}) {
        std::vector<double> proj(n);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < d; ++j) s += feats[i][j] * pc[j];
            proj[i] = s;
        }
        REQUIRE(std::abs(pearson(proj, cx)) < 0.1);
        REQUIRE(std::abs(pearson(proj, cy)) < 0.1);
    }
}

TEST_CASE("generate validates parameters", "[scenes]") {
    GenParams gp;
    gp.n_scenes = 0;
    REQUIRE_THROWS_AS(generate(gp), ContractError);
    gp.n_scenes = 1;
    gp.feature_dim = 4;
    REQUIRE_THROWS_AS(generate(gp), ContractError);
}
