#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gat/errors.hpp"
#include "gat/metrics.hpp"
#include "gat/rng.hpp"
#include "gat/tensor.hpp"

namespace gat {

// Axis-aligned box in the unit image; y grows downward (image convention),
// so "under" means larger y.
struct Box {
    double x_min = 0.0, y_min = 0.0, x_max = 0.0, y_max = 0.0;

    double area() const { return (x_max - x_min) * (y_max - y_min); }

    bool valid() const {
        return x_min < x_max && y_min < y_max && x_min > 0.0 && y_min > 0.0 && x_max < 1.0 &&
               y_max < 1.0;
    }

    bool strictly_inside(const Box& outer) const {
        return x_min > outer.x_min && y_min > outer.y_min && x_max < outer.x_max &&
               y_max < outer.y_max;
    }
};

enum class Relation { left_of, right_of, above, under, inside, larger_than };

inline constexpr std::array<const char*, 6> kRelationWords = {
    "left-of", "right-of", "above", "under", "inside", "larger-than"};

inline const char* relation_word(Relation r) { return kRelationWords[static_cast<int>(r)]; }

inline std::optional<Relation> relation_from_word(const std::string& w) {
    for (std::size_t i = 0; i < kRelationWords.size(); ++i)
        if (w == kRelationWords[i]) return static_cast<Relation>(i);
    return std::nullopt;
}

// Deterministic relation label with fixed priority:
// inside > vertical > horizontal > size. Overlapping boxes where a is not
// larger fall back to a center-x comparison so the oracle is total.
inline Relation relation_oracle(const Box& a, const Box& b) {
    if (a.strictly_inside(b)) return Relation::inside;
    if (a.y_min > b.y_max) return Relation::under;
    if (a.y_max < b.y_min) return Relation::above;
    if (a.x_max < b.x_min) return Relation::left_of;
    if (a.x_min > b.x_max) return Relation::right_of;
    if (a.area() > b.area()) return Relation::larger_than;
    const double ca = 0.5 * (a.x_min + a.x_max), cb = 0.5 * (b.x_min + b.x_max);
    return ca <= cb ? Relation::left_of : Relation::right_of;
}

// Per-image bundle of appearance vectors X_A [N x d] and raw geometry
// 5-vectors X_g [N x 5], rows (x_min, y_min, x_max, y_max, S).
struct RegionSet {
    Tensor appearance;
    Tensor geometry_raw;

    std::size_t count() const { return appearance.rows(); }

    void validate() const {
        if (appearance.rank() != 2 || geometry_raw.rank() != 2 || geometry_raw.cols() != 5 ||
            appearance.rows() != geometry_raw.rows() || appearance.rows() < 1)
            throw ValidationError("region set: bad shapes " + shape_str(appearance.shape()) +
                                  ", " + shape_str(geometry_raw.shape()));
        require_finite(appearance, "region appearance");
        for (std::size_t i = 0; i < geometry_raw.rows(); ++i) {
            const double x0 = geometry_raw.at(i, 0), y0 = geometry_raw.at(i, 1);
            const double x1 = geometry_raw.at(i, 2), y1 = geometry_raw.at(i, 3);
            const double s = geometry_raw.at(i, 4);
            if (!(x0 < x1) || !(y0 < y1))
                throw ValidationError("region " + std::to_string(i) + ": degenerate box");
            if (x0 <= 0.0 || y0 <= 0.0 || x1 >= 1.0 || y1 >= 1.0 || s <= 0.0 || s > 1.0)
                throw ValidationError("region " + std::to_string(i) +
                                      ": coordinates outside (0,1)");
        }
    }
};

struct SceneObject {
    int category = 0;
    int color = 0;
    Box box;
};

struct SceneSpec {
    std::vector<SceneObject> objects;
    Relation relation = Relation::left_of;
    std::size_t subject = 0;
    std::size_t object = 1;
};

// references are word sequences; encoding to ids happens against a Vocabulary
struct CaptionPair {
    RegionSet regions;
    std::vector<std::vector<std::string>> refs;
};

struct Scene {
    SceneSpec spec;
    CaptionPair pair;
};

inline constexpr std::array<const char*, 8> kCategories = {"box", "ball", "cat", "dog",
                                                           "car", "tree", "cup", "chair"};
inline constexpr std::array<const char*, 6> kColors = {"red",    "blue",  "green",
                                                       "yellow", "black", "white"};

// ---- vocabulary ----

class Vocabulary {
   public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;

    Vocabulary() {
        for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>"}) intern(t);
    }

    int intern(const std::string& token) {
        const auto it = ids_.find(token);
        if (it != ids_.end()) return it->second;
        const int id = static_cast<int>(tokens_.size());
        ids_.emplace(token, id);
        tokens_.push_back(token);
        return id;
    }

    int id(const std::string& token) const {
        const auto it = ids_.find(token);
        return it == ids_.end() ? kUnk : it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
            throw ContractError("vocabulary: id " + std::to_string(id) + " out of range");
        return tokens_[static_cast<std::size_t>(id)];
    }

    std::size_t size() const { return tokens_.size(); }

    TokenSeq encode(const std::vector<std::string>& words) const {
        TokenSeq out;
        out.reserve(words.size());
        for (const auto& w : words) out.push_back(id(w));
        return out;
    }

    std::vector<std::string> decode(const TokenSeq& ids) const {
        std::vector<std::string> out;
        out.reserve(ids.size());
        for (int i : ids) out.push_back(token(i));
        return out;
    }

    // stable first-seen order over all references
    static Vocabulary from_pairs(const std::vector<CaptionPair>& pairs) {
        Vocabulary v;
        for (const auto& p : pairs)
            for (const auto& ref : p.refs)
                for (const auto& w : ref) v.intern(w);
        return v;
    }

    std::string joined() const {
        std::string out;
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (i) out += ',';
            out += tokens_[i];
        }
        return out;
    }

    static Vocabulary from_joined(const std::string& joined) {
        Vocabulary v;
        std::istringstream is(joined);
        std::string tok;
        std::size_t idx = 0;
        while (std::getline(is, tok, ',')) {
            if (idx < 4) {
                if (tok != v.tokens_[idx])
                    throw ValidationError("vocabulary: reserved token mismatch: " + tok);
            } else {
                v.intern(tok);
            }
            ++idx;
        }
        return v;
    }

    bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

   private:
    std::map<std::string, int> ids_;
    std::vector<std::string> tokens_;
};

// ---- generation ----

struct GenParams {
    std::uint64_t seed = 1;
    std::size_t n_scenes = 100;
    std::size_t min_objects = 2;
    std::size_t max_objects = 3;
    std::size_t feature_dim = 32;
    double noise_sigma = 0.1;
};

namespace detail {

inline Box sample_box(Rng& rng, double wlo = 0.08, double whi = 0.35) {
    Box b;
    const double w = rng.uniform(wlo, whi);
    const double h = rng.uniform(wlo, whi);
    b.x_min = rng.uniform(0.01, 0.98 - w);
    b.y_min = rng.uniform(0.01, 0.98 - h);
    b.x_max = b.x_min + w;
    b.y_max = b.y_min + h;
    return b;
}

inline Box sample_box_within(Rng& rng, const Box& outer) {
    Box b;
    const double w = rng.uniform(0.04, 0.45 * (outer.x_max - outer.x_min));
    const double h = rng.uniform(0.04, 0.45 * (outer.y_max - outer.y_min));
    b.x_min = rng.uniform(outer.x_min + 0.01, outer.x_max - 0.01 - w);
    b.y_min = rng.uniform(outer.y_min + 0.01, outer.y_max - 0.01 - h);
    b.x_max = b.x_min + w;
    b.y_max = b.y_min + h;
    return b;
}

// subject/object boxes realizing the requested relation
inline std::pair<Box, Box> place_pair(Rng& rng, Relation rel) {
    for (int attempt = 0; attempt < 100; ++attempt) {
        Box a, b;
        switch (rel) {
            case Relation::inside: {
                b = sample_box(rng, 0.5, 0.8);
                a = sample_box_within(rng, b);
                break;
            }
            case Relation::larger_than: {
                a = sample_box(rng, 0.5, 0.8);
                b = sample_box_within(rng, a);
                break;
            }
            case Relation::under:
            case Relation::above: {
                const double split = rng.uniform(0.4, 0.6);
                Box upper = sample_box(rng, 0.06, std::min(0.3, split - 0.09));
                const double uh = upper.y_max - upper.y_min;
                upper.y_min = rng.uniform(0.01, split - 0.06 - uh);
                upper.y_max = upper.y_min + uh;
                Box lower = sample_box(rng, 0.06, std::min(0.3, 0.92 - split));
                const double lh = lower.y_max - lower.y_min;
                lower.y_min = rng.uniform(split + 0.06, 0.98 - lh);
                lower.y_max = lower.y_min + lh;
                a = rel == Relation::under ? lower : upper;
                b = rel == Relation::under ? upper : lower;
                break;
            }
            case Relation::left_of:
            case Relation::right_of: {
                const double split = rng.uniform(0.4, 0.6);
                Box left = sample_box(rng, 0.06, std::min(0.3, split - 0.09));
                const double lw = left.x_max - left.x_min;
                left.x_min = rng.uniform(0.01, split - 0.06 - lw);
                left.x_max = left.x_min + lw;
                Box right = sample_box(rng, 0.06, std::min(0.3, 0.92 - split));
                const double rw = right.x_max - right.x_min;
                right.x_min = rng.uniform(split + 0.06, 0.98 - rw);
                right.x_max = right.x_min + rw;
                a = rel == Relation::left_of ? left : right;
                b = rel == Relation::left_of ? right : left;
                break;
            }
        }
        if (a.valid() && b.valid() && relation_oracle(a, b) == rel) return {a, b};
    }
    throw GenerationError("placement for relation " + std::string(relation_word(rel)) +
                          " failed after 100 attempts");
}

// fixed per-(category, color) prototype; carries no position information
inline std::vector<double> prototype(int category, int color, std::size_t dim) {
    Rng rng(Rng::derive(0x70726f746fULL, static_cast<std::uint64_t>(category) * 64 +
                                             static_cast<std::uint64_t>(color)));
    std::vector<double> p(dim);
    for (double& v : p) v = rng.uniform(-1.0, 1.0);
    return p;
}

}  // namespace detail

inline std::vector<std::vector<std::string>> caption_templates(const SceneObject& sub,
                                                               const SceneObject& obj,
                                                               Relation rel) {
    const std::string c1 = kColors[sub.color], k1 = kCategories[sub.category];
    const std::string c2 = kColors[obj.color], k2 = kCategories[obj.category];
    const std::string r = relation_word(rel);
    return {
        {"a", c1, k1, r, "a", c2, k2},
        {"the", c1, k1, "is", r, "the", c2, k2},
        {"there", "is", "a", c1, k1, r, "a", c2, k2},
        {"in", "this", "image", "a", c1, k1, "is", r, "a", c2, k2},
    };
}

inline Scene generate_scene(std::uint64_t scene_seed, const GenParams& gp) {
    Rng rng(scene_seed);
    Scene scene;
    auto& spec = scene.spec;
    spec.relation = static_cast<Relation>(rng.below(6));

    const std::size_t n_obj =
        gp.min_objects + rng.below(gp.max_objects - gp.min_objects + 1);
    const auto [sub_box, obj_box] = detail::place_pair(rng, spec.relation);

    // distinct (category, color) per object keeps captions unambiguous
    std::vector<std::pair<int, int>> taken;
    const auto fresh_identity = [&] {
        for (int attempt = 0; attempt < 100; ++attempt) {
            std::pair<int, int> id{static_cast<int>(rng.below(kCategories.size())),
                                   static_cast<int>(rng.below(kColors.size()))};
            bool clash = false;
            for (const auto& t : taken) clash = clash || t == id;
            if (!clash) {
                taken.push_back(id);
                return id;
            }
        }
        throw GenerationError("could not pick a distinct object identity");
    };

    std::vector<SceneObject> ordered;
    const auto sub_id = fresh_identity();
    ordered.push_back({sub_id.first, sub_id.second, sub_box});
    const auto obj_id = fresh_identity();
    ordered.push_back({obj_id.first, obj_id.second, obj_box});
    for (std::size_t i = 2; i < n_obj; ++i) {
        const auto id = fresh_identity();
        ordered.push_back({id.first, id.second, detail::sample_box(rng)});
    }

    // shuffle region order; track where subject/object land
    std::vector<std::size_t> perm(ordered.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);
    spec.objects.resize(ordered.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        spec.objects[perm[i]] = ordered[i];
        if (i == 0) spec.subject = perm[i];
        if (i == 1) spec.object = perm[i];
    }

    const std::size_t n = spec.objects.size();
    std::vector<double> feat(n * gp.feature_dim);
    std::vector<double> geo(n * 5);
    for (std::size_t i = 0; i < n; ++i) {
        const SceneObject& o = spec.objects[i];
        const std::vector<double> proto = detail::prototype(o.category, o.color, gp.feature_dim);
        for (std::size_t j = 0; j < gp.feature_dim; ++j)
            feat[i * gp.feature_dim + j] = proto[j] + gp.noise_sigma * rng.gaussian();
        geo[i * 5 + 0] = o.box.x_min;
        geo[i * 5 + 1] = o.box.y_min;
        geo[i * 5 + 2] = o.box.x_max;
        geo[i * 5 + 3] = o.box.y_max;
        geo[i * 5 + 4] = o.box.area();
    }
    scene.pair.regions.appearance = Tensor::of({n, gp.feature_dim}, std::move(feat));
    scene.pair.regions.geometry_raw = Tensor::of({n, 5}, std::move(geo));
    scene.pair.regions.validate();

    const auto templates =
        caption_templates(spec.objects[spec.subject], spec.objects[spec.object], spec.relation);
    std::vector<std::size_t> order = {0, 1, 2, 3};
    rng.shuffle(order);
    const std::size_t n_refs = 1 + rng.below(3);
    for (std::size_t i = 0; i < n_refs; ++i) scene.pair.refs.push_back(templates[order[i]]);
    return scene;
}

inline std::vector<Scene> generate(const GenParams& gp) {
    if (gp.n_scenes < 1) throw ContractError("generate: need at least one scene");
    if (gp.feature_dim < 8) throw ContractError("generate: feature_dim must be >= 8");
    if (gp.min_objects < 2 || gp.max_objects < gp.min_objects)
        throw ContractError("generate: bad object count range");
    std::vector<Scene> scenes;
    scenes.reserve(gp.n_scenes);
    for (std::size_t i = 0; i < gp.n_scenes; ++i)
        scenes.push_back(generate_scene(Rng::derive(gp.seed, i), gp));
    return scenes;
}

// ---- dataset serialization (JSON lines) ----

inline nlohmann::json pair_to_json(const CaptionPair& p) {
    nlohmann::json regions = nlohmann::json::array();
    const std::size_t n = p.regions.count(), d = p.regions.appearance.cols();
    for (std::size_t i = 0; i < n; ++i) {
        nlohmann::json feat = nlohmann::json::array();
        for (std::size_t j = 0; j < d; ++j) feat.push_back(p.regions.appearance.at(i, j));
        regions.push_back({{"feat", std::move(feat)},
                           {"box",
                            {p.regions.geometry_raw.at(i, 0), p.regions.geometry_raw.at(i, 1),
                             p.regions.geometry_raw.at(i, 2), p.regions.geometry_raw.at(i, 3)}},
                           {"size", p.regions.geometry_raw.at(i, 4)}});
    }
    return {{"regions", std::move(regions)}, {"refs", p.refs}};
}

inline CaptionPair pair_from_json(const nlohmann::json& j) {
    CaptionPair p;
    const auto& regions = j.at("regions");
    const std::size_t n = regions.size();
    if (n == 0) throw ValidationError("dataset: scene without regions");
    const std::size_t d = regions[0].at("feat").size();
    std::vector<double> feat(n * d);
    std::vector<double> geo(n * 5);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& r = regions[i];
        if (r.at("feat").size() != d)
            throw ValidationError("dataset: inconsistent feature dimensions");
        for (std::size_t k = 0; k < d; ++k) feat[i * d + k] = r.at("feat")[k].get<double>();
        for (std::size_t k = 0; k < 4; ++k) geo[i * 5 + k] = r.at("box")[k].get<double>();
        geo[i * 5 + 4] = r.at("size").get<double>();
    }
    p.regions.appearance = Tensor::of({n, d}, std::move(feat));
    p.regions.geometry_raw = Tensor::of({n, 5}, std::move(geo));
    p.regions.validate();
    p.refs = j.at("refs").get<std::vector<std::vector<std::string>>>();
    if (p.refs.empty()) throw ValidationError("dataset: scene without references");
    return p;
}

inline void write_jsonl(const std::string& path, const std::vector<Scene>& scenes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    for (const Scene& s : scenes) out << pair_to_json(s.pair).dump() << '\n';
    if (!out) throw IoError("write failed for " + path);
}

inline std::vector<CaptionPair> read_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::vector<CaptionPair> pairs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            pairs.push_back(pair_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("dataset line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (pairs.empty()) throw ValidationError("dataset " + path + " has no scenes");
    return pairs;
}

// ---- spatial accuracy ----

inline std::optional<Relation> find_relation_word(const std::vector<std::string>& words) {
    for (const auto& w : words) {
        const auto rel = relation_from_word(w);
        if (rel) return rel;
    }
    return std::nullopt;
}

// Fraction of scenes whose predicted caption contains the ground-truth
// relation word and no contradictory one. Ground truth is the relation
// word of the scene's references.
inline double spatial_accuracy(const std::vector<std::vector<std::string>>& predictions,
                               const std::vector<std::vector<std::vector<std::string>>>& refs) {
    if (predictions.size() != refs.size() || predictions.empty())
        throw ContractError("spatial_accuracy: prediction/reference count mismatch");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        std::optional<Relation> truth;
        for (const auto& ref : refs[i]) {
            truth = find_relation_word(ref);
            if (truth) break;
        }
        if (!truth) continue;  // counts in the denominator, cannot be a hit
        bool has_truth = false, has_other = false;
        for (const auto& w : predictions[i]) {
            const auto rel = relation_from_word(w);
            if (!rel) continue;
            if (*rel == *truth)
                has_truth = true;
            else
                has_other = true;
        }
        if (has_truth && !has_other) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

}  // namespace gat
