#pragma once

// Deterministic synthetic data: a factored "world" whose images are dense
// feature vectors laid out in fixed blocks
//
//   [ object 24 | domain 12 | attribute 12 | scene 12 | noise 4 ]  = 64 dims
//
// Each factor value owns a random unit code in its block; images are built
// from (possibly summed and renormalized) codes plus Gaussian jitter, and
// captions follow a tiny fixed grammar over the closed vocabulary.  All
// sampling is seeded, and every dataset draws from its own derived stream so
// train/val/eval realms never share samples.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "p2w/contrastive.hpp"
#include "p2w/errors.hpp"
#include "p2w/rng.hpp"
#include "p2w/vocab.hpp"

namespace p2w {

struct WorldConfig {
    std::size_t n_objects = 20;
    std::size_t n_domains = 5;
    std::size_t n_attributes = 8;
    std::size_t n_scenes = 6;
    std::size_t object_dim = 24;
    std::size_t domain_dim = 12;
    std::size_t attribute_dim = 12;
    std::size_t scene_dim = 12;
    std::size_t noise_dim = 4;
    double noise_sigma = 0.05;   // noise dims ~ N(0, sigma); code dims jittered at sigma/2
    double mention_prob = 0.7;   // probability a caption mentions attribute / scene
    std::uint64_t seed = 0;

    std::size_t world_dim() const {
        return object_dim + domain_dim + attribute_dim + scene_dim + noise_dim;
    }

    bool operator==(const WorldConfig&) const = default;
};

// What an image depicts.  extra_object_ids extends the primary object for
// multi-object scenes; attribute_ids empty or scene_id/domain_id == -1 mean
// the corresponding block is structurally zero (masked).
struct SemanticDescriptor {
    int object_id = -1;
    std::vector<int> extra_object_ids;
    int domain_id = -1;
    std::vector<int> attribute_ids;
    int scene_id = -1;

    std::vector<int> all_objects() const {
        std::vector<int> v{object_id};
        v.insert(v.end(), extra_object_ids.begin(), extra_object_ids.end());
        return v;
    }
    bool has_object(int id) const {
        if (object_id == id) return true;
        return std::find(extra_object_ids.begin(), extra_object_ids.end(), id) !=
               extra_object_ids.end();
    }
    bool has_attribute(int id) const {
        return std::find(attribute_ids.begin(), attribute_ids.end(), id) != attribute_ids.end();
    }
};

struct LabeledImage {
    std::vector<double> features;
    SemanticDescriptor desc;
};

// Which optional realizations a caption uses.  The grammar has one skeleton
// but several surface forms, so the prompt vocabulary the retrieval templates
// rely on ("photo", "is", "and", ",") is covered by pretraining text.
struct CaptionStyle {
    bool mention_attr = false;
    bool mention_scene = false;
    bool photo_word = false;      // real domain rendered as "photo"
    bool attr_post_phrase = false; // attribute as trailing ", is {attr}"
};

struct CaptionedImage {
    std::vector<double> features;
    TokenSequence caption;
    SemanticDescriptor desc;
    CaptionStyle style;
};

class World {
  public:
    explicit World(const WorldConfig& cfg) : cfg_(cfg) {
        make_codes(objects_, cfg.n_objects, cfg.object_dim, 0x0b1ULL);
        make_codes(domains_, cfg.n_domains, cfg.domain_dim, 0x0b2ULL);
        make_codes(attributes_, cfg.n_attributes, cfg.attribute_dim, 0x0b3ULL);
        make_codes(scenes_, cfg.n_scenes, cfg.scene_dim, 0x0b4ULL);
    }

    const WorldConfig& config() const { return cfg_; }

    // Render a descriptor into a feature vector, consuming `rng` for jitter.
    // Active blocks are jittered at half the noise scale; masked blocks stay
    // exactly zero so masking is a hard structural fact, not a soft one.
    std::vector<double> render(const SemanticDescriptor& d, Rng& rng) const {
        std::vector<double> out;
        out.reserve(cfg_.world_dim());

        auto jitter_tail = [&](std::size_t from) {
            for (std::size_t i = from; i < out.size(); ++i)
                out[i] += 0.5 * cfg_.noise_sigma * rng.normal();
        };

        std::size_t mark = out.size();
        append_block(out, combined_code(objects_, d.all_objects(), cfg_.object_dim, "object"));
        jitter_tail(mark);

        mark = out.size();
        if (d.domain_id >= 0) {
            append_block(out, combined_code(domains_, {d.domain_id}, cfg_.domain_dim, "domain"));
            jitter_tail(mark);
        } else {
            out.resize(out.size() + cfg_.domain_dim, 0.0);
        }

        mark = out.size();
        if (!d.attribute_ids.empty()) {
            append_block(out,
                         combined_code(attributes_, d.attribute_ids, cfg_.attribute_dim, "attribute"));
            jitter_tail(mark);
        } else {
            out.resize(out.size() + cfg_.attribute_dim, 0.0);
        }

        mark = out.size();
        if (d.scene_id >= 0) {
            append_block(out, combined_code(scenes_, {d.scene_id}, cfg_.scene_dim, "scene"));
            jitter_tail(mark);
        } else {
            out.resize(out.size() + cfg_.scene_dim, 0.0);
        }

        for (std::size_t i = 0; i < cfg_.noise_dim; ++i)
            out.push_back(cfg_.noise_sigma * rng.normal());
        return out;
    }

    // Caption words under the fixed grammar skeleton
    //
    //   a {domain} of a [{attr}] {obj} [and {obj2} | , {obj2} , and {obj3}]
    //     [in a {scene}] [, is {attr}]
    //
    // with the surface choices recorded in `style`.  The attribute is written
    // inline or as the trailing phrase, never both.  The longest legal
    // realization is 14 words; the one combination that would overflow the
    // encoder context (two extra objects + scene + post-phrase) is rejected.
    std::vector<std::string> caption_words(const Vocabulary& vocab, const SemanticDescriptor& d,
                                           const CaptionStyle& style) const {
        if (d.domain_id < 0 || d.object_id < 0)
            throw ContractViolation("caption needs an object and a domain");
        if (style.attr_post_phrase && !style.mention_attr)
            throw ContractViolation("caption post-phrase requires a mentioned attribute");
        if (style.attr_post_phrase && d.extra_object_ids.size() >= 2 && style.mention_scene)
            throw ContractViolation("caption would exceed the encoder context");
        if (style.photo_word && d.domain_id != 0)
            throw ContractViolation("'photo' only names the real domain");

        const std::string domain_word =
            style.photo_word ? std::string("photo") : vocab.domains().at(d.domain_id);
        std::vector<std::string> w{"a", domain_word, "of", "a"};
        if (style.mention_attr) {
            if (d.attribute_ids.empty())
                throw ContractViolation("caption mentions an attribute the image lacks");
            if (!style.attr_post_phrase)
                w.push_back(vocab.attributes().at(d.attribute_ids.front()));
        }
        w.push_back(vocab.objects().at(d.object_id));
        if (d.extra_object_ids.size() == 1) {
            w.push_back("and");
            w.push_back(vocab.objects().at(d.extra_object_ids[0]));
        } else if (d.extra_object_ids.size() >= 2) {
            if (d.extra_object_ids.size() > 2)
                throw ContractViolation("captions list at most two extra objects");
            w.push_back(",");
            w.push_back(vocab.objects().at(d.extra_object_ids[0]));
            w.push_back(",");
            w.push_back("and");
            w.push_back(vocab.objects().at(d.extra_object_ids[1]));
        }
        if (style.mention_scene) {
            if (d.scene_id < 0)
                throw ContractViolation("caption mentions a scene the image lacks");
            w.push_back("in");
            w.push_back("a");
            w.push_back(vocab.scenes().at(d.scene_id));
        }
        if (style.mention_attr && style.attr_post_phrase) {
            w.push_back(",");
            w.push_back("is");
            w.push_back(vocab.attributes().at(d.attribute_ids.front()));
        }
        return w;
    }

  private:
    static void append_block(std::vector<double>& out, const std::vector<double>& block) {
        out.insert(out.end(), block.begin(), block.end());
    }

    // Single factor: its unit code.  Several factors: the renormalized sum.
    std::vector<double> combined_code(const std::vector<std::vector<double>>& codes,
                                      const std::vector<int>& ids, std::size_t dim,
                                      const char* family) const {
        std::vector<double> acc(dim, 0.0);
        for (int id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= codes.size())
                throw ContractViolation(std::string(family) + " id out of range");
            for (std::size_t j = 0; j < dim; ++j) acc[j] += codes[id][j];
        }
        double norm = 0.0;
        for (double v : acc) norm += v * v;
        norm = std::sqrt(norm);
        if (norm <= 1e-12) throw ContractViolation("degenerate factor combination");
        for (auto& v : acc) v /= norm;
        return acc;
    }

    void make_codes(std::vector<std::vector<double>>& out, std::size_t n, std::size_t dim,
                    std::uint64_t tag) {
        Rng rng(derive_seed(cfg_.seed, tag));
        out.assign(n, std::vector<double>(dim));
        for (auto& code : out) {
            double norm = 0.0;
            for (auto& v : code) {
                v = rng.normal();
                norm += v * v;
            }
            norm = std::sqrt(norm);
            for (auto& v : code) v /= norm;
        }
    }

    WorldConfig cfg_;
    std::vector<std::vector<double>> objects_, domains_, attributes_, scenes_;
};

// ---------------------------------------------------------------------------
// Dataset realms.  Each named realm owns an independent random stream.
// ---------------------------------------------------------------------------

namespace realm {
constexpr std::uint64_t pretrain = 0x01;
constexpr std::uint64_t validation = 0x02;
constexpr std::uint64_t mapper = 0x03;
constexpr std::uint64_t reconstruction = 0x04;
constexpr std::uint64_t task_a = 0x10;
constexpr std::uint64_t task_b = 0x11;
constexpr std::uint64_t task_c = 0x12;
} // namespace realm

namespace detail {

inline SemanticDescriptor sample_descriptor(const WorldConfig& cfg, Rng& rng) {
    SemanticDescriptor d;
    d.object_id = static_cast<int>(rng.index(cfg.n_objects));
    d.domain_id = static_cast<int>(rng.index(cfg.n_domains));
    d.attribute_ids = {static_cast<int>(rng.index(cfg.n_attributes))};
    d.scene_id = static_cast<int>(rng.index(cfg.n_scenes));
    return d;
}

// Pretraining/mapper scenes: mostly single objects, but enough two- and
// three-object scenes that conjunction captions and summed object codes are
// in-distribution for the towers.
inline SemanticDescriptor sample_scene_descriptor(const WorldConfig& cfg, Rng& rng) {
    SemanticDescriptor d = sample_descriptor(cfg, rng);
    const double u = rng.uniform();
    const std::size_t n_extra = u < 0.08 ? 2 : (u < 0.30 ? 1 : 0);
    while (d.extra_object_ids.size() < n_extra) {
        const int e = static_cast<int>(rng.index(cfg.n_objects));
        if (!d.has_object(e)) d.extra_object_ids.push_back(e);
    }
    return d;
}

inline CaptionStyle sample_style(const WorldConfig& cfg, const SemanticDescriptor& d, Rng& rng) {
    CaptionStyle st;
    st.mention_attr = rng.uniform() < cfg.mention_prob;
    st.mention_scene = rng.uniform() < cfg.mention_prob;
    // Draws are unconditional so the stream stays aligned across styles.
    const bool photo_draw = rng.uniform() < 0.5;
    const bool post_draw = rng.uniform() < 0.35;
    st.photo_word = d.domain_id == 0 && photo_draw;
    st.attr_post_phrase = st.mention_attr && post_draw &&
                          !(d.extra_object_ids.size() >= 2 && st.mention_scene);
    return st;
}

} // namespace detail

inline std::vector<CaptionedImage> make_captioned_set(const World& world, const Vocabulary& vocab,
                                                      std::size_t n, std::uint64_t realm_tag) {
    Rng rng(derive_seed(world.config().seed, splitmix64(realm_tag)));
    std::vector<CaptionedImage> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        CaptionedImage item;
        item.desc = detail::sample_scene_descriptor(world.config(), rng);
        item.features = world.render(item.desc, rng);
        item.style = detail::sample_style(world.config(), item.desc, rng);
        item.caption =
            vocab.sequence_from_words(world.caption_words(vocab, item.desc, item.style));
        out.push_back(std::move(item));
    }
    return out;
}

// Unlabeled images.  `masked_prob` mixes in renders that keep only the object
// and domain blocks — the shape composed-retrieval queries arrive in — so the
// mapper sees that sparsity pattern during its training.
inline std::vector<LabeledImage> make_labeled_set(const World& world, std::size_t n,
                                                  std::uint64_t realm_tag,
                                                  double masked_prob = 0.0) {
    Rng rng(derive_seed(world.config().seed, splitmix64(realm_tag)));
    std::vector<LabeledImage> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        LabeledImage item;
        item.desc = detail::sample_scene_descriptor(world.config(), rng);
        if (rng.uniform() < masked_prob) {
            SemanticDescriptor masked;
            masked.object_id = item.desc.object_id;
            masked.domain_id = item.desc.domain_id;
            item.desc = masked;
        }
        item.features = world.render(item.desc, rng);
        out.push_back(std::move(item));
    }
    return out;
}

inline PairDataset to_pair_dataset(const std::vector<CaptionedImage>& set) {
    PairDataset d;
    d.images.reserve(set.size());
    d.captions.reserve(set.size());
    for (const auto& item : set) {
        d.images.push_back(item.features);
        d.captions.push_back(item.caption);
    }
    return d;
}

// Does a retrieved image satisfy everything the caption actually says?  Used
// as the truth predicate for pretraining validation recall: captions omit
// unmentioned factors, so those factors are unconstrained, while the object
// list and domain are always named and must match exactly.
inline bool caption_consistent(const CaptionedImage& query, const SemanticDescriptor& cand) {
    std::vector<int> qo = query.desc.all_objects();
    std::vector<int> co = cand.all_objects();
    std::sort(qo.begin(), qo.end());
    std::sort(co.begin(), co.end());
    if (qo != co) return false;
    if (cand.domain_id != query.desc.domain_id) return false;
    if (query.style.mention_attr && !cand.has_attribute(query.desc.attribute_ids.front()))
        return false;
    if (query.style.mention_scene && cand.scene_id != query.desc.scene_id) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Composed-retrieval tasks
// ---------------------------------------------------------------------------

// Conjunctive target predicate, serializable (no captured lambdas).
struct PredicateSpec {
    std::vector<int> required_objects; // all must be present in the candidate
    int domain_id = -1;                // -1: unconstrained
    int attribute_id = -1;             // -1: unconstrained

    bool matches(const SemanticDescriptor& d) const {
        for (int o : required_objects)
            if (!d.has_object(o)) return false;
        if (domain_id >= 0 && d.domain_id != domain_id) return false;
        if (attribute_id >= 0 && !d.has_attribute(attribute_id)) return false;
        return true;
    }
};

struct CirQuery {
    std::vector<double> image;
    SemanticDescriptor image_desc;
    std::string domain_word;               // task a payload
    std::vector<std::string> object_words; // task b payload (extra objects)
    std::string attr_text;                 // task c payload, e.g. "is red"
    std::string baseline_text;             // modification text for the baselines
    PredicateSpec target;
};

struct CirTask {
    char kind = '?'; // 'a' domain conversion, 'b' object composition, 'c' attribute
    std::string name;
    std::vector<CirQuery> queries;
    std::vector<LabeledImage> pool;
};

// (a) Domain conversion: real-domain query images; the text names a target
// domain; targets show the same object in that domain.
inline CirTask make_task_domain(const World& world, const Vocabulary& vocab,
                                std::size_t n_queries = 200, std::size_t per_cell = 20) {
    const auto& cfg = world.config();
    Rng rng(derive_seed(cfg.seed, splitmix64(realm::task_a)));
    CirTask task;
    task.kind = 'a';
    task.name = "domain_conversion";

    for (std::size_t dom = 0; dom < cfg.n_domains; ++dom)
        for (std::size_t obj = 0; obj < cfg.n_objects; ++obj)
            for (std::size_t s = 0; s < per_cell; ++s) {
                SemanticDescriptor d;
                d.object_id = static_cast<int>(obj);
                d.domain_id = static_cast<int>(dom);
                d.attribute_ids = {static_cast<int>(rng.index(cfg.n_attributes))};
                d.scene_id = static_cast<int>(rng.index(cfg.n_scenes));
                task.pool.push_back({world.render(d, rng), d});
            }

    for (std::size_t i = 0; i < n_queries; ++i) {
        CirQuery q;
        q.image_desc = detail::sample_descriptor(cfg, rng);
        q.image_desc.domain_id = 0; // queries are "real" photos
        q.image = world.render(q.image_desc, rng);
        const int target_domain = 1 + static_cast<int>(rng.index(cfg.n_domains - 1));
        q.domain_word = vocab.domains().at(target_domain);
        q.baseline_text = "a " + q.domain_word + " of photo";
        q.target.required_objects = {q.image_desc.object_id};
        q.target.domain_id = target_domain;
        task.queries.push_back(std::move(q));
    }
    return task;
}

// (b) Object composition: the query image shows a single object (attribute
// and scene blocks masked); the text adds 1-2 further objects; targets
// contain the full set.  The pool mixes true targets, near misses lacking
// one required object, and random multi-object scenes.
inline CirTask make_task_objects(const World& world, const Vocabulary& vocab,
                                 std::size_t n_queries = 200, std::size_t pool_size = 2000) {
    const auto& cfg = world.config();
    Rng rng(derive_seed(cfg.seed, splitmix64(realm::task_b)));
    CirTask task;
    task.kind = 'b';
    task.name = "object_composition";

    auto random_scene_desc = [&](std::vector<int> objects) {
        SemanticDescriptor d;
        d.object_id = objects.front();
        d.extra_object_ids.assign(objects.begin() + 1, objects.end());
        d.domain_id = 0;
        d.attribute_ids = {static_cast<int>(rng.index(cfg.n_attributes))};
        d.scene_id = static_cast<int>(rng.index(cfg.n_scenes));
        return d;
    };

    for (std::size_t i = 0; i < n_queries; ++i) {
        CirQuery q;
        const int obj = static_cast<int>(rng.index(cfg.n_objects));
        // Attribute/scene blocks masked: the query depicts the object alone.
        q.image_desc.object_id = obj;
        q.image_desc.domain_id = 0;
        q.image = world.render(q.image_desc, rng);

        const std::size_t n_extra = 1 + rng.index(2);
        std::vector<int> extras;
        while (extras.size() < n_extra) {
            const int e = static_cast<int>(rng.index(cfg.n_objects));
            if (e != obj && std::find(extras.begin(), extras.end(), e) == extras.end())
                extras.push_back(e);
        }
        for (int e : extras) q.object_words.push_back(vocab.objects().at(e));

        if (extras.size() == 1) {
            q.baseline_text = "a photo of photo and " + q.object_words[0];
        } else {
            q.baseline_text = "a photo of photo , " + q.object_words[0] + " , and " + q.object_words[1];
        }

        std::vector<int> full_set{obj};
        full_set.insert(full_set.end(), extras.begin(), extras.end());
        q.target.required_objects = full_set;

        // Three true targets per query.
        for (int copy = 0; copy < 3; ++copy) {
            auto d = random_scene_desc(full_set);
            task.pool.push_back({world.render(d, rng), d});
        }
        // Two near misses: drop one required object, substitute a fresh one.
        for (int miss = 0; miss < 2; ++miss) {
            std::vector<int> broken = full_set;
            broken.erase(broken.begin() + static_cast<std::ptrdiff_t>(rng.index(broken.size())));
            int repl;
            do {
                repl = static_cast<int>(rng.index(cfg.n_objects));
            } while (std::find(full_set.begin(), full_set.end(), repl) != full_set.end());
            broken.push_back(repl);
            auto d = random_scene_desc(broken);
            task.pool.push_back({world.render(d, rng), d});
        }
        task.queries.push_back(std::move(q));
    }

    // Random multi-object distractors to fill the pool.
    while (task.pool.size() < pool_size) {
        const std::size_t n_obj = 2 + rng.index(2);
        std::vector<int> objs;
        while (objs.size() < n_obj) {
            const int o = static_cast<int>(rng.index(cfg.n_objects));
            if (std::find(objs.begin(), objs.end(), o) == objs.end()) objs.push_back(o);
        }
        auto d = random_scene_desc(objs);
        task.pool.push_back({world.render(d, rng), d});
    }
    return task;
}

// (c) Attribute manipulation: the text asks for a different attribute on the
// query's object.
inline CirTask make_task_attribute(const World& world, const Vocabulary& vocab,
                                   std::size_t n_queries = 200, std::size_t pool_size = 2000) {
    const auto& cfg = world.config();
    Rng rng(derive_seed(cfg.seed, splitmix64(realm::task_c)));
    CirTask task;
    task.kind = 'c';
    task.name = "attribute_manipulation";

    // Cover every (object, attribute) cell, then pad with random cells.
    const std::size_t per_cell = pool_size / (cfg.n_objects * cfg.n_attributes);
    auto push_pool = [&](int obj, int attr) {
        SemanticDescriptor d;
        d.object_id = obj;
        d.domain_id = 0;
        d.attribute_ids = {attr};
        d.scene_id = static_cast<int>(rng.index(cfg.n_scenes));
        task.pool.push_back({world.render(d, rng), d});
    };
    for (std::size_t obj = 0; obj < cfg.n_objects; ++obj)
        for (std::size_t attr = 0; attr < cfg.n_attributes; ++attr)
            for (std::size_t s = 0; s < per_cell; ++s)
                push_pool(static_cast<int>(obj), static_cast<int>(attr));
    while (task.pool.size() < pool_size)
        push_pool(static_cast<int>(rng.index(cfg.n_objects)),
                  static_cast<int>(rng.index(cfg.n_attributes)));

    for (std::size_t i = 0; i < n_queries; ++i) {
        CirQuery q;
        // Catalog-style query shots: the object with its attribute, no scene,
        // so the query image states exactly the part the text will modify.
        q.image_desc.object_id = static_cast<int>(rng.index(cfg.n_objects));
        q.image_desc.domain_id = 0;
        q.image_desc.attribute_ids = {static_cast<int>(rng.index(cfg.n_attributes))};
        q.image = world.render(q.image_desc, rng);
        int target_attr;
        do {
            target_attr = static_cast<int>(rng.index(cfg.n_attributes));
        } while (target_attr == q.image_desc.attribute_ids.front());
        q.attr_text = "is " + vocab.attributes().at(target_attr);
        q.baseline_text = "a photo of photo , " + q.attr_text;
        q.target.required_objects = {q.image_desc.object_id};
        q.target.attribute_id = target_attr;
        task.queries.push_back(std::move(q));
    }
    return task;
}

} // namespace p2w
