#pragma once

// Pipeline orchestration: run configuration, stage commands, and artifact
// persistence.  The five stages form a chain
//
//   gen-world -> pretrain -> train-mapper -> eval / sweep
//
// and every artifact embeds the hash of the configuration slice that produced
// it.  Hashes are stage-scoped: the world manifest binds (seed, world, data),
// the encoder checkpoint additionally binds (encoder, pretrain), and the
// mapper checkpoint additionally binds (mapper).  Evaluation options never
// enter any hash, so changing --tasks or --template re-reads the same trained
// artifacts instead of invalidating them.  Datasets are regenerated
// deterministically from the config at every stage; the manifest pins their
// content hashes so drift is caught instead of silently retrained over.
//
// Wall-clock timings go to a timings.json sidecar rather than into
// report.json: metric reports are byte-reproducible for a fixed config and
// seed, timing measurements never are.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "p2w/checkpoint.hpp"
#include "p2w/compose.hpp"
#include "p2w/contrastive.hpp"
#include "p2w/encoders.hpp"
#include "p2w/errors.hpp"
#include "p2w/mapper.hpp"
#include "p2w/retrieval.hpp"
#include "p2w/synthworld.hpp"

namespace p2w {

using ordered_json = nlohmann::ordered_json;

// Training inside the pipeline runs in single precision; the float64 path
// exists for gradient verification, not for production runs.
using PipelineScalar = float;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct DataSizes {
    std::size_t pretrain_pairs = 5000;
    std::size_t val_pairs = 200;
    std::size_t mapper_images = 5000;
    std::size_t recon_images = 500;
    std::size_t task_queries = 200;
    std::size_t task_pool = 2000;   // pool size for the composition/attribute tasks
    std::size_t task_per_cell = 20; // images per (domain, object) cell in the domain task
    // Fraction of mapper images rendered with everything but the object and
    // domain blocks zeroed out.  Off by default: training the mapper on the
    // plain pretraining distribution reconstructs better and composes better;
    // the knob stays for experiments on background-invariant pseudo tokens.
    double mapper_masked_prob = 0.0;

    bool operator==(const DataSizes&) const = default;
};

struct MapperOptions {
    std::size_t hidden = 512;
    bool linear_only = false;
    std::size_t epochs = 15;
    std::size_t batch_size = 128;
    double lr = 1e-4;
    double weight_decay = 0.1;

    bool operator==(const MapperOptions&) const = default;
};

struct EvalOptions {
    std::string tasks = "abc"; // any non-empty subset of {a, b, c}
    std::string pattern;       // prompt template override; empty = per-task default
    double sweep_step = 0.1;   // w grid spacing for cmd_sweep
    double average_w = 0.5;    // interpolation weight of the "average" baseline

    bool operator==(const EvalOptions&) const = default;
};

struct RunConfig {
    std::uint64_t seed = 7;
    std::string out_dir = "out";
    WorldConfig world;      // .seed is ignored; the run seed is authoritative
    DataSizes data;
    EncoderConfig encoder;  // .world_dim is ignored; derived from world blocks
    double tau_init = 1.0 / 0.07;
    PretrainConfig pretrain; // .seed is ignored; the run seed is authoritative
    MapperOptions mapper;
    EvalOptions eval;

    bool operator==(const RunConfig&) const = default;
};

// Derived per-stage configs.  The run seed fans out to every stage; each
// consumer salts its own streams, so a single seed drives the whole pipeline.
inline WorldConfig world_config(const RunConfig& c) {
    WorldConfig w = c.world;
    w.seed = c.seed;
    return w;
}

inline EncoderConfig encoder_config(const RunConfig& c) {
    EncoderConfig e = c.encoder;
    e.world_dim = c.world.world_dim();
    return e;
}

inline PretrainConfig pretrain_config(const RunConfig& c) {
    PretrainConfig p = c.pretrain;
    p.seed = c.seed;
    return p;
}

inline MapperTrainConfig mapper_train_config(const RunConfig& c) {
    MapperTrainConfig m;
    m.epochs = c.mapper.epochs;
    m.batch_size = c.mapper.batch_size;
    m.lr = c.mapper.lr;
    m.weight_decay = c.mapper.weight_decay;
    m.seed = c.seed;
    return m;
}

// ---------------------------------------------------------------------------
// JSON serialization (stable key order; unknown keys rejected)
// ---------------------------------------------------------------------------

inline ordered_json to_json(const RunConfig& c) {
    ordered_json j;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;

    ordered_json w;
    w["n_objects"] = c.world.n_objects;
    w["n_domains"] = c.world.n_domains;
    w["n_attributes"] = c.world.n_attributes;
    w["n_scenes"] = c.world.n_scenes;
    w["object_dim"] = c.world.object_dim;
    w["domain_dim"] = c.world.domain_dim;
    w["attribute_dim"] = c.world.attribute_dim;
    w["scene_dim"] = c.world.scene_dim;
    w["noise_dim"] = c.world.noise_dim;
    w["noise_sigma"] = c.world.noise_sigma;
    w["mention_prob"] = c.world.mention_prob;
    j["world"] = std::move(w);

    ordered_json d;
    d["pretrain_pairs"] = c.data.pretrain_pairs;
    d["val_pairs"] = c.data.val_pairs;
    d["mapper_images"] = c.data.mapper_images;
    d["recon_images"] = c.data.recon_images;
    d["task_queries"] = c.data.task_queries;
    d["task_pool"] = c.data.task_pool;
    d["task_per_cell"] = c.data.task_per_cell;
    d["mapper_masked_prob"] = c.data.mapper_masked_prob;
    j["data"] = std::move(d);

    ordered_json e;
    e["embed_dim"] = c.encoder.embed_dim;
    e["context_len"] = c.encoder.context_len;
    e["heads"] = c.encoder.heads;
    e["head_dim"] = c.encoder.head_dim;
    e["ffn_hidden"] = c.encoder.ffn_hidden;
    e["vision_hidden"] = c.encoder.vision_hidden;
    j["encoder"] = std::move(e);

    ordered_json p;
    p["epochs"] = c.pretrain.epochs;
    p["batch_size"] = c.pretrain.batch_size;
    p["lr"] = c.pretrain.lr;
    p["weight_decay"] = c.pretrain.weight_decay;
    p["tau_init"] = c.tau_init;
    p["tau_max"] = c.pretrain.tau_max;
    j["pretrain"] = std::move(p);

    ordered_json m;
    m["hidden"] = c.mapper.hidden;
    m["linear_only"] = c.mapper.linear_only;
    m["epochs"] = c.mapper.epochs;
    m["batch_size"] = c.mapper.batch_size;
    m["lr"] = c.mapper.lr;
    m["weight_decay"] = c.mapper.weight_decay;
    j["mapper"] = std::move(m);

    ordered_json v;
    v["tasks"] = c.eval.tasks;
    v["template"] = c.eval.pattern;
    v["sweep_step"] = c.eval.sweep_step;
    v["average_w"] = c.eval.average_w;
    j["eval"] = std::move(v);
    return j;
}

namespace detail {

inline void reject_unknown_keys(const ordered_json& j, std::initializer_list<const char*> known,
                                const std::string& scope) {
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* k : known)
            if (item.key() == k) { ok = true; break; }
        if (!ok) throw ContractViolation("unknown config key: " + scope + item.key());
    }
}

template <typename T>
void read_key(const ordered_json& j, const char* key, T& out, const std::string& scope) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation("config key " + scope + key + ": " + e.what());
    }
}

} // namespace detail

// Parse a config object on top of defaults.  Absent keys keep their default;
// unknown keys fail loudly so typos cannot silently run a different
// experiment.
inline RunConfig parse_run_config(const ordered_json& j) {
    if (!j.is_object()) throw ContractViolation("config root must be a JSON object");
    detail::reject_unknown_keys(
        j, {"seed", "out_dir", "world", "data", "encoder", "pretrain", "mapper", "eval"}, "");

    RunConfig c;
    detail::read_key(j, "seed", c.seed, "");
    detail::read_key(j, "out_dir", c.out_dir, "");

    if (j.contains("world")) {
        const auto& w = j.at("world");
        detail::reject_unknown_keys(w,
                                    {"n_objects", "n_domains", "n_attributes", "n_scenes",
                                     "object_dim", "domain_dim", "attribute_dim", "scene_dim",
                                     "noise_dim", "noise_sigma", "mention_prob"},
                                    "world.");
        detail::read_key(w, "n_objects", c.world.n_objects, "world.");
        detail::read_key(w, "n_domains", c.world.n_domains, "world.");
        detail::read_key(w, "n_attributes", c.world.n_attributes, "world.");
        detail::read_key(w, "n_scenes", c.world.n_scenes, "world.");
        detail::read_key(w, "object_dim", c.world.object_dim, "world.");
        detail::read_key(w, "domain_dim", c.world.domain_dim, "world.");
        detail::read_key(w, "attribute_dim", c.world.attribute_dim, "world.");
        detail::read_key(w, "scene_dim", c.world.scene_dim, "world.");
        detail::read_key(w, "noise_dim", c.world.noise_dim, "world.");
        detail::read_key(w, "noise_sigma", c.world.noise_sigma, "world.");
        detail::read_key(w, "mention_prob", c.world.mention_prob, "world.");
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::reject_unknown_keys(d,
                                    {"pretrain_pairs", "val_pairs", "mapper_images",
                                     "recon_images", "task_queries", "task_pool", "task_per_cell",
                                     "mapper_masked_prob"},
                                    "data.");
        detail::read_key(d, "pretrain_pairs", c.data.pretrain_pairs, "data.");
        detail::read_key(d, "val_pairs", c.data.val_pairs, "data.");
        detail::read_key(d, "mapper_images", c.data.mapper_images, "data.");
        detail::read_key(d, "recon_images", c.data.recon_images, "data.");
        detail::read_key(d, "task_queries", c.data.task_queries, "data.");
        detail::read_key(d, "task_pool", c.data.task_pool, "data.");
        detail::read_key(d, "task_per_cell", c.data.task_per_cell, "data.");
        detail::read_key(d, "mapper_masked_prob", c.data.mapper_masked_prob, "data.");
    }
    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        detail::reject_unknown_keys(
            e, {"embed_dim", "context_len", "heads", "head_dim", "ffn_hidden", "vision_hidden"},
            "encoder.");
        detail::read_key(e, "embed_dim", c.encoder.embed_dim, "encoder.");
        detail::read_key(e, "context_len", c.encoder.context_len, "encoder.");
        detail::read_key(e, "heads", c.encoder.heads, "encoder.");
        detail::read_key(e, "head_dim", c.encoder.head_dim, "encoder.");
        detail::read_key(e, "ffn_hidden", c.encoder.ffn_hidden, "encoder.");
        detail::read_key(e, "vision_hidden", c.encoder.vision_hidden, "encoder.");
    }
    if (j.contains("pretrain")) {
        const auto& p = j.at("pretrain");
        detail::reject_unknown_keys(
            p, {"epochs", "batch_size", "lr", "weight_decay", "tau_init", "tau_max"}, "pretrain.");
        detail::read_key(p, "epochs", c.pretrain.epochs, "pretrain.");
        detail::read_key(p, "batch_size", c.pretrain.batch_size, "pretrain.");
        detail::read_key(p, "lr", c.pretrain.lr, "pretrain.");
        detail::read_key(p, "weight_decay", c.pretrain.weight_decay, "pretrain.");
        detail::read_key(p, "tau_init", c.tau_init, "pretrain.");
        detail::read_key(p, "tau_max", c.pretrain.tau_max, "pretrain.");
    }
    if (j.contains("mapper")) {
        const auto& m = j.at("mapper");
        detail::reject_unknown_keys(
            m, {"hidden", "linear_only", "epochs", "batch_size", "lr", "weight_decay"}, "mapper.");
        detail::read_key(m, "hidden", c.mapper.hidden, "mapper.");
        detail::read_key(m, "linear_only", c.mapper.linear_only, "mapper.");
        detail::read_key(m, "epochs", c.mapper.epochs, "mapper.");
        detail::read_key(m, "batch_size", c.mapper.batch_size, "mapper.");
        detail::read_key(m, "lr", c.mapper.lr, "mapper.");
        detail::read_key(m, "weight_decay", c.mapper.weight_decay, "mapper.");
    }
    if (j.contains("eval")) {
        const auto& v = j.at("eval");
        detail::reject_unknown_keys(v, {"tasks", "template", "sweep_step", "average_w"}, "eval.");
        detail::read_key(v, "tasks", c.eval.tasks, "eval.");
        detail::read_key(v, "template", c.eval.pattern, "eval.");
        detail::read_key(v, "sweep_step", c.eval.sweep_step, "eval.");
        detail::read_key(v, "average_w", c.eval.average_w, "eval.");
    }
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ContractViolation("config file not found: " + path);
    ordered_json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation("config file " + path + " is not valid JSON: " + e.what());
    }
    return parse_run_config(j);
}

// A Vocabulary is fixed, so word-family sizes bound what a world may use.
inline void validate_config(const RunConfig& c) {
    const Vocabulary vocab;
    auto fail = [](const std::string& msg) { throw ContractViolation("config: " + msg); };

    if (c.world.n_objects < 3 || c.world.n_objects > vocab.objects().size())
        fail("world.n_objects must be in [3, " + std::to_string(vocab.objects().size()) + "]");
    if (c.world.n_domains < 2 || c.world.n_domains > vocab.domains().size())
        fail("world.n_domains must be in [2, " + std::to_string(vocab.domains().size()) + "]");
    if (c.world.n_attributes < 2 || c.world.n_attributes > vocab.attributes().size())
        fail("world.n_attributes must be in [2, " + std::to_string(vocab.attributes().size()) +
             "]");
    if (c.world.n_scenes < 1 || c.world.n_scenes > vocab.scenes().size())
        fail("world.n_scenes must be in [1, " + std::to_string(vocab.scenes().size()) + "]");
    if (c.world.object_dim == 0 || c.world.domain_dim == 0 || c.world.attribute_dim == 0 ||
        c.world.scene_dim == 0)
        fail("world block dimensions must be positive");
    if (c.world.noise_sigma < 0.0) fail("world.noise_sigma must be non-negative");
    if (c.world.mention_prob < 0.0 || c.world.mention_prob > 1.0)
        fail("world.mention_prob must lie in [0, 1]");

    if (c.encoder.embed_dim == 0 || c.encoder.heads == 0 || c.encoder.head_dim == 0 ||
        c.encoder.ffn_hidden == 0 || c.encoder.vision_hidden == 0)
        fail("encoder dimensions must be positive");
    if (c.encoder.context_len < 8) fail("encoder.context_len must be at least 8");

    if (c.pretrain.batch_size < 2 || c.mapper.batch_size < 2)
        fail("batch sizes must be at least 2 (the contrastive loss needs negatives)");
    if (c.data.pretrain_pairs < c.pretrain.batch_size)
        fail("data.pretrain_pairs must cover at least one pretrain batch");
    if (c.data.mapper_images < c.mapper.batch_size)
        fail("data.mapper_images must cover at least one mapper batch");
    if (c.data.val_pairs == 0 || c.data.recon_images == 0 || c.data.task_queries == 0)
        fail("data sizes must be positive");
    if (c.data.task_pool < 10 * c.data.task_queries / 2)
        fail("data.task_pool is too small for the requested task_queries");
    if (c.data.task_per_cell == 0) fail("data.task_per_cell must be positive");
    if (c.data.mapper_masked_prob < 0.0 || c.data.mapper_masked_prob > 1.0)
        fail("data.mapper_masked_prob must lie in [0, 1]");
    if (c.tau_init <= 0.0) fail("pretrain.tau_init must be positive");
    if (c.pretrain.tau_max < c.tau_init) fail("pretrain.tau_max must be >= tau_init");
    if (c.pretrain.lr <= 0.0 || c.mapper.lr <= 0.0) fail("learning rates must be positive");
    if (c.mapper.hidden == 0) fail("mapper.hidden must be positive");

    if (c.eval.tasks.empty()) fail("eval.tasks must name at least one task");
    for (char k : c.eval.tasks)
        if (k != 'a' && k != 'b' && k != 'c')
            fail(std::string("eval.tasks contains unknown task '") + k + "'");
    for (std::size_t i = 0; i < c.eval.tasks.size(); ++i)
        for (std::size_t l = i + 1; l < c.eval.tasks.size(); ++l)
            if (c.eval.tasks[i] == c.eval.tasks[l]) fail("eval.tasks repeats a task");
    if (c.eval.sweep_step <= 0.0 || c.eval.sweep_step > 1.0)
        fail("eval.sweep_step must lie in (0, 1]");
    const double cells = 1.0 / c.eval.sweep_step;
    if (std::abs(cells - std::round(cells)) > 1e-9)
        fail("eval.sweep_step must divide 1 evenly");
    if (c.eval.average_w < 0.0 || c.eval.average_w > 1.0)
        fail("eval.average_w must lie in [0, 1]");
}

// ---------------------------------------------------------------------------
// Stage-scoped config hashing (FNV-1a 64 over the canonical JSON dump)
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 1469598103934665603ULL) {
    const unsigned char* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex16(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

enum class Stage { world = 0, pretrain = 1, mapper = 2 };

// out_dir and eval options never participate: neither changes what a trained
// artifact contains.
inline std::uint64_t stage_hash(const RunConfig& c, Stage stage) {
    ordered_json j = to_json(c);
    j.erase("out_dir");
    j.erase("eval");
    if (stage < Stage::mapper) j.erase("mapper");
    if (stage < Stage::pretrain) {
        j.erase("encoder");
        j.erase("pretrain");
    }
    const std::string dump = j.dump();
    return fnv1a64(dump.data(), dump.size());
}

inline std::uint64_t world_hash(const RunConfig& c) { return stage_hash(c, Stage::world); }
inline std::uint64_t pretrain_hash(const RunConfig& c) { return stage_hash(c, Stage::pretrain); }
inline std::uint64_t mapper_hash(const RunConfig& c) { return stage_hash(c, Stage::mapper); }

// ---------------------------------------------------------------------------
// Artifact plumbing
// ---------------------------------------------------------------------------

namespace artifact {
constexpr const char* world = "world.jsonl";
constexpr const char* encoders = "encoders.p2w";
constexpr const char* pretrain_log = "pretrain_log.jsonl";
constexpr const char* mapper = "mapper.p2w";
constexpr const char* mapper_log = "mapper_log.jsonl";
constexpr const char* report = "report.json";
constexpr const char* sweep = "sweep.json";
constexpr const char* timings = "timings.json";
} // namespace artifact

inline std::string artifact_path(const RunConfig& c, const char* name) {
    return (std::filesystem::path(c.out_dir) / name).string();
}

namespace detail {

// Content hashes for regenerated datasets.  Same-machine contracts: they fold
// raw double bit patterns, which is exactly as reproducible as the math.
inline void fold_doubles(std::uint64_t& h, const std::vector<double>& v) {
    if (!v.empty()) h = fnv1a64(v.data(), v.size() * sizeof(double), h);
}

inline void fold_ints(std::uint64_t& h, const std::vector<int>& v) {
    if (!v.empty()) h = fnv1a64(v.data(), v.size() * sizeof(int), h);
}

inline void fold_string(std::uint64_t& h, const std::string& s) {
    h = fnv1a64(s.data(), s.size(), h);
    h = fnv1a64("\0", 1, h);
}

inline std::uint64_t hash_captioned(const std::vector<CaptionedImage>& set) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& item : set) {
        fold_doubles(h, item.features);
        fold_ints(h, item.caption.ids);
    }
    return h;
}

inline std::uint64_t hash_labeled(const std::vector<LabeledImage>& set) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& item : set) fold_doubles(h, item.features);
    return h;
}

inline std::uint64_t hash_task(const CirTask& task) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& q : task.queries) {
        fold_doubles(h, q.image);
        fold_string(h, q.baseline_text);
    }
    for (const auto& item : task.pool) fold_doubles(h, item.features);
    return h;
}

inline std::string realm_name(char kind) {
    switch (kind) {
        case 'a': return "task_a";
        case 'b': return "task_b";
        case 'c': return "task_c";
    }
    throw ContractViolation(std::string("unknown task kind '") + kind + "'");
}

inline std::uint64_t realm_tag(char kind) {
    switch (kind) {
        case 'a': return realm::task_a;
        case 'b': return realm::task_b;
        case 'c': return realm::task_c;
    }
    throw ContractViolation(std::string("unknown task kind '") + kind + "'");
}

inline CirTask build_task(const World& world, const Vocabulary& vocab, const RunConfig& c,
                          char kind) {
    switch (kind) {
        case 'a':
            return make_task_domain(world, vocab, c.data.task_queries, c.data.task_per_cell);
        case 'b': return make_task_objects(world, vocab, c.data.task_queries, c.data.task_pool);
        case 'c': return make_task_attribute(world, vocab, c.data.task_queries, c.data.task_pool);
    }
    throw ContractViolation(std::string("unknown task kind '") + kind + "'");
}

inline std::vector<std::vector<double>> features_of(const std::vector<LabeledImage>& set) {
    std::vector<std::vector<double>> out;
    out.reserve(set.size());
    for (const auto& item : set) out.push_back(item.features);
    return out;
}

template <typename S>
std::vector<std::vector<S>> rows_of(const Var<S>& m) {
    std::vector<std::vector<S>> out(m.rows());
    const auto& v = m.value();
    for (std::size_t i = 0; i < m.rows(); ++i)
        out[i].assign(v.begin() + static_cast<std::ptrdiff_t>(i * m.cols()),
                      v.begin() + static_cast<std::ptrdiff_t>((i + 1) * m.cols()));
    return out;
}

class StageTimer {
  public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    }

  private:
    std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

} // namespace detail

inline void require_artifact(const std::string& path, const char* producer_cmd) {
    if (!std::filesystem::exists(path))
        throw StaleArtifact("missing artifact " + path + "; run `p2w " + producer_cmd +
                            "` first");
}

inline std::vector<ordered_json> read_manifest(const std::string& path,
                                               const char* producer_cmd) {
    require_artifact(path, producer_cmd);
    std::ifstream in(path);
    if (!in) throw StaleArtifact("cannot open artifact " + path);
    std::vector<ordered_json> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            lines.push_back(ordered_json::parse(line));
        } catch (const nlohmann::json::exception&) {
            throw CorruptCheckpoint("manifest " + path + " has an unparsable line");
        }
    }
    if (lines.empty()) throw CorruptCheckpoint("manifest " + path + " is empty");
    return lines;
}

inline void check_world_manifest(const std::vector<ordered_json>& manifest, const RunConfig& c,
                                 const std::string& path) {
    const auto& head = manifest.front();
    if (!head.contains("config_hash") || !head["config_hash"].is_string())
        throw CorruptCheckpoint("manifest " + path + " lacks a config_hash header");
    const std::string want = hex16(world_hash(c));
    const std::string got = head["config_hash"].get<std::string>();
    if (got != want)
        throw StaleArtifact("config hash mismatch for " + path + " (artifact " + got +
                            ", config " + want + "); re-run `p2w gen-world`");
}

inline void verify_realm(const std::vector<ordered_json>& manifest, const std::string& realm_name,
                         std::uint64_t content_hash, const std::string& path) {
    for (std::size_t i = 1; i < manifest.size(); ++i) {
        const auto& line = manifest[i];
        if (!line.contains("realm") || line["realm"] != realm_name) continue;
        if (!line.contains("hash") || line["hash"].get<std::string>() != hex16(content_hash))
            throw StaleArtifact("realm '" + realm_name + "' in " + path +
                                " does not match the regenerated dataset; re-run `p2w gen-world`");
        return;
    }
    throw StaleArtifact("manifest " + path + " lacks realm '" + realm_name +
                        "'; re-run `p2w gen-world`");
}

template <typename S>
void save_params_checked(const ParamSet<S>& params, const std::string& path,
                         std::uint64_t config_hash) {
    CheckpointMap records = to_records(params);
    set_meta_hash(records, config_hash);
    write_checkpoint(path, records);
}

template <typename S>
void load_params_checked(ParamSet<S>& params, const std::string& path, std::uint64_t want,
                         const char* producer_cmd) {
    require_artifact(path, producer_cmd);
    CheckpointMap records = read_checkpoint(path);
    const auto got = get_meta_hash(records);
    if (!got)
        throw StaleArtifact("artifact " + path + " carries no config hash; re-run `p2w " +
                            producer_cmd + "`");
    if (*got != want)
        throw StaleArtifact("config hash mismatch for " + path + " (artifact " + hex16(*got) +
                            ", config " + hex16(want) + "); re-run `p2w " + producer_cmd + "`");
    load_params(params, records, path);
}

inline void update_timing(const RunConfig& c, const std::string& key, double seconds) {
    const std::string path = artifact_path(c, artifact::timings);
    ordered_json t = ordered_json::object();
    {
        std::ifstream in(path);
        if (in) {
            try {
                in >> t;
            } catch (const nlohmann::json::exception&) {
                t = ordered_json::object();
            }
            if (!t.is_object()) t = ordered_json::object();
        }
    }
    t[key] = seconds;
    std::ofstream out(path, std::ios::trunc);
    out << t.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Evaluation helpers shared by the commands and the acceptance harness
// ---------------------------------------------------------------------------

// Text-to-image recall@1 of captions against their own image set.  A caption
// omits unmentioned factors, so several images can satisfy it equally well;
// the truth predicate is therefore caption consistency, not exact identity.
template <typename S>
double caption_to_image_recall(const EncoderBundle<S>& bundle,
                               const std::vector<CaptionedImage>& held_out) {
    if (held_out.empty()) throw ContractViolation("validation set is empty");
    EmbeddingIndex<S> index(bundle.cfg.embed_dim);
    const std::size_t B = 256;
    for (std::size_t off = 0; off < held_out.size(); off += B) {
        const std::size_t hi = std::min(off + B, held_out.size());
        std::vector<std::vector<double>> batch;
        batch.reserve(hi - off);
        for (std::size_t i = off; i < hi; ++i) batch.push_back(held_out[i].features);
        index.add_rows(bundle.encode_image(batch));
    }

    std::size_t hits = 0;
    for (std::size_t off = 0; off < held_out.size(); off += B) {
        const std::size_t hi = std::min(off + B, held_out.size());
        std::vector<TokenSequence> seqs;
        seqs.reserve(hi - off);
        for (std::size_t i = off; i < hi; ++i) seqs.push_back(held_out[i].caption);
        auto rows = detail::rows_of(bundle.encode_text(seqs));
        for (std::size_t i = off; i < hi; ++i) {
            auto top = index.topk(rows[i - off], 1);
            const auto& cand = held_out[static_cast<std::size_t>(top.front().id)];
            if (caption_consistent(held_out[i], cand.desc)) ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(held_out.size());
}

struct ReconRecall {
    double r1 = 0.0;
    double r5 = 0.0;
};

// Can the pseudo token alone pull its own image back out of the pool?  The
// query is the training prompt with the mapped token spliced in; the truth
// predicate is identity.
template <typename S>
ReconRecall reconstruction_recall(const EncoderBundle<S>& bundle, const MapperNet<S>& mapper,
                                  const std::vector<std::vector<double>>& images) {
    if (images.empty()) throw ContractViolation("reconstruction set is empty");
    EmbeddingIndex<S> index(bundle.cfg.embed_dim);
    const std::size_t B = 256;
    for (std::size_t off = 0; off < images.size(); off += B) {
        const std::size_t hi = std::min(off + B, images.size());
        std::vector<std::vector<double>> batch(images.begin() + static_cast<std::ptrdiff_t>(off),
                                               images.begin() + static_cast<std::ptrdiff_t>(hi));
        index.add_rows(bundle.encode_image(batch));
    }

    const TokenSequence prompt = training_prompt(bundle.vocab);
    std::size_t hit1 = 0, hit5 = 0;
    for (std::size_t off = 0; off < images.size(); off += B) {
        const std::size_t hi = std::min(off + B, images.size());
        std::vector<std::vector<double>> batch(images.begin() + static_cast<std::ptrdiff_t>(off),
                                               images.begin() + static_cast<std::ptrdiff_t>(hi));
        auto raw = bundle.image_features_raw(batch);
        auto pseudo = mapper.forward(raw);
        std::vector<TokenSequence> prompts(hi - off, prompt);
        auto rows = detail::rows_of(bundle.encode_text(prompts, pseudo));
        for (std::size_t i = off; i < hi; ++i) {
            auto top = index.topk(rows[i - off], 5);
            if (static_cast<std::size_t>(top.front().id) == i) ++hit1;
            for (const auto& hit : top)
                if (static_cast<std::size_t>(hit.id) == i) {
                    ++hit5;
                    break;
                }
        }
    }
    const double n = static_cast<double>(images.size());
    return {static_cast<double>(hit1) / n, static_cast<double>(hit5) / n};
}

// ---------------------------------------------------------------------------
// Stage commands
// ---------------------------------------------------------------------------

inline ordered_json cmd_gen_world(const RunConfig& c, std::ostream* progress = nullptr) {
    validate_config(c);
    detail::StageTimer timer;
    std::filesystem::create_directories(c.out_dir);

    const World world(world_config(c));
    const Vocabulary vocab;

    std::vector<ordered_json> lines;
    {
        ordered_json head;
        head["artifact"] = "world";
        head["config_hash"] = hex16(world_hash(c));
        head["world_dim"] = world.config().world_dim();
        lines.push_back(std::move(head));
    }
    auto add_realm = [&](const std::string& name, std::size_t count, std::uint64_t hash) {
        ordered_json line;
        line["realm"] = name;
        line["count"] = count;
        line["hash"] = hex16(hash);
        if (progress) *progress << "realm " << name << ": " << count << " items\n";
        lines.push_back(std::move(line));
    };

    auto pre = make_captioned_set(world, vocab, c.data.pretrain_pairs, realm::pretrain);
    add_realm("pretrain", pre.size(), detail::hash_captioned(pre));
    auto val = make_captioned_set(world, vocab, c.data.val_pairs, realm::validation);
    add_realm("validation", val.size(), detail::hash_captioned(val));
    auto map_set =
        make_labeled_set(world, c.data.mapper_images, realm::mapper, c.data.mapper_masked_prob);
    add_realm("mapper", map_set.size(), detail::hash_labeled(map_set));
    auto recon = make_labeled_set(world, c.data.recon_images, realm::reconstruction);
    add_realm("reconstruction", recon.size(), detail::hash_labeled(recon));
    for (char kind : {'a', 'b', 'c'}) {
        auto task = detail::build_task(world, vocab, c, kind);
        ordered_json line;
        line["realm"] = detail::realm_name(kind);
        line["count"] = task.queries.size();
        line["pool"] = task.pool.size();
        line["hash"] = hex16(detail::hash_task(task));
        if (progress)
            *progress << "realm " << detail::realm_name(kind) << ": " << task.queries.size()
                      << " queries over " << task.pool.size() << " candidates\n";
        lines.push_back(std::move(line));
    }

    const std::string path = artifact_path(c, artifact::world);
    {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw ContractViolation("cannot write " + path);
        for (const auto& line : lines) out << line.dump() << '\n';
    }
    update_timing(c, "gen_world_sec", timer.seconds());

    ordered_json summary;
    summary["artifact"] = path;
    summary["realms"] = ordered_json::array();
    for (std::size_t i = 1; i < lines.size(); ++i) summary["realms"].push_back(lines[i]);
    return summary;
}

inline ordered_json cmd_pretrain(const RunConfig& c, std::ostream* progress = nullptr) {
    validate_config(c);
    detail::StageTimer timer;

    const std::string world_path = artifact_path(c, artifact::world);
    auto manifest = read_manifest(world_path, "gen-world");
    check_world_manifest(manifest, c, world_path);

    const World world(world_config(c));
    const Vocabulary vocab;
    auto train_set = make_captioned_set(world, vocab, c.data.pretrain_pairs, realm::pretrain);
    auto val_set = make_captioned_set(world, vocab, c.data.val_pairs, realm::validation);
    verify_realm(manifest, "pretrain", detail::hash_captioned(train_set), world_path);
    verify_realm(manifest, "validation", detail::hash_captioned(val_set), world_path);

    auto bundle = EncoderBundle<PipelineScalar>::initialized(encoder_config(c), c.seed);
    bundle.params.get("log_tau").mutable_value()[0] =
        static_cast<PipelineScalar>(std::log(c.tau_init));

    std::size_t epoch_no = 0;
    TrainLog log = train_clip<PipelineScalar>(
        bundle, to_pair_dataset(train_set), pretrain_config(c),
        [&](const EncoderBundle<PipelineScalar>& b) {
            const double r1 = caption_to_image_recall(b, val_set);
            if (progress)
                *progress << "epoch " << epoch_no << ": val text-to-image R@1 " << r1 << "\n";
            ++epoch_no;
            return r1;
        });

    {
        std::ofstream out(artifact_path(c, artifact::pretrain_log), std::ios::trunc);
        ordered_json head;
        head["artifact"] = "pretrain_log";
        head["config_hash"] = hex16(pretrain_hash(c));
        out << head.dump() << '\n';
        for (const auto& e : log.epochs) {
            ordered_json line;
            line["epoch"] = e.epoch;
            line["train_loss"] = e.train_loss;
            line["val_r1"] = e.val_recall_at_1;
            out << line.dump() << '\n';
        }
    }
    save_params_checked(bundle.params, artifact_path(c, artifact::encoders), pretrain_hash(c));
    update_timing(c, "pretrain_sec", timer.seconds());

    ordered_json summary;
    summary["artifact"] = artifact_path(c, artifact::encoders);
    summary["epochs"] = log.epochs.size();
    summary["final_train_loss"] = log.final_train_loss;
    summary["final_val_r1"] = log.final_val_recall_at_1;
    return summary;
}

inline ordered_json cmd_train_mapper(const RunConfig& c, std::ostream* progress = nullptr) {
    validate_config(c);
    detail::StageTimer timer;

    const std::string world_path = artifact_path(c, artifact::world);
    auto manifest = read_manifest(world_path, "gen-world");
    check_world_manifest(manifest, c, world_path);

    auto bundle = EncoderBundle<PipelineScalar>::initialized(encoder_config(c), c.seed);
    load_params_checked(bundle.params, artifact_path(c, artifact::encoders), pretrain_hash(c),
                        "pretrain");

    const World world(world_config(c));
    auto map_set =
        make_labeled_set(world, c.data.mapper_images, realm::mapper, c.data.mapper_masked_prob);
    verify_realm(manifest, "mapper", detail::hash_labeled(map_set), world_path);

    auto mapper = MapperNet<PipelineScalar>::initialized(c.encoder.embed_dim, c.mapper.hidden,
                                                         c.seed, c.mapper.linear_only);
    TrainLog log = train_mapper<PipelineScalar>(mapper, bundle, detail::features_of(map_set),
                                                mapper_train_config(c), {});
    if (progress)
        *progress << "mapper trained for " << log.epochs.size() << " epochs, final loss "
                  << log.final_train_loss << "\n";

    {
        std::ofstream out(artifact_path(c, artifact::mapper_log), std::ios::trunc);
        ordered_json head;
        head["artifact"] = "mapper_log";
        head["config_hash"] = hex16(mapper_hash(c));
        out << head.dump() << '\n';
        for (const auto& e : log.epochs) {
            ordered_json line;
            line["epoch"] = e.epoch;
            line["train_loss"] = e.train_loss;
            out << line.dump() << '\n';
        }
    }
    save_params_checked(mapper.params, artifact_path(c, artifact::mapper), mapper_hash(c));
    update_timing(c, "train_mapper_sec", timer.seconds());

    ordered_json summary;
    summary["artifact"] = artifact_path(c, artifact::mapper);
    summary["epochs"] = log.epochs.size();
    summary["final_train_loss"] = log.final_train_loss;
    return summary;
}

namespace detail {

// Loads the frozen towers and the trained mapper, verifying the whole chain.
template <typename S>
std::pair<EncoderBundle<S>, MapperNet<S>> load_eval_models(const RunConfig& c) {
    auto bundle = EncoderBundle<S>::initialized(encoder_config(c), c.seed);
    load_params_checked(bundle.params, artifact_path(c, artifact::encoders), pretrain_hash(c),
                        "pretrain");
    auto mapper =
        MapperNet<S>::initialized(c.encoder.embed_dim, c.mapper.hidden, c.seed,
                                  c.mapper.linear_only);
    load_params_checked(mapper.params, artifact_path(c, artifact::mapper), mapper_hash(c),
                        "train-mapper");
    return {std::move(bundle), std::move(mapper)};
}

inline ordered_json recalls_json(const MethodRecalls& r) {
    ordered_json j;
    j["r1"] = r.r1;
    j["r5"] = r.r5;
    j["r10"] = r.r10;
    return j;
}

} // namespace detail

inline ordered_json cmd_eval(const RunConfig& c, std::ostream* progress = nullptr) {
    validate_config(c);
    detail::StageTimer timer;

    const std::string world_path = artifact_path(c, artifact::world);
    auto manifest = read_manifest(world_path, "gen-world");
    check_world_manifest(manifest, c, world_path);
    auto [bundle, mapper] = detail::load_eval_models<PipelineScalar>(c);

    const World world(world_config(c));
    const Vocabulary vocab;

    ordered_json report;
    report["artifact"] = "report";
    report["config_hash"] = hex16(mapper_hash(c));
    report["seed"] = c.seed;

    auto recon_set = make_labeled_set(world, c.data.recon_images, realm::reconstruction);
    verify_realm(manifest, "reconstruction", detail::hash_labeled(recon_set), world_path);
    const ReconRecall recon =
        reconstruction_recall(bundle, mapper, detail::features_of(recon_set));
    {
        ordered_json r;
        r["r1"] = recon.r1;
        r["r5"] = recon.r5;
        report["reconstruction"] = std::move(r);
        if (progress)
            *progress << "reconstruction: R@1 " << recon.r1 << ", R@5 " << recon.r5 << "\n";
    }

    ordered_json tasks = ordered_json::object();
    for (char kind : c.eval.tasks) {
        CirTask task = detail::build_task(world, vocab, c, kind);
        verify_realm(manifest, detail::realm_name(kind), detail::hash_task(task), world_path);
        auto ctx = build_task_context(bundle, mapper, task, c.eval.pattern);

        std::vector<std::vector<PipelineScalar>> mixed(ctx.t.size());
        for (std::size_t i = 0; i < mixed.size(); ++i)
            mixed[i] = mix_query(ctx.t[i], ctx.v[i], c.eval.average_w);

        ordered_json entry;
        entry["name"] = task.name;
        entry["queries"] = task.queries.size();
        entry["pool"] = task.pool.size();
        ordered_json methods;
        methods["pic2word"] = detail::recalls_json(method_recalls(task, ctx.index, ctx.p));
        methods["image_only"] = detail::recalls_json(method_recalls(task, ctx.index, ctx.v));
        methods["text_only"] = detail::recalls_json(method_recalls(task, ctx.index, ctx.t));
        ordered_json avg = detail::recalls_json(method_recalls(task, ctx.index, mixed));
        avg["w"] = c.eval.average_w;
        methods["average"] = std::move(avg);
        entry["methods"] = std::move(methods);
        if (progress)
            *progress << "task " << kind << " (" << task.name << "): pic2word R@5 "
                      << entry["methods"]["pic2word"]["r5"].get<double>() << "\n";
        tasks[std::string(1, kind)] = std::move(entry);
    }
    report["tasks"] = std::move(tasks);
    report["timings_file"] = artifact::timings;

    {
        std::ofstream out(artifact_path(c, artifact::report), std::ios::trunc);
        if (!out) throw ContractViolation("cannot write " + artifact_path(c, artifact::report));
        out << report.dump(2) << '\n';
    }
    update_timing(c, "eval_sec", timer.seconds());
    return report;
}

inline ordered_json cmd_sweep(const RunConfig& c, std::ostream* progress = nullptr) {
    validate_config(c);
    detail::StageTimer timer;

    const std::string world_path = artifact_path(c, artifact::world);
    auto manifest = read_manifest(world_path, "gen-world");
    check_world_manifest(manifest, c, world_path);
    auto [bundle, mapper] = detail::load_eval_models<PipelineScalar>(c);

    const World world(world_config(c));
    const Vocabulary vocab;

    const auto n = static_cast<std::size_t>(std::llround(1.0 / c.eval.sweep_step));
    std::vector<double> grid(n + 1);
    for (std::size_t i = 0; i <= n; ++i)
        grid[i] = static_cast<double>(i) / static_cast<double>(n);

    ordered_json out_doc;
    out_doc["artifact"] = "sweep";
    out_doc["config_hash"] = hex16(mapper_hash(c));
    out_doc["seed"] = c.seed;
    ordered_json tasks = ordered_json::object();
    for (char kind : c.eval.tasks) {
        CirTask task = detail::build_task(world, vocab, c, kind);
        verify_realm(manifest, detail::realm_name(kind), detail::hash_task(task), world_path);
        auto ctx = build_task_context(bundle, mapper, task, c.eval.pattern);
        ordered_json rows = ordered_json::array();
        for (const auto& pt : weight_sweep(task, ctx, grid)) {
            ordered_json row;
            row["w"] = pt.w;
            row["r1"] = pt.r1;
            row["r5"] = pt.r5;
            row["r10"] = pt.r10;
            rows.push_back(std::move(row));
        }
        if (progress) *progress << "task " << kind << ": " << rows.size() << " sweep rows\n";
        tasks[std::string(1, kind)] = std::move(rows);
    }
    out_doc["tasks"] = std::move(tasks);

    {
        std::ofstream out(artifact_path(c, artifact::sweep), std::ios::trunc);
        if (!out) throw ContractViolation("cannot write " + artifact_path(c, artifact::sweep));
        out << out_doc.dump(2) << '\n';
    }
    update_timing(c, "sweep_sec", timer.seconds());
    return out_doc;
}

} // namespace p2w
