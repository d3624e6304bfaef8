// Pipeline orchestration: config parsing, stage-scoped hashing, artifact
// chaining, and reproducibility of the end-to-end run at reduced scale.

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>

#include "p2w/pipeline.hpp"

using namespace p2w;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("p2w_pipe_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::string str() const { return path.string(); }
};

// Small enough to train in seconds, large enough to exercise every stage.
RunConfig tiny_config(const std::string& out_dir, std::uint64_t seed = 7) {
    RunConfig c;
    c.seed = seed;
    c.out_dir = out_dir;
    c.data.pretrain_pairs = 256;
    c.data.val_pairs = 60;
    c.data.mapper_images = 256;
    c.data.recon_images = 60;
    c.data.task_queries = 12;
    c.data.task_pool = 150;
    c.data.task_per_cell = 2;
    c.pretrain.epochs = 2;
    c.pretrain.batch_size = 64;
    c.mapper.epochs = 2;
    c.mapper.batch_size = 64;
    c.mapper.hidden = 96;
    return c;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("config serialization round-trips and rejects junk") {
    RunConfig c;
    c.seed = 123;
    c.world.n_objects = 7;
    c.data.task_pool = 999;
    c.mapper.linear_only = true;
    c.eval.tasks = "ac";
    c.eval.pattern = "a {domain} of {pseudo}";

    const ordered_json j = to_json(c);
    const RunConfig back = parse_run_config(j);
    CHECK(back == c);

    SECTION("defaults fill absent keys") {
        const RunConfig d = parse_run_config(ordered_json::object());
        CHECK(d == RunConfig{});
        CHECK(d.seed == 7);
        CHECK(d.data.pretrain_pairs == 5000);
        CHECK(d.pretrain.epochs == 30);
        CHECK(d.mapper.hidden == 512);
    }
    SECTION("unknown top-level key") {
        ordered_json bad = j;
        bad["typo"] = 1;
        CHECK_THROWS_AS(parse_run_config(bad), ContractViolation);
    }
    SECTION("unknown nested key") {
        ordered_json bad = j;
        bad["pretrain"]["learning_rate"] = 0.1;
        CHECK_THROWS_AS(parse_run_config(bad), ContractViolation);
    }
    SECTION("wrong type") {
        ordered_json bad = j;
        bad["seed"] = "seven";
        CHECK_THROWS_AS(parse_run_config(bad), ContractViolation);
    }
    SECTION("non-object root") {
        CHECK_THROWS_AS(parse_run_config(ordered_json::array()), ContractViolation);
    }
}

TEST_CASE("config validation catches bad settings") {
    TempDir tmp;
    auto expect_bad = [](RunConfig c) { CHECK_THROWS_AS(validate_config(c), ContractViolation); };

    RunConfig ok = tiny_config("unused");
    CHECK_NOTHROW(validate_config(ok));

    RunConfig c = ok;
    c.world.n_objects = 2;
    expect_bad(c);
    c = ok;
    c.world.n_domains = 99;
    expect_bad(c);
    c = ok;
    c.world.mention_prob = 1.5;
    expect_bad(c);
    c = ok;
    c.pretrain.batch_size = 1;
    expect_bad(c);
    c = ok;
    c.data.pretrain_pairs = 3; // smaller than one batch
    expect_bad(c);
    c = ok;
    c.eval.tasks = "q";
    expect_bad(c);
    c = ok;
    c.eval.tasks = "aa";
    expect_bad(c);
    c = ok;
    c.eval.sweep_step = 0.3; // does not divide 1
    expect_bad(c);
    c = ok;
    c.tau_init = -2.0;
    expect_bad(c);
}

TEST_CASE("stage hashes bind exactly the config slice each stage consumes") {
    const RunConfig base = tiny_config("a");

    SECTION("out_dir and eval options never matter") {
        RunConfig c = base;
        c.out_dir = "elsewhere";
        c.eval.tasks = "b";
        c.eval.pattern = "a {domain} of {pseudo}";
        c.eval.sweep_step = 0.25;
        CHECK(world_hash(c) == world_hash(base));
        CHECK(pretrain_hash(c) == pretrain_hash(base));
        CHECK(mapper_hash(c) == mapper_hash(base));
    }
    SECTION("seed changes every hash") {
        RunConfig c = base;
        c.seed = 8;
        CHECK(world_hash(c) != world_hash(base));
        CHECK(pretrain_hash(c) != pretrain_hash(base));
        CHECK(mapper_hash(c) != mapper_hash(base));
    }
    SECTION("world parameters change every hash") {
        RunConfig c = base;
        c.world.noise_sigma = 0.07;
        CHECK(world_hash(c) != world_hash(base));
        CHECK(pretrain_hash(c) != pretrain_hash(base));
    }
    SECTION("pretrain hyperparameters leave the world hash alone") {
        RunConfig c = base;
        c.pretrain.lr = 3e-4;
        CHECK(world_hash(c) == world_hash(base));
        CHECK(pretrain_hash(c) != pretrain_hash(base));
        CHECK(mapper_hash(c) != mapper_hash(base));
    }
    SECTION("mapper options only reach the mapper hash") {
        RunConfig c = base;
        c.mapper.linear_only = true;
        CHECK(world_hash(c) == world_hash(base));
        CHECK(pretrain_hash(c) == pretrain_hash(base));
        CHECK(mapper_hash(c) != mapper_hash(base));
    }
}

TEST_CASE("stages demand their upstream artifacts") {
    TempDir tmp;
    const RunConfig c = tiny_config(tmp.str());

    SECTION("pretrain without the world manifest") {
        CHECK_THROWS_AS(cmd_pretrain(c), StaleArtifact);
        try {
            cmd_pretrain(c);
        } catch (const StaleArtifact& e) {
            const std::string msg = e.what();
            CHECK(msg.find("world.jsonl") != std::string::npos);
            CHECK(msg.find("gen-world") != std::string::npos);
        }
    }
    SECTION("train-mapper without the encoder checkpoint") {
        cmd_gen_world(c);
        CHECK_THROWS_AS(cmd_train_mapper(c), StaleArtifact);
        try {
            cmd_train_mapper(c);
        } catch (const StaleArtifact& e) {
            CHECK(std::string(e.what()).find("encoders.p2w") != std::string::npos);
        }
    }
    SECTION("eval without the mapper checkpoint") {
        cmd_gen_world(c);
        cmd_pretrain(c);
        CHECK_THROWS_AS(cmd_eval(c), StaleArtifact);
        try {
            cmd_eval(c);
        } catch (const StaleArtifact& e) {
            CHECK(std::string(e.what()).find("mapper.p2w") != std::string::npos);
        }
    }
}

TEST_CASE("hash mismatches across stages are stale, not silently retrained") {
    TempDir tmp;
    const RunConfig c = tiny_config(tmp.str());
    cmd_gen_world(c);

    SECTION("changed world config invalidates the manifest") {
        RunConfig drifted = c;
        drifted.world.noise_sigma = 0.06;
        CHECK_THROWS_AS(cmd_pretrain(drifted), StaleArtifact);
    }
    SECTION("changed pretrain hyperparameters invalidate the encoder checkpoint") {
        cmd_pretrain(c);
        RunConfig drifted = c;
        drifted.pretrain.lr = 9e-4;
        CHECK_THROWS_AS(cmd_train_mapper(drifted), StaleArtifact);
    }
    SECTION("changed mapper options invalidate the mapper checkpoint") {
        cmd_pretrain(c);
        cmd_train_mapper(c);
        RunConfig drifted = c;
        drifted.mapper.hidden = 64;
        CHECK_THROWS_AS(cmd_eval(drifted), StaleArtifact);
        // Eval options, by contrast, reuse everything.
        RunConfig retasked = c;
        retasked.eval.tasks = "c";
        CHECK_NOTHROW(cmd_eval(retasked));
    }
    SECTION("a corrupted manifest line is reported as corruption") {
        std::ofstream out(artifact_path(c, artifact::world), std::ios::app);
        out << "{not json\n";
        out.close();
        CHECK_THROWS_AS(cmd_pretrain(c), CorruptCheckpoint);
    }
}

TEST_CASE("the reduced pipeline reruns byte-identically") {
    TempDir dir_a, dir_b;
    RunConfig ca = tiny_config(dir_a.str());
    RunConfig cb = tiny_config(dir_b.str());

    auto run_all = [](const RunConfig& c) {
        cmd_gen_world(c);
        cmd_pretrain(c);
        cmd_train_mapper(c);
        cmd_eval(c);
        cmd_sweep(c);
    };
    run_all(ca);
    run_all(cb);

    // Different out_dir, same everything else: metric artifacts match byte
    // for byte (timings.json is excluded by design; it measures wall time).
    CHECK(slurp(artifact_path(ca, artifact::world)) == slurp(artifact_path(cb, artifact::world)));
    CHECK(slurp(artifact_path(ca, artifact::encoders)) ==
          slurp(artifact_path(cb, artifact::encoders)));
    CHECK(slurp(artifact_path(ca, artifact::mapper)) ==
          slurp(artifact_path(cb, artifact::mapper)));
    CHECK(slurp(artifact_path(ca, artifact::report)) ==
          slurp(artifact_path(cb, artifact::report)));
    CHECK(slurp(artifact_path(ca, artifact::sweep)) == slurp(artifact_path(cb, artifact::sweep)));
    CHECK(slurp(artifact_path(ca, artifact::pretrain_log)) ==
          slurp(artifact_path(cb, artifact::pretrain_log)));

    // Rerunning eval in place rewrites the identical report.
    const std::string before = slurp(artifact_path(ca, artifact::report));
    cmd_eval(ca);
    CHECK(slurp(artifact_path(ca, artifact::report)) == before);
}

TEST_CASE("the report is structurally sound") {
    TempDir tmp;
    RunConfig c = tiny_config(tmp.str());
    c.eval.tasks = "ac";
    cmd_gen_world(c);
    cmd_pretrain(c);
    cmd_train_mapper(c);
    const ordered_json report = cmd_eval(c);

    CHECK(report["artifact"] == "report");
    CHECK(report["config_hash"] == hex16(mapper_hash(c)));
    CHECK(report["tasks"].size() == 2);
    CHECK(report["tasks"].contains("a"));
    CHECK(report["tasks"].contains("c"));
    CHECK_FALSE(report["tasks"].contains("b"));
    CHECK(report["reconstruction"]["r1"].get<double>() <=
          report["reconstruction"]["r5"].get<double>());

    for (const auto& [kind, entry] : report["tasks"].items()) {
        for (const char* method : {"pic2word", "image_only", "text_only", "average"}) {
            const auto& m = entry["methods"][method];
            const double r1 = m["r1"].get<double>();
            const double r5 = m["r5"].get<double>();
            const double r10 = m["r10"].get<double>();
            INFO(kind << "/" << method);
            CHECK(r1 >= 0.0);
            CHECK(r1 <= r5);
            CHECK(r5 <= r10);
            CHECK(r10 <= 1.0);
        }
    }

    SECTION("sweep endpoints reproduce the single-modality baselines") {
        const ordered_json sweep = cmd_sweep(c);
        for (const auto& [kind, rows] : sweep["tasks"].items()) {
            REQUIRE(rows.size() == 11);
            const auto& entry = report["tasks"][kind]["methods"];
            CHECK(rows.front()["w"].get<double>() == 0.0);
            CHECK(rows.back()["w"].get<double>() == 1.0);
            for (const char* k : {"r1", "r5", "r10"}) {
                CHECK(rows.front()[k].get<double>() == entry["image_only"][k].get<double>());
                CHECK(rows.back()[k].get<double>() == entry["text_only"][k].get<double>());
            }
        }
    }
}

TEST_CASE("template overrides flow through evaluation") {
    TempDir tmp;
    RunConfig c = tiny_config(tmp.str());
    c.eval.tasks = "a";
    cmd_gen_world(c);
    cmd_pretrain(c);
    cmd_train_mapper(c);

    const ordered_json plain = cmd_eval(c);

    // The default domain-task pattern, spelled out explicitly: same numbers.
    RunConfig expl = c;
    expl.eval.pattern = "a {domain} of {pseudo}";
    CHECK(cmd_eval(expl)["tasks"]["a"] == plain["tasks"]["a"]);

    // A different well-formed pattern changes the composed queries.
    RunConfig alt = c;
    alt.eval.pattern = "a photo of {pseudo} in a {domain}";
    const ordered_json shifted = cmd_eval(alt);
    CHECK(shifted["tasks"]["a"]["methods"]["pic2word"] != plain["tasks"]["a"]["methods"]["pic2word"]);
    // Baselines never see the template, so they are untouched.
    CHECK(shifted["tasks"]["a"]["methods"]["image_only"] ==
          plain["tasks"]["a"]["methods"]["image_only"]);

    // A pattern without the pseudo slot is rejected.
    RunConfig bad = c;
    bad.eval.pattern = "a {domain} of a photo";
    CHECK_THROWS_AS(cmd_eval(bad), ContractViolation);
}

TEST_CASE("config files load with overrides intact") {
    TempDir tmp;
    const std::string cfg_path = (tmp.path / "cfg.json").string();
    {
        std::ofstream out(cfg_path);
        out << R"({"seed": 11, "out_dir": "somewhere", "pretrain": {"epochs": 4}})";
    }
    const RunConfig c = load_run_config(cfg_path);
    CHECK(c.seed == 11);
    CHECK(c.out_dir == "somewhere");
    CHECK(c.pretrain.epochs == 4);
    CHECK(c.pretrain.batch_size == 128); // untouched default

    CHECK_THROWS_AS(load_run_config((tmp.path / "absent.json").string()), ContractViolation);

    const std::string broken = (tmp.path / "broken.json").string();
    {
        std::ofstream out(broken);
        out << "{ nope";
    }
    CHECK_THROWS_AS(load_run_config(broken), ContractViolation);
}
