// Command-line driver for the p2w pipeline.  Each subcommand maps onto one
// stage; flags override keys from the JSON config file.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "p2w/pipeline.hpp"

namespace {

// Accepts "a,b,c", "a, b", or plain "abc"; validation happens downstream.
std::string strip_task_list(const std::string& raw) {
    std::string out;
    for (char ch : raw)
        if (ch != ',' && ch != ' ') out.push_back(ch);
    return out;
}

struct CommonFlags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<std::string> pattern;
    std::optional<std::string> tasks;
};

void attach_common(CLI::App* cmd, CommonFlags& f, bool eval_flags) {
    cmd->add_option("--config", f.config_path, "JSON run configuration")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--seed", f.seed, "override the run seed");
    cmd->add_option("--out", f.out_dir, "override the output directory");
    if (eval_flags) {
        cmd->add_option("--template", f.pattern,
                        "prompt template override, e.g. \"a {domain} of {pseudo}\"");
        cmd->add_option("--tasks", f.tasks, "task selection, e.g. a,b,c");
    }
}

p2w::RunConfig resolve_config(const CommonFlags& f) {
    p2w::RunConfig cfg = p2w::load_run_config(f.config_path);
    if (f.seed) cfg.seed = *f.seed;
    if (f.out_dir) cfg.out_dir = *f.out_dir;
    if (f.pattern) cfg.eval.pattern = *f.pattern;
    if (f.tasks) cfg.eval.tasks = strip_task_list(*f.tasks);
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"zero-shot composed image retrieval with pseudo-word tokens, desk scale"};
    app.require_subcommand(1);

    CommonFlags gen_f, pre_f, map_f, eval_f, sweep_f;
    CLI::App* gen = app.add_subcommand("gen-world", "generate datasets and the world manifest");
    attach_common(gen, gen_f, false);
    CLI::App* pre = app.add_subcommand("pretrain", "contrastively pretrain the two towers");
    attach_common(pre, pre_f, false);
    CLI::App* map =
        app.add_subcommand("train-mapper", "train the pseudo-token mapper against frozen towers");
    attach_common(map, map_f, false);
    CLI::App* eval =
        app.add_subcommand("eval", "evaluate all retrieval methods on the selected tasks");
    attach_common(eval, eval_f, true);
    CLI::App* sweep =
        app.add_subcommand("sweep", "recall across the image/text interpolation weight grid");
    attach_common(sweep, sweep_f, true);

    CLI11_PARSE(app, argc, argv);

    try {
        p2w::ordered_json summary;
        if (gen->parsed()) summary = p2w::cmd_gen_world(resolve_config(gen_f), &std::cout);
        else if (pre->parsed()) summary = p2w::cmd_pretrain(resolve_config(pre_f), &std::cout);
        else if (map->parsed()) summary = p2w::cmd_train_mapper(resolve_config(map_f), &std::cout);
        else if (eval->parsed()) summary = p2w::cmd_eval(resolve_config(eval_f), &std::cout);
        else if (sweep->parsed()) summary = p2w::cmd_sweep(resolve_config(sweep_f), &std::cout);
        std::cout << summary.dump(2) << std::endl;
        return 0;
    } catch (const p2w::Error& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << std::endl;
        return 2;
    }
}
