// Operator surface: data generation, training, evaluation, decoding, and the
// retrieve-then-generate image pipeline, driven by a key=value config file
// plus flag overrides.

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>

#include "unimp/config.hpp"
#include "unimp/trainer.hpp"

namespace {

struct CommonArgs {
    std::string config_file;
    std::vector<std::string> sets;  // key=value overrides
    long long seed = -1;
    std::string data_dir, run_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_file, "key=value config file");
    cmd->add_option("--set", args.sets, "config override key=value (repeatable)");
    cmd->add_option("--seed", args.seed, "master seed");
    cmd->add_option("--data", args.data_dir, "dataset directory");
    cmd->add_option("--run", args.run_dir, "run/checkpoint directory");
}

unimp::RunConfig resolve_config(const CommonArgs& args, const std::map<std::string, std::string>& extra = {}) {
    std::map<std::string, std::string> overrides;
    for (const auto& kv : args.sets) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos) throw unimp::ConfigError("--set expects key=value, got '" + kv + "'");
        overrides[unimp::trim(kv.substr(0, eq))] = unimp::trim(kv.substr(eq + 1));
    }
    if (args.seed >= 0) overrides["seed"] = std::to_string(args.seed);
    if (!args.data_dir.empty()) overrides["paths.data"] = args.data_dir;
    if (!args.run_dir.empty()) overrides["paths.run"] = args.run_dir;
    for (const auto& [k, v] : extra) overrides[k] = v;
    return unimp::load_run_config(args.config_file, overrides);
}

std::vector<unimp::TaskTag> parse_tasks(const std::string& spec) {
    std::vector<unimp::TaskTag> tasks;
    if (spec == "all") {
        for (unimp::TaskTag t : unimp::kAllTasks) tasks.push_back(t);
        return tasks;
    }
    for (const auto& name : unimp::split(spec, ',')) {
        if (!unimp::trim(name).empty()) tasks.push_back(unimp::task_from_name(unimp::trim(name)));
    }
    if (tasks.empty()) throw unimp::ConfigError("no tasks requested");
    return tasks;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unified multi-modal personalization model"};
    app.require_subcommand(1);

    CommonArgs datagen_args, train_args, eval_args, gen_args;

    auto* datagen_cmd = app.add_subcommand("datagen", "generate the synthetic dataset");
    add_common(datagen_cmd, datagen_args);

    auto* train_cmd = app.add_subcommand("train", "train a model on an emitted dataset");
    add_common(train_cmd, train_args);
    bool no_vision = false, no_context = false, no_reweight = false;
    std::string fusion_mode, freeze_groups, train_mode;
    long long epochs = -1;
    double lr = -1.0;
    train_cmd->add_flag("--no-vision", no_vision, "train text-only (drops the vision path)");
    train_cmd->add_option("--fusion-mode", fusion_mode, "exclusive|all_images|early_concat|late_pool|text_only");
    train_cmd->add_flag("--no-context", no_context, "disable context reconstruction");
    train_cmd->add_flag("--no-reweight", no_reweight, "disable token-level focal re-weighting");
    train_cmd->add_option("--freeze", freeze_groups, "comma list of vision,lm_blocks,cross_attn,embeddings,output_head");
    train_cmd->add_option("--mode", train_mode, "multitask|continual|single:<task>");
    train_cmd->add_option("--epochs", epochs, "training epochs");
    train_cmd->add_option("--lr", lr, "base learning rate");

    auto* eval_cmd = app.add_subcommand("eval", "decode and score a checkpoint");
    add_common(eval_cmd, eval_args);
    std::string task_spec = "rec", split = "test", users = "seen", domain = "seen", checkpoint, report_out;
    eval_cmd->add_option("--task", task_spec, "rec,pref,expl,select,search,imgen or all");
    eval_cmd->add_option("--split", split, "val|test")->check(CLI::IsMember({"val", "test"}));
    eval_cmd->add_option("--users", users, "seen|new")->check(CLI::IsMember({"seen", "new"}));
    eval_cmd->add_option("--domain", domain, "seen|new")->check(CLI::IsMember({"seen", "new"}));
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file (default <run>/best.umpt)");
    eval_cmd->add_option("--out", report_out, "write the report JSON here");

    auto* gen_cmd = app.add_subcommand("generate", "retrieve-then-generate a product image");
    add_common(gen_cmd, gen_args);
    std::string user_id, query, gen_checkpoint, image_out = "generated.ppm";
    gen_cmd->add_option("--user", user_id, "user id")->required();
    gen_cmd->add_option("--query", query, "query text")->required();
    gen_cmd->add_option("--checkpoint", gen_checkpoint, "checkpoint file (default <run>/best.umpt)");
    gen_cmd->add_option("--out", image_out, "output PPM path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (datagen_cmd->parsed()) {
            auto cfg = resolve_config(datagen_args);
            unimp::cmd_datagen(cfg, &std::cout);
        } else if (train_cmd->parsed()) {
            std::map<std::string, std::string> extra;
            if (no_vision) extra["model.fusion"] = "text_only";
            if (!fusion_mode.empty()) extra["model.fusion"] = fusion_mode;
            if (no_context) extra["train.context"] = "false";
            if (no_reweight) extra["train.reweight"] = "false";
            if (!freeze_groups.empty()) extra["train.freeze"] = freeze_groups;
            if (!train_mode.empty()) extra["train.mode"] = train_mode;
            if (epochs >= 0) extra["train.epochs"] = std::to_string(epochs);
            if (lr >= 0) extra["train.lr"] = std::to_string(lr);
            auto cfg = resolve_config(train_args, extra);
            auto summary = unimp::cmd_train(cfg, &std::cout);
            std::cout << "best checkpoint: " << summary.best_checkpoint.string() << " (val_task_nll "
                      << summary.best_val_task_nll << ")\n";
        } else if (eval_cmd->parsed()) {
            auto cfg = resolve_config(eval_args);
            unimp::EvalOptions opt;
            opt.tasks = parse_tasks(task_spec);
            opt.split = split;
            opt.users = users;
            opt.domain = domain;
            const std::filesystem::path ck =
                checkpoint.empty() ? std::filesystem::path(cfg.run_dir) / "best.umpt" : std::filesystem::path(checkpoint);
            auto report = unimp::cmd_eval(cfg, ck, opt);
            if (!report_out.empty()) unimp::write_text_file(report_out, report.dump(2) + "\n");
            std::cout << report.dump(2) << "\n";
        } else if (gen_cmd->parsed()) {
            auto cfg = resolve_config(gen_args);
            const std::filesystem::path ck = gen_checkpoint.empty() ? std::filesystem::path(cfg.run_dir) / "best.umpt"
                                                                    : std::filesystem::path(gen_checkpoint);
            auto record = unimp::cmd_generate(cfg, ck, user_id, query, image_out);
            std::cout << record.dump(2) << "\n";
        }
    } catch (const unimp::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const unimp::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const unimp::CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
