#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <string>

#include "bicat/pipeline.hpp"

namespace {

struct Overrides {
    std::string config_path;
    std::string out_dir;
    std::string strategy;
    std::string checkpoint;
    long long seed = -1;
    bool rt = false;
};

bicat::ExperimentConfig load_config(const Overrides& ov) {
    std::ifstream in(ov.config_path);
    if (!in) throw bicat::ConfigError("cannot open config '" + ov.config_path + "'");
    bicat::ExperimentConfig cfg = bicat::ExperimentConfig::parse(in);
    if (ov.seed >= 0) cfg.seed = static_cast<std::uint64_t>(ov.seed);
    if (!ov.out_dir.empty()) cfg.out_dir = ov.out_dir;
    if (!ov.strategy.empty()) cfg.augment.strategy = bicat::augment_strategy_from(ov.strategy);
    if (ov.rt) cfg.finetune.retrain_from_scratch = true;
    return cfg;
}

void add_common(CLI::App* cmd, Overrides& ov, bool needs_config = true) {
    auto* opt = cmd->add_option("--config", ov.config_path, "experiment config file");
    if (needs_config) opt->required();
    cmd->add_option("--seed", ov.seed, "master seed override");
    cmd->add_option("--out", ov.out_dir, "output directory override");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bicat: bidirectional chronological augmentation for sequential "
                 "recommendation"};
    app.require_subcommand(1);
    Overrides ov;

    CLI::App* prepare = app.add_subcommand("prepare", "parse interactions into sequences");
    add_common(prepare, ov);

    CLI::App* pretrain =
        app.add_subcommand("pretrain", "bidirectional chronological pre-training");
    add_common(pretrain, ov);

    CLI::App* augment = app.add_subcommand("augment", "generate pseudo-prior items");
    add_common(augment, ov);
    augment->add_option("--strategy", ov.strategy,
                        "bicat|reverse_only|mask|crop|replace|add|none");

    CLI::App* finetune =
        app.add_subcommand("finetune", "self-knowledge distillation fine-tuning");
    add_common(finetune, ov);
    finetune->add_option("--strategy", ov.strategy, "strategy recorded in the config");
    finetune->add_flag("--rt", ov.rt, "retrain from scratch instead of the checkpoint");

    CLI::App* evaluate = app.add_subcommand("evaluate", "leave-one-out ranking metrics");
    add_common(evaluate, ov);
    evaluate->add_option("--checkpoint", ov.checkpoint,
                         "checkpoint to score (default: finetune.ckpt)");

    std::string oracle_corpus, oracle_out;
    CLI::App* oracle =
        app.add_subcommand("oracle", "exact forward/reverse conditional analysis");
    oracle->add_option("corpus", oracle_corpus, "symbol corpus, one sequence per line")
        ->required();
    oracle->add_option("--out", oracle_out, "write the JSON report here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*prepare) bicat::cmd_prepare(load_config(ov));
        else if (*pretrain) bicat::cmd_pretrain(load_config(ov));
        else if (*augment) bicat::cmd_augment(load_config(ov));
        else if (*finetune) bicat::cmd_finetune(load_config(ov));
        else if (*evaluate) bicat::cmd_evaluate(load_config(ov), ov.checkpoint);
        else if (*oracle) bicat::cmd_oracle(oracle_corpus, oracle_out);
        return 0;
    } catch (const bicat::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
