#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "unigrec/experiment.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  bool force = false;
  std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "experiment config JSON")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_flag("--force", args.force, "rerun even when artifacts are up to date");
  cmd->add_option("--seed", args.seed, "override the config seed");
}

unigrec::ExperimentConfig load_config(const CommonArgs& args) {
  auto config = unigrec::ExperimentConfig::load(args.config_path);
  if (args.seed >= 0) config.seed = static_cast<std::uint64_t>(args.seed);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unified generative recommender with differentiable identifiers"};
  app.require_subcommand(1);

  CommonArgs prepare_args, teacher_args, pretrain_args, joint_args, eval_args,
      analyze_args, ablate_args;
  std::vector<std::string> rungs;

  auto* prepare = app.add_subcommand("prepare", "build the dataset and embeddings");
  add_common(prepare, prepare_args);
  auto* teacher = app.add_subcommand("train-teacher",
                                     "train the collaborative teacher model");
  add_common(teacher, teacher_args);
  auto* pretrain = app.add_subcommand("pretrain", "stage-1 tokenizer pretraining");
  add_common(pretrain, pretrain_args);
  auto* joint = app.add_subcommand("joint", "stage-2 recommender training");
  add_common(joint, joint_args);
  auto* evaluate = app.add_subcommand("eval", "test-split ranking metrics");
  add_common(evaluate, eval_args);
  auto* analyze = app.add_subcommand("analyze", "identifier and codebook diagnostics");
  add_common(analyze, analyze_args);
  auto* ablate = app.add_subcommand("ablate", "run the model ladder end to end");
  add_common(ablate, ablate_args);
  ablate->add_option("--rungs", rungs, "subset of M0..M6 (default: all)")->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    if (prepare->parsed()) return unigrec::cmd_prepare(load_config(prepare_args),
                                                       prepare_args.force);
    if (teacher->parsed())
      return unigrec::cmd_train_teacher(load_config(teacher_args), teacher_args.force);
    if (pretrain->parsed())
      return unigrec::cmd_pretrain(load_config(pretrain_args), pretrain_args.force);
    if (joint->parsed()) return unigrec::cmd_joint(load_config(joint_args),
                                                   joint_args.force);
    if (evaluate->parsed()) return unigrec::cmd_eval(load_config(eval_args),
                                                     eval_args.force);
    if (analyze->parsed())
      return unigrec::cmd_analyze(load_config(analyze_args), analyze_args.force);
    if (ablate->parsed())
      return unigrec::cmd_ablate(load_config(ablate_args), rungs, ablate_args.force);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
