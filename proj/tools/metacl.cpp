// metacl: run the meta-curriculum pipeline one stage at a time.

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mcl/pipeline.hpp"

namespace fs = std::filesystem;
using namespace mcl;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> support_tokens, query_tokens;
  std::optional<int> tasks, meta_steps, epochs, beam;
  std::optional<double> inner_lr, outer_lr;
  bool flip_sign = false;
};

void add_common(CLI::App* cmd, Overrides& o, std::string& run_dir, bool& force) {
  cmd->add_option("--config", o.config, "JSON config; defaults to <run-dir>/config.json if present");
  cmd->add_option("--run-dir", run_dir, "run directory")->required();
  cmd->add_option("--seed", o.seed, "global seed");
  cmd->add_flag("--flip-sign", o.flip_sign, "score divergence as H_general - H_domain");
  cmd->add_option("--support-tokens", o.support_tokens, "support budget in source tokens");
  cmd->add_option("--query-tokens", o.query_tokens, "query budget in source tokens");
  cmd->add_option("--tasks", o.tasks, "tasks per meta step");
  cmd->add_option("--meta-steps", o.meta_steps, "meta-training steps");
  cmd->add_option("--inner-lr", o.inner_lr, "inner SGD learning rate");
  cmd->add_option("--outer-lr", o.outer_lr, "outer Adam learning rate");
  cmd->add_option("--epochs", o.epochs, "fine-tuning epochs");
  cmd->add_option("--beam", o.beam, "beam width");
  cmd->add_flag("--force", force, "re-run stages that are already done");
}

pipeline::RunConfig resolve(const Overrides& o, const fs::path& run_dir) {
  pipeline::RunConfig c;
  if (!o.config.empty()) {
    c = pipeline::load_config(o.config);
  } else if (fs::exists(run_dir / "config.json")) {
    c = pipeline::load_config(run_dir / "config.json");
  }
  if (o.seed) c.seed = *o.seed;
  if (o.flip_sign) c.flip_sign = true;
  if (o.support_tokens) c.schedule.support_tokens = *o.support_tokens;
  if (o.query_tokens) c.schedule.query_tokens = *o.query_tokens;
  if (o.tasks) c.schedule.tasks_per_step = *o.tasks;
  if (o.meta_steps) c.schedule.meta_steps = *o.meta_steps;
  if (o.inner_lr) c.meta.inner_lr = *o.inner_lr;
  if (o.outer_lr) c.meta.outer_lr = *o.outer_lr;
  if (o.epochs) c.finetune.epochs = *o.epochs;
  if (o.beam) c.beam = *o.beam;
  c.validate();
  return c;
}

void print_line(const std::string& msg) {
  std::cerr << msg << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-curriculum domain adaptation pipeline"};
  app.require_subcommand(1);

  Overrides o;
  std::string run_dir;
  bool force = false;
  std::string sampler = "curriculum";
  std::vector<std::string> system_names;

  struct Stage {
    const char* name;
    const char* help;
  };
  const std::vector<Stage> stages{
      {"gen", "build corpora, splits and vocabulary"},
      {"pretrain", "train the vanilla translator on general data"},
      {"train-lm", "train the general and per-domain language models"},
      {"score", "score domain sentences by divergence"},
      {"meta-train", "meta-train from the vanilla model"},
      {"finetune", "fine-tune each system on every meta-test support set"},
      {"evaluate", "decode the query sets before and after fine-tuning"},
      {"report", "write report.tsv and report.md"},
      {"run", "run every stage in order"},
  };
  std::map<std::string, CLI::App*> cmds;
  for (const auto& s : stages) {
    auto* cmd = app.add_subcommand(s.name, s.help);
    add_common(cmd, o, run_dir, force);
    cmds[s.name] = cmd;
  }
  cmds["meta-train"]
      ->add_option("--sampler", sampler, "task sampler")
      ->check(CLI::IsMember({"curriculum", "uniform"}));
  for (const char* name : {"finetune", "evaluate"}) {
    cmds[name]
        ->add_option("--system", system_names, "systems to process (default: all)")
        ->check(CLI::IsMember(pipeline::systems()));
  }

  auto* agg = app.add_subcommand("aggregate", "average reports over several run directories");
  std::vector<std::string> runs;
  std::string out_dir;
  agg->add_option("runs", runs, "run directories")->required();
  agg->add_option("--out", out_dir, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (agg->parsed()) {
      std::vector<fs::path> dirs(runs.begin(), runs.end());
      fs::create_directories(out_dir);
      const auto table = pipeline::aggregate(dirs, out_dir);
      std::cout << table.to_markdown();
      return 0;
    }
    const auto config = resolve(o, run_dir);
    pipeline::RunDir dir(run_dir, config);
    pipeline::StageOptions opt{force, print_line};
    if (system_names.empty()) system_names = pipeline::systems();

    if (cmds["gen"]->parsed()) pipeline::stage_gen(config, dir, opt);
    if (cmds["pretrain"]->parsed()) pipeline::stage_pretrain(config, dir, opt);
    if (cmds["train-lm"]->parsed()) pipeline::stage_train_lm(config, dir, opt);
    if (cmds["score"]->parsed()) pipeline::stage_score(config, dir, opt);
    if (cmds["meta-train"]->parsed()) pipeline::stage_meta_train(config, dir, sampler, opt);
    if (cmds["finetune"]->parsed()) {
      for (const auto& s : system_names) pipeline::stage_finetune(config, dir, s, opt);
    }
    if (cmds["evaluate"]->parsed()) {
      for (const auto& s : system_names) pipeline::stage_evaluate(config, dir, s, opt);
    }
    if (cmds["report"]->parsed()) {
      pipeline::stage_report(config, dir, opt);
      std::cout << pipeline::read_text(dir.path("report.md"));
    }
    if (cmds["run"]->parsed()) {
      pipeline::run_all(config, dir, opt);
      std::cout << pipeline::read_text(dir.path("report.md"));
    }
  } catch (const std::exception& e) {
    std::cerr << "metacl: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
