#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "ar/config.hpp"
#include "ar/errors.hpp"
#include "ar/harness.hpp"
#include "ar/model.hpp"

namespace {

struct ConfigArgs {
  std::string config_file;
  std::vector<std::pair<std::string, std::string>> overrides;  // command-line order
};

// Every RunConfig key doubles as a long flag; flags win over the config
// file.
void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--config", args.config_file, "config file (key = value lines)");
  for (const auto& field : ar::config_fields()) {
    std::string name = field.name;
    cmd->add_option_function<std::string>(
        "--" + name, [&args, name](const std::string& v) { args.overrides.emplace_back(name, v); },
        "override " + name);
  }
}

ar::RunConfig build_config(const ConfigArgs& args) {
  ar::RunConfig config;
  if (!args.config_file.empty()) config = ar::load_config_file(args.config_file);
  for (const auto& [key, value] : args.overrides) ar::apply_config_override(config, key, value);
  return config;
}

void print_count(const ar::ModelConfig& cfg, const std::string& label) {
  auto c = ar::count_parameters(cfg);
  std::cout << label << ": total " << c.total << "\n"
            << "  embedding       " << c.embedding << "\n"
            << "  layer block     " << c.layer_block << " x " << c.physical_layers << " = "
            << c.layer_total << "\n"
            << "  final norm      " << c.final_norm << "\n"
            << "  head            " << c.head << "\n"
            << "  persona memory  " << c.persona_memory << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"persona-aware dialogue generation with attention routing"};
  app.require_subcommand(1);

  ConfigArgs train_args, eval_args, ablate_args, gen_args, lr_args, count_args;
  std::string resume_path, ckpt_path, data_path, sessions_path, out_path, toggle = "all";
  bool count_variants = false;

  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  add_config_options(train, train_args);
  train->add_option("--resume", resume_path, "checkpoint to continue from");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a session file");
  add_config_options(eval, eval_args);
  eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval->add_option("--data", data_path, "session file to evaluate")->required();

  auto* ablate = app.add_subcommand("ablate", "train/evaluate with improvements disabled one at a time");
  add_config_options(ablate, ablate_args);
  ablate->add_option("--toggle", toggle, "rezero|albert|factor_ff|memn2n|bart_mlm|all");

  auto* generate = app.add_subcommand("generate", "sample one response per session");
  add_config_options(generate, gen_args);
  generate->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  generate->add_option("--sessions", sessions_path, "session file")->required();
  generate->add_option("--out", out_path, "output file (one response per line)")->required();

  auto* lrfind = app.add_subcommand("lr-find", "exponential learning-rate range test");
  add_config_options(lrfind, lr_args);

  auto* count = app.add_subcommand("count-params", "analytic parameter counts");
  add_config_options(count, count_args);
  count->add_flag("--variants", count_variants, "also print each single-toggle ablation");

  try {
    app.parse(argc, argv);

    if (train->parsed()) {
      auto outcome = ar::run_train(build_config(train_args), std::cout, resume_path);
      std::cout << "final step " << outcome.steps;
      if (!outcome.losses.empty()) std::cout << ", last loss " << outcome.losses.back();
      std::cout << "\n";
    } else if (eval->parsed()) {
      bool explicit_config = !eval_args.config_file.empty() || !eval_args.overrides.empty();
      ar::RunConfig expected = build_config(eval_args);
      ar::run_eval(ckpt_path, data_path, std::cout, explicit_config ? &expected : nullptr);
    } else if (ablate->parsed()) {
      ar::run_ablation(build_config(ablate_args), toggle, std::cout);
    } else if (generate->parsed()) {
      ar::run_generate(ckpt_path, sessions_path, out_path, std::cout);
    } else if (lrfind->parsed()) {
      ar::run_lr_find(build_config(lr_args), std::cout);
    } else if (count->parsed()) {
      auto config = build_config(count_args);
      print_count(config.model, "full");
      if (count_variants) {
        auto variant = [&](const std::string& name) {
          auto m = config.model;
          if (name == "rezero") m.use_rezero = false;
          if (name == "albert") m.use_albert = false;
          if (name == "factor_ff") m.use_factor_ff = false;
          if (name == "memn2n") m.use_memn2n = false;
          if (name == "bart_mlm") m.use_bart_mlm = false;
          return m;
        };
        for (const auto& name : ar::ablation_toggles()) print_count(variant(name), "minus_" + name);
      }
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const ar::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const ar::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
