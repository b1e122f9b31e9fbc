// Command-line front end for the compression laboratory.
//
//   dfc <command> [flags]        commands: pretrain plain quantize prune
//                                          lottery theory sweep
//   dfc <command> --config FILE  flat key=value or JSON; flags override
//
// Every flag mirrors a config key; parsing funnels through config_set so the
// file and flag paths validate identically. Exit codes: 0 ok, 1 bad config,
// 2 runtime failure, 3 check failure.
#include <cstdio>
#include <exception>
#include <fstream>
#include <iterator>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "dfc/experiments.hpp"

namespace {

struct KeyValue {
  std::string key;
  std::string value;
};

// Registers --<flag> writing config key <key> (they differ only for the
// short spellings --out, --ts, --param, --values, --teacher).
void add_key_flag(CLI::App& app, std::vector<KeyValue>& sink,
                  const std::string& flag, const std::string& key,
                  const std::string& help) {
  app.add_option_function<std::string>(
      "--" + flag,
      [&sink, key](const std::string& v) { sink.push_back({key, v}); }, help);
}

std::string read_file_or_throw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw dfc::ConfigError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale laboratory for data-free network compression"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  app.add_option("--config", config_path,
                 "config file (key=value lines or a flat JSON object)");

  std::vector<KeyValue> flags;
  add_key_flag(app, flags, "seed", "seed", "master RNG seed");
  add_key_flag(app, flags, "rounds", "rounds", "adversarial rounds");
  add_key_flag(app, flags, "warmup", "warmup", "gamma/lambda warm-up rounds");
  add_key_flag(app, flags, "batch", "batch", "synthetic batch size");
  add_key_flag(app, flags, "zdim", "zdim", "generator latent dimension");
  add_key_flag(app, flags, "generator_steps", "generator_steps",
               "generator ascent steps per round");
  add_key_flag(app, flags, "student_steps", "student_steps",
               "student descent steps per round");
  add_key_flag(app, flags, "lr_student", "lr_student", "student Adam rate");
  add_key_flag(app, flags, "lr_generator", "lr_generator",
               "generator Adam rate");
  add_key_flag(app, flags, "divergence", "divergence",
               "student objective: kl or js");
  add_key_flag(app, flags, "beta", "beta", "attention-transfer weight");
  add_key_flag(app, flags, "gamma", "gamma", "scale-sparsity weight target");
  add_key_flag(app, flags, "lambda", "lambda", "ridge weight target");
  add_key_flag(app, flags, "delta", "delta", "binary weight scale");
  add_key_flag(app, flags, "ts", "ts", "scale pruning threshold");
  add_key_flag(app, flags, "timing", "timing", "record wall-clock per round");
  add_key_flag(app, flags, "student_base", "student_base",
               "student base channel count");
  add_key_flag(app, flags, "teacher_base", "teacher_base",
               "teacher base channel count");
  add_key_flag(app, flags, "pretrain_target", "pretrain_target",
               "teacher held-out accuracy target");
  add_key_flag(app, flags, "lottery_setting", "lottery_setting",
               "ticket search stage: supervised or data_free");
  add_key_flag(app, flags, "lottery_p", "lottery_p",
               "per-round prune fraction");
  add_key_flag(app, flags, "lottery_rounds", "lottery_rounds",
               "iterative pruning rounds");
  add_key_flag(app, flags, "lottery_iterations", "lottery_iterations",
               "training iterations per stage");
  add_key_flag(app, flags, "lottery_seeds", "lottery_seeds",
               "seeds for the paired ticket-vs-random comparison");
  add_key_flag(app, flags, "suite", "suite",
               "theory suite: lemma1 theorem1 theorem2 contraction all");
  add_key_flag(app, flags, "param", "sweep_param",
               "sweep parameter: delta lambda gamma ts divergence");
  add_key_flag(app, flags, "values", "sweep_values",
               "comma-separated sweep values");
  add_key_flag(app, flags, "jobs", "jobs", "max concurrent sweep arms");
  add_key_flag(app, flags, "teacher", "teacher_ckpt",
               "teacher checkpoint path");
  add_key_flag(app, flags, "out", "out_dir",
               "output directory (default $DFC_OUT_ROOT/<command>-seed<N>)");

  static const char* kCommands[] = {"pretrain", "plain", "quantize", "prune",
                                    "lottery",  "theory", "sweep"};
  static const char* kHelp[] = {
      "train and checkpoint the synthetic-data teacher",
      "full-precision data-free distillation",
      "binary-weight data-free distillation",
      "scale-penalized distillation plus threshold compaction",
      "iterative-magnitude ticket search and paired evaluation",
      "saddle-problem convergence suites",
      "multi-arm parameter sweep"};
  for (std::size_t i = 0; i < std::size(kCommands); ++i)
    app.add_subcommand(kCommands[i], kHelp[i]);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exits 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the parser's message to stderr
    return dfc::kStatusConfig;
  }

  try {
    dfc::ExperimentConfig cfg;
    if (!config_path.empty()) cfg = dfc::parse_config(read_file_or_throw(config_path));
    cfg.command = app.get_subcommands().front()->get_name();
    for (const KeyValue& kv : flags) dfc::config_set(cfg, kv.key, kv.value);
    return dfc::run_experiment(cfg);
  } catch (const dfc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return dfc::kStatusConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return dfc::kStatusRuntime;
  }
}
