// Command-line runner for reward-model token-space attack experiments.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rmhack/config.hpp"
#include "rmhack/errors.hpp"
#include "rmhack/experiment.hpp"
#include "rmhack/vocab.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> overrides;
  bool reveal = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config, "Experiment config (.cfg)")->required();
  cmd->add_option("--seed", flags.seed, "Override experiment.seed");
  cmd->add_option("--out", flags.out, "Override experiment.out");
  cmd->add_option("--override", flags.overrides, "section.key=value, repeatable");
  cmd->add_flag("--reveal", flags.reveal, "Print the reward model's planted parameters");
}

struct Loaded {
  rmhack::RunConfig config;
  rmhack::CommandOptions options;
};

Loaded load(const CommonFlags& flags) {
  std::ifstream in(flags.config);
  if (!in) throw rmhack::ValidationError("cannot open config file: " + flags.config);
  std::ostringstream text;
  text << in.rdbuf();
  Loaded l{rmhack::parse_config(text.str()), {text.str(), flags.reveal}};
  rmhack::resolve_paths(l.config, std::filesystem::absolute(flags.config).parent_path().string());
  if (flags.seed) rmhack::apply_override(l.config, "experiment.seed=" + std::to_string(*flags.seed));
  if (flags.out) rmhack::apply_override(l.config, "experiment.out=" + *flags.out);
  for (const auto& o : flags.overrides) rmhack::apply_override(l.config, o);
  rmhack::validate(l.config);
  return l;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token-space reward-model attack laboratory"};
  app.require_subcommand(1);

  CommonFlags train_flags, eval_flags, gold_flags, ood_flags, sweep_flags, decode_flags;
  std::string eval_ckpt, sweep_ckpt;
  std::optional<std::int64_t> sweep_interval;
  std::optional<std::string> decode_ckpt, decode_seqs;
  std::int64_t decode_samples = 2;
  std::string map_arg;
  std::optional<std::int64_t> map_target_size;

  auto* train = app.add_subcommand("train", "Run the GRPO attack and write metrics, checkpoints and curves");
  add_common(train, train_flags);

  auto* eval = app.add_subcommand("eval", "Score a checkpoint against the gold answers");
  add_common(eval, eval_flags);
  eval->add_option("--checkpoint", eval_ckpt, "Policy checkpoint")->required();

  auto* gold = app.add_subcommand("gold", "Write the gold answers and their scores");
  add_common(gold, gold_flags);

  auto* ood = app.add_subcommand("baseline-ood", "Score uniform-random full-length sequences");
  add_common(ood, ood_flags);

  auto* sweep = app.add_subcommand("length-sweep", "Score truncated rollouts at increasing lengths");
  add_common(sweep, sweep_flags);
  sweep->add_option("--checkpoint", sweep_ckpt, "Policy checkpoint")->required();
  sweep->add_option("--interval", sweep_interval, "Truncation interval (default experiment.sweep_interval)");

  auto* dec = app.add_subcommand("decode", "Show policy-side and reward-side decodings");
  add_common(dec, decode_flags);
  auto* dec_ck = dec->add_option("--checkpoint", decode_ckpt, "Sample from this checkpoint");
  dec->add_option("--sequences", decode_seqs, "File of policy token-ID sequences, one per line")
      ->excludes(dec_ck);
  dec->add_option("--samples", decode_samples, "Number of sampled sequences")->check(CLI::PositiveNumber);

  auto* inspect = app.add_subcommand("inspect-mapping", "Print mapping statistics as key=value lines");
  inspect->add_option("--map", map_arg, "Mapping table file or kind:source_size:target_size[:seed]")
      ->required();
  inspect->add_option("--target-size", map_target_size, "Target vocabulary size for a table file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      auto l = load(train_flags);
      rmhack::cmd_train(l.config, std::cout, l.options);
    } else if (eval->parsed()) {
      auto l = load(eval_flags);
      rmhack::cmd_eval(l.config, eval_ckpt, std::cout, l.options);
    } else if (gold->parsed()) {
      auto l = load(gold_flags);
      rmhack::cmd_gold(l.config, std::cout, l.options);
    } else if (ood->parsed()) {
      auto l = load(ood_flags);
      rmhack::cmd_baseline_ood(l.config, std::cout, l.options);
    } else if (sweep->parsed()) {
      auto l = load(sweep_flags);
      rmhack::cmd_length_sweep(l.config, sweep_ckpt, sweep_interval, std::cout, l.options);
    } else if (dec->parsed()) {
      auto l = load(decode_flags);
      std::cout << rmhack::cmd_decode(l.config, {decode_ckpt, decode_seqs, decode_samples});
    } else if (inspect->parsed()) {
      const auto map = rmhack::parse_map_argument(map_arg, map_target_size);
      std::cout << "kind=" << rmhack::to_string(map.kind()) << "\n"
                << rmhack::format_mapping_stats(rmhack::mapping_report(map));
    }
  } catch (const rmhack::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
