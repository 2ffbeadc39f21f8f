#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "rmhack/config.hpp"
#include "rmhack/eval.hpp"
#include "rmhack/grpo.hpp"
#include "rmhack/policy.hpp"
#include "rmhack/rewards.hpp"
#include "rmhack/vocab.hpp"

namespace rmhack {

// Everything a command needs, resolved from a validated RunConfig.
struct Experiment {
  RunConfig config;
  std::string hash;
  VocabularyPtr policy_vocab;
  VocabularyPtr reward_vocab;
  PerturbationMap map;
  BuiltRewardModel reward;
  std::vector<std::int64_t> prompts;
  GoldAnswers gold;

  AttackEnv env() const { return {policy_vocab, *reward.model, map}; }
  EvalSetup eval_setup(std::int64_t group_size) const;
  // All-zero logits, the starting point of every attack.
  PolicyParams initial_policy() const;
};

Experiment build_experiment(const RunConfig& config);

struct RunArtifacts {
  std::filesystem::path dir;
  std::filesystem::path config_snapshot;
  std::filesystem::path metrics;
  std::vector<std::filesystem::path> checkpoints;
  std::vector<std::filesystem::path> reports;
};

struct CommandOptions {
  // Source text of the config file, copied verbatim into the run directory.
  std::optional<std::string> source_text;
  // Print the reward model's planted parameters.
  bool reveal = false;
};

RunArtifacts cmd_train(const RunConfig& config, std::ostream& log, const CommandOptions& options = {});

struct EvalOutcome {
  GroupReport report;
  RunArtifacts artifacts;
};

EvalOutcome cmd_eval(const RunConfig& config, const std::string& checkpoint, std::ostream& log,
                     const CommandOptions& options = {});
EvalOutcome cmd_baseline_ood(const RunConfig& config, std::ostream& log,
                             const CommandOptions& options = {});
RunArtifacts cmd_gold(const RunConfig& config, std::ostream& log, const CommandOptions& options = {});

struct SweepOutcome {
  LengthSweep sweep;
  RunArtifacts artifacts;
};

SweepOutcome cmd_length_sweep(const RunConfig& config, const std::string& checkpoint,
                              std::optional<std::int64_t> interval, std::ostream& log,
                              const CommandOptions& options = {});

struct DecodeSource {
  std::optional<std::string> checkpoint;
  std::optional<std::string> sequence_file;
  std::int64_t samples = 2;
};

// Policy-side and reward-side decodings, one block per sequence.
std::string cmd_decode(const RunConfig& config, const DecodeSource& source);

// Sequence file: one sequence per line, whitespace-separated policy token IDs.
std::vector<std::vector<TokenId>> load_sequence_file(const std::string& path,
                                                     std::int64_t vocab_size);

// `kind:source_size:target_size[:seed]`, or a mapping-table file path with
// the target size taken from `target_size` (default: largest entry + 1).
PerturbationMap parse_map_argument(const std::string& arg, std::optional<std::int64_t> target_size);
std::string format_mapping_stats(const MappingStats& stats);

PolicyParams load_policy_for(const Experiment& exp, const std::string& checkpoint);

}  // namespace rmhack
