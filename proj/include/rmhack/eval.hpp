#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rmhack/grpo.hpp"
#include "rmhack/policy.hpp"
#include "rmhack/rewards.hpp"

namespace rmhack {

struct PromptStats {
  std::int64_t prompt_index = 0;
  double min = 0.0;
  double mean = 0.0;
  double max = 0.0;
  double gold = 0.0;
  std::vector<double> rewards;
};

struct GroupReport {
  std::vector<PromptStats> prompts;
  // Means of the per-prompt statistics.
  double avg_min = 0.0;
  double avg_mean = 0.0;
  double avg_max = 0.0;
  // Pooled over every rollout of every prompt; ties do not count.
  double beat_gold_rate = 0.0;
  std::int64_t rollouts = 0;
};

// Fraction of rewards strictly above gold. Throws on an empty list.
double beat_rate(std::span<const double> rewards, double gold);

// Aggregates per-prompt reward groups against per-prompt gold scores.
GroupReport summarize(std::span<const std::int64_t> prompts,
                      std::span<const std::vector<double>> rewards,
                      std::span<const double> gold_scores);

struct EvalSetup {
  VocabularyPtr policy_vocab;
  const RewardModel& reward_model;
  const PerturbationMap& map;
  std::span<const std::int64_t> prompts;
  const GoldAnswers& gold;
  std::int64_t group_size = 8;
  std::int64_t length = 64;
  std::int64_t max_length = 64;
  std::uint64_t seed = 0;
};

// Seed of rollout `i` for `prompt` in evaluation; evaluate and length_sweep
// share it so they see the same rollouts.
std::uint64_t eval_rollout_seed(std::uint64_t seed, std::int64_t prompt, std::int64_t i);

// G rollouts per prompt at temperature 1, scored through the map.
GroupReport evaluate(const PolicyParams& policy, const EvalSetup& setup);

// G uniform-random sequences of the full length per prompt, scored through
// the map.
GroupReport baseline_ood(const EvalSetup& setup);

struct LengthPoint {
  std::int64_t length = 0;
  double mean_reward = 0.0;
};

struct LengthSweep {
  std::vector<LengthPoint> points;
};

// Truncation lengths interval, 2*interval, ... and always max_length last.
std::vector<std::int64_t> sweep_lengths(std::int64_t interval, std::int64_t max_length);

// Each rollout is truncated to every sweep length, mapped and scored.
LengthSweep length_sweep(const PolicyParams& policy, const EvalSetup& setup,
                         std::int64_t interval);

struct CurveRow {
  std::int64_t step = 0;
  double mean_reward = 0.0;
  double max_reward = 0.0;
  double gold = 0.0;
};

// Sorted by step; throws on duplicate steps.
std::vector<CurveRow> assemble_curves(std::span<const StepStats> records, double gold);

std::string to_csv(std::span<const CurveRow> rows);
std::string to_csv(const LengthSweep& sweep);
std::string to_text(const GroupReport& report, const std::string& title);
std::string to_json(const GroupReport& report, const std::string& config_hash);

}  // namespace rmhack
