#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "rmhack/policy.hpp"
#include "rmhack/rewards.hpp"
#include "rmhack/vocab.hpp"

namespace rmhack {

enum class KlEstimator {
  log_ratio,  // log pi_theta - log pi_ref, per token (can be negative)
  k3,         // exp(ref - theta) - (ref - theta) - 1, always >= 0
};

const char* to_string(KlEstimator kl);
KlEstimator parse_kl_estimator(const std::string& text);

struct GrpoConfig {
  std::int64_t group_size = 8;
  double clip_eps = 0.2;
  double kl_coeff = 0.01;
  double learning_rate = 0.05;
  std::int64_t batch_prompts = 8;
  std::int64_t response_length = 64;
  std::int64_t max_length = 64;
  double temperature = 1.0;
  std::int64_t total_steps = 1500;
  double advantage_std_floor = 1e-8;
  std::uint64_t rng_seed = 0;
  KlEstimator kl_estimator = KlEstimator::log_ratio;

  bool operator==(const GrpoConfig&) const = default;
};

void validate(const GrpoConfig& config);

// Group-standardized advantages with population std. A group whose rewards
// are all equal gets all-zero advantages.
std::vector<double> compute_advantages(std::span<const double> rewards, double std_floor);

// min(r * A, clip(r, 1 - eps, 1 + eps) * A).
double clipped_term(double ratio, double advantage, double eps);

double kl_term(double logp_theta, double logp_ref);
double kl_term(double logp_theta, double logp_ref, KlEstimator estimator);

struct RolloutGroup {
  std::int64_t prompt_index = 0;
  std::vector<SampledResponse> responses;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<std::vector<double>> logp_old;
  std::vector<std::vector<double>> logp_ref;
};

// Sample-based clipped surrogate with per-token KL penalty, evaluated at
// `theta` for fixed rollouts: the mean over groups of the mean over responses
// of the length-normalized token sum.
double objective(std::span<const RolloutGroup> groups, const PolicyParams& theta,
                 const GrpoConfig& config);

// Exact gradient of `objective` w.r.t. theta. Where the min is clipped and the
// ratio lies outside the clip range the token contributes no surrogate
// gradient; exact ties take the unclipped branch.
PolicyParams objective_grad(std::span<const RolloutGroup> groups, const PolicyParams& theta,
                            const GrpoConfig& config);

struct StepStats {
  std::int64_t step = 0;
  double mean_reward = 0.0;
  double max_reward = 0.0;
  double min_reward = 0.0;
  double mean_kl = 0.0;
  double mean_entropy = 0.0;
  double objective_value = 0.0;

  bool operator==(const StepStats&) const = default;
};

// Read-only pieces of the attack environment.
struct AttackEnv {
  VocabularyPtr policy_vocab;
  const RewardModel& reward_model;
  const PerturbationMap& map;
};

// Samples one group of responses for `prompt_index` from theta, pushes each
// through the map and the reward model, and fills advantages and log-probs.
RolloutGroup collect_group(const PolicyParams& theta, const PolicyParams& ref,
                           const GrpoConfig& config, const AttackEnv& env,
                           std::int64_t prompt_index, std::uint64_t stream_seed);

// One iteration: theta_old <- theta, rollouts, rewards through the map,
// advantages, then theta <- theta + lr * grad J.
StepStats train_step(PolicyParams& theta, const PolicyParams& ref, const GrpoConfig& config,
                     std::int64_t step, std::span<const std::int64_t> prompt_batch,
                     const AttackEnv& env);

// Prompt batch for a step, drawn from the prompt set (without replacement
// when the batch fits).
std::vector<std::int64_t> select_prompt_batch(std::span<const std::int64_t> prompt_set,
                                              std::int64_t batch_prompts, std::uint64_t seed,
                                              std::int64_t step);

struct AttackSinks {
  std::function<void(const StepStats&)> on_step;
  // Called with the number of updates applied so far.
  std::function<void(std::int64_t, const PolicyParams&)> on_checkpoint;
  std::int64_t checkpoint_every = 0;
};

struct AttackResult {
  PolicyParams params;
  std::vector<StepStats> curve;
};

AttackResult run_attack(const GrpoConfig& config, const PolicyParams& ref, const AttackEnv& env,
                        std::span<const std::int64_t> prompt_set, const AttackSinks& sinks = {});

}  // namespace rmhack
