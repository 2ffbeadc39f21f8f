#include "rmhack/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rmhack/errors.hpp"
#include "rmhack/random.hpp"

namespace rmhack {

const char* to_string(KlEstimator kl) { return kl == KlEstimator::k3 ? "k3" : "log_ratio"; }

KlEstimator parse_kl_estimator(const std::string& text) {
  if (text == "log_ratio") return KlEstimator::log_ratio;
  if (text == "k3") return KlEstimator::k3;
  throw ValidationError("unknown kl estimator '" + text + "' (expected log_ratio or k3)");
}

void validate(const GrpoConfig& c) {
  if (c.group_size < 2) throw ValidationError("grpo.group_size must be >= 2");
  if (!(c.clip_eps > 0.0 && c.clip_eps < 1.0)) throw ValidationError("grpo.clip_eps must lie in (0, 1)");
  if (!(c.kl_coeff >= 0.0)) throw ValidationError("grpo.kl_coeff must be >= 0");
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) {
    throw ValidationError("grpo.learning_rate must be a finite non-negative number");
  }
  if (c.batch_prompts < 1) throw ValidationError("grpo.batch_prompts must be >= 1");
  if (c.response_length < 1) throw ValidationError("policy.length must be >= 1");
  if (c.response_length > c.max_length) {
    throw ValidationError("policy.length exceeds policy.max_length");
  }
  if (!(c.temperature > 0.0)) throw ValidationError("policy.temperature must be positive");
  if (c.total_steps < 0) throw ValidationError("grpo.total_steps must be >= 0");
  if (!(c.advantage_std_floor > 0.0)) throw ValidationError("grpo.advantage_std_floor must be > 0");
}

std::vector<double> compute_advantages(std::span<const double> rewards, double std_floor) {
  if (rewards.size() < 2) throw ValidationError("advantages need a group of at least 2 rewards");
  if (!(std_floor > 0.0)) throw ValidationError("advantage std floor must be positive");
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    if (!std::isfinite(rewards[i])) {
      throw ValidationError("non-finite reward " + std::to_string(rewards[i]) + " at rollout " +
                            std::to_string(i));
    }
  }
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);

  std::vector<double> adv(rewards.size(), 0.0);
  const bool all_equal =
      std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; });
  if (sd < std_floor && all_equal) return adv;

  const double scale = std::max(sd, std_floor);
  double partial = 0.0;
  for (std::size_t i = 0; i + 1 < rewards.size(); ++i) {
    adv[i] = (rewards[i] - mean) / scale;
    partial += adv[i];
  }
  // Closing the sum this way makes the left-to-right sum exactly zero.
  adv.back() = -partial;
  return adv;
}

double clipped_term(double ratio, double advantage, double eps) {
  const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
  return std::min(ratio * advantage, clipped * advantage);
}

double kl_term(double logp_theta, double logp_ref) { return logp_theta - logp_ref; }

double kl_term(double logp_theta, double logp_ref, KlEstimator estimator) {
  if (estimator == KlEstimator::log_ratio) return kl_term(logp_theta, logp_ref);
  const double d = logp_ref - logp_theta;
  return std::exp(d) - d - 1.0;
}

namespace {

void check_group(const RolloutGroup& g) {
  const auto n = g.responses.size();
  if (n == 0 || g.rewards.size() != n || g.advantages.size() != n || g.logp_old.size() != n ||
      g.logp_ref.size() != n) {
    throw ValidationError("rollout group for prompt " + std::to_string(g.prompt_index) +
                          " has mismatched list lengths");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto len = g.responses[i].seq.length();
    if (len == 0 || g.logp_old[i].size() != len || g.logp_ref[i].size() != len) {
      throw ValidationError("rollout " + std::to_string(i) + " of prompt " +
                            std::to_string(g.prompt_index) + " has mismatched per-token lengths");
    }
  }
}

}  // namespace

double objective(std::span<const RolloutGroup> groups, const PolicyParams& theta,
                 const GrpoConfig& config) {
  if (groups.empty()) return 0.0;
  const SoftmaxTables tables(theta);
  double total = 0.0;
  for (const auto& g : groups) {
    check_group(g);
    double group_sum = 0.0;
    for (std::size_t i = 0; i < g.responses.size(); ++i) {
      const auto& resp = g.responses[i];
      const auto lp = sequence_logprob(tables, g.prompt_index, resp.seq.ids());
      // Written as A_i plus per-token deviations from A_i, so that at
      // theta = theta_old = ref every deviation is exactly zero and the group
      // sum inherits the exact zero sum of the advantages.
      const double a = g.advantages[i];
      double deviation = 0.0;
      for (std::size_t t = 0; t < lp.per_token.size(); ++t) {
        const double ratio = std::exp(lp.per_token[t] - g.logp_old[i][t]);
        deviation += (clipped_term(ratio, a, config.clip_eps) - a) -
                     config.kl_coeff * kl_term(lp.per_token[t], g.logp_ref[i][t], config.kl_estimator);
      }
      group_sum += a + deviation / static_cast<double>(lp.per_token.size());
    }
    total += group_sum / static_cast<double>(g.responses.size());
  }
  return total / static_cast<double>(groups.size());
}

PolicyParams objective_grad(std::span<const RolloutGroup> groups, const PolicyParams& theta,
                            const GrpoConfig& config) {
  PolicyParams grad(theta.vocab_size(), theta.num_prompts());
  if (groups.empty()) return grad;
  const SoftmaxTables tables(theta);
  const double eps = config.clip_eps;
  std::vector<double> weights;
  for (const auto& g : groups) {
    check_group(g);
    const double group_scale =
        1.0 / (static_cast<double>(groups.size()) * static_cast<double>(g.responses.size()));
    for (std::size_t i = 0; i < g.responses.size(); ++i) {
      const auto& resp = g.responses[i];
      const auto lp = sequence_logprob(tables, g.prompt_index, resp.seq.ids());
      const double scale = group_scale / static_cast<double>(lp.per_token.size());
      const double a = g.advantages[i];
      weights.assign(lp.per_token.size(), 0.0);
      for (std::size_t t = 0; t < lp.per_token.size(); ++t) {
        const double ratio = std::exp(lp.per_token[t] - g.logp_old[i][t]);
        const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
        // d(surrogate)/d(logp) is r*A on the unclipped branch and 0 on the
        // clipped one (the clipped branch only wins outside the clip range).
        const double d_surrogate = ratio * a <= clipped * a ? ratio * a : 0.0;
        double d_kl = 1.0;
        if (config.kl_estimator == KlEstimator::k3) {
          d_kl = 1.0 - std::exp(g.logp_ref[i][t] - lp.per_token[t]);
        }
        weights[t] = scale * (d_surrogate - config.kl_coeff * d_kl);
      }
      accumulate_logprob_grad(tables, g.prompt_index, resp.seq.ids(), weights, grad);
    }
  }
  return grad;
}

namespace {

RolloutGroup collect_group_with(const SoftmaxTables& theta, const SoftmaxTables& ref,
                                const GrpoConfig& config, const AttackEnv& env,
                                std::int64_t prompt_index, std::uint64_t stream_seed) {
  RolloutGroup group;
  group.prompt_index = prompt_index;
  const SamplingOptions opts{config.response_length, config.temperature, config.max_length};
  for (std::int64_t i = 0; i < config.group_size; ++i) {
    auto resp = sample(theta, env.policy_vocab, prompt_index, opts,
                       derive_seed(stream_seed, {static_cast<std::uint64_t>(i)}));
    const double reward = env.reward_model.score(prompt_index, env.map.apply(resp.seq));
    if (!std::isfinite(reward)) {
      throw RuntimeFailure("reward model returned a non-finite score for prompt " +
                           std::to_string(prompt_index) + ", rollout " + std::to_string(i));
    }
    group.rewards.push_back(reward);
    group.logp_old.push_back(resp.logp_per_token);
    group.logp_ref.push_back(sequence_logprob(ref, prompt_index, resp.seq.ids()).per_token);
    group.responses.push_back(std::move(resp));
  }
  group.advantages = compute_advantages(group.rewards, config.advantage_std_floor);
  return group;
}

}  // namespace

RolloutGroup collect_group(const PolicyParams& theta, const PolicyParams& ref,
                           const GrpoConfig& config, const AttackEnv& env,
                           std::int64_t prompt_index, std::uint64_t stream_seed) {
  return collect_group_with(SoftmaxTables(theta), SoftmaxTables(ref), config, env, prompt_index,
                            stream_seed);
}

StepStats train_step(PolicyParams& theta, const PolicyParams& ref, const GrpoConfig& config,
                     std::int64_t step, std::span<const std::int64_t> prompt_batch,
                     const AttackEnv& env) {
  validate(config);
  if (prompt_batch.empty()) throw ValidationError("empty prompt batch");
  const PolicyParams theta_old = snapshot(theta);

  const SoftmaxTables old_tables(theta_old);
  const SoftmaxTables ref_tables(ref);
  std::vector<RolloutGroup> groups;
  groups.reserve(prompt_batch.size());
  for (std::size_t slot = 0; slot < prompt_batch.size(); ++slot) {
    const auto seed = derive_seed(config.rng_seed, {0x726f6c6cULL, static_cast<std::uint64_t>(step),
                                                    static_cast<std::uint64_t>(slot)});
    groups.push_back(collect_group_with(old_tables, ref_tables, config, env, prompt_batch[slot], seed));
  }

  StepStats stats;
  stats.step = step;
  stats.min_reward = groups.front().rewards.front();
  stats.max_reward = stats.min_reward;
  double reward_sum = 0.0;
  std::size_t reward_count = 0;
  double kl_sum = 0.0;
  double entropy_sum = 0.0;
  std::size_t token_count = 0;
  for (const auto& g : groups) {
    for (std::size_t i = 0; i < g.responses.size(); ++i) {
      const double r = g.rewards[i];
      reward_sum += r;
      ++reward_count;
      stats.min_reward = std::min(stats.min_reward, r);
      stats.max_reward = std::max(stats.max_reward, r);
      const auto ids = g.responses[i].seq.ids();
      for (std::size_t t = 0; t < ids.size(); ++t) {
        kl_sum += kl_term(g.logp_old[i][t], g.logp_ref[i][t], config.kl_estimator);
        entropy_sum += old_tables.entropy(g.prompt_index, ids, t);
        ++token_count;
      }
    }
  }
  stats.mean_reward = reward_sum / static_cast<double>(reward_count);
  stats.mean_kl = kl_sum / static_cast<double>(token_count);
  stats.mean_entropy = entropy_sum / static_cast<double>(token_count);
  stats.objective_value = objective(groups, theta_old, config);

  if (config.learning_rate != 0.0) {
    const auto grad = objective_grad(groups, theta_old, config);
    theta.add_scaled(grad, config.learning_rate);
    if (!theta.all_finite()) {
      throw RuntimeFailure("policy parameters became non-finite at step " + std::to_string(step));
    }
  }
  return stats;
}

std::vector<std::int64_t> select_prompt_batch(std::span<const std::int64_t> prompt_set,
                                              std::int64_t batch_prompts, std::uint64_t seed,
                                              std::int64_t step) {
  if (prompt_set.empty()) throw ValidationError("empty prompt set");
  Rng rng = make_rng(seed, {0x6261746368ULL, static_cast<std::uint64_t>(step)});
  std::vector<std::int64_t> pool(prompt_set.begin(), prompt_set.end());
  std::vector<std::int64_t> batch;
  batch.reserve(batch_prompts);
  if (batch_prompts <= static_cast<std::int64_t>(pool.size())) {
    // Partial Fisher-Yates.
    for (std::int64_t i = 0; i < batch_prompts; ++i) {
      const auto k = i + static_cast<std::int64_t>(uniform_below(rng, pool.size() - i));
      std::swap(pool[i], pool[k]);
      batch.push_back(pool[i]);
    }
  } else {
    for (std::int64_t i = 0; i < batch_prompts; ++i) {
      batch.push_back(pool[uniform_below(rng, pool.size())]);
    }
  }
  return batch;
}

AttackResult run_attack(const GrpoConfig& config, const PolicyParams& ref, const AttackEnv& env,
                        std::span<const std::int64_t> prompt_set, const AttackSinks& sinks) {
  validate(config);
  if (!env.map.source().same_space(*env.policy_vocab)) {
    throw ValidationError("map source vocabulary does not match the policy vocabulary");
  }
  if (!env.map.target().same_space(env.reward_model.vocabulary())) {
    throw ValidationError("map target vocabulary does not match the reward model's vocabulary");
  }
  if (ref.vocab_size() != env.policy_vocab->size()) {
    throw ValidationError("reference policy size does not match the policy vocabulary");
  }

  AttackResult result{snapshot(ref), {}};
  result.curve.reserve(config.total_steps);
  for (std::int64_t step = 0; step < config.total_steps; ++step) {
    const auto batch = select_prompt_batch(prompt_set, config.batch_prompts, config.rng_seed, step);
    auto stats = train_step(result.params, ref, config, step, batch, env);
    if (sinks.on_step) sinks.on_step(stats);
    result.curve.push_back(stats);
    const std::int64_t updates = step + 1;
    if (sinks.on_checkpoint && sinks.checkpoint_every > 0 &&
        (updates % sinks.checkpoint_every == 0 || updates == config.total_steps)) {
      sinks.on_checkpoint(updates, result.params);
    }
  }
  return result;
}

}  // namespace rmhack
