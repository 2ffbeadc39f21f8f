#include <doctest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "rmhack/errors.hpp"
#include "rmhack/grpo.hpp"

using namespace rmhack;

namespace {

// Random rewards per (prompt, ids) hash, so groups have spread.
oracle::FnReward hashed_reward(VocabularyPtr vocab) {
  return oracle::FnReward(vocab, [](std::int64_t prompt, std::span<const TokenId> ids) {
    std::uint64_t h = 1469598103934665603ULL ^ static_cast<std::uint64_t>(prompt);
    for (auto id : ids) h = (h ^ static_cast<std::uint64_t>(id)) * 1099511628211ULL;
    return static_cast<double>(h % 1000) / 100.0;
  });
}

struct Instance {
  VocabularyPtr vocab;
  PerturbationMap map;
  oracle::FnReward rm;
  PolicyParams theta_old;
  PolicyParams ref;
  GrpoConfig config;
  std::vector<RolloutGroup> groups;
};

Instance make_instance(std::uint64_t seed, std::int64_t v, std::int64_t t, std::int64_t g,
                       double beta) {
  auto vocab = make_vocabulary("v", v);
  Instance in{vocab, PerturbationMap::identity_clamp(vocab, vocab), hashed_reward(vocab),
              oracle::random_params(v, 2, seed), oracle::random_params(v, 2, seed + 1000), {}, {}};
  in.config.group_size = g;
  in.config.response_length = t;
  in.config.max_length = t;
  in.config.kl_coeff = beta;
  const AttackEnv env{vocab, in.rm, in.map};
  for (std::int64_t p = 0; p < 2; ++p) {
    in.groups.push_back(collect_group(in.theta_old, in.ref, in.config, env, p, seed * 7 + p));
  }
  return in;
}

bool away_from_clip(const Instance& in, const PolicyParams& theta) {
  for (const auto& g : in.groups) {
    for (std::size_t i = 0; i < g.responses.size(); ++i) {
      const auto lp = sequence_logprob(theta, g.prompt_index, g.responses[i].seq.ids());
      for (std::size_t t = 0; t < lp.per_token.size(); ++t) {
        const double r = std::exp(lp.per_token[t] - g.logp_old[i][t]);
        if (std::abs(r - (1.0 - in.config.clip_eps)) <= 1e-3 ||
            std::abs(r - (1.0 + in.config.clip_eps)) <= 1e-3) {
          return false;
        }
      }
    }
  }
  return true;
}

}  // namespace

TEST_CASE("compute_advantages examples") {
  auto a = compute_advantages(std::vector<double>{1, 2, 3}, 1e-8);
  CHECK(a[0] == doctest::Approx(-1.224745).epsilon(1e-6));
  CHECK(std::abs(a[1]) <= 1e-12);
  CHECK(a[2] == doctest::Approx(1.224745).epsilon(1e-6));
  CHECK(std::abs(a[2] - std::sqrt(1.5)) <= 1e-9);

  CHECK(compute_advantages(std::vector<double>{5, 5, 5}, 1e-8) == std::vector<double>{0, 0, 0});

  auto b = compute_advantages(std::vector<double>{0, 2}, 1e-8);
  CHECK(b[0] == doctest::Approx(-1.0));
  CHECK(b[1] == doctest::Approx(1.0));

  CHECK_THROWS_AS(compute_advantages(std::vector<double>{}, 1e-8), ValidationError);
}

TEST_CASE("advantages have exactly zero mean and unit population std") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-100.0, 100.0);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> r(2 + rng() % 15);
    for (auto& x : r) x = u(rng);
    const auto a = compute_advantages(r, 1e-8);
    double sum = 0.0;
    for (double x : a) sum += x;
    CHECK(sum == 0.0);
    double sq = 0.0;
    for (double x : a) sq += x * x;
    CHECK(std::sqrt(sq / static_cast<double>(a.size())) == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("clipped_term examples") {
  CHECK(clipped_term(1.5, 2.0, 0.2) == doctest::Approx(2.4));
  CHECK(clipped_term(0.5, -1.0, 0.2) == doctest::Approx(-0.8));
  for (double a : {-3.0, 0.0, 0.7}) {
    for (double eps : {0.1, 0.2, 0.5}) CHECK(clipped_term(1.0, a, eps) == a);
  }
}

TEST_CASE("clipped_term never exceeds either branch") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ratio(0.0, 3.0), adv(-5.0, 5.0), eps(0.01, 0.9);
  for (int i = 0; i < 10000; ++i) {
    const double r = ratio(rng), a = adv(rng), e = eps(rng);
    const double c = std::clamp(r, 1.0 - e, 1.0 + e);
    const double v = clipped_term(r, a, e);
    CHECK(v <= r * a);
    CHECK(v <= c * a);
  }
}

TEST_CASE("kl_term examples") {
  CHECK(kl_term(-1.3, -1.3) == 0.0);
  CHECK(kl_term(std::log(0.5), std::log(0.25)) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(kl_term(std::log(0.25), std::log(0.5)) == doctest::Approx(-std::log(2.0)).epsilon(1e-12));
  CHECK(kl_term(-0.4, -0.4, KlEstimator::k3) == 0.0);
  // k3 = exp(d) - d - 1 with d = ref - theta.
  CHECK(kl_term(std::log(0.5), std::log(0.25), KlEstimator::k3) ==
        doctest::Approx(0.5 + std::log(2.0) - 1.0).epsilon(1e-12));
  CHECK(kl_term(-2.0, -0.5, KlEstimator::k3) >= 0.0);
}

TEST_CASE("objective is zero at initialization") {
  auto vocab = make_vocabulary("v", 4);
  auto map = PerturbationMap::identity_clamp(vocab, vocab);
  // Rewards 0 and 2 by first token parity.
  oracle::FnReward rm(vocab, [](std::int64_t, std::span<const TokenId> ids) { return 2.0 * (ids[0] % 2); });
  GrpoConfig config;
  config.group_size = 2;
  config.response_length = 3;
  config.max_length = 3;
  config.kl_coeff = 0.5;
  PolicyParams theta(4, 1);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto g = collect_group(theta, theta, config, {vocab, rm, map}, 0, seed);
    std::vector<RolloutGroup> groups{g};
    CHECK(objective(groups, theta, config) == 0.0);
  }

  // All-zero advantages with beta = 0.
  auto in = make_instance(5, 4, 3, 2, 0.0);
  for (auto& g : in.groups) std::fill(g.advantages.begin(), g.advantages.end(), 0.0);
  CHECK(objective(in.groups, oracle::random_params(4, 2, 77), in.config) == 0.0);
}

TEST_CASE("objective matches a term-by-term expansion") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    for (auto kl : {0.0, 0.05}) {
      auto in = make_instance(seed, 4, 3, 2, kl);
      auto theta = in.theta_old;
      auto jitter = oracle::random_params(4, 2, seed + 5000, 0.3);
      theta.add_scaled(jitter, 1.0);
      const double expected = oracle::objective(in.groups, theta, in.config.clip_eps, kl);
      CHECK(std::abs(objective(in.groups, theta, in.config) - expected) <= 1e-10);
    }
  }
}

TEST_CASE("objective rejects structurally broken groups") {
  auto in = make_instance(1, 4, 3, 2, 0.0);
  in.groups[0].logp_old[0].pop_back();
  CHECK_THROWS_AS(objective(in.groups, in.theta_old, in.config), ValidationError);
}

TEST_CASE("objective_grad: zero when advantages vanish and beta is zero") {
  auto in = make_instance(2, 4, 3, 2, 0.0);
  for (auto& g : in.groups) std::fill(g.advantages.begin(), g.advantages.end(), 0.0);
  auto grad = objective_grad(in.groups, in.theta_old, in.config);
  for (std::size_t i = 0; i < grad.parameter_count(); ++i) CHECK(grad.flat(i) == 0.0);
}

TEST_CASE("objective_grad at theta = ref = theta_old matches finite differences") {
  auto vocab = make_vocabulary("v", 4);
  auto map = PerturbationMap::identity_clamp(vocab, vocab);
  oracle::FnReward rm(vocab, [](std::int64_t, std::span<const TokenId> ids) { return 2.0 * (ids[0] % 2); });
  GrpoConfig config;
  config.group_size = 2;
  config.response_length = 3;
  config.max_length = 3;
  config.kl_coeff = 0.1;
  auto theta = oracle::random_params(4, 1, 12);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::vector<RolloutGroup> groups{collect_group(theta, theta, config, {vocab, rm, map}, 0, seed)};
    auto numeric = oracle::finite_difference(theta, [&](const PolicyParams& q) {
      return oracle::objective(groups, q, config.clip_eps, config.kl_coeff);
    });
    CHECK(oracle::max_relative_error(objective_grad(groups, theta, config), numeric) < 1e-5);
  }
}

TEST_CASE("objective_grad matches central finite differences away from the clip boundary") {
  std::mt19937_64 rng(11);
  int checked = 0;
  for (std::uint64_t seed = 0; checked < 20; ++seed) {
    const std::int64_t v = 2 + static_cast<std::int64_t>(rng() % 7);
    const std::int64_t t = 1 + static_cast<std::int64_t>(rng() % 6);
    const std::int64_t g = rng() % 2 ? 2 : 4;
    auto in = make_instance(seed, v, t, g, seed % 2 ? 0.05 : 0.0);
    auto theta = in.theta_old;
    theta.add_scaled(oracle::random_params(v, 2, seed + 9000, 0.3), 1.0);
    if (!away_from_clip(in, theta)) continue;
    auto numeric = oracle::finite_difference(theta, [&](const PolicyParams& q) {
      return oracle::objective(in.groups, q, in.config.clip_eps, in.config.kl_coeff);
    });
    CHECK(oracle::max_relative_error(objective_grad(in.groups, theta, in.config), numeric) < 1e-5);
    ++checked;
  }
}

TEST_CASE("objective_grad with the k3 estimator matches finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto in = make_instance(seed, 4, 3, 2, 0.2);
    in.config.kl_estimator = KlEstimator::k3;
    auto theta = in.theta_old;
    theta.add_scaled(oracle::random_params(4, 2, seed + 300, 0.3), 1.0);
    if (!away_from_clip(in, theta)) continue;
    auto numeric = oracle::finite_difference(theta, [&](const PolicyParams& q) {
      return objective(in.groups, q, in.config);
    });
    CHECK(oracle::max_relative_error(objective_grad(in.groups, theta, in.config), numeric) < 1e-5);
  }
}

TEST_CASE("train_step: one bandit step moves mass toward the paid arm") {
  auto vocab = make_vocabulary("arms", 3);
  auto map = PerturbationMap::identity_clamp(vocab, vocab);
  oracle::FnReward rm(vocab, [](std::int64_t, std::span<const TokenId> ids) { return ids[0] == 0 ? 1.0 : 0.0; });
  GrpoConfig config;
  config.group_size = 2;
  config.response_length = 1;
  config.max_length = 1;
  config.kl_coeff = 0.0;
  config.learning_rate = 0.1;
  const std::vector<std::int64_t> batch{0};
  int mixed = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    config.rng_seed = seed;
    PolicyParams theta(3, 1);
    const PolicyParams ref = snapshot(theta);
    auto stats = train_step(theta, ref, config, 0, batch, {vocab, rm, map});
    const double before = 1.0 / 3.0;
    const double after = oracle::bandit_value(theta, {1.0, 0.0, 0.0});
    if (stats.min_reward != stats.max_reward) {
      ++mixed;
      CHECK(after > before);
    } else {
      CHECK(after == doctest::Approx(before).epsilon(1e-15));
    }
  }
  CHECK(mixed > 0);
}

TEST_CASE("train_step: zero learning rate leaves theta unchanged") {
  auto vocab = make_vocabulary("v", 5);
  auto map = PerturbationMap::identity_clamp(vocab, vocab);
  auto rm = hashed_reward(vocab);
  GrpoConfig config;
  config.group_size = 4;
  config.response_length = 4;
  config.max_length = 4;
  config.learning_rate = 0.0;
  auto theta = oracle::random_params(5, 2, 1);
  const auto before = snapshot(theta);
  const std::vector<std::int64_t> batch{0, 1};
  auto stats = train_step(theta, before, config, 3, batch, {vocab, rm, map});
  CHECK(theta == before);
  CHECK(stats.step == 3);
  CHECK(stats.min_reward <= stats.mean_reward);
  CHECK(stats.mean_reward <= stats.max_reward);
  CHECK(stats.mean_entropy > 0.0);
}

TEST_CASE("train_step is deterministic") {
  auto vocab = make_vocabulary("v", 5);
  auto map = PerturbationMap::identity_clamp(vocab, vocab);
  auto rm = hashed_reward(vocab);
  GrpoConfig config;
  config.group_size = 4;
  config.response_length = 4;
  config.max_length = 4;
  config.learning_rate = 0.5;
  config.rng_seed = 99;
  const auto ref = oracle::random_params(5, 2, 1);
  auto a = snapshot(ref), b = snapshot(ref);
  const std::vector<std::int64_t> batch{1, 0};
  for (std::int64_t step = 0; step < 5; ++step) {
    CHECK(train_step(a, ref, config, step, batch, {vocab, rm, map}) ==
          train_step(b, ref, config, step, batch, {vocab, rm, map}));
  }
  CHECK(a == b);
  CHECK_FALSE(a == ref);
}

TEST_CASE("train_step names the rollout that produced a non-finite reward") {
  auto vocab = make_vocabulary("v", 3);
  auto map = PerturbationMap::identity_clamp(vocab, vocab);
  oracle::FnReward rm(vocab, [](std::int64_t, std::span<const TokenId>) { return std::nan(""); });
  GrpoConfig config;
  config.group_size = 2;
  config.response_length = 2;
  config.max_length = 2;
  PolicyParams theta(3, 2);
  const auto ref = snapshot(theta);
  const std::vector<std::int64_t> batch{1};
  try {
    train_step(theta, ref, config, 0, batch, {vocab, rm, map});
    FAIL("expected a failure");
  } catch (const RuntimeFailure& e) {
    CHECK(std::string(e.what()).find("prompt 1, rollout 0") != std::string::npos);
  }
}

TEST_CASE("run_attack: zero steps returns the reference and an empty curve") {
  auto vocab = make_vocabulary("v", 4);
  auto map = PerturbationMap::identity_clamp(vocab, vocab);
  auto rm = hashed_reward(vocab);
  GrpoConfig config;
  config.total_steps = 0;
  config.response_length = 3;
  config.max_length = 3;
  const auto ref = oracle::random_params(4, 2, 8);
  const std::vector<std::int64_t> prompts{0, 1};
  auto result = run_attack(config, ref, {vocab, rm, map}, prompts);
  CHECK(result.params == ref);
  CHECK(result.curve.empty());
}

TEST_CASE("run_attack emits one record per step and checkpoints on cadence") {
  auto vocab = make_vocabulary("v", 4);
  auto map = PerturbationMap::identity_clamp(vocab, vocab);
  auto rm = hashed_reward(vocab);
  GrpoConfig config;
  config.total_steps = 7;
  config.group_size = 2;
  config.batch_prompts = 2;
  config.response_length = 3;
  config.max_length = 3;
  const std::vector<std::int64_t> prompts{0, 1, 2};
  std::vector<std::int64_t> steps, checkpoints;
  AttackSinks sinks;
  sinks.on_step = [&](const StepStats& s) { steps.push_back(s.step); };
  sinks.on_checkpoint = [&](std::int64_t n, const PolicyParams&) { checkpoints.push_back(n); };
  sinks.checkpoint_every = 3;
  auto result = run_attack(config, PolicyParams(4, 3), {vocab, rm, map}, prompts, sinks);
  CHECK(result.curve.size() == 7);
  CHECK(steps == std::vector<std::int64_t>{0, 1, 2, 3, 4, 5, 6});
  // Cadence plus the final state.
  CHECK(checkpoints == std::vector<std::int64_t>{3, 6, 7});
}

TEST_CASE("select_prompt_batch draws without replacement when the batch fits") {
  const std::vector<std::int64_t> prompts{0, 1, 2, 3, 4, 5};
  for (std::int64_t step = 0; step < 50; ++step) {
    auto batch = select_prompt_batch(prompts, 4, 3, step);
    CHECK(batch.size() == 4);
    std::sort(batch.begin(), batch.end());
    CHECK(std::adjacent_find(batch.begin(), batch.end()) == batch.end());
  }
  CHECK(select_prompt_batch(prompts, 4, 3, 9) == select_prompt_batch(prompts, 4, 3, 9));
  CHECK(select_prompt_batch(prompts, 9, 3, 0).size() == 9);
}

TEST_CASE("GrpoConfig validation") {
  GrpoConfig c;
  CHECK_NOTHROW(validate(c));
  c.group_size = 1;
  CHECK_THROWS_AS(validate(c), ValidationError);
  c = {};
  c.response_length = 65;
  CHECK_THROWS_AS(validate(c), ValidationError);
  c = {};
  c.clip_eps = 0.0;
  CHECK_THROWS_AS(validate(c), ValidationError);
  CHECK(parse_kl_estimator("k3") == KlEstimator::k3);
  CHECK_THROWS_AS(parse_kl_estimator("kl"), ValidationError);
}
