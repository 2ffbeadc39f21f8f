#include "rmhack/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "rmhack/errors.hpp"
#include "rmhack/random.hpp"

namespace rmhack {

double beat_rate(std::span<const double> rewards, double gold) {
  if (rewards.empty()) throw ValidationError("beat rate of an empty reward list");
  const auto wins = std::count_if(rewards.begin(), rewards.end(), [&](double r) { return r > gold; });
  return static_cast<double>(wins) / static_cast<double>(rewards.size());
}

GroupReport summarize(std::span<const std::int64_t> prompts,
                      std::span<const std::vector<double>> rewards,
                      std::span<const double> gold_scores) {
  if (prompts.size() != rewards.size() || prompts.size() != gold_scores.size()) {
    throw ValidationError("summarize: prompts, reward groups and gold scores differ in length");
  }
  GroupReport report;
  std::int64_t wins = 0;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    const auto& rs = rewards[p];
    if (rs.empty()) {
      throw ValidationError("prompt " + std::to_string(prompts[p]) + " has no rollouts");
    }
    PromptStats s;
    s.prompt_index = prompts[p];
    s.rewards = rs;
    s.gold = gold_scores[p];
    const auto [lo, hi] = std::minmax_element(rs.begin(), rs.end());
    s.min = *lo;
    s.max = *hi;
    s.mean = std::accumulate(rs.begin(), rs.end(), 0.0) / static_cast<double>(rs.size());
    // Guard against the mean drifting a rounding step outside [min, max].
    s.mean = std::clamp(s.mean, s.min, s.max);
    wins += std::count_if(rs.begin(), rs.end(), [&](double r) { return r > s.gold; });
    report.rollouts += static_cast<std::int64_t>(rs.size());
    report.avg_min += s.min;
    report.avg_mean += s.mean;
    report.avg_max += s.max;
    report.prompts.push_back(std::move(s));
  }
  if (!report.prompts.empty()) {
    const double n = static_cast<double>(report.prompts.size());
    report.avg_min /= n;
    report.avg_mean /= n;
    report.avg_max /= n;
    report.beat_gold_rate = static_cast<double>(wins) / static_cast<double>(report.rollouts);
  }
  return report;
}

std::uint64_t eval_rollout_seed(std::uint64_t seed, std::int64_t prompt, std::int64_t i) {
  return derive_seed(seed, {0x6576616cULL, static_cast<std::uint64_t>(prompt),
                            static_cast<std::uint64_t>(i)});
}

namespace {

void check_setup(const EvalSetup& setup) {
  if (setup.group_size < 1) throw ValidationError("evaluation group size must be >= 1");
  if (setup.length < 1 || setup.length > setup.max_length) {
    throw ValidationError("evaluation length must lie in [1, max_length]");
  }
  if (!setup.map.source().same_space(*setup.policy_vocab) ||
      !setup.map.target().same_space(setup.reward_model.vocabulary())) {
    throw ValidationError("map vocabularies do not match the policy and reward model");
  }
}

std::vector<std::vector<SampledResponse>> eval_rollouts(const PolicyParams& policy,
                                                        const EvalSetup& setup) {
  const SamplingOptions opts{setup.length, 1.0, setup.max_length};
  const SoftmaxTables tables(policy);
  std::vector<std::vector<SampledResponse>> out;
  for (auto p : setup.prompts) {
    auto& group = out.emplace_back();
    for (std::int64_t i = 0; i < setup.group_size; ++i) {
      group.push_back(sample(tables, setup.policy_vocab, p, opts, eval_rollout_seed(setup.seed, p, i)));
    }
  }
  return out;
}

std::vector<double> gold_scores(const EvalSetup& setup) {
  std::vector<double> gold;
  for (auto p : setup.prompts) gold.push_back(setup.gold.score_for(p));
  return gold;
}

}  // namespace

GroupReport evaluate(const PolicyParams& policy, const EvalSetup& setup) {
  check_setup(setup);
  const auto rollouts = eval_rollouts(policy, setup);
  std::vector<std::vector<double>> rewards;
  for (std::size_t p = 0; p < rollouts.size(); ++p) {
    auto& rs = rewards.emplace_back();
    for (const auto& resp : rollouts[p]) {
      rs.push_back(setup.reward_model.score(setup.prompts[p], setup.map.apply(resp.seq)));
    }
  }
  return summarize(setup.prompts, rewards, gold_scores(setup));
}

GroupReport baseline_ood(const EvalSetup& setup) {
  check_setup(setup);
  std::vector<std::vector<double>> rewards;
  for (auto p : setup.prompts) {
    auto& rs = rewards.emplace_back();
    for (std::int64_t i = 0; i < setup.group_size; ++i) {
      const auto seq = random_ood(setup.policy_vocab, setup.max_length,
                                  derive_seed(setup.seed, {0x6f6f64ULL, static_cast<std::uint64_t>(p),
                                                           static_cast<std::uint64_t>(i)}));
      rs.push_back(setup.reward_model.score(p, setup.map.apply(seq)));
    }
  }
  return summarize(setup.prompts, rewards, gold_scores(setup));
}

std::vector<std::int64_t> sweep_lengths(std::int64_t interval, std::int64_t max_length) {
  if (interval < 1) throw ValidationError("sweep interval must be >= 1");
  if (max_length < 1) throw ValidationError("sweep max length must be >= 1");
  std::vector<std::int64_t> lengths;
  for (std::int64_t l = interval; l < max_length; l += interval) lengths.push_back(l);
  lengths.push_back(max_length);
  return lengths;
}

LengthSweep length_sweep(const PolicyParams& policy, const EvalSetup& setup,
                         std::int64_t interval) {
  check_setup(setup);
  const auto lengths = sweep_lengths(interval, setup.length);
  const auto rollouts = eval_rollouts(policy, setup);
  LengthSweep sweep;
  for (auto len : lengths) {
    // Per-prompt means averaged over prompts, matching evaluate()'s avg_mean.
    double total = 0.0;
    for (std::size_t p = 0; p < rollouts.size(); ++p) {
      double prompt_sum = 0.0;
      for (const auto& resp : rollouts[p]) {
        prompt_sum += setup.reward_model.score(setup.prompts[p],
                                               setup.map.apply(resp.seq.prefix(len)));
      }
      total += prompt_sum / static_cast<double>(rollouts[p].size());
    }
    sweep.points.push_back({len, total / static_cast<double>(rollouts.size())});
  }
  return sweep;
}

std::vector<CurveRow> assemble_curves(std::span<const StepStats> records, double gold) {
  std::vector<CurveRow> rows;
  std::set<std::int64_t> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.step).second) {
      throw ValidationError("duplicate step " + std::to_string(r.step) + " in metrics records");
    }
    rows.push_back({r.step, r.mean_reward, r.max_reward, gold});
  }
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.step < b.step; });
  return rows;
}

namespace {

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string fixed(double x, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%+.*f", digits, x);
  return buf;
}

}  // namespace

std::string to_csv(std::span<const CurveRow> rows) {
  std::string out = "step,mean_reward,max_reward,gold\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + fmt(r.mean_reward) + "," + fmt(r.max_reward) + "," +
           fmt(r.gold) + "\n";
  }
  return out;
}

std::string to_csv(const LengthSweep& sweep) {
  std::string out = "length,mean_reward\n";
  for (const auto& p : sweep.points) out += std::to_string(p.length) + "," + fmt(p.mean_reward) + "\n";
  return out;
}

std::string to_text(const GroupReport& report, const std::string& title) {
  std::ostringstream os;
  os << title << "\n";
  os << "prompts: " << report.prompts.size() << "  rollouts: " << report.rollouts << "\n";
  os << "min " << fixed(report.avg_min) << "  mean " << fixed(report.avg_mean) << "  max "
     << fixed(report.avg_max) << "  beat gold " << fixed(100.0 * report.beat_gold_rate, 1).substr(1)
     << "%\n";
  for (const auto& p : report.prompts) {
    os << "  prompt " << p.prompt_index << ": min " << fixed(p.min) << "  mean " << fixed(p.mean)
       << "  max " << fixed(p.max) << "  gold " << fixed(p.gold) << "\n";
  }
  return os.str();
}

std::string to_json(const GroupReport& report, const std::string& config_hash) {
  nlohmann::ordered_json j;
  j["config_hash"] = config_hash;
  j["avg_min"] = report.avg_min;
  j["avg_mean"] = report.avg_mean;
  j["avg_max"] = report.avg_max;
  j["beat_gold_rate"] = report.beat_gold_rate;
  j["rollouts"] = report.rollouts;
  auto& prompts = j["prompts"] = nlohmann::ordered_json::array();
  for (const auto& p : report.prompts) {
    prompts.push_back({{"prompt", p.prompt_index},
                       {"min", p.min},
                       {"mean", p.mean},
                       {"max", p.max},
                       {"gold", p.gold},
                       {"rewards", p.rewards}});
  }
  return j.dump(2) + "\n";
}

}  // namespace rmhack
