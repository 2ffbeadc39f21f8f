#include "rmhack/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "rmhack/errors.hpp"
#include "rmhack/random.hpp"

namespace rmhack {

std::span<const double> FluencySpec::start_row(std::int64_t prompt) const {
  return std::span<const double>(start).subspan(prompt * vocab_size(), vocab_size());
}

std::span<const double> FluencySpec::transition_row(TokenId prev) const {
  return std::span<const double>(transition).subspan(prev * vocab_size(), vocab_size());
}

namespace {

void validate_rows(std::span<const double> table, std::int64_t width, const char* what) {
  for (std::size_t r = 0; r * width < table.size(); ++r) {
    auto row = table.subspan(r * width, width);
    double sum = 0.0;
    for (double p : row) {
      if (!(p > 0.0) || !std::isfinite(p)) {
        throw ValidationError(std::string(what) + " row " + std::to_string(r) +
                              " has a non-positive or non-finite probability");
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw ValidationError(std::string(what) + " row " + std::to_string(r) + " sums to " +
                            std::to_string(sum));
    }
  }
}

void check_prompt(const FluencySpec& spec, std::int64_t prompt_index) {
  if (prompt_index < 0 || prompt_index >= spec.num_prompts) {
    throw ValidationError("prompt index " + std::to_string(prompt_index) +
                          " outside the reward model's prompt set [0, " +
                          std::to_string(spec.num_prompts) + ")");
  }
}

void check_vocab(const Vocabulary& expected, const TokenSequence& seq) {
  if (!seq.vocab().same_space(expected)) {
    throw ValidationError("reward model expects vocabulary '" + expected.name() +
                          "' but got a sequence in '" + seq.vocab().name() + "'");
  }
}

// One row: Dirichlet(concentration) draw with uniform smoothing over the
// ordinary tokens; each reserved tail token gets a fixed reserved_weight / V.
void fill_row(std::span<double> row, Rng& rng, const ReferenceOptions& options) {
  std::gamma_distribution<double> gamma(options.concentration, 1.0);
  const auto v = static_cast<std::int64_t>(row.size());
  const auto ordinary = v - options.reserved_tokens;
  double sum = 0.0;
  for (std::int64_t k = 0; k < ordinary; ++k) {
    row[k] = gamma(rng);
    sum += row[k];
  }
  if (!(sum > 0.0)) {
    std::fill(row.begin(), row.begin() + ordinary, 1.0);
    sum = static_cast<double>(ordinary);
  }
  const double reserved_p = options.reserved_weight / static_cast<double>(v);
  const double ordinary_mass = 1.0 - reserved_p * static_cast<double>(options.reserved_tokens);
  for (std::int64_t k = 0; k < ordinary; ++k) {
    row[k] = ordinary_mass * ((1.0 - options.smoothing) * row[k] / sum +
                              options.smoothing / static_cast<double>(ordinary));
  }
  for (std::int64_t k = ordinary; k < v; ++k) row[k] = reserved_p;
}

}  // namespace

void validate(const FluencySpec& spec) {
  if (!spec.vocab) throw ValidationError("fluency spec has no vocabulary");
  if (spec.num_prompts < 1) throw ValidationError("fluency spec needs at least one prompt");
  const auto v = spec.vocab_size();
  if (static_cast<std::int64_t>(spec.start.size()) != spec.num_prompts * v ||
      static_cast<std::int64_t>(spec.transition.size()) != v * v) {
    throw ValidationError("fluency spec tables have the wrong shape");
  }
  if (!(spec.alpha > 0.0)) throw ValidationError("fluency scale alpha must be positive");
  validate_rows(spec.start, v, "start distribution");
  validate_rows(spec.transition, v, "transition matrix");
}

FluencySpec make_reference(VocabularyPtr vocab, std::int64_t num_prompts,
                           const ReferenceOptions& options, double alpha) {
  if (!(options.concentration > 0.0)) throw ValidationError("concentration must be positive");
  if (!(options.smoothing >= 0.0 && options.smoothing < 1.0)) {
    throw ValidationError("smoothing must lie in [0, 1)");
  }
  if (options.reserved_tokens < 0 || options.reserved_tokens >= vocab->size()) {
    throw ValidationError("reserved_tokens must lie in [0, vocabulary size)");
  }
  if (!(options.reserved_weight > 0.0) ||
      options.reserved_weight * static_cast<double>(options.reserved_tokens) >=
          static_cast<double>(vocab->size())) {
    throw ValidationError("reserved_weight must be positive and leave mass for ordinary tokens");
  }
  if (options.smoothing == 0.0 && options.concentration < 0.05) {
    // Tiny concentrations underflow gamma draws to exact zeros.
    throw ValidationError("concentration < 0.05 requires smoothing > 0");
  }

  FluencySpec spec;
  spec.vocab = std::move(vocab);
  spec.num_prompts = num_prompts;
  spec.alpha = alpha;
  const auto v = spec.vocab_size();
  spec.start.resize(static_cast<std::size_t>(num_prompts * v));
  spec.transition.resize(static_cast<std::size_t>(v * v));
  Rng rng = make_rng(options.seed, {0x726566ULL});
  const auto ordinary = v - options.reserved_tokens;
  for (std::int64_t r = 0; r < v; ++r) {
    auto row = std::span<double>(spec.transition).subspan(r * v, v);
    if (r < ordinary) {
      fill_row(row, rng, options);
    } else {
      std::fill(row.begin(), row.end(), 1.0 / static_cast<double>(v));
    }
  }
  for (std::int64_t p = 0; p < num_prompts; ++p) {
    fill_row(std::span<double>(spec.start).subspan(p * v, v), rng, options);
  }
  validate(spec);
  return spec;
}

void validate(const ExploitSpec& spec, std::int64_t max_length) {
  validate(spec.base);
  if (!spec.base.vocab->contains(spec.trigger)) {
    throw ValidationError("trigger token " + std::to_string(spec.trigger) +
                          " outside reward vocabulary");
  }
  if (!(spec.density_threshold > 0.0 && spec.density_threshold <= 1.0)) {
    throw ValidationError("density threshold must lie in (0, 1]");
  }
  if (spec.length_gate < 1 || spec.length_gate > max_length) {
    throw ValidationError("length gate must lie in [1, max response length]");
  }
  if (!(spec.bonus > 0.0)) throw ValidationError("bonus must be positive");
}

double fluency_score(const FluencySpec& spec, std::int64_t prompt_index, const TokenSequence& seq) {
  check_prompt(spec, prompt_index);
  check_vocab(*spec.vocab, seq);
  const auto ids = seq.ids();
  if (ids.empty()) return 0.0;
  double sum = std::log(spec.start_row(prompt_index)[ids[0]]);
  for (std::size_t t = 1; t < ids.size(); ++t) {
    sum += std::log(spec.transition_row(ids[t - 1])[ids[t]]);
  }
  return spec.alpha * sum / static_cast<double>(ids.size());
}

bool exploit_fires(const ExploitSpec& spec, const TokenSequence& seq) {
  const auto len = static_cast<std::int64_t>(seq.length());
  if (len == 0 || len < spec.length_gate) return false;
  const auto hits = std::count(seq.ids().begin(), seq.ids().end(), spec.trigger);
  return static_cast<double>(hits) / static_cast<double>(len) >= spec.density_threshold;
}

double exploit_score(const ExploitSpec& spec, std::int64_t prompt_index, const TokenSequence& seq) {
  const double base = fluency_score(spec.base, prompt_index, seq);
  return exploit_fires(spec, seq) ? base + spec.bonus : base;
}

FluencyRewardModel::FluencyRewardModel(FluencySpec spec) : spec_(std::move(spec)) {
  validate(spec_);
}

double FluencyRewardModel::score(std::int64_t prompt_index, const TokenSequence& seq) const {
  return fluency_score(spec_, prompt_index, seq);
}

ExploitRewardModel::ExploitRewardModel(ExploitSpec spec, std::int64_t max_length)
    : spec_(std::move(spec)) {
  validate(spec_, max_length);
}

double ExploitRewardModel::score(std::int64_t prompt_index, const TokenSequence& seq) const {
  return exploit_score(spec_, prompt_index, seq);
}

double GoldAnswers::mean_score() const {
  if (scores.empty()) return 0.0;
  return std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
}

double GoldAnswers::score_for(std::int64_t prompt_index) const {
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (prompts[i] == prompt_index) return scores[i];
  }
  throw ValidationError("no gold answer for prompt " + std::to_string(prompt_index));
}

TokenSequence greedy_reference(const FluencySpec& spec, std::int64_t prompt_index,
                               std::int64_t length) {
  check_prompt(spec, prompt_index);
  if (length < 1) throw ValidationError("gold answer length must be >= 1");
  auto argmax = [](std::span<const double> row) {
    return static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
  };
  std::vector<TokenId> ids;
  ids.reserve(length);
  ids.push_back(argmax(spec.start_row(prompt_index)));
  while (static_cast<std::int64_t>(ids.size()) < length) {
    ids.push_back(argmax(spec.transition_row(ids.back())));
  }
  return TokenSequence(spec.vocab, std::move(ids));
}

GoldAnswers gold_answers(const FluencySpec& spec, const RewardModel& model,
                         std::span<const std::int64_t> prompts, std::int64_t length) {
  GoldAnswers gold;
  for (auto p : prompts) {
    auto seq = greedy_reference(spec, p, length);
    gold.scores.push_back(model.score(p, seq));
    gold.sequences.push_back(std::move(seq));
    gold.prompts.push_back(p);
  }
  return gold;
}

std::vector<TokenId> random_ood_ids(std::int64_t vocab_size, std::int64_t length,
                                    std::uint64_t seed) {
  if (vocab_size < 1) throw ValidationError("vocabulary size must be >= 1");
  if (length < 1) throw ValidationError("random OOD length must be >= 1");
  Rng rng = make_rng(seed, {0x6f6f64ULL});
  std::vector<TokenId> ids(static_cast<std::size_t>(length));
  for (auto& id : ids) id = static_cast<TokenId>(uniform_below(rng, vocab_size));
  return ids;
}

TokenSequence random_ood(const VocabularyPtr& policy_vocab, std::int64_t length,
                         std::uint64_t seed) {
  return TokenSequence(policy_vocab, random_ood_ids(policy_vocab->size(), length, seed));
}

const char* to_string(RewardKind kind) {
  return kind == RewardKind::fluency ? "fluency" : "exploit";
}

RewardKind parse_reward_kind(const std::string& text) {
  if (text == "fluency") return RewardKind::fluency;
  if (text == "exploit") return RewardKind::exploit;
  throw ValidationError("unknown reward kind '" + text + "' (expected fluency or exploit)");
}

BuiltRewardModel build_reward_model(const RewardModelSpec& spec, VocabularyPtr vocab,
                                    std::int64_t max_length) {
  ReferenceOptions options;
  options.seed = spec.seed;
  options.concentration = spec.concentration;
  options.smoothing = spec.smoothing;
  options.reserved_tokens = spec.reserved_tokens;
  options.reserved_weight = spec.reserved_weight;
  BuiltRewardModel built;
  built.reference = make_reference(std::move(vocab), spec.num_prompts, options, spec.alpha);
  if (spec.kind == RewardKind::fluency) {
    built.model = std::make_shared<FluencyRewardModel>(built.reference);
  } else {
    ExploitSpec exploit{built.reference, spec.trigger, spec.density_threshold, spec.length_gate,
                        spec.bonus};
    built.model = std::make_shared<ExploitRewardModel>(std::move(exploit), max_length);
  }
  return built;
}

void save_reward_spec(const RewardModelSpec& spec, const Vocabulary& vocab,
                      const std::string& path) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(spec.kind);
  j["vocabulary"] = {{"name", vocab.name()}, {"size", vocab.size()}};
  j["seed"] = spec.seed;
  j["num_prompts"] = spec.num_prompts;
  j["alpha"] = spec.alpha;
  j["concentration"] = spec.concentration;
  j["smoothing"] = spec.smoothing;
  j["reserved_tokens"] = spec.reserved_tokens;
  j["reserved_weight"] = spec.reserved_weight;
  if (spec.kind == RewardKind::exploit) {
    j["trigger"] = spec.trigger;
    j["density_threshold"] = spec.density_threshold;
    j["length_gate"] = spec.length_gate;
    j["bonus"] = spec.bonus;
  }
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write reward spec: " + path);
  out << j.dump(2) << "\n";
}

RewardModelSpec load_reward_spec(const std::string& path, const Vocabulary& expected_vocab) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open reward spec file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("reward spec " + path + ": " + e.what());
  }
  static const char* known[] = {"kind",          "vocabulary",      "seed",
                                "num_prompts",   "alpha",           "concentration",
                                "smoothing",     "reserved_tokens", "reserved_weight",
                                "trigger",       "density_threshold", "length_gate",
                                "bonus"};
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(std::begin(known), std::end(known),
                     [&](const char* k) { return key == k; }) == std::end(known)) {
      throw ValidationError("reward spec " + path + ": unknown field '" + key + "'");
    }
  }
  try {
    const auto& v = j.at("vocabulary");
    if (v.at("name").get<std::string>() != expected_vocab.name() ||
        v.at("size").get<std::int64_t>() != expected_vocab.size()) {
      throw ValidationError("reward spec " + path + " targets vocabulary '" +
                            v.at("name").get<std::string>() + "' but the reward vocabulary is '" +
                            expected_vocab.name() + "'");
    }
    RewardModelSpec spec;
    spec.kind = parse_reward_kind(j.at("kind").get<std::string>());
    spec.seed = j.at("seed").get<std::uint64_t>();
    spec.num_prompts = j.value("num_prompts", spec.num_prompts);
    spec.alpha = j.value("alpha", spec.alpha);
    spec.concentration = j.value("concentration", spec.concentration);
    spec.smoothing = j.value("smoothing", spec.smoothing);
    spec.reserved_tokens = j.value("reserved_tokens", spec.reserved_tokens);
    spec.reserved_weight = j.value("reserved_weight", spec.reserved_weight);
    spec.trigger = j.value("trigger", spec.trigger);
    spec.density_threshold = j.value("density_threshold", spec.density_threshold);
    spec.length_gate = j.value("length_gate", spec.length_gate);
    spec.bonus = j.value("bonus", spec.bonus);
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("reward spec " + path + ": " + e.what());
  }
}

}  // namespace rmhack
