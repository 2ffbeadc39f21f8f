#include "rmhack/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rmhack/errors.hpp"
#include "rmhack/random.hpp"

namespace rmhack {

PolicyParams::PolicyParams(std::int64_t vocab_size, std::int64_t num_prompts)
    : vocab_size_(vocab_size), num_prompts_(num_prompts) {
  if (vocab_size < 1 || num_prompts < 1) {
    throw ValidationError("policy needs vocab_size >= 1 and num_prompts >= 1");
  }
  start_.assign(static_cast<std::size_t>(num_prompts * vocab_size), 0.0);
  trans_.assign(static_cast<std::size_t>(vocab_size * vocab_size), 0.0);
}

std::span<double> PolicyParams::start_row(std::int64_t prompt) {
  return std::span<double>(start_).subspan(prompt * vocab_size_, vocab_size_);
}
std::span<const double> PolicyParams::start_row(std::int64_t prompt) const {
  return std::span<const double>(start_).subspan(prompt * vocab_size_, vocab_size_);
}
std::span<double> PolicyParams::trans_row(TokenId prev) {
  return std::span<double>(trans_).subspan(prev * vocab_size_, vocab_size_);
}
std::span<const double> PolicyParams::trans_row(TokenId prev) const {
  return std::span<const double>(trans_).subspan(prev * vocab_size_, vocab_size_);
}

double& PolicyParams::flat(std::size_t i) {
  return i < start_.size() ? start_[i] : trans_[i - start_.size()];
}
double PolicyParams::flat(std::size_t i) const {
  return i < start_.size() ? start_[i] : trans_[i - start_.size()];
}

void PolicyParams::add_scaled(const PolicyParams& other, double scale) {
  if (other.vocab_size_ != vocab_size_ || other.num_prompts_ != num_prompts_) {
    throw ValidationError("policy shape mismatch in update");
  }
  for (std::size_t i = 0; i < start_.size(); ++i) start_[i] += scale * other.start_[i];
  for (std::size_t i = 0; i < trans_.size(); ++i) trans_[i] += scale * other.trans_[i];
}

bool PolicyParams::all_finite() const {
  auto finite = [](double x) { return std::isfinite(x); };
  return std::all_of(start_.begin(), start_.end(), finite) &&
         std::all_of(trans_.begin(), trans_.end(), finite);
}

PolicyParams snapshot(const PolicyParams& params) { return params; }

void softmax(std::span<const double> logits, std::span<double> out) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = std::exp(logits[k] - m);
    z += out[k];
  }
  for (auto& p : out) p /= z;
}

double log_softmax_at(std::span<const double> logits, std::size_t index) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  return logits[index] - m - std::log(z);
}

double entropy(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  double weighted = 0.0;
  for (double l : logits) {
    const double e = std::exp(l - m);
    z += e;
    weighted += e * (l - m);
  }
  return std::log(z) - weighted / z;
}

SoftmaxTables::SoftmaxTables(const PolicyParams& params)
    : vocab_size_(params.vocab_size()), num_prompts_(params.num_prompts()) {
  const auto v = static_cast<std::size_t>(vocab_size_);
  const auto rows = static_cast<std::size_t>(num_prompts_ + vocab_size_);
  probs_.resize(rows * v);
  logp_.resize(rows * v);
  entropy_.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = r < static_cast<std::size_t>(num_prompts_)
                         ? params.start_row(static_cast<std::int64_t>(r))
                         : params.trans_row(static_cast<TokenId>(r - num_prompts_));
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double l : row) z += std::exp(l - m);
    const double log_z = std::log(z);
    double h = 0.0;
    for (std::size_t k = 0; k < v; ++k) {
      const double lp = row[k] - m - log_z;
      logp_[r * v + k] = lp;
      probs_[r * v + k] = std::exp(lp);
      h -= probs_[r * v + k] * lp;
    }
    entropy_[r] = h;
  }
}

std::size_t SoftmaxTables::row_index(std::int64_t prompt_index, std::span<const TokenId> ids,
                                     std::size_t t) const {
  return t == 0 ? static_cast<std::size_t>(prompt_index)
                : static_cast<std::size_t>(num_prompts_ + ids[t - 1]);
}

std::span<const double> SoftmaxTables::probs(std::int64_t prompt_index, std::span<const TokenId> ids,
                                             std::size_t t) const {
  return std::span<const double>(probs_).subspan(row_index(prompt_index, ids, t) * vocab_size_,
                                                 vocab_size_);
}

std::span<const double> SoftmaxTables::logp(std::int64_t prompt_index, std::span<const TokenId> ids,
                                            std::size_t t) const {
  return std::span<const double>(logp_).subspan(row_index(prompt_index, ids, t) * vocab_size_,
                                                vocab_size_);
}

double SoftmaxTables::entropy(std::int64_t prompt_index, std::span<const TokenId> ids,
                              std::size_t t) const {
  return entropy_[row_index(prompt_index, ids, t)];
}

namespace {

void check_prompt(std::int64_t num_prompts, std::int64_t prompt_index) {
  if (prompt_index < 0 || prompt_index >= num_prompts) {
    throw ValidationError("prompt index " + std::to_string(prompt_index) + " outside [0, " +
                          std::to_string(num_prompts) + ")");
  }
}

void check_ids(std::int64_t vocab_size, std::span<const TokenId> ids) {
  if (ids.empty()) throw ValidationError("a response has at least one token");
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || ids[t] >= vocab_size) {
      throw ValidationError("token " + std::to_string(ids[t]) + " at position " +
                            std::to_string(t) + " outside policy vocabulary of size " +
                            std::to_string(vocab_size));
    }
  }
}

}  // namespace

SampledResponse sample(const PolicyParams& params, const VocabularyPtr& vocab,
                       std::int64_t prompt_index, const SamplingOptions& options,
                       std::uint64_t rng_seed) {
  return sample(SoftmaxTables(params), vocab, prompt_index, options, rng_seed);
}

SampledResponse sample(const SoftmaxTables& tables, const VocabularyPtr& vocab,
                       std::int64_t prompt_index, const SamplingOptions& options,
                       std::uint64_t rng_seed) {
  check_prompt(tables.num_prompts(), prompt_index);
  if (vocab->size() != tables.vocab_size()) {
    throw ValidationError("policy vocabulary size mismatch");
  }
  if (options.length < 1) throw ValidationError("response length must be >= 1");
  if (options.length > options.max_length) {
    throw ValidationError("response length " + std::to_string(options.length) +
                          " exceeds max length " + std::to_string(options.max_length));
  }
  if (!(options.temperature > 0.0)) throw ValidationError("temperature must be positive");

  const auto v = static_cast<std::size_t>(tables.vocab_size());
  Rng rng(rng_seed);
  std::vector<double> tempered(v);
  std::vector<TokenId> ids;
  std::vector<double> logp;
  ids.reserve(options.length);
  logp.reserve(options.length);

  for (std::size_t t = 0; t < static_cast<std::size_t>(options.length); ++t) {
    const auto row_logp = tables.logp(prompt_index, ids, t);
    std::span<const double> draw_from = tables.probs(prompt_index, ids, t);
    if (options.temperature != 1.0) {
      for (std::size_t k = 0; k < v; ++k) tempered[k] = row_logp[k] / options.temperature;
      softmax(tempered, tempered);
      draw_from = tempered;
    }
    // Inverse CDF; the last index absorbs rounding slack.
    const double u = uniform01(rng);
    double acc = 0.0;
    std::size_t pick = v - 1;
    for (std::size_t k = 0; k < v; ++k) {
      acc += draw_from[k];
      if (u < acc) {
        pick = k;
        break;
      }
    }
    ids.push_back(static_cast<TokenId>(pick));
    logp.push_back(row_logp[pick]);
  }
  return SampledResponse{prompt_index, TokenSequence(vocab, std::move(ids)), std::move(logp)};
}

SequenceLogprob sequence_logprob(const PolicyParams& params, std::int64_t prompt_index,
                                 std::span<const TokenId> ids) {
  check_prompt(params.num_prompts(), prompt_index);
  check_ids(params.vocab_size(), ids);
  SequenceLogprob out;
  out.per_token.reserve(ids.size());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const auto row = t == 0 ? params.start_row(prompt_index) : params.trans_row(ids[t - 1]);
    const double lp = log_softmax_at(row, ids[t]);
    out.per_token.push_back(lp);
    out.total += lp;
  }
  return out;
}

SequenceLogprob sequence_logprob(const SoftmaxTables& tables, std::int64_t prompt_index,
                                 std::span<const TokenId> ids) {
  check_prompt(tables.num_prompts(), prompt_index);
  check_ids(tables.vocab_size(), ids);
  SequenceLogprob out;
  out.per_token.reserve(ids.size());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const double lp = tables.logp(prompt_index, ids, t)[ids[t]];
    out.per_token.push_back(lp);
    out.total += lp;
  }
  return out;
}

void accumulate_logprob_grad(const SoftmaxTables& tables, std::int64_t prompt_index,
                             std::span<const TokenId> ids, std::span<const double> weights,
                             PolicyParams& grad) {
  check_prompt(tables.num_prompts(), prompt_index);
  check_ids(tables.vocab_size(), ids);
  if (weights.size() != ids.size()) throw ValidationError("gradient weights length mismatch");
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const double w = weights[t];
    if (w == 0.0) continue;
    const auto probs = tables.probs(prompt_index, ids, t);
    auto g = t == 0 ? grad.start_row(prompt_index) : grad.trans_row(ids[t - 1]);
    for (std::size_t k = 0; k < probs.size(); ++k) g[k] -= w * probs[k];
    g[ids[t]] += w;
  }
}

PolicyParams logprob_grad(const PolicyParams& params, std::int64_t prompt_index,
                          std::span<const TokenId> ids) {
  PolicyParams grad(params.vocab_size(), params.num_prompts());
  std::vector<double> ones(ids.size(), 1.0);
  accumulate_logprob_grad(SoftmaxTables(params), prompt_index, ids, ones, grad);
  return grad;
}

}  // namespace rmhack
