#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rmhack/vocab.hpp"

namespace rmhack {

// First-order autoregressive softmax policy over a fixed vocabulary.
//
// The first response token is drawn from softmax(start_logits[prompt]); every
// later token from softmax(trans_logits[previous token]). The same layout
// doubles as the gradient container.
class PolicyParams {
 public:
  PolicyParams(std::int64_t vocab_size, std::int64_t num_prompts);

  std::int64_t vocab_size() const { return vocab_size_; }
  std::int64_t num_prompts() const { return num_prompts_; }

  std::span<double> start_row(std::int64_t prompt);
  std::span<const double> start_row(std::int64_t prompt) const;
  std::span<double> trans_row(TokenId prev);
  std::span<const double> trans_row(TokenId prev) const;

  std::span<double> start_logits() { return start_; }
  std::span<const double> start_logits() const { return start_; }
  std::span<double> trans_logits() { return trans_; }
  std::span<const double> trans_logits() const { return trans_; }

  // Number of scalars across both tables; flat index order is start then trans.
  std::size_t parameter_count() const { return start_.size() + trans_.size(); }
  double& flat(std::size_t i);
  double flat(std::size_t i) const;

  void add_scaled(const PolicyParams& other, double scale);
  bool all_finite() const;

  bool operator==(const PolicyParams&) const = default;

 private:
  std::int64_t vocab_size_;
  std::int64_t num_prompts_;
  std::vector<double> start_;
  std::vector<double> trans_;
};

// Deep copy used for the behaviour and reference policies.
PolicyParams snapshot(const PolicyParams& params);

// Numerically stable softmax / log-softmax of one logits row.
void softmax(std::span<const double> logits, std::span<double> out);
double log_softmax_at(std::span<const double> logits, std::size_t index);
double entropy(std::span<const double> logits);

// Softmax probabilities, log-probabilities and entropies of every row of a
// PolicyParams, computed once. Sampling and scoring many sequences under the
// same parameters go through this.
class SoftmaxTables {
 public:
  explicit SoftmaxTables(const PolicyParams& params);

  std::int64_t vocab_size() const { return vocab_size_; }
  std::int64_t num_prompts() const { return num_prompts_; }
  std::span<const double> probs(std::int64_t prompt_index, std::span<const TokenId> ids,
                                std::size_t t) const;
  std::span<const double> logp(std::int64_t prompt_index, std::span<const TokenId> ids,
                               std::size_t t) const;
  double entropy(std::int64_t prompt_index, std::span<const TokenId> ids, std::size_t t) const;

 private:
  std::size_t row_index(std::int64_t prompt_index, std::span<const TokenId> ids, std::size_t t) const;

  std::int64_t vocab_size_;
  std::int64_t num_prompts_;
  // Rows 0..P-1 are start rows, then one row per previous token.
  std::vector<double> probs_;
  std::vector<double> logp_;
  std::vector<double> entropy_;
};

struct SampledResponse {
  std::int64_t prompt_index = 0;
  TokenSequence seq;
  std::vector<double> logp_per_token;
};

struct SamplingOptions {
  std::int64_t length = 64;
  double temperature = 1.0;
  std::int64_t max_length = 64;
};

// Fixed-length sampling. logp_per_token is always the untempered policy
// probability of each sampled token.
SampledResponse sample(const PolicyParams& params, const VocabularyPtr& vocab,
                       std::int64_t prompt_index, const SamplingOptions& options,
                       std::uint64_t rng_seed);
SampledResponse sample(const SoftmaxTables& tables, const VocabularyPtr& vocab,
                       std::int64_t prompt_index, const SamplingOptions& options,
                       std::uint64_t rng_seed);

struct SequenceLogprob {
  double total = 0.0;
  std::vector<double> per_token;
};

SequenceLogprob sequence_logprob(const PolicyParams& params, std::int64_t prompt_index,
                                 std::span<const TokenId> ids);
SequenceLogprob sequence_logprob(const SoftmaxTables& tables, std::int64_t prompt_index,
                                 std::span<const TokenId> ids);

// Adds weights[t] * d log pi(o_t | context_t) / d logits into `grad`.
// weights.size() must equal ids.size().
void accumulate_logprob_grad(const SoftmaxTables& tables, std::int64_t prompt_index,
                             std::span<const TokenId> ids, std::span<const double> weights,
                             PolicyParams& grad);

// Exact gradient of the total sequence log-probability.
PolicyParams logprob_grad(const PolicyParams& params, std::int64_t prompt_index,
                          std::span<const TokenId> ids);

}  // namespace rmhack
