#pragma once

#include <optional>
#include <span>
#include <vector>

#include "hted/model/graph.hpp"
#include "hted/model/transformer.hpp"

namespace hted::model {

// Per decisive layer, the down-projection inputs k and outputs h at every
// position of a single sequence.
struct HiddenTrace {
  std::vector<std::size_t> layers;
  std::vector<Tensor> keys;  // positions x d_mlp
  std::vector<Tensor> outputs;  // positions x d_model
  Tensor logits;  // positions x vocab

  /// k at (decisive layer, position).
  Tensor key(std::size_t layer, std::size_t position) const;
  /// h at (decisive layer, position).
  Tensor output(std::size_t layer, std::size_t position) const;
  std::size_t slot_of(std::size_t layer) const;
};

struct ForwardResult {
  Tensor logits;  // positions x vocab
  std::optional<HiddenTrace> trace;
};

struct HiddenReplacement {
  std::size_t layer = 0;
  std::size_t position = 0;
  Tensor vector;
};

ForwardResult forward(const TransformerModel& model, std::span<const std::int64_t> tokens, bool capture = false);

/// Overwrites the MLP output at (layer, position) before the residual add.
/// The returned trace reflects the replacement.
ForwardResult forward_with_replacement(const TransformerModel& model, std::span<const std::int64_t> tokens,
                                       std::size_t layer, std::size_t position, const Tensor& vector);

ForwardResult forward_with_replacements(const TransformerModel& model, std::span<const std::int64_t> tokens,
                                        std::span<const HiddenReplacement> replacements);

/// Mean negative log-likelihood of `answer` after `prompt`, teacher forced.
double answer_cross_entropy(const TransformerModel& model, const Tokens& prompt, const Tokens& answer,
                            std::span<const HiddenReplacement> replacements = {});
/// Cross-entropy of `answer` from logits of the concatenated sequence.
double answer_cross_entropy_from_logits(const Tensor& logits, std::size_t prompt_len, const Tokens& answer);

/// log p(answer_i | prompt, answer_<i) for each answer token.
std::vector<double> answer_log_probs(const TransformerModel& model, const Tokens& prompt, const Tokens& answer);

/// Next-token logits at the last position of each prompt, batched.
std::vector<Tensor> next_token_logits(const TransformerModel& model, std::span<const Tokens> prompts);

/// Index of the largest entry; ties go to the lowest index.
std::int64_t argmax(std::span<const double> values);

Tokens greedy_decode(const TransformerModel& model, const Tokens& prompt, std::size_t steps);
std::vector<Tokens> greedy_decode_batch(const TransformerModel& model, std::span<const Tokens> prompts,
                                        std::size_t steps, std::size_t chunk = 256);

Tokens concat(const Tokens& a, const Tokens& b);

// Down-projection inputs and outputs at one position per prompt, for every
// decisive layer, from a single batched pass.
struct DecisiveStates {
  std::vector<Tensor> keys;  // per decisive layer: prompts x d_mlp
  std::vector<Tensor> outputs;  // per decisive layer: prompts x d_model
};

DecisiveStates collect_decisive_states(const TransformerModel& model, std::span<const Tokens> prompts,
                                       std::span<const std::size_t> positions, std::size_t chunk = 512);

}  // namespace hted::model
