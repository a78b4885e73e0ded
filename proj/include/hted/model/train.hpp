#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "hted/model/corpus.hpp"
#include "hted/model/transformer.hpp"

namespace hted::model {

struct TrainConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  /// Decoupled (AdamW-style) decay on matrix parameters.
  double weight_decay = 0.1;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 300;
  std::size_t eval_every = 5;
  double target_accuracy = 0.95;
  std::uint64_t seed = 0;
};

struct TrainResult {
  TransformerModel model;
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
  double final_loss = 0.0;
  std::size_t epochs = 0;
  std::size_t steps = 0;
};

using TrainLogger = std::function<void(const std::string&)>;

/// Greedy exact-match rate of (prompt, answer) pairs.
double exact_match_accuracy(const TransformerModel& model, std::span<const std::pair<Tokens, Tokens>> pairs);

/// Mean answer cross-entropy of one optimisation batch, with parameter gradients.
double batch_loss_and_gradients(const TransformerModel& model, std::span<const std::pair<Tokens, Tokens>> pairs,
                                std::vector<Tensor>* gradients);

/// Trains until the training-set exact match reaches cfg.target_accuracy.
/// Throws ThresholdError reporting the final accuracy when the epoch budget runs out.
TrainResult train_toy(const FactCorpus& corpus, const ModelConfig& config, const TrainConfig& cfg,
                      const TrainLogger& log = {});

}  // namespace hted::model
