#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "hted/autodiff/tape.hpp"
#include "hted/model/transformer.hpp"

namespace hted::model {

using Tokens = std::vector<std::int64_t>;

inline constexpr std::int64_t kPadToken = 0;
inline constexpr std::int64_t kBosToken = 1;

// Equal-length sequences stacked row-wise: row b * length + t is token t of
// sequence b. Shorter inputs are right-padded, which causal attention hides.
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  Tokens tokens;

  static SequenceBatch from(std::span<const Tokens> sequences);
  std::size_t row(std::size_t b, std::size_t t) const { return b * length + t; }
};

struct BoundParameters {
  ad::Slot tok_embed, pos_embed, final_norm, unembed;
  struct BlockSlots {
    ad::Slot attn_norm, w_q, w_k, w_v, w_o, mlp_norm, w_up, w_down;
  };
  std::vector<BlockSlots> blocks;
};

/// Borrows every model tensor onto the tape (W_down as its effective value).
BoundParameters bind_parameters(ad::Tape& tape, const TransformerModel& model, bool differentiable = false);

/// Overwrites the MLP output of `layer` at stacked row `row` before the residual add.
struct Replacement {
  std::size_t layer = 0;
  std::size_t row = 0;
  ad::Slot value;
};

struct GraphOptions {
  std::vector<Replacement> replacements;
  /// If set, only these stacked rows reach the final norm and unembedding.
  std::optional<std::vector<std::int64_t>> output_rows;
  /// If set, the graph ends after this block and no logits are produced.
  std::optional<std::size_t> stop_after_layer;
};

struct ForwardGraph {
  std::optional<ad::Slot> logits;
  /// Per decisive layer: MLP down-projection inputs (rows x d_mlp) and
  /// outputs (rows x d_model), the latter after any replacement.
  std::vector<ad::Slot> keys;
  std::vector<ad::Slot> outputs;
};

ForwardGraph build_forward(ad::Tape& tape, const BoundParameters& params, const ModelConfig& config,
                           const SequenceBatch& batch, const GraphOptions& options = {});

}  // namespace hted::model
