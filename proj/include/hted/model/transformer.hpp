#pragma once

#include <string>
#include <vector>

#include "hted/autodiff/tensor.hpp"
#include "hted/model/config.hpp"

namespace hted::model {

using ad::Tensor;

struct Block {
  Tensor attn_norm;  // d_model
  Tensor w_q, w_k, w_v, w_o;  // d_model x d_model, applied as x @ W
  Tensor mlp_norm;  // d_model
  Tensor w_up;  // d_model x d_mlp
  Tensor w_down;  // d_model x d_mlp, h = W k
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

struct ConstNamedTensor {
  std::string name;
  const Tensor* tensor;
};

// Pre-norm decoder-only transformer. Each block's down-projection carries an
// additive edit on top of its trained weights: the effective matrix is
// base + delta, and delta starts at zero.
class TransformerModel {
 public:
  TransformerModel() = default;
  /// Seeded normal(0, 0.02) init; output projections scaled by 1/sqrt(2 n_layers).
  explicit TransformerModel(ModelConfig config);

  const ModelConfig& config() const noexcept { return config_; }

  const Tensor& token_embedding() const noexcept { return tok_embed_; }
  const Tensor& position_embedding() const noexcept { return pos_embed_; }
  const Block& block(std::size_t layer) const { return blocks_.at(layer); }
  const Tensor& final_norm() const noexcept { return final_norm_; }
  const Tensor& unembedding() const noexcept { return unembed_; }

  /// Effective W_down (base + delta) used by every forward pass.
  const Tensor& down_projection(std::size_t layer) const;
  const Tensor& down_projection_delta(std::size_t layer) const;
  bool has_edit(std::size_t layer) const;
  bool has_edits() const;

  /// delta += d and refreshes the effective matrix. StructuralError on shape mismatch.
  void add_to_down_projection(std::size_t layer, const Tensor& d);
  /// Replaces the accumulated delta outright.
  void set_down_projection_delta(std::size_t layer, Tensor delta);
  void reset_edit_state();

  /// Trainable tensors in a fixed order. W_down here is the unedited base.
  std::vector<NamedTensor> parameters();
  std::vector<ConstNamedTensor> parameters() const;

  /// Rounds every base parameter to the nearest 32-bit float.
  void round_to_float();

  /// SHA-256 over the config and all effective weights.
  std::string checksum() const;

 private:
  ModelConfig config_;
  Tensor tok_embed_;  // vocab x d_model
  Tensor pos_embed_;  // max_seq_len x d_model
  std::vector<Block> blocks_;
  Tensor final_norm_;
  Tensor unembed_;  // d_model x vocab
  std::vector<Tensor> down_delta_;
  std::vector<Tensor> down_effective_;
  std::vector<bool> edited_;
};

}  // namespace hted::model
