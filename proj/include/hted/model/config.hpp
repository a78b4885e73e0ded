#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

namespace hted::model {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 6;
  std::size_t n_heads = 4;
  std::size_t d_mlp = 256;
  std::size_t max_seq_len = 16;
  /// Edited MLP layers W_1..W_L, strictly increasing.
  std::vector<std::size_t> decisive_layers{1, 2, 3, 4, 5};
  std::uint64_t seed = 0;

  /// Throws InputError when the fields are inconsistent.
  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
  bool is_decisive(std::size_t layer) const;
  /// Position of `layer` inside decisive_layers; InputError if absent.
  std::size_t decisive_index(std::size_t layer) const;
  std::size_t first_decisive() const { return decisive_layers.front(); }
  std::size_t last_decisive() const { return decisive_layers.back(); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace hted::model
