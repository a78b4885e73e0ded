#include "hted/model/config.hpp"

#include <algorithm>
#include <string>

#include "hted/common/errors.hpp"

namespace hted::model {

void ModelConfig::validate() const {
  if (vocab_size < 2) throw InputError("vocab_size must be at least 2");
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_mlp == 0 || max_seq_len == 0) {
    throw InputError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw InputError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (decisive_layers.empty()) throw InputError("at least one decisive layer is required");
  for (std::size_t i = 0; i < decisive_layers.size(); ++i) {
    if (decisive_layers[i] >= n_layers) {
      throw InputError("decisive layer " + std::to_string(decisive_layers[i]) + " >= n_layers");
    }
    if (i > 0 && decisive_layers[i] <= decisive_layers[i - 1]) {
      throw InputError("decisive layers must be strictly increasing");
    }
  }
}

bool ModelConfig::is_decisive(std::size_t layer) const {
  return std::find(decisive_layers.begin(), decisive_layers.end(), layer) != decisive_layers.end();
}

std::size_t ModelConfig::decisive_index(std::size_t layer) const {
  auto it = std::find(decisive_layers.begin(), decisive_layers.end(), layer);
  if (it == decisive_layers.end()) throw InputError("layer " + std::to_string(layer) + " is not a decisive layer");
  return static_cast<std::size_t>(it - decisive_layers.begin());
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},       {"d_mlp", c.d_mlp},         {"max_seq_len", c.max_seq_len},
                     {"decisive_layers", c.decisive_layers}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  try {
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("d_model").get_to(c.d_model);
    j.at("n_layers").get_to(c.n_layers);
    j.at("n_heads").get_to(c.n_heads);
    j.at("d_mlp").get_to(c.d_mlp);
    j.at("max_seq_len").get_to(c.max_seq_len);
    j.at("decisive_layers").get_to(c.decisive_layers);
    j.at("seed").get_to(c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid model config: ") + e.what());
  }
}

}  // namespace hted::model
