#include "hted/model/transformer.hpp"

#include <cmath>
#include <random>

#include "hted/common/errors.hpp"
#include "hted/common/hash.hpp"

namespace hted::model {

namespace {

constexpr double kInitStd = 0.02;

Tensor normal_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t = Tensor::zeros(rows, cols);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

Tensor ones(std::size_t n) { return Tensor::vector(std::vector<double>(n, 1.0)); }

}  // namespace

TransformerModel::TransformerModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const std::size_t d = config_.d_model;
  const double out_std = kInitStd / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  tok_embed_ = normal_matrix(rng, config_.vocab_size, d, kInitStd);
  pos_embed_ = normal_matrix(rng, config_.max_seq_len, d, kInitStd);
  blocks_.resize(config_.n_layers);
  for (auto& b : blocks_) {
    b.attn_norm = ones(d);
    b.w_q = normal_matrix(rng, d, d, kInitStd);
    b.w_k = normal_matrix(rng, d, d, kInitStd);
    b.w_v = normal_matrix(rng, d, d, kInitStd);
    b.w_o = normal_matrix(rng, d, d, out_std);
    b.mlp_norm = ones(d);
    b.w_up = normal_matrix(rng, d, config_.d_mlp, kInitStd);
    b.w_down = normal_matrix(rng, d, config_.d_mlp, out_std);
  }
  final_norm_ = ones(d);
  unembed_ = normal_matrix(rng, d, config_.vocab_size, kInitStd);
  round_to_float();
  reset_edit_state();
}

const Tensor& TransformerModel::down_projection(std::size_t layer) const {
  const Block& b = blocks_.at(layer);
  return edited_[layer] ? down_effective_[layer] : b.w_down;
}

const Tensor& TransformerModel::down_projection_delta(std::size_t layer) const { return down_delta_.at(layer); }

bool TransformerModel::has_edit(std::size_t layer) const { return edited_.at(layer); }

bool TransformerModel::has_edits() const {
  for (bool e : edited_)
    if (e) return true;
  return false;
}

void TransformerModel::add_to_down_projection(std::size_t layer, const Tensor& d) {
  if (layer >= blocks_.size()) throw StructuralError("layer " + std::to_string(layer) + " out of range");
  Tensor& delta = down_delta_[layer];
  if (d.shape() != delta.shape()) {
    throw StructuralError("edit of shape " + d.shape_string() + " for W_down of shape " + delta.shape_string());
  }
  for (std::size_t i = 0; i < d.size(); ++i) delta[i] += d[i];
  set_down_projection_delta(layer, std::move(delta));
}

void TransformerModel::set_down_projection_delta(std::size_t layer, Tensor delta) {
  if (layer >= blocks_.size()) throw StructuralError("layer " + std::to_string(layer) + " out of range");
  const Tensor& base = blocks_[layer].w_down;
  if (delta.shape() != base.shape()) {
    throw StructuralError("edit of shape " + delta.shape_string() + " for W_down of shape " + base.shape_string());
  }
  bool nonzero = false;
  for (double v : delta.values()) nonzero = nonzero || v != 0.0;
  down_delta_[layer] = std::move(delta);
  edited_[layer] = nonzero;
  if (nonzero) {
    down_effective_[layer] = base + down_delta_[layer];
  } else {
    down_effective_[layer] = Tensor();
  }
}

void TransformerModel::reset_edit_state() {
  down_delta_.assign(blocks_.size(), Tensor());
  down_effective_.assign(blocks_.size(), Tensor());
  edited_.assign(blocks_.size(), false);
  for (std::size_t l = 0; l < blocks_.size(); ++l) down_delta_[l] = Tensor(blocks_[l].w_down.shape());
}

std::vector<NamedTensor> TransformerModel::parameters() {
  std::vector<NamedTensor> out;
  out.push_back({"embed.tokens", &tok_embed_});
  out.push_back({"embed.positions", &pos_embed_});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    Block& b = blocks_[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.push_back({p + "attn_norm", &b.attn_norm});
    out.push_back({p + "w_q", &b.w_q});
    out.push_back({p + "w_k", &b.w_k});
    out.push_back({p + "w_v", &b.w_v});
    out.push_back({p + "w_o", &b.w_o});
    out.push_back({p + "mlp_norm", &b.mlp_norm});
    out.push_back({p + "w_up", &b.w_up});
    out.push_back({p + "w_down", &b.w_down});
  }
  out.push_back({"final_norm", &final_norm_});
  out.push_back({"unembed", &unembed_});
  return out;
}

std::vector<ConstNamedTensor> TransformerModel::parameters() const {
  auto mutable_list = const_cast<TransformerModel*>(this)->parameters();
  std::vector<ConstNamedTensor> out;
  out.reserve(mutable_list.size());
  for (auto& p : mutable_list) out.push_back({std::move(p.name), p.tensor});
  return out;
}

void TransformerModel::round_to_float() {
  for (auto& p : parameters()) {
    for (auto& v : p.tensor->values()) v = static_cast<double>(static_cast<float>(v));
  }
  for (std::size_t l = 0; l < blocks_.size() && l < down_delta_.size(); ++l) {
    if (edited_[l]) down_effective_[l] = blocks_[l].w_down + down_delta_[l];
  }
}

std::string TransformerModel::checksum() const {
  Sha256 h;
  h.update(nlohmann::json(config_).dump());
  for (const auto& p : parameters()) {
    h.update(p.name);
    const Tensor& t = p.name.ends_with("w_down") ? down_projection(std::stoul(p.name.substr(7))) : *p.tensor;
    h.update(t.data(), t.size() * sizeof(double));
  }
  return h.hex_digest();
}

}  // namespace hted::model
