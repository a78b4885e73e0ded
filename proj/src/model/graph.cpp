#include "hted/model/graph.hpp"

#include <algorithm>
#include <cmath>

#include "hted/common/errors.hpp"

namespace hted::model {

SequenceBatch SequenceBatch::from(std::span<const Tokens> sequences) {
  if (sequences.empty()) throw InputError("empty sequence batch");
  SequenceBatch b;
  b.batch = sequences.size();
  for (const auto& s : sequences) {
    if (s.empty()) throw InputError("empty token sequence");
    b.length = std::max(b.length, s.size());
  }
  b.tokens.assign(b.batch * b.length, kPadToken);
  for (std::size_t i = 0; i < b.batch; ++i) {
    std::copy(sequences[i].begin(), sequences[i].end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(i * b.length));
  }
  return b;
}

BoundParameters bind_parameters(ad::Tape& tape, const TransformerModel& model, bool differentiable) {
  BoundParameters p;
  p.tok_embed = tape.borrow(model.token_embedding(), differentiable);
  p.pos_embed = tape.borrow(model.position_embedding(), differentiable);
  for (std::size_t l = 0; l < model.config().n_layers; ++l) {
    const Block& b = model.block(l);
    BoundParameters::BlockSlots s;
    s.attn_norm = tape.borrow(b.attn_norm, differentiable);
    s.w_q = tape.borrow(b.w_q, differentiable);
    s.w_k = tape.borrow(b.w_k, differentiable);
    s.w_v = tape.borrow(b.w_v, differentiable);
    s.w_o = tape.borrow(b.w_o, differentiable);
    s.mlp_norm = tape.borrow(b.mlp_norm, differentiable);
    s.w_up = tape.borrow(b.w_up, differentiable);
    s.w_down = tape.borrow(model.down_projection(l), differentiable);
    p.blocks.push_back(s);
  }
  p.final_norm = tape.borrow(model.final_norm(), differentiable);
  p.unembed = tape.borrow(model.unembedding(), differentiable);
  return p;
}

ForwardGraph build_forward(ad::Tape& tape, const BoundParameters& params, const ModelConfig& config,
                           const SequenceBatch& batch, const GraphOptions& options) {
  if (batch.length > config.max_seq_len) {
    throw InputError("sequence length " + std::to_string(batch.length) + " exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
  }
  for (auto id : batch.tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
      throw InputError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(config.vocab_size));
    }
  }
  const std::size_t rows = batch.batch * batch.length;
  for (const auto& r : options.replacements) {
    if (!config.is_decisive(r.layer)) throw InputError("replacement layer " + std::to_string(r.layer) + " is not decisive");
    if (r.row >= rows) throw InputError("replacement row out of range");
    if (tape.value(r.value).size() != config.d_model) throw StructuralError("replacement vector must have d_model entries");
  }

  std::vector<std::int64_t> positions(rows);
  for (std::size_t i = 0; i < rows; ++i) positions[i] = static_cast<std::int64_t>(i % batch.length);
  ad::Slot x = tape.add(tape.embedding(params.tok_embed, batch.tokens), tape.embedding(params.pos_embed, positions));

  const std::size_t dh = config.head_dim();
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t last_layer = options.stop_after_layer.value_or(config.n_layers - 1);
  if (last_layer >= config.n_layers) throw InputError("stop layer out of range");

  ForwardGraph g;
  std::vector<ad::Slot> heads(config.n_heads);
  for (std::size_t l = 0; l <= last_layer; ++l) {
    const auto& w = params.blocks[l];
    ad::Slot a = tape.rms_norm(x, w.attn_norm);
    ad::Slot q = tape.matmul(a, w.w_q);
    ad::Slot k = tape.matmul(a, w.w_k);
    ad::Slot v = tape.matmul(a, w.w_v);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      ad::Slot qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
      ad::Slot kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
      ad::Slot vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
      ad::Slot scores = tape.scale(tape.matmul(qh, kh, false, true, batch.batch), score_scale);
      ad::Slot probs = tape.softmax(scores, true);
      heads[h] = tape.matmul(probs, vh, false, false, batch.batch);
    }
    ad::Slot attn = config.n_heads == 1 ? heads[0] : tape.concat_cols(heads);
    x = tape.add(x, tape.matmul(attn, w.w_o));

    ad::Slot m = tape.rms_norm(x, w.mlp_norm);
    ad::Slot key = tape.gelu(tape.matmul(m, w.w_up));
    ad::Slot out = tape.matmul(key, w.w_down, false, true);
    for (const auto& r : options.replacements) {
      if (r.layer == l) out = tape.replace_row(out, r.row, r.value);
    }
    if (config.is_decisive(l)) {
      g.keys.push_back(key);
      g.outputs.push_back(out);
    }
    x = tape.add(x, out);
  }
  if (options.stop_after_layer) return g;

  if (options.output_rows) x = tape.select_rows(x, *options.output_rows);
  x = tape.rms_norm(x, params.final_norm);
  g.logits = tape.matmul(x, params.unembed);
  return g;
}

}  // namespace hted::model
