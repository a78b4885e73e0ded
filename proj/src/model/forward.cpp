#include "hted/model/forward.hpp"

#include <algorithm>
#include <cmath>

#include "hted/common/errors.hpp"

namespace hted::model {

namespace {

double row_log_softmax_at(std::span<const double> row, std::size_t index) {
  const double mx = *std::max_element(row.begin(), row.end());
  double total = 0.0;
  for (double v : row) total += std::exp(v - mx);
  return row[index] - mx - std::log(total);
}

}  // namespace

std::size_t HiddenTrace::slot_of(std::size_t layer) const {
  auto it = std::find(layers.begin(), layers.end(), layer);
  if (it == layers.end()) throw InputError("layer " + std::to_string(layer) + " is not a decisive layer");
  return static_cast<std::size_t>(it - layers.begin());
}

Tensor HiddenTrace::key(std::size_t layer, std::size_t position) const {
  return keys[slot_of(layer)].row_vector(position);
}

Tensor HiddenTrace::output(std::size_t layer, std::size_t position) const {
  return outputs[slot_of(layer)].row_vector(position);
}

ForwardResult forward_with_replacements(const TransformerModel& model, std::span<const std::int64_t> tokens,
                                        std::span<const HiddenReplacement> replacements) {
  if (tokens.empty()) throw InputError("empty token sequence");
  const Tokens seq(tokens.begin(), tokens.end());
  const SequenceBatch batch = SequenceBatch::from(std::span<const Tokens>(&seq, 1));
  ad::Tape tape;
  const BoundParameters params = bind_parameters(tape, model);
  GraphOptions options;
  for (const auto& r : replacements) {
    if (!model.config().is_decisive(r.layer)) {
      throw InputError("replacement layer " + std::to_string(r.layer) + " is not decisive");
    }
    if (r.position >= seq.size()) throw InputError("replacement position outside the sequence");
    options.replacements.push_back({r.layer, r.position, tape.borrow(r.vector)});
  }
  const ForwardGraph g = build_forward(tape, params, model.config(), batch, options);
  ForwardResult result;
  result.logits = tape.value(*g.logits);
  HiddenTrace trace;
  trace.layers = model.config().decisive_layers;
  for (std::size_t i = 0; i < g.keys.size(); ++i) {
    trace.keys.push_back(tape.value(g.keys[i]));
    trace.outputs.push_back(tape.value(g.outputs[i]));
  }
  trace.logits = result.logits;
  result.trace = std::move(trace);
  return result;
}

ForwardResult forward(const TransformerModel& model, std::span<const std::int64_t> tokens, bool capture) {
  ForwardResult r = forward_with_replacements(model, tokens, {});
  if (!capture) r.trace.reset();
  return r;
}

ForwardResult forward_with_replacement(const TransformerModel& model, std::span<const std::int64_t> tokens,
                                       std::size_t layer, std::size_t position, const Tensor& vector) {
  const HiddenReplacement r{layer, position, vector};
  return forward_with_replacements(model, tokens, std::span<const HiddenReplacement>(&r, 1));
}

Tokens concat(const Tokens& a, const Tokens& b) {
  Tokens out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

double answer_cross_entropy_from_logits(const Tensor& logits, std::size_t prompt_len, const Tokens& answer) {
  if (answer.empty()) throw InputError("empty answer");
  if (prompt_len == 0 || logits.rows() < prompt_len + answer.size() - 1) {
    throw StructuralError("logits do not cover the answer positions");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < answer.size(); ++i) {
    total -= row_log_softmax_at(logits.row(prompt_len - 1 + i), static_cast<std::size_t>(answer[i]));
  }
  return total / static_cast<double>(answer.size());
}

double answer_cross_entropy(const TransformerModel& model, const Tokens& prompt, const Tokens& answer,
                            std::span<const HiddenReplacement> replacements) {
  const Tokens seq = concat(prompt, answer);
  const ForwardResult r = forward_with_replacements(model, seq, replacements);
  return answer_cross_entropy_from_logits(r.logits, prompt.size(), answer);
}

std::vector<double> answer_log_probs(const TransformerModel& model, const Tokens& prompt, const Tokens& answer) {
  if (answer.empty()) throw InputError("empty answer");
  if (prompt.empty()) throw InputError("empty prompt");
  const Tokens seq = concat(prompt, answer);
  const ForwardResult r = forward(model, seq);
  std::vector<double> out;
  for (std::size_t i = 0; i < answer.size(); ++i) {
    out.push_back(row_log_softmax_at(r.logits.row(prompt.size() - 1 + i), static_cast<std::size_t>(answer[i])));
  }
  return out;
}

std::vector<Tensor> next_token_logits(const TransformerModel& model, std::span<const Tokens> prompts) {
  std::vector<Tensor> out;
  if (prompts.empty()) return out;
  const SequenceBatch batch = SequenceBatch::from(prompts);
  std::vector<std::int64_t> rows;
  for (std::size_t b = 0; b < prompts.size(); ++b) {
    rows.push_back(static_cast<std::int64_t>(batch.row(b, prompts[b].size() - 1)));
  }
  ad::Tape tape;
  const BoundParameters params = bind_parameters(tape, model);
  GraphOptions options;
  options.output_rows = rows;
  const ForwardGraph g = build_forward(tape, params, model.config(), batch, options);
  const Tensor& logits = tape.value(*g.logits);
  for (std::size_t b = 0; b < prompts.size(); ++b) out.push_back(logits.row_vector(b));
  return out;
}

std::int64_t argmax(std::span<const double> values) {
  if (values.empty()) throw StructuralError("argmax of an empty row");
  return static_cast<std::int64_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

std::vector<Tokens> greedy_decode_batch(const TransformerModel& model, std::span<const Tokens> prompts,
                                        std::size_t steps, std::size_t chunk) {
  std::vector<Tokens> seqs(prompts.begin(), prompts.end());
  std::vector<Tokens> out(prompts.size());
  if (chunk == 0) chunk = 1;
  for (std::size_t step = 0; step < steps; ++step) {
    for (std::size_t start = 0; start < seqs.size(); start += chunk) {
      const std::size_t n = std::min(chunk, seqs.size() - start);
      const auto logits = next_token_logits(model, std::span<const Tokens>(seqs.data() + start, n));
      for (std::size_t i = 0; i < n; ++i) {
        const std::int64_t next = argmax(logits[i].values());
        seqs[start + i].push_back(next);
        out[start + i].push_back(next);
      }
    }
  }
  return out;
}

Tokens greedy_decode(const TransformerModel& model, const Tokens& prompt, std::size_t steps) {
  return greedy_decode_batch(model, std::span<const Tokens>(&prompt, 1), steps).front();
}

DecisiveStates collect_decisive_states(const TransformerModel& model, std::span<const Tokens> prompts,
                                       std::span<const std::size_t> positions, std::size_t chunk) {
  if (prompts.size() != positions.size()) throw StructuralError("one position per prompt is required");
  const auto& config = model.config();
  const std::size_t nl = config.decisive_layers.size();
  DecisiveStates states;
  for (std::size_t i = 0; i < nl; ++i) {
    states.keys.push_back(Tensor::zeros(prompts.size(), config.d_mlp));
    states.outputs.push_back(Tensor::zeros(prompts.size(), config.d_model));
  }
  if (chunk == 0) chunk = 1;
  for (std::size_t start = 0; start < prompts.size(); start += chunk) {
    const std::size_t n = std::min(chunk, prompts.size() - start);
    const auto part = prompts.subspan(start, n);
    const SequenceBatch batch = SequenceBatch::from(part);
    ad::Tape tape;
    const BoundParameters params = bind_parameters(tape, model);
    GraphOptions options;
    options.stop_after_layer = config.last_decisive();
    const ForwardGraph g = build_forward(tape, params, config, batch, options);
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t pos = positions[start + b];
      if (pos >= part[b].size()) throw InputError("position outside prompt");
      const std::size_t row = batch.row(b, pos);
      for (std::size_t i = 0; i < nl; ++i) {
        auto k = tape.value(g.keys[i]).row(row);
        auto h = tape.value(g.outputs[i]).row(row);
        std::copy(k.begin(), k.end(), states.keys[i].row(start + b).begin());
        std::copy(h.begin(), h.end(), states.outputs[i].row(start + b).begin());
      }
    }
  }
  return states;
}

}  // namespace hted::model
