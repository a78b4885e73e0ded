#include "hted/model/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "hted/common/errors.hpp"
#include "hted/model/forward.hpp"
#include "hted/model/graph.hpp"

namespace hted::model {

double exact_match_accuracy(const TransformerModel& model, std::span<const std::pair<Tokens, Tokens>> pairs) {
  if (pairs.empty()) return 0.0;
  // Group by answer length so each group decodes a fixed number of steps.
  std::map<std::size_t, std::vector<std::size_t>> by_len;
  for (std::size_t i = 0; i < pairs.size(); ++i) by_len[pairs[i].second.size()].push_back(i);
  std::size_t hits = 0;
  for (const auto& [len, idx] : by_len) {
    std::vector<Tokens> prompts;
    for (auto i : idx) prompts.push_back(pairs[i].first);
    const auto out = greedy_decode_batch(model, prompts, len);
    for (std::size_t k = 0; k < idx.size(); ++k) hits += out[k] == pairs[idx[k]].second ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

double batch_loss_and_gradients(const TransformerModel& model, std::span<const std::pair<Tokens, Tokens>> pairs,
                                std::vector<Tensor>* gradients) {
  std::vector<Tokens> seqs;
  for (const auto& [p, a] : pairs) seqs.push_back(concat(p, a));
  const SequenceBatch batch = SequenceBatch::from(seqs);
  std::vector<std::int64_t> rows;
  std::vector<std::int64_t> targets;
  for (std::size_t b = 0; b < pairs.size(); ++b) {
    const auto& [p, a] = pairs[b];
    for (std::size_t i = 0; i < a.size(); ++i) {
      rows.push_back(static_cast<std::int64_t>(batch.row(b, p.size() - 1 + i)));
      targets.push_back(a[i]);
    }
  }
  ad::Tape tape;
  const BoundParameters params = bind_parameters(tape, model, gradients != nullptr);
  GraphOptions options;
  options.output_rows = rows;
  const ForwardGraph g = build_forward(tape, params, model.config(), batch, options);
  const ad::Slot loss = tape.cross_entropy(*g.logits, targets);
  if (gradients != nullptr) {
    std::vector<ad::Slot> wrt{params.tok_embed, params.pos_embed};
    for (const auto& b : params.blocks) {
      for (auto s : {b.attn_norm, b.w_q, b.w_k, b.w_v, b.w_o, b.mlp_norm, b.w_up, b.w_down}) wrt.push_back(s);
    }
    wrt.push_back(params.final_norm);
    wrt.push_back(params.unembed);
    ad::Gradients grads = tape.backward(loss, wrt);
    gradients->clear();
    for (auto s : wrt) gradients->push_back(grads.take(s));
  }
  return tape.value(loss).item();
}

TrainResult train_toy(const FactCorpus& corpus, const ModelConfig& config, const TrainConfig& cfg,
                      const TrainLogger& log) {
  const auto train = corpus.training_pairs();
  if (train.empty()) throw InputError("training corpus is empty");
  if (cfg.batch_size == 0 || cfg.max_epochs == 0 || cfg.eval_every == 0) throw InputError("invalid training schedule");
  ModelConfig mc = config;
  mc.vocab_size = corpus.vocab_size();
  if (corpus.max_sequence_length() > mc.max_seq_len) {
    throw InputError("corpus sequences of length " + std::to_string(corpus.max_sequence_length()) +
                     " exceed max_seq_len " + std::to_string(mc.max_seq_len));
  }
  TrainResult result{TransformerModel(mc)};
  TransformerModel& model = result.model;
  auto params = model.parameters();
  std::vector<Tensor> m1, m2;
  for (const auto& p : params) {
    m1.emplace_back(p.tensor->shape());
    m2.emplace_back(p.tensor->shape());
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Tensor> grads;
  std::vector<std::pair<Tokens, Tokens>> batch;
  const auto heldout = corpus.heldout_pairs();

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) batch.push_back(train[order[i]]);
      const double loss = batch_loss_and_gradients(model, batch, &grads);
      if (!std::isfinite(loss)) throw NumericError("training loss became non-finite at epoch " + std::to_string(epoch));
      loss_sum += loss;
      ++loss_count;

      double sq = 0.0;
      for (const auto& g : grads)
        for (double v : g.values()) sq += v * v;
      const double gnorm = std::sqrt(sq);
      const double clip = gnorm > cfg.grad_clip ? cfg.grad_clip / gnorm : 1.0;

      ++result.steps;
      const double t = static_cast<double>(result.steps);
      const double c1 = 1.0 - std::pow(cfg.beta1, t);
      const double c2 = 1.0 - std::pow(cfg.beta2, t);
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto w = params[k].tensor->values();
        if (cfg.weight_decay > 0.0 && params[k].tensor->rank() == 2) {
          for (auto& v : w) v -= cfg.lr * cfg.weight_decay * v;
        }
        auto g = grads[k].values();
        auto a = m1[k].values();
        auto b = m2[k].values();
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double gi = g[i] * clip;
          a[i] = cfg.beta1 * a[i] + (1.0 - cfg.beta1) * gi;
          b[i] = cfg.beta2 * b[i] + (1.0 - cfg.beta2) * gi * gi;
          w[i] -= cfg.lr * (a[i] / c1) / (std::sqrt(b[i] / c2) + cfg.adam_eps);
        }
      }
    }
    result.final_loss = loss_sum / static_cast<double>(loss_count);
    result.epochs = epoch;

    if (epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs) {
      TransformerModel rounded = model;
      rounded.round_to_float();
      result.train_accuracy = exact_match_accuracy(rounded, train);
      if (log) {
        std::ostringstream msg;
        msg << "epoch " << epoch << " loss " << result.final_loss << " train_acc " << result.train_accuracy;
        log(msg.str());
      }
      if (result.train_accuracy >= cfg.target_accuracy) {
        model = std::move(rounded);
        result.heldout_accuracy = heldout.empty() ? 0.0 : exact_match_accuracy(model, heldout);
        return result;
      }
    }
  }
  std::ostringstream msg;
  msg << "training stopped after " << result.epochs << " epochs with train exact match " << result.train_accuracy
      << " below the required " << cfg.target_accuracy;
  throw ThresholdError(msg.str());
}

}  // namespace hted::model
