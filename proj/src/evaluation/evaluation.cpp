#include "hted/evaluation/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hted/common/errors.hpp"
#include "hted/common/format.hpp"
#include "hted/model/forward.hpp"

namespace hted::evaluation {

namespace {

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

template <typename T, typename F>
double mean_field(const std::vector<T>& items, F f) {
  if (items.empty()) return 0.0;
  double s = 0.0;
  for (const auto& it : items) s += static_cast<double>(f(it));
  return s / static_cast<double>(items.size());
}

std::vector<Tokens> prompts_of(const std::vector<NeighborhoodProbe>& probes) {
  std::vector<Tokens> out;
  out.reserve(probes.size());
  for (const auto& p : probes) out.push_back(p.prompt);
  return out;
}

AnswerScore score_answer(const TransformerModel& pre, const TransformerModel& post, const AnswerProbe& p,
                         std::size_t& violations) {
  AnswerScore s;
  s.success = success_metric(post, p.prompt, p.target, p.original);
  s.accuracy = accuracy_metric(post, p.prompt, p.target);
  s.success_pre = success_metric(pre, p.prompt, p.target, p.original);
  s.accuracy_pre = p.pre_output == p.target ? 1 : 0;
  if (s.accuracy == 1 && !teacher_forced_argmax_matches(post, p.prompt, p.target)) ++violations;
  return s;
}

}  // namespace

void EvalProbeSet::validate(std::size_t requests) const {
  std::vector<int> para(requests, 0);
  std::vector<int> neigh(requests, 0);
  for (const auto& p : paraphrases) {
    if (p.request >= requests) throw InputError("paraphrase probe refers to unknown request");
    para[p.request] = 1;
  }
  for (const auto& p : neighborhood) {
    if (p.request >= requests) throw InputError("neighborhood probe refers to unknown request");
    neigh[p.request] = 1;
  }
  for (std::size_t i = 0; i < requests; ++i) {
    if (!para[i] || !neigh[i]) {
      throw InputError("request " + std::to_string(i) + " lacks a paraphrase or neighborhood probe");
    }
  }
}

void to_json(nlohmann::json& j, const AnswerProbe& p) {
  j = nlohmann::json{{"prompt", p.prompt},
                     {"target", p.target},
                     {"original", p.original},
                     {"pre_output", p.pre_output},
                     {"request", p.request}};
}

void from_json(const nlohmann::json& j, AnswerProbe& p) {
  j.at("prompt").get_to(p.prompt);
  j.at("target").get_to(p.target);
  j.at("original").get_to(p.original);
  j.at("pre_output").get_to(p.pre_output);
  j.at("request").get_to(p.request);
}

void to_json(nlohmann::json& j, const NeighborhoodProbe& p) {
  j = nlohmann::json{{"prompt", p.prompt}, {"pre_output", p.pre_output}, {"request", p.request}};
}

void from_json(const nlohmann::json& j, NeighborhoodProbe& p) {
  j.at("prompt").get_to(p.prompt);
  j.at("pre_output").get_to(p.pre_output);
  j.at("request").get_to(p.request);
}

void to_json(nlohmann::json& j, const EvalProbeSet& s) {
  j = nlohmann::json{{"rewrites", s.rewrites}, {"paraphrases", s.paraphrases}, {"neighborhood", s.neighborhood}};
}

void from_json(const nlohmann::json& j, EvalProbeSet& s) {
  j.at("rewrites").get_to(s.rewrites);
  j.at("paraphrases").get_to(s.paraphrases);
  j.at("neighborhood").get_to(s.neighborhood);
}

EvalProbeSet build_probe_set(const model::FactCorpus& corpus, const TransformerModel& pre_edit,
                             std::span<const targets::EditRequest> requests) {
  EvalProbeSet set;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    const auto& req = requests[i];
    const auto& rec = corpus.records.at(req.record);
    const std::size_t steps = req.target.size();
    set.rewrites.push_back({req.prompt, req.target, req.original, model::greedy_decode(pre_edit, req.prompt, steps), i});
    for (const auto& p : rec.paraphrases) {
      set.paraphrases.push_back({p.tokens, req.target, req.original, model::greedy_decode(pre_edit, p.tokens, steps), i});
    }
    for (const auto& n : rec.neighborhood) {
      set.neighborhood.push_back({n, model::greedy_decode(pre_edit, n, 1), i});
    }
  }
  set.validate(requests.size());
  return set;
}

int success_metric(const TransformerModel& model, const Tokens& prompt, const Tokens& target, const Tokens& original) {
  if (target.empty() || original.empty()) throw InputError("success needs non-empty answers");
  const auto lt = model::answer_log_probs(model, prompt, target);
  const auto lo = model::answer_log_probs(model, prompt, original);
  return mean_of(lt) > mean_of(lo) ? 1 : 0;
}

int accuracy_metric(const TransformerModel& model, const Tokens& prompt, const Tokens& target) {
  if (target.empty()) return 1;
  return model::greedy_decode(model, prompt, target.size()) == target ? 1 : 0;
}

bool teacher_forced_argmax_matches(const TransformerModel& model, const Tokens& prompt, const Tokens& target) {
  if (target.empty()) return true;
  const Tokens seq = model::concat(prompt, target);
  const auto result = model::forward(model, seq);
  const std::size_t vocab = model.config().vocab_size;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const std::size_t row = prompt.size() - 1 + i;
    const std::span<const double> logits(result.logits.data() + row * vocab, vocab);
    if (model::argmax(logits) != target[i]) return false;
  }
  return true;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  if (logits.empty()) throw InputError("log_softmax of an empty vector");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double x : logits) s += std::exp(x - mx);
  const double lse = mx + std::log(s);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

double kl_divergence(std::span<const double> log_p, std::span<const double> log_q) {
  if (log_p.size() != log_q.size()) throw StructuralError("KL of distributions with different supports");
  double kl = 0.0;
  for (std::size_t i = 0; i < log_p.size(); ++i) {
    const double p = std::exp(log_p[i]);
    if (p > 0.0) kl += p * (log_p[i] - log_q[i]);
  }
  return std::max(kl, 0.0);
}

std::vector<std::int64_t> top_k(std::span<const double> values, std::size_t k) {
  if (k == 0) throw InputError("top-k needs k >= 1");
  if (k > values.size()) throw InputError("k exceeds the vocabulary size");
  std::vector<std::int64_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::int64_t a, std::int64_t b) {
                      const double va = values[static_cast<std::size_t>(a)];
                      const double vb = values[static_cast<std::size_t>(b)];
                      return va != vb ? va > vb : a < b;
                    });
  idx.resize(k);
  return idx;
}

std::vector<double> specificity_kl_per_probe(const TransformerModel& pre, const TransformerModel& post,
                                             std::span<const Tokens> probes) {
  if (probes.empty()) throw InputError("specificity needs at least one probe");
  const auto a = model::next_token_logits(pre, probes);
  const auto b = model::next_token_logits(post, probes);
  std::vector<double> out;
  out.reserve(probes.size());
  for (std::size_t i = 0; i < probes.size(); ++i) {
    out.push_back(kl_divergence(log_softmax(a[i].values()), log_softmax(b[i].values())));
  }
  return out;
}

double specificity_kl(const TransformerModel& pre, const TransformerModel& post, std::span<const Tokens> probes) {
  return mean_of(specificity_kl_per_probe(pre, post, probes));
}

std::vector<double> topk_overlap_per_probe(const TransformerModel& pre, const TransformerModel& post,
                                           std::span<const Tokens> probes, std::size_t k) {
  if (k == 0) throw InputError("top-k overlap needs k >= 1");
  if (probes.empty()) throw InputError("top-k overlap needs at least one probe");
  const auto a = model::next_token_logits(pre, probes);
  const auto b = model::next_token_logits(post, probes);
  std::vector<double> out;
  out.reserve(probes.size());
  for (std::size_t i = 0; i < probes.size(); ++i) {
    auto ta = top_k(a[i].values(), k);
    auto tb = top_k(b[i].values(), k);
    std::sort(ta.begin(), ta.end());
    std::sort(tb.begin(), tb.end());
    std::vector<std::int64_t> common;
    std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(common));
    out.push_back(static_cast<double>(common.size()) / static_cast<double>(k));
  }
  return out;
}

double topk_overlap(const TransformerModel& pre, const TransformerModel& post, std::span<const Tokens> probes,
                    std::size_t k) {
  return mean_of(topk_overlap_per_probe(pre, post, probes, k));
}

void to_json(nlohmann::json& j, const AnswerScore& s) {
  j = nlohmann::json{{"success", s.success},
                     {"accuracy", s.accuracy},
                     {"success_pre", s.success_pre},
                     {"accuracy_pre", s.accuracy_pre}};
}

void from_json(const nlohmann::json& j, AnswerScore& s) {
  j.at("success").get_to(s.success);
  j.at("accuracy").get_to(s.accuracy);
  j.at("success_pre").get_to(s.success_pre);
  j.at("accuracy_pre").get_to(s.accuracy_pre);
}

void to_json(nlohmann::json& j, const NeighborhoodScore& s) {
  j = nlohmann::json{{"kl", s.kl}, {"top1", s.top1}, {"top5", s.top5}, {"top10", s.top10}};
}

void from_json(const nlohmann::json& j, NeighborhoodScore& s) {
  j.at("kl").get_to(s.kl);
  j.at("top1").get_to(s.top1);
  j.at("top5").get_to(s.top5);
  j.at("top10").get_to(s.top10);
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"method", r.method},
                     {"seed", r.seed},
                     {"efficacy", {{"success", r.efficacy_success}, {"accuracy", r.efficacy_accuracy}}},
                     {"generalization", {{"success", r.generalization_success}, {"accuracy", r.generalization_accuracy}}},
                     {"specificity", {{"kl", r.specificity_kl}, {"top1", r.top1}, {"top5", r.top5}, {"top10", r.top10}}},
                     {"baseline_efficacy",
                      {{"success", r.baseline_efficacy_success}, {"accuracy", r.baseline_efficacy_accuracy}}},
                     {"consistency_violations", r.consistency_violations},
                     {"rewrites", r.rewrites},
                     {"paraphrases", r.paraphrases},
                     {"neighborhood", r.neighborhood}};
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  j.at("method").get_to(r.method);
  j.at("seed").get_to(r.seed);
  j.at("efficacy").at("success").get_to(r.efficacy_success);
  j.at("efficacy").at("accuracy").get_to(r.efficacy_accuracy);
  j.at("generalization").at("success").get_to(r.generalization_success);
  j.at("generalization").at("accuracy").get_to(r.generalization_accuracy);
  const auto& s = j.at("specificity");
  s.at("kl").get_to(r.specificity_kl);
  s.at("top1").get_to(r.top1);
  s.at("top5").get_to(r.top5);
  s.at("top10").get_to(r.top10);
  j.at("baseline_efficacy").at("success").get_to(r.baseline_efficacy_success);
  j.at("baseline_efficacy").at("accuracy").get_to(r.baseline_efficacy_accuracy);
  j.at("consistency_violations").get_to(r.consistency_violations);
  j.at("rewrites").get_to(r.rewrites);
  j.at("paraphrases").get_to(r.paraphrases);
  j.at("neighborhood").get_to(r.neighborhood);
}

EvalReport evaluate_run(const TransformerModel& pre, const TransformerModel& post, const EvalProbeSet& probes,
                        const EvalConfig& config) {
  if (pre.config().vocab_size != post.config().vocab_size || pre.config().d_model != post.config().d_model) {
    throw StructuralError("pre- and post-edit models do not share a configuration");
  }
  if (probes.rewrites.empty()) throw InputError("probe set has no rewrite prompts");
  EvalReport r;
  r.method = config.method;
  r.seed = config.seed;
  for (const auto& p : probes.rewrites) r.rewrites.push_back(score_answer(pre, post, p, r.consistency_violations));
  for (const auto& p : probes.paraphrases) {
    r.paraphrases.push_back(score_answer(pre, post, p, r.consistency_violations));
  }
  if (!probes.neighborhood.empty()) {
    const auto prompts = prompts_of(probes.neighborhood);
    const auto kl = specificity_kl_per_probe(pre, post, prompts);
    const auto o1 = topk_overlap_per_probe(pre, post, prompts, 1);
    const auto o5 = topk_overlap_per_probe(pre, post, prompts, std::min<std::size_t>(5, pre.config().vocab_size));
    const auto o10 = topk_overlap_per_probe(pre, post, prompts, std::min<std::size_t>(10, pre.config().vocab_size));
    for (std::size_t i = 0; i < prompts.size(); ++i) r.neighborhood.push_back({kl[i], o1[i], o5[i], o10[i]});
  }
  r.efficacy_success = mean_field(r.rewrites, [](const AnswerScore& s) { return s.success; });
  r.efficacy_accuracy = mean_field(r.rewrites, [](const AnswerScore& s) { return s.accuracy; });
  r.baseline_efficacy_success = mean_field(r.rewrites, [](const AnswerScore& s) { return s.success_pre; });
  r.baseline_efficacy_accuracy = mean_field(r.rewrites, [](const AnswerScore& s) { return s.accuracy_pre; });
  r.generalization_success = mean_field(r.paraphrases, [](const AnswerScore& s) { return s.success; });
  r.generalization_accuracy = mean_field(r.paraphrases, [](const AnswerScore& s) { return s.accuracy; });
  r.specificity_kl = mean_field(r.neighborhood, [](const NeighborhoodScore& s) { return s.kl; });
  r.top1 = mean_field(r.neighborhood, [](const NeighborhoodScore& s) { return s.top1; });
  r.top5 = mean_field(r.neighborhood, [](const NeighborhoodScore& s) { return s.top5; });
  r.top10 = mean_field(r.neighborhood, [](const NeighborhoodScore& s) { return s.top10; });
  return r;
}

std::string eval_csv(std::span<const EvalReport> reports, const std::string& config_hash) {
  std::string out = "# config_hash=" + config_hash +
                    "\nmethod,seed,efficacy_success,efficacy_accuracy,generalization_success,generalization_accuracy,"
                    "specificity_kl,top1,top5,top10\n";
  for (const auto& r : reports) {
    out += r.method + "," + std::to_string(r.seed) + "," + format_double(r.efficacy_success) + "," +
           format_double(r.efficacy_accuracy) + "," + format_double(r.generalization_success) + "," +
           format_double(r.generalization_accuracy) + "," + format_double(r.specificity_kl) + "," +
           format_double(r.top1) + "," + format_double(r.top5) + "," + format_double(r.top10) + "\n";
  }
  return out;
}

}  // namespace hted::evaluation
