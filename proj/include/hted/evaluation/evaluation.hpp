#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hted/model/corpus.hpp"
#include "hted/model/transformer.hpp"
#include "hted/targets/targets.hpp"

namespace hted::evaluation {

using model::Tokens;
using model::TransformerModel;

/// A prompt scored for a rewrite: new answer, pre-edit answer and what the
/// unedited model emitted for len(target) greedy steps.
struct AnswerProbe {
  Tokens prompt;
  Tokens target;
  Tokens original;
  Tokens pre_output;
  std::size_t request = 0;
};

struct NeighborhoodProbe {
  Tokens prompt;
  Tokens pre_output;
  std::size_t request = 0;
};

struct EvalProbeSet {
  std::vector<AnswerProbe> rewrites;
  std::vector<AnswerProbe> paraphrases;
  std::vector<NeighborhoodProbe> neighborhood;

  /// Every request index below `requests` owns at least one paraphrase and one neighborhood probe.
  void validate(std::size_t requests) const;
};

void to_json(nlohmann::json& j, const AnswerProbe& p);
void from_json(const nlohmann::json& j, AnswerProbe& p);
void to_json(nlohmann::json& j, const NeighborhoodProbe& p);
void from_json(const nlohmann::json& j, NeighborhoodProbe& p);
void to_json(nlohmann::json& j, const EvalProbeSet& s);
void from_json(const nlohmann::json& j, EvalProbeSet& s);

/// Rewrite prompts, all paraphrases and all neighborhood prompts of the edited records.
EvalProbeSet build_probe_set(const model::FactCorpus& corpus, const TransformerModel& pre_edit,
                             std::span<const targets::EditRequest> requests);

/// Token-mean log-probability of `target` beats that of `original`; ties score 0.
int success_metric(const TransformerModel& model, const Tokens& prompt, const Tokens& target, const Tokens& original);

/// Greedy decoding for len(target) steps reproduces `target`.
int accuracy_metric(const TransformerModel& model, const Tokens& prompt, const Tokens& target);

/// Teacher-forced argmax equals the target token at every answer step.
bool teacher_forced_argmax_matches(const TransformerModel& model, const Tokens& prompt, const Tokens& target);

/// Log-softmax of a logit vector.
std::vector<double> log_softmax(std::span<const double> logits);

/// KL(p || q) for log-probability vectors.
double kl_divergence(std::span<const double> log_p, std::span<const double> log_q);

/// Indices of the k largest entries, ties broken by the lower index.
std::vector<std::int64_t> top_k(std::span<const double> values, std::size_t k);

/// Per-probe KL(pre || post) of the next-token distribution at the last prompt position.
std::vector<double> specificity_kl_per_probe(const TransformerModel& pre, const TransformerModel& post,
                                             std::span<const Tokens> probes);
double specificity_kl(const TransformerModel& pre, const TransformerModel& post, std::span<const Tokens> probes);

std::vector<double> topk_overlap_per_probe(const TransformerModel& pre, const TransformerModel& post,
                                           std::span<const Tokens> probes, std::size_t k);
double topk_overlap(const TransformerModel& pre, const TransformerModel& post, std::span<const Tokens> probes,
                    std::size_t k);

struct EvalConfig {
  std::string method;
  std::uint64_t seed = 0;
};

struct AnswerScore {
  int success = 0;
  int accuracy = 0;
  int success_pre = 0;
  int accuracy_pre = 0;
};

struct NeighborhoodScore {
  double kl = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;
  double top10 = 0.0;
};

struct EvalReport {
  std::string method;
  std::uint64_t seed = 0;
  double efficacy_success = 0.0;
  double efficacy_accuracy = 0.0;
  double generalization_success = 0.0;
  double generalization_accuracy = 0.0;
  double specificity_kl = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;
  double top10 = 0.0;
  /// Pre-edit efficacy on the same rewrite prompts.
  double baseline_efficacy_success = 0.0;
  double baseline_efficacy_accuracy = 0.0;
  /// Prompts whose greedy output matched the target while teacher-forced argmax did not.
  std::size_t consistency_violations = 0;
  std::vector<AnswerScore> rewrites;
  std::vector<AnswerScore> paraphrases;
  std::vector<NeighborhoodScore> neighborhood;
};

void to_json(nlohmann::json& j, const AnswerScore& s);
void from_json(const nlohmann::json& j, AnswerScore& s);
void to_json(nlohmann::json& j, const NeighborhoodScore& s);
void from_json(const nlohmann::json& j, NeighborhoodScore& s);
void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

EvalReport evaluate_run(const TransformerModel& pre, const TransformerModel& post, const EvalProbeSet& probes,
                        const EvalConfig& config);

/// One row per report, prefixed by a config hash comment line.
std::string eval_csv(std::span<const EvalReport> reports, const std::string& config_hash);

}  // namespace hted::evaluation
