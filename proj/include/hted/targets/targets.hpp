#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "hted/autodiff/tape.hpp"
#include "hted/model/corpus.hpp"
#include "hted/model/forward.hpp"
#include "hted/model/transformer.hpp"

namespace hted::targets {

using ad::Tensor;
using model::Tokens;
using model::TransformerModel;

enum class Method { onelayer, memit_dividing, memit_nodividing, blue, fe_replay };

std::string_view method_tag(Method m) noexcept;
/// Command-line spelling: onelayer, memit-div, memit-nodiv, blue, fe.
std::string_view method_cli_name(Method m) noexcept;
/// Accepts either spelling. InputError otherwise.
Method parse_method(std::string_view name);

struct EditRequest {
  Tokens prompt;
  std::size_t decisive_index = 0;
  /// New answer y*.
  Tokens target;
  /// Pre-edit greedy answer y.
  Tokens original;
  std::size_t record = 0;

  void validate(std::size_t vocab_size) const;
};

void to_json(nlohmann::json& j, const EditRequest& r);
void from_json(const nlohmann::json& j, EditRequest& r);

/// `n` facts with distinct subjects, each retargeted to a different object
/// of the same relation. `original` is the model's greedy answer.
std::vector<EditRequest> sample_edit_requests(const model::FactCorpus& corpus, const TransformerModel& model,
                                              std::size_t n, std::uint64_t seed);

struct TargetSolveConfig {
  double lr = 0.5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t max_iters = 100;
  /// Early stop once the mean answer cross-entropy (nats/token) falls below this.
  double ce_threshold = 0.05;
  /// If set, keeps ||delta|| <= clamp_ratio * ||h||.
  std::optional<double> clamp_ratio;

  void validate() const;
};

struct SolveResult {
  Tensor m;
  Tensor h;
  double achieved_ce = 0.0;
  std::size_t iters = 0;
};

/// m = h + delta minimising answer cross-entropy on [prompt, target] with the
/// MLP output at (layer, decisive index) replaced by m. delta starts at zero.
/// Answer cross-entropy of `request` as a function of the decisive MLP output
/// at `layer` (input: d_model vector, output: scalar).
ad::Program editing_loss_program(const TransformerModel& model, const EditRequest& request, std::size_t layer);

SolveResult solve_target(const TransformerModel& model, const EditRequest& request, std::size_t layer,
                         const TargetSolveConfig& cfg);

enum class SpreadMode { dividing, no_dividing };

/// dividing: h_l + (m_L - h_L) / remaining; no_dividing: h_l + (m_L - h_L).
Tensor spread_target(const Tensor& h_l, const Tensor& h_last, const Tensor& m_last, std::size_t remaining,
                     SpreadMode mode);
Tensor spread_target(const model::HiddenTrace& current, std::size_t position, const Tensor& m_last,
                     std::size_t layer, std::size_t remaining, SpreadMode mode);

struct TargetPlan {
  Method method = Method::memit_dividing;
  std::vector<std::size_t> layers;
  std::vector<Tensor> targets;
  /// For spreading methods: m_l - h_l at the moment layer l was edited.
  std::vector<Tensor> steering;
  double achieved_ce = 0.0;
  std::size_t iterations = 0;

  const Tensor& target_for(std::size_t layer) const;
};

void to_json(nlohmann::json& j, const TargetPlan& p);
void from_json(const nlohmann::json& j, TargetPlan& p);

/// Replays m_1 through one forward pass on [prompt, target] and records the
/// MLP outputs at the decisive index of every decisive layer.
TargetPlan forward_replay_targets(const TransformerModel& model, const EditRequest& request, const Tensor& m_first);
TargetPlan fe_targets(const TransformerModel& model, const EditRequest& request, const TargetSolveConfig& cfg);
TargetPlan blue_targets(const TransformerModel& model, const EditRequest& request, const TargetSolveConfig& cfg);
TargetPlan onelayer_target(const TransformerModel& model, const EditRequest& request, const TargetSolveConfig& cfg);

}  // namespace hted::targets
