#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hted/model/corpus.hpp"
#include "hted/targets/targets.hpp"

namespace hted::editor {

using ad::Tensor;
using model::Tokens;
using model::TransformerModel;
using targets::EditRequest;
using targets::Method;

struct EditConfig {
  Method method = Method::memit_dividing;
  /// Preservation weight on K_J K_J^T.
  double lambda = 1.0;
  /// Diagonal regulariser; defaults to 1e-6 * trace(C) / key_dim when unset.
  std::optional<double> ridge_eps;
  std::size_t preservation_samples = 400;
  std::uint64_t seed = 0;

  void validate() const;
};

// Columns are per-request (or per-sample) vectors. Keys live in the
// down-projection input space (d_mlp rows), targets in d_model.
struct EditMatrices {
  Tensor keys;  // K_I: key_dim x n
  Tensor targets;  // M_I: d_model x n
  Tensor preserved;  // K_J: key_dim x u
};

struct EditDelta {
  std::size_t layer = 0;
  Tensor delta;
  double frobenius = 0.0;
  double max_abs = 0.0;
  double ridge = 0.0;
};

/// A prompt plus the position whose key is collected.
struct KeyedPrompt {
  Tokens tokens;
  std::size_t decisive_index = 0;
};

/// Prompts of every fact whose subject is not edited by `batch`.
std::vector<KeyedPrompt> preservation_pool(const model::FactCorpus& corpus, std::span<const EditRequest> batch);

/// K_I (key_dim x n) from the model's current weights.
Tensor collect_keys(const TransformerModel& model, std::span<const EditRequest> requests, std::size_t layer);

/// Seeded choice of u pool prompts, shared by every layer.
std::vector<std::size_t> choose_preservation_samples(std::size_t pool_size, std::size_t u, std::uint64_t seed);
/// K_J (key_dim x u). InputError if u exceeds the pool.
Tensor collect_preservation_keys(const TransformerModel& model, std::span<const KeyedPrompt> pool, std::size_t layer,
                                 std::size_t u, std::uint64_t seed);

/// 1e-6 * trace(K_I K_I^T + lambda K_J K_J^T) / key_dim.
double default_ridge(const EditMatrices& mats, double lambda);

/// Delta minimising ||(W + D) K_I - M_I||^2 + lambda ||D K_J||^2 + ridge ||D||^2 through a Cholesky solve.
/// NumericError when the system matrix is not positive definite.
EditDelta solve_delta(const Tensor& w, const EditMatrices& mats, double lambda, std::optional<double> ridge_eps,
                      std::size_t layer = 0);

/// ||D C - (M_I - W K_I) K_I^T||_F / ||(M_I - W K_I) K_I^T||_F (0 when both vanish).
double normal_equation_residual(const Tensor& w, const Tensor& delta, const EditMatrices& mats, double lambda,
                                double ridge);

void apply_edit(TransformerModel& model, const EditDelta& delta);

// Remaining final-layer residual ||m_L - h_L|| relative to its value before
// editing, per request, after each edited layer.
struct ResidualTrace {
  std::vector<std::size_t> layers;
  std::vector<double> initial_norms;
  /// ratios[s][i]: request i after s edits; ratios[0] is all ones.
  std::vector<std::vector<double>> ratios;
  std::vector<double> mean_ratios;
  std::vector<bool> degenerate;
};

struct EditRunRecord {
  Method method = Method::memit_dividing;
  std::vector<EditRequest> requests;
  std::vector<EditDelta> deltas;
  ResidualTrace residuals;
  std::vector<targets::TargetPlan> plans;
  std::string pre_checksum;
  std::string post_checksum;
  std::size_t solver_iterations = 0;
  /// Not serialised, so records stay byte-identical across runs.
  double wall_seconds = 0.0;
};

void to_json(nlohmann::json& j, const EditRunRecord& r);
void from_json(const nlohmann::json& j, EditRunRecord& r);

/// CSV rows: method, layer, mean_ratio, then one column per request.
std::string residual_csv(const EditRunRecord& record, const std::string& config_hash);

/// Edits the decisive layers shallow to deep according to cfg.method. On any
/// failure the model is restored to its pre-run weights and the error rethrown.
EditRunRecord run_edit(TransformerModel& model, std::span<const EditRequest> batch,
                       std::span<const KeyedPrompt> preservation, const EditConfig& cfg,
                       const targets::TargetSolveConfig& solve_cfg);

}  // namespace hted::editor
