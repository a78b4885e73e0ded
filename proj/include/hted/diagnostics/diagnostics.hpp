#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hted/autodiff/tape.hpp"
#include "hted/editor/editor.hpp"
#include "hted/model/transformer.hpp"

namespace hted::diagnostics {

using ad::Tensor;
using model::Tokens;
using model::TransformerModel;

// x -> h_sink at `position` when the MLP output of `source` at `position` is
// replaced by x. Only the prefix up to `position` is evaluated.
class InterlayerMap {
 public:
  InterlayerMap(const TransformerModel& model, const Tokens& tokens, std::size_t position, std::size_t source,
                std::size_t sink);

  Tensor operator()(const Tensor& x) const;
  /// The same map as a single-input tape program (input d_model, output 1 x d_model).
  ad::Program program() const;

  const Tensor& source_value() const noexcept { return source_value_; }
  const Tensor& sink_value() const noexcept { return sink_value_; }
  std::size_t source() const noexcept { return source_; }
  std::size_t sink() const noexcept { return sink_; }

 private:
  const TransformerModel* model_;
  Tokens tokens_;
  std::size_t position_;
  std::size_t source_;
  std::size_t sink_;
  Tensor source_value_;
  Tensor sink_value_;
};

struct PerturbationProbe {
  std::size_t layer = 0;
  Tensor applied;
  /// Exact nonlinear change of h_L.
  Tensor shift;
  /// First-order estimate J * applied.
  Tensor jvp_estimate;
  double cosine = 0.0;
  double gain = 0.0;
};

/// Change of h_L (last decisive layer) when h_layer at `position` becomes h_layer + delta.
/// For layer == L the shift is delta itself. DomainError if delta is zero.
PerturbationProbe passive_shift(const TransformerModel& model, const Tokens& tokens, std::size_t position,
                                std::size_t layer, const Tensor& delta, bool with_jvp = true);

struct JacobianBlock {
  std::size_t source = 0;
  std::size_t sink = 0;
  Tensor j;
  Tensor s;
  Tensor a;
  double min_eig_s = 0.0;
  /// Relative Frobenius gap to the reverse-mode Jacobian (negative if not checked).
  double reverse_check = -1.0;
};

/// Symmetric/antisymmetric split and the smallest eigenvalue of S.
JacobianBlock make_block(Tensor j, std::size_t source = 0, std::size_t sink = 0);

/// Column j = jvp_fd along e_j with step kJacobianEps0 * (1 + ||h_l||_inf).
JacobianBlock assemble_jacobian(const TransformerModel& model, const Tokens& tokens, std::size_t position,
                                std::size_t source, std::size_t sink, bool reverse_check = true);

struct QuadraticForms {
  double vjv = 0.0;
  double vsv = 0.0;
  double vav = 0.0;
  /// |v^T A v| <= 1e-10 * ||v||^2 * ||A||_F.
  bool antisymmetric_vanishes = false;
};

QuadraticForms quadratic_form_check(const Tensor& j, const Tensor& v);

struct EigenProbeResult {
  Tensor direction;
  double alignment = 0.0;
  double rayleigh = 0.0;
};

EigenProbeResult eigen_probe(const JacobianBlock& block, const Tensor& delta);

struct DefinitenessReport {
  std::size_t samples = 0;
  double fraction_positive = 0.0;
  double min_eig = 0.0;
  /// Directions with v^T S v > 0 but cos(Jv, v) <= 0.
  std::size_t violations = 0;
};

/// Unit directions drawn uniformly from the sphere.
std::vector<Tensor> sample_directions(std::size_t dim, std::size_t count, std::uint64_t seed);
DefinitenessReport definiteness_report(const JacobianBlock& block, std::span<const Tensor> directions);

struct CosineRow {
  std::size_t layer = 0;
  double mean_cosine = 0.0;
  double mean_gain = 0.0;
  std::size_t n = 0;
};

/// For each edited layer l of a spreading run, the mean cosine between the
/// steering vector m_l - h_l and the final-layer shift it induces, measured on
/// the model as it was when layer l was edited.
std::vector<CosineRow> cosine_table(const TransformerModel& pre_edit, const editor::EditRunRecord& record);

std::string cosine_table_csv(const std::vector<CosineRow>& rows, const std::string& config_hash);

struct DefinitenessRow {
  std::size_t source = 0;
  std::size_t sink = 0;
  std::size_t request = 0;
  DefinitenessReport report;
  double reverse_check = -1.0;
};

std::string definiteness_csv(const std::vector<DefinitenessRow>& rows, const std::string& config_hash);

nlohmann::json block_summary(const JacobianBlock& block);

}  // namespace hted::diagnostics
