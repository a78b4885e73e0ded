#include "hted/diagnostics/diagnostics.hpp"

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "hted/autodiff/gradcheck.hpp"
#include "hted/common/errors.hpp"
#include "hted/common/format.hpp"
#include "hted/model/graph.hpp"

namespace hted::diagnostics {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Tensor jv(const Tensor& j, const Tensor& v) { return ad::matvec(j, v.values()); }

}  // namespace

InterlayerMap::InterlayerMap(const TransformerModel& model, const Tokens& tokens, std::size_t position,
                             std::size_t source, std::size_t sink)
    : model_(&model), position_(position), source_(source), sink_(sink) {
  const auto& config = model.config();
  config.decisive_index(source);
  config.decisive_index(sink);
  if (sink < source) throw InputError("sink layer precedes source layer");
  if (position >= tokens.size()) throw InputError("position outside the token sequence");
  tokens_.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(position + 1));
  const auto states = model::collect_decisive_states(model, std::span<const Tokens>(&tokens_, 1),
                                                     std::span<const std::size_t>(&position_, 1));
  source_value_ = states.outputs[config.decisive_index(source)].row_vector(0);
  sink_value_ = (*this)(source_value_);
}

ad::Program InterlayerMap::program() const {
  const TransformerModel* model = model_;
  const Tokens tokens = tokens_;
  const std::size_t position = position_, source = source_, sink = sink_;
  return [=](ad::Tape& tape, std::span<const ad::Slot> in) {
    const auto& config = model->config();
    const auto params = model::bind_parameters(tape, *model);
    const model::SequenceBatch batch = model::SequenceBatch::from(std::span<const Tokens>(&tokens, 1));
    model::GraphOptions options;
    options.replacements.push_back({source, position, in[0]});
    options.stop_after_layer = sink;
    const auto g = model::build_forward(tape, params, config, batch, options);
    const ad::Slot out = tape.select_rows(g.outputs[config.decisive_index(sink)], {static_cast<std::int64_t>(position)});
    return std::vector<ad::Slot>{out};
  };
}

Tensor InterlayerMap::operator()(const Tensor& x) const {
  ad::Recording rec = ad::record_forward(program(), {x});
  return rec.output_values.front().reshaped({model_->config().d_model});
}

PerturbationProbe passive_shift(const TransformerModel& model, const Tokens& tokens, std::size_t position,
                                std::size_t layer, const Tensor& delta, bool with_jvp) {
  if (ad::norm(delta.values()) == 0.0) throw DomainError("passive_shift needs a non-zero perturbation");
  const std::size_t last = model.config().last_decisive();
  PerturbationProbe probe;
  probe.layer = layer;
  probe.applied = delta;
  if (layer == last) {
    model.config().decisive_index(layer);
    // Identity sink: the replaced output is h_L itself.
    probe.shift = delta;
    probe.jvp_estimate = delta;
  } else {
    const InterlayerMap map(model, tokens, position, layer, last);
    probe.shift = map(map.source_value() + delta) - map.sink_value();
    if (with_jvp) {
      probe.jvp_estimate = ad::jvp_fd(map, map.source_value(), delta, ad::fd_step(ad::kJacobianEps0, map.source_value()));
    }
  }
  if (layer == last) {
    probe.cosine = 1.0;
    probe.gain = 1.0;
  } else {
    probe.cosine = ad::cosine(delta.values(), probe.shift.values());
    probe.gain = ad::norm(probe.shift.values()) / ad::norm(delta.values());
  }
  return probe;
}

JacobianBlock make_block(Tensor j, std::size_t source, std::size_t sink) {
  if (j.rank() != 2 || j.rows() != j.cols()) throw StructuralError("Jacobian block must be square");
  JacobianBlock b;
  b.source = source;
  b.sink = sink;
  const Tensor jt = j.transposed();
  b.s = 0.5 * (j + jt);
  b.a = 0.5 * (j - jt);
  b.j = std::move(j);
  const Eigen::Map<const RowMatrix> s(b.s.data(), static_cast<Eigen::Index>(b.s.rows()),
                                      static_cast<Eigen::Index>(b.s.cols()));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s, Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) throw NumericError("eigen-decomposition of S failed");
  b.min_eig_s = eig.eigenvalues().minCoeff();
  return b;
}

JacobianBlock assemble_jacobian(const TransformerModel& model, const Tokens& tokens, std::size_t position,
                                std::size_t source, std::size_t sink, bool reverse_check) {
  const std::size_t d = model.config().d_model;
  if (d > 256) throw InputError("column-wise Jacobian assembly is limited to d_model <= 256");
  if (source == sink) {
    model.config().decisive_index(source);
    JacobianBlock b = make_block(Tensor::identity(d), source, sink);
    if (reverse_check) b.reverse_check = 0.0;
    return b;
  }
  const InterlayerMap map(model, tokens, position, source, sink);
  const double eps = ad::fd_step(ad::kJacobianEps0, map.source_value());
  std::vector<Tensor> columns;
  for (std::size_t c = 0; c < d; ++c) {
    Tensor e(ad::Shape{d});
    e[c] = 1.0;
    columns.push_back(ad::jvp_fd(map, map.source_value(), e, eps));
  }
  JacobianBlock b = make_block(ad::stack_columns(columns, d), source, sink);
  if (reverse_check) {
    const Tensor reverse = ad::reverse_jacobian(map.program(), map.source_value());
    b.reverse_check = ad::frobenius_norm(reverse - b.j) / std::max(ad::frobenius_norm(reverse), ad::kAbsFloor);
  }
  return b;
}

QuadraticForms quadratic_form_check(const Tensor& j, const Tensor& v) {
  if (j.rank() != 2 || j.rows() != j.cols() || v.size() != j.rows()) {
    throw StructuralError("quadratic form of " + j.shape_string() + " with " + v.shape_string());
  }
  const JacobianBlock b = make_block(j);
  QuadraticForms q;
  q.vjv = ad::dot(v.values(), jv(b.j, v).values());
  q.vsv = ad::dot(v.values(), jv(b.s, v).values());
  q.vav = ad::dot(v.values(), jv(b.a, v).values());
  const double vv = ad::dot(v.values(), v.values());
  q.antisymmetric_vanishes = std::abs(q.vav) <= 1e-10 * vv * ad::frobenius_norm(b.a);
  return q;
}

EigenProbeResult eigen_probe(const JacobianBlock& block, const Tensor& delta) {
  if (ad::norm(delta.values()) == 0.0) throw DomainError("eigen_probe needs a non-zero direction");
  EigenProbeResult r;
  r.direction = delta;
  const Tensor image = jv(block.j, delta);
  r.alignment = ad::cosine(image.values(), delta.values());
  r.rayleigh = ad::dot(delta.values(), image.values()) / ad::dot(delta.values(), delta.values());
  return r;
}

std::vector<Tensor> sample_directions(std::size_t dim, std::size_t count, std::uint64_t seed) {
  if (dim == 0) throw InputError("direction dimension must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Tensor> out;
  while (out.size() < count) {
    Tensor v(ad::Shape{dim});
    for (auto& x : v.values()) x = normal(rng);
    const double n = ad::norm(v.values());
    if (n == 0.0) continue;
    for (auto& x : v.values()) x /= n;
    out.push_back(std::move(v));
  }
  return out;
}

DefinitenessReport definiteness_report(const JacobianBlock& block, std::span<const Tensor> directions) {
  if (directions.empty()) throw InputError("definiteness report needs at least one direction");
  DefinitenessReport r;
  r.samples = directions.size();
  r.min_eig = block.min_eig_s;
  std::size_t positive = 0;
  for (const auto& v : directions) {
    const double vsv = ad::dot(v.values(), jv(block.s, v).values());
    if (vsv > 0.0) {
      ++positive;
      if (!(ad::cosine(jv(block.j, v).values(), v.values()) > 0.0)) ++r.violations;
    }
  }
  r.fraction_positive = static_cast<double>(positive) / static_cast<double>(directions.size());
  return r;
}

std::vector<CosineRow> cosine_table(const TransformerModel& pre_edit, const editor::EditRunRecord& record) {
  if (record.method != targets::Method::memit_dividing && record.method != targets::Method::memit_nodividing) {
    throw InputError("cosine table needs a backward-spreading edit record");
  }
  if (record.requests.empty()) throw InputError("cosine table needs a nonempty edit batch");
  TransformerModel model = pre_edit;
  std::vector<CosineRow> rows;
  for (std::size_t step = 0; step < record.residuals.layers.size(); ++step) {
    CosineRow row;
    row.layer = record.residuals.layers[step];
    double cos_sum = 0.0;
    double gain_sum = 0.0;
    for (std::size_t i = 0; i < record.requests.size(); ++i) {
      const auto& req = record.requests[i];
      const Tensor& steer = record.plans.at(i).steering.at(step);
      if (ad::norm(steer.values()) == 0.0) continue;
      const auto probe = passive_shift(model, req.prompt, req.decisive_index, row.layer, steer, false);
      cos_sum += probe.cosine;
      gain_sum += probe.gain;
      ++row.n;
    }
    if (row.n > 0) {
      row.mean_cosine = cos_sum / static_cast<double>(row.n);
      row.mean_gain = gain_sum / static_cast<double>(row.n);
    }
    rows.push_back(row);
    if (step < record.deltas.size()) editor::apply_edit(model, record.deltas[step]);
  }
  return rows;
}

std::string cosine_table_csv(const std::vector<CosineRow>& rows, const std::string& config_hash) {
  std::string out = "# config_hash=" + config_hash + "\nlayer,mean_cosine,n\n";
  for (const auto& r : rows) {
    out += std::to_string(r.layer) + "," + format_double(r.mean_cosine) + "," + std::to_string(r.n) + "\n";
  }
  return out;
}

std::string definiteness_csv(const std::vector<DefinitenessRow>& rows, const std::string& config_hash) {
  std::string out = "# config_hash=" + config_hash + "\nl,L,request,fraction_positive,min_eig,violations,samples\n";
  for (const auto& r : rows) {
    out += std::to_string(r.source) + "," + std::to_string(r.sink) + "," + std::to_string(r.request) + "," +
           format_double(r.report.fraction_positive) + "," + format_double(r.report.min_eig) + "," +
           std::to_string(r.report.violations) + "," + std::to_string(r.report.samples) + "\n";
  }
  return out;
}

nlohmann::json block_summary(const JacobianBlock& block) {
  return nlohmann::json{{"source", block.source},
                        {"sink", block.sink},
                        {"frobenius_j", ad::frobenius_norm(block.j)},
                        {"frobenius_s", ad::frobenius_norm(block.s)},
                        {"frobenius_a", ad::frobenius_norm(block.a)},
                        {"min_eig_s", block.min_eig_s},
                        {"reverse_check", block.reverse_check}};
}

}  // namespace hted::diagnostics
