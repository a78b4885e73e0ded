#include "hted/editor/editor.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include <Eigen/Dense>

#include "hted/common/errors.hpp"
#include "hted/common/format.hpp"

namespace hted::editor {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;

ConstMap view(const Tensor& t) {
  return ConstMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

Tensor from_eigen(const RowMatrix& m) {
  Tensor t = Tensor::zeros(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  Eigen::Map<RowMatrix>(t.data(), m.rows(), m.cols()) = m;
  return t;
}

bool has_columns(const Tensor& t) { return t.rank() == 2 && t.cols() > 0; }

RowMatrix system_matrix(const EditMatrices& mats, double lambda) {
  const auto k = view(mats.keys);
  RowMatrix c = k * k.transpose();
  if (has_columns(mats.preserved)) {
    const auto kj = view(mats.preserved);
    c.noalias() += lambda * (kj * kj.transpose());
  }
  return c;
}

void check_shapes(const Tensor& w, const EditMatrices& mats) {
  if (w.rank() != 2 || mats.keys.rank() != 2 || mats.targets.rank() != 2) {
    throw StructuralError("edit matrices must be rank 2");
  }
  if (mats.keys.cols() == 0) throw StructuralError("edit needs at least one key");
  if (w.cols() != mats.keys.rows()) {
    throw StructuralError("W of shape " + w.shape_string() + " cannot act on keys of shape " + mats.keys.shape_string());
  }
  if (mats.targets.rows() != w.rows() || mats.targets.cols() != mats.keys.cols()) {
    throw StructuralError("targets of shape " + mats.targets.shape_string() + " do not match W " + w.shape_string() +
                          " and keys " + mats.keys.shape_string());
  }
  if (has_columns(mats.preserved) && mats.preserved.rows() != mats.keys.rows()) {
    throw StructuralError("preservation keys of shape " + mats.preserved.shape_string() + " do not match keys");
  }
}

std::vector<Tokens> prompts_of(std::span<const EditRequest> batch) {
  std::vector<Tokens> out;
  for (const auto& r : batch) out.push_back(r.prompt);
  return out;
}

std::vector<std::size_t> positions_of(std::span<const EditRequest> batch) {
  std::vector<std::size_t> out;
  for (const auto& r : batch) out.push_back(r.decisive_index);
  return out;
}

nlohmann::json tensor_json(const Tensor& t) {
  return nlohmann::json{{"shape", t.shape()}, {"values", std::vector<double>(t.values().begin(), t.values().end())}};
}

Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<ad::Shape>(), j.at("values").get<std::vector<double>>());
}

}  // namespace

void EditConfig::validate() const {
  if (!(lambda > 0.0)) throw InputError("lambda must be positive");
  if (ridge_eps && !(*ridge_eps >= 0.0)) throw InputError("ridge_eps must be non-negative");
}

std::vector<KeyedPrompt> preservation_pool(const model::FactCorpus& corpus, std::span<const EditRequest> batch) {
  std::set<std::size_t> edited;
  for (const auto& r : batch) edited.insert(corpus.records.at(r.record).subject);
  std::vector<KeyedPrompt> pool;
  for (const auto& rec : corpus.records) {
    if (edited.contains(rec.subject)) continue;
    pool.push_back({rec.prompt, rec.decisive_index});
    for (const auto& p : rec.paraphrases) pool.push_back({p.tokens, p.decisive_index});
  }
  return pool;
}

Tensor collect_keys(const TransformerModel& model, std::span<const EditRequest> requests, std::size_t layer) {
  const std::size_t slot = model.config().decisive_index(layer);
  const auto prompts = prompts_of(requests);
  const auto positions = positions_of(requests);
  return model::collect_decisive_states(model, prompts, positions).keys[slot].transposed();
}

std::vector<std::size_t> choose_preservation_samples(std::size_t pool_size, std::size_t u, std::uint64_t seed) {
  if (u > pool_size) {
    throw InputError("preservation sample size " + std::to_string(u) + " exceeds the " + std::to_string(pool_size) +
                     " available prompts");
  }
  std::vector<std::size_t> idx(pool_size);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(u);
  return idx;
}

Tensor collect_preservation_keys(const TransformerModel& model, std::span<const KeyedPrompt> pool, std::size_t layer,
                                 std::size_t u, std::uint64_t seed) {
  const std::size_t slot = model.config().decisive_index(layer);
  const auto chosen = choose_preservation_samples(pool.size(), u, seed);
  if (u == 0) return Tensor::zeros(model.config().d_mlp, 0);
  std::vector<Tokens> prompts;
  std::vector<std::size_t> positions;
  for (auto i : chosen) {
    prompts.push_back(pool[i].tokens);
    positions.push_back(pool[i].decisive_index);
  }
  return model::collect_decisive_states(model, prompts, positions).keys[slot].transposed();
}

double default_ridge(const EditMatrices& mats, double lambda) {
  double trace = 0.0;
  for (double v : mats.keys.values()) trace += v * v;
  double preserved = 0.0;
  if (has_columns(mats.preserved))
    for (double v : mats.preserved.values()) preserved += v * v;
  trace += lambda * preserved;
  return 1e-6 * trace / static_cast<double>(mats.keys.rows());
}

EditDelta solve_delta(const Tensor& w, const EditMatrices& mats, double lambda, std::optional<double> ridge_eps,
                      std::size_t layer) {
  check_shapes(w, mats);
  if (!(lambda > 0.0)) throw InputError("lambda must be positive");
  EditDelta out;
  out.layer = layer;
  out.ridge = ridge_eps.value_or(default_ridge(mats, lambda));
  if (!(out.ridge >= 0.0)) throw InputError("ridge_eps must be non-negative");

  RowMatrix c = system_matrix(mats, lambda);
  c.diagonal().array() += out.ridge;
  const Tensor residual = mats.targets - ad::matmul(w, mats.keys);
  const RowMatrix rhs = view(residual) * view(mats.keys).transpose();

  Eigen::LLT<Eigen::MatrixXd> llt(c);
  if (llt.info() != Eigen::Success) {
    throw NumericError("edit system matrix is not positive definite at layer " + std::to_string(layer) +
                       "; increase ridge_eps (currently " + format_double(out.ridge) + ")");
  }
  const Eigen::MatrixXd delta_t = llt.solve(rhs.transpose());
  out.delta = from_eigen(delta_t.transpose());
  if (!out.delta.all_finite()) {
    throw NumericError("edit solve produced non-finite values at layer " + std::to_string(layer) +
                       "; increase ridge_eps");
  }
  out.frobenius = ad::frobenius_norm(out.delta);
  out.max_abs = ad::max_abs(out.delta.values());
  return out;
}

double normal_equation_residual(const Tensor& w, const Tensor& delta, const EditMatrices& mats, double lambda,
                                double ridge) {
  check_shapes(w, mats);
  RowMatrix c = system_matrix(mats, lambda);
  c.diagonal().array() += ridge;
  const Tensor residual = mats.targets - ad::matmul(w, mats.keys);
  const RowMatrix rhs = view(residual) * view(mats.keys).transpose();
  const RowMatrix lhs = view(delta) * c;
  const double denom = rhs.norm();
  const double num = (lhs - rhs).norm();
  if (denom == 0.0) return num;
  return num / denom;
}

void apply_edit(TransformerModel& model, const EditDelta& delta) {
  model.add_to_down_projection(delta.layer, delta.delta);
}

void to_json(nlohmann::json& j, const EditRunRecord& r) {
  nlohmann::json deltas = nlohmann::json::array();
  for (const auto& d : r.deltas) {
    deltas.push_back({{"layer", d.layer},
                      {"delta", tensor_json(d.delta)},
                      {"frobenius", d.frobenius},
                      {"max_abs", d.max_abs},
                      {"ridge", d.ridge}});
  }
  j = nlohmann::json{{"method", targets::method_tag(r.method)},
                     {"requests", r.requests},
                     {"deltas", deltas},
                     {"residuals",
                      {{"layers", r.residuals.layers},
                       {"initial_norms", r.residuals.initial_norms},
                       {"ratios", r.residuals.ratios},
                       {"mean_ratios", r.residuals.mean_ratios},
                       {"degenerate", r.residuals.degenerate}}},
                     {"plans", r.plans},
                     {"pre_checksum", r.pre_checksum},
                     {"post_checksum", r.post_checksum},
                     {"solver_iterations", r.solver_iterations}};
}

void from_json(const nlohmann::json& j, EditRunRecord& r) {
  try {
    r.method = targets::parse_method(j.at("method").get<std::string>());
    j.at("requests").get_to(r.requests);
    r.deltas.clear();
    for (const auto& d : j.at("deltas")) {
      EditDelta e;
      d.at("layer").get_to(e.layer);
      e.delta = tensor_from_json(d.at("delta"));
      d.at("frobenius").get_to(e.frobenius);
      d.at("max_abs").get_to(e.max_abs);
      d.at("ridge").get_to(e.ridge);
      r.deltas.push_back(std::move(e));
    }
    const auto& res = j.at("residuals");
    res.at("layers").get_to(r.residuals.layers);
    res.at("initial_norms").get_to(r.residuals.initial_norms);
    res.at("ratios").get_to(r.residuals.ratios);
    res.at("mean_ratios").get_to(r.residuals.mean_ratios);
    res.at("degenerate").get_to(r.residuals.degenerate);
    j.at("plans").get_to(r.plans);
    j.at("pre_checksum").get_to(r.pre_checksum);
    j.at("post_checksum").get_to(r.post_checksum);
    j.at("solver_iterations").get_to(r.solver_iterations);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid edit record: ") + e.what());
  }
}

std::string residual_csv(const EditRunRecord& record, const std::string& config_hash) {
  std::string out = "# config_hash=" + config_hash + "\n";
  out += "method,layer,mean_ratio";
  const std::size_t n = record.residuals.initial_norms.size();
  for (std::size_t i = 0; i < n; ++i) out += ",r" + std::to_string(i);
  out += "\n";
  for (std::size_t s = 0; s < record.residuals.layers.size(); ++s) {
    out += std::string(targets::method_tag(record.method)) + "," + std::to_string(record.residuals.layers[s]) + "," +
           format_double(record.residuals.mean_ratios[s + 1]);
    for (double v : record.residuals.ratios[s + 1]) out += "," + format_double(v);
    out += "\n";
  }
  return out;
}

namespace {

// Ratio of ||m_L - h_L|| to the initial residual; 1 when the latter is exactly zero.
std::vector<double> residual_ratios(const Tensor& h_last, const std::vector<Tensor>& final_targets,
                                    const std::vector<double>& initial) {
  std::vector<double> out;
  for (std::size_t i = 0; i < final_targets.size(); ++i) {
    const auto h = h_last.row(i);
    double sq = 0.0;
    for (std::size_t c = 0; c < h.size(); ++c) {
      const double r = final_targets[i][c] - h[c];
      sq += r * r;
    }
    out.push_back(initial[i] == 0.0 ? 1.0 : std::sqrt(sq) / initial[i]);
  }
  return out;
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

EditRunRecord run_edit(TransformerModel& model, std::span<const EditRequest> batch,
                       std::span<const KeyedPrompt> preservation, const EditConfig& cfg,
                       const targets::TargetSolveConfig& solve_cfg) {
  cfg.validate();
  solve_cfg.validate();
  if (batch.empty()) throw InputError("edit batch must be nonempty");
  const auto start = std::chrono::steady_clock::now();
  const auto& config = model.config();
  for (const auto& r : batch) r.validate(config.vocab_size);
  // Fail on an oversized sample before any work is done.
  choose_preservation_samples(preservation.size(), cfg.preservation_samples, cfg.seed);

  const TransformerModel backup = model;
  EditRunRecord record;
  record.method = cfg.method;
  record.requests.assign(batch.begin(), batch.end());
  record.pre_checksum = model.checksum();
  try {
    const std::size_t n = batch.size();
    const bool spreading = cfg.method == Method::memit_dividing || cfg.method == Method::memit_nodividing;
    std::vector<std::size_t> layers;
    switch (cfg.method) {
      case Method::memit_dividing:
      case Method::memit_nodividing:
      case Method::fe_replay:
        layers = config.decisive_layers;
        break;
      case Method::onelayer:
        layers = {config.last_decisive()};
        break;
      case Method::blue:
        if (config.decisive_layers.size() < 2) throw InputError("BLUE needs at least two decisive layers");
        layers = {config.first_decisive(), config.last_decisive()};
        break;
    }

    // The final-layer anchor each request is ultimately steered toward.
    std::vector<Tensor> final_targets;
    for (const auto& r : batch) {
      targets::TargetPlan plan;
      switch (cfg.method) {
        case Method::fe_replay:
          plan = targets::fe_targets(model, r, solve_cfg);
          break;
        case Method::blue:
          plan = targets::blue_targets(model, r, solve_cfg);
          break;
        case Method::onelayer:
        case Method::memit_dividing:
        case Method::memit_nodividing:
          plan = targets::onelayer_target(model, r, solve_cfg);
          break;
      }
      final_targets.push_back(plan.targets.back());
      if (spreading) {
        // Spread targets depend on the partially edited model and are filled in below.
        plan.method = cfg.method;
        plan.layers = layers;
        plan.targets.assign(layers.size(), Tensor());
      }
      record.solver_iterations += plan.iterations;
      record.plans.push_back(std::move(plan));
    }

    const auto prompts = prompts_of(batch);
    const auto positions = positions_of(batch);
    const std::size_t last_slot = config.decisive_layers.size() - 1;
    auto states = model::collect_decisive_states(model, prompts, positions);

    ResidualTrace& trace = record.residuals;
    trace.layers = layers;
    for (std::size_t i = 0; i < n; ++i) {
      double sq = 0.0;
      const auto h = states.outputs[last_slot].row(i);
      for (std::size_t c = 0; c < h.size(); ++c) sq += (final_targets[i][c] - h[c]) * (final_targets[i][c] - h[c]);
      trace.initial_norms.push_back(std::sqrt(sq));
      const double scale = std::max(1.0, ad::norm(h));
      trace.degenerate.push_back(trace.initial_norms.back() <= 1e-9 * scale);
    }
    trace.ratios.push_back(std::vector<double>(n, 1.0));
    trace.mean_ratios.push_back(1.0);

    for (std::size_t step = 0; step < layers.size(); ++step) {
      const std::size_t layer = layers[step];
      const std::size_t slot = config.decisive_index(layer);
      EditMatrices mats;
      mats.keys = states.keys[slot].transposed();
      mats.targets = Tensor::zeros(config.d_model, n);
      for (std::size_t i = 0; i < n; ++i) {
        Tensor m;
        if (spreading) {
          const auto mode = cfg.method == Method::memit_dividing ? targets::SpreadMode::dividing
                                                                 : targets::SpreadMode::no_dividing;
          const Tensor h_l = states.outputs[slot].row_vector(i);
          m = targets::spread_target(h_l, states.outputs[last_slot].row_vector(i), final_targets[i],
                                     layers.size() - step, mode);
          record.plans[i].targets[step] = m;
          record.plans[i].steering.push_back(m - h_l);
        } else {
          m = record.plans[i].target_for(layer);
        }
        for (std::size_t c = 0; c < config.d_model; ++c) mats.targets.at(c, i) = m[c];
      }
      mats.preserved = collect_preservation_keys(model, preservation, layer, cfg.preservation_samples, cfg.seed);
      EditDelta delta = solve_delta(model.down_projection(layer), mats, cfg.lambda, cfg.ridge_eps, layer);
      apply_edit(model, delta);
      record.deltas.push_back(std::move(delta));

      states = model::collect_decisive_states(model, prompts, positions);
      trace.ratios.push_back(residual_ratios(states.outputs[last_slot], final_targets, trace.initial_norms));
      trace.mean_ratios.push_back(mean(trace.ratios.back()));
    }
    record.post_checksum = model.checksum();
  } catch (...) {
    model = backup;
    throw;
  }
  record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return record;
}

}  // namespace hted::editor
