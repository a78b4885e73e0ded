#include "hted/targets/targets.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "hted/common/errors.hpp"
#include "hted/model/graph.hpp"

namespace hted::targets {

namespace {

struct MethodNames {
  Method method;
  std::string_view tag;
  std::string_view cli;
};

constexpr MethodNames kMethods[] = {
    {Method::onelayer, "onelayer", "onelayer"},
    {Method::memit_dividing, "memit_dividing", "memit-div"},
    {Method::memit_nodividing, "memit_nodividing", "memit-nodiv"},
    {Method::blue, "blue", "blue"},
    {Method::fe_replay, "fe_replay", "fe"},
};

}  // namespace

std::string_view method_tag(Method m) noexcept {
  for (const auto& n : kMethods)
    if (n.method == m) return n.tag;
  return "?";
}

std::string_view method_cli_name(Method m) noexcept {
  for (const auto& n : kMethods)
    if (n.method == m) return n.cli;
  return "?";
}

Method parse_method(std::string_view name) {
  for (const auto& n : kMethods)
    if (n.tag == name || n.cli == name) return n.method;
  throw InputError("unknown method '" + std::string(name) + "' (expected onelayer, memit-div, memit-nodiv, blue or fe)");
}

void EditRequest::validate(std::size_t vocab_size) const {
  if (target.empty()) throw InputError("edit request has an empty target answer");
  if (prompt.empty() || decisive_index >= prompt.size()) throw InputError("edit request decisive index outside prompt");
  for (const Tokens* seq : {&prompt, &target, &original}) {
    for (auto t : *seq) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) throw InputError("edit request token outside vocabulary");
    }
  }
}

void to_json(nlohmann::json& j, const EditRequest& r) {
  j = nlohmann::json{{"prompt", r.prompt},
                     {"decisive_index", r.decisive_index},
                     {"target", r.target},
                     {"original", r.original},
                     {"record", r.record}};
}

void from_json(const nlohmann::json& j, EditRequest& r) {
  j.at("prompt").get_to(r.prompt);
  j.at("decisive_index").get_to(r.decisive_index);
  j.at("target").get_to(r.target);
  j.at("original").get_to(r.original);
  j.at("record").get_to(r.record);
}

std::vector<EditRequest> sample_edit_requests(const model::FactCorpus& corpus, const TransformerModel& model,
                                              std::size_t n, std::uint64_t seed) {
  if (n == 0) throw InputError("edit batch must be nonempty");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(corpus.records.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::set<std::size_t> used_subjects;
  std::vector<EditRequest> out;
  for (std::size_t idx : order) {
    if (out.size() == n) break;
    const auto& rec = corpus.records[idx];
    if (!used_subjects.insert(rec.subject).second) continue;
    const auto& objects = corpus.objects.at(rec.relation);
    std::size_t other = std::uniform_int_distribution<std::size_t>(0, objects.size() - 2)(rng);
    if (other >= rec.object) ++other;
    EditRequest r;
    r.prompt = rec.prompt;
    r.decisive_index = rec.decisive_index;
    r.target = objects[other];
    r.record = idx;
    out.push_back(std::move(r));
  }
  if (out.size() < n) {
    throw InputError("requested " + std::to_string(n) + " edits but the corpus has only " +
                     std::to_string(out.size()) + " distinct subjects");
  }
  std::vector<Tokens> prompts;
  for (const auto& r : out) prompts.push_back(r.prompt);
  const std::size_t steps = out.front().target.size();
  const auto greedy = model::greedy_decode_batch(model, prompts, steps);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].original = out[i].target.size() == steps ? greedy[i] : model::greedy_decode(model, out[i].prompt, out[i].target.size());
  }
  return out;
}

void TargetSolveConfig::validate() const {
  if (max_iters < 1) throw InputError("target solver needs at least one iteration");
  if (!(ce_threshold > 0.0)) throw InputError("target solver threshold must be positive");
  if (!(lr > 0.0)) throw InputError("target solver learning rate must be positive");
  if (clamp_ratio && !(*clamp_ratio > 0.0)) throw InputError("delta clamp ratio must be positive");
}

ad::Program editing_loss_program(const TransformerModel& model, const EditRequest& request, std::size_t layer) {
  model.config().decisive_index(layer);
  request.validate(model.config().vocab_size);
  const Tokens seq = model::concat(request.prompt, request.target);
  std::vector<std::int64_t> rows;
  for (std::size_t i = 0; i < request.target.size(); ++i) {
    rows.push_back(static_cast<std::int64_t>(request.prompt.size() - 1 + i));
  }
  const std::vector<std::int64_t> answer(request.target.begin(), request.target.end());
  const std::size_t position = request.decisive_index;
  return [&model, seq, rows, answer, layer, position](ad::Tape& tape, std::span<const ad::Slot> in) {
    const auto params = model::bind_parameters(tape, model);
    const model::SequenceBatch batch = model::SequenceBatch::from(std::span<const Tokens>(&seq, 1));
    model::GraphOptions options;
    options.replacements.push_back({layer, position, in[0]});
    options.output_rows = rows;
    const auto g = model::build_forward(tape, params, model.config(), batch, options);
    return std::vector<ad::Slot>{tape.cross_entropy(*g.logits, answer)};
  };
}

SolveResult solve_target(const TransformerModel& model, const EditRequest& request, std::size_t layer,
                         const TargetSolveConfig& cfg) {
  cfg.validate();
  const auto& config = model.config();
  config.decisive_index(layer);
  request.validate(config.vocab_size);

  const Tokens seq = model::concat(request.prompt, request.target);
  const auto plain = model::forward(model, seq, true);
  SolveResult result;
  result.h = plain.trace->output(layer, request.decisive_index);
  const double h_norm = ad::norm(result.h.values());

  const model::SequenceBatch batch = model::SequenceBatch::from(std::span<const Tokens>(&seq, 1));
  std::vector<std::int64_t> rows;
  std::vector<std::int64_t> answer;
  for (std::size_t i = 0; i < request.target.size(); ++i) {
    rows.push_back(static_cast<std::int64_t>(request.prompt.size() - 1 + i));
    answer.push_back(request.target[i]);
  }

  Tensor delta(result.h.shape());
  Tensor mom1(result.h.shape());
  Tensor mom2(result.h.shape());
  for (std::size_t iter = 0;; ++iter) {
    try {
      ad::Tape tape;
      const auto params = model::bind_parameters(tape, model);
      const ad::Slot d = tape.input(delta);
      const ad::Slot m = tape.add(tape.borrow(result.h), d);
      model::GraphOptions options;
      options.replacements.push_back({layer, request.decisive_index, m});
      options.output_rows = rows;
      const auto g = model::build_forward(tape, params, config, batch, options);
      const ad::Slot loss = tape.cross_entropy(*g.logits, answer);
      if (tape.value(loss).item() < cfg.ce_threshold || iter == cfg.max_iters) break;
      const ad::Slot wrt[] = {d};
      const Tensor grad = tape.backward(loss, wrt).take(d);
      const double t = static_cast<double>(iter + 1);
      const double c1 = 1.0 - std::pow(cfg.beta1, t);
      const double c2 = 1.0 - std::pow(cfg.beta2, t);
      for (std::size_t i = 0; i < delta.size(); ++i) {
        mom1[i] = cfg.beta1 * mom1[i] + (1.0 - cfg.beta1) * grad[i];
        mom2[i] = cfg.beta2 * mom2[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        delta[i] -= cfg.lr * (mom1[i] / c1) / (std::sqrt(mom2[i] / c2) + cfg.adam_eps);
      }
      if (cfg.clamp_ratio) {
        const double limit = *cfg.clamp_ratio * h_norm;
        const double dn = ad::norm(delta.values());
        if (dn > limit) {
          for (auto& v : delta.values()) v *= limit / dn;
        }
      }
      if (!delta.all_finite()) throw NumericError("delta became non-finite");
      result.iters = iter + 1;
    } catch (const NumericError& e) {
      throw NumericError("target solve failed at iteration " + std::to_string(iter) + ": " + e.what());
    }
  }
  result.m = result.h + delta;
  const model::HiddenReplacement rep{layer, request.decisive_index, result.m};
  result.achieved_ce = model::answer_cross_entropy(model, request.prompt, request.target,
                                                   std::span<const model::HiddenReplacement>(&rep, 1));
  return result;
}

Tensor spread_target(const Tensor& h_l, const Tensor& h_last, const Tensor& m_last, std::size_t remaining,
                     SpreadMode mode) {
  if (remaining == 0) throw DomainError("spread_target needs at least one remaining layer");
  if (h_l.size() != h_last.size() || h_l.size() != m_last.size()) throw StructuralError("spread_target size mismatch");
  Tensor out(h_l.shape());
  const double count = static_cast<double>(remaining);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double r = m_last[i] - h_last[i];
    out[i] = mode == SpreadMode::dividing ? h_l[i] + r / count : h_l[i] + r;
  }
  return out;
}

Tensor spread_target(const model::HiddenTrace& current, std::size_t position, const Tensor& m_last,
                     std::size_t layer, std::size_t remaining, SpreadMode mode) {
  return spread_target(current.output(layer, position), current.output(current.layers.back(), position), m_last,
                       remaining, mode);
}

const Tensor& TargetPlan::target_for(std::size_t layer) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i] == layer) return targets.at(i);
  throw InputError("plan has no target for layer " + std::to_string(layer));
}

void to_json(nlohmann::json& j, const TargetPlan& p) {
  auto dump = [](const std::vector<Tensor>& ts) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : ts) arr.push_back(std::vector<double>(t.values().begin(), t.values().end()));
    return arr;
  };
  j = nlohmann::json{{"method", method_tag(p.method)},
                     {"layers", p.layers},
                     {"targets", dump(p.targets)},
                     {"steering", dump(p.steering)},
                     {"achieved_ce", p.achieved_ce},
                     {"iterations", p.iterations}};
}

void from_json(const nlohmann::json& j, TargetPlan& p) {
  auto load = [](const nlohmann::json& arr) {
    std::vector<Tensor> out;
    for (const auto& v : arr) out.push_back(Tensor::vector(v.get<std::vector<double>>()));
    return out;
  };
  p.method = parse_method(j.at("method").get<std::string>());
  j.at("layers").get_to(p.layers);
  p.targets = load(j.at("targets"));
  p.steering = load(j.value("steering", nlohmann::json::array()));
  j.at("achieved_ce").get_to(p.achieved_ce);
  j.at("iterations").get_to(p.iterations);
  if (p.targets.size() != p.layers.size()) throw FormatError("target plan has mismatched layers and targets");
}

TargetPlan forward_replay_targets(const TransformerModel& model, const EditRequest& request, const Tensor& m_first) {
  const auto& config = model.config();
  const Tokens seq = model::concat(request.prompt, request.target);
  const auto r = model::forward_with_replacement(model, seq, config.first_decisive(), request.decisive_index, m_first);
  TargetPlan plan;
  plan.method = Method::fe_replay;
  plan.layers = config.decisive_layers;
  for (std::size_t layer : plan.layers) plan.targets.push_back(r.trace->output(layer, request.decisive_index));
  plan.achieved_ce = model::answer_cross_entropy_from_logits(r.logits, request.prompt.size(), request.target);
  return plan;
}

TargetPlan fe_targets(const TransformerModel& model, const EditRequest& request, const TargetSolveConfig& cfg) {
  const SolveResult s = solve_target(model, request, model.config().first_decisive(), cfg);
  TargetPlan plan = forward_replay_targets(model, request, s.m);
  plan.achieved_ce = s.achieved_ce;
  plan.iterations = s.iters;
  return plan;
}

TargetPlan blue_targets(const TransformerModel& model, const EditRequest& request, const TargetSolveConfig& cfg) {
  const auto& config = model.config();
  if (config.decisive_layers.size() < 2) throw InputError("BLUE needs at least two decisive layers");
  const SolveResult first = solve_target(model, request, config.first_decisive(), cfg);
  const SolveResult last = solve_target(model, request, config.last_decisive(), cfg);
  TargetPlan plan;
  plan.method = Method::blue;
  plan.layers = {config.first_decisive(), config.last_decisive()};
  plan.targets = {first.m, last.m};
  plan.achieved_ce = last.achieved_ce;
  plan.iterations = first.iters + last.iters;
  return plan;
}

TargetPlan onelayer_target(const TransformerModel& model, const EditRequest& request, const TargetSolveConfig& cfg) {
  const SolveResult s = solve_target(model, request, model.config().last_decisive(), cfg);
  TargetPlan plan;
  plan.method = Method::onelayer;
  plan.layers = {model.config().last_decisive()};
  plan.targets = {s.m};
  plan.achieved_ce = s.achieved_ce;
  plan.iterations = s.iters;
  return plan;
}

}  // namespace hted::targets
