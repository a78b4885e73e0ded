#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "hted/autodiff/gradcheck.hpp"
#include "hted/common/errors.hpp"
#include "hted/model/forward.hpp"
#include "hted/targets/targets.hpp"
#include "support.hpp"

using namespace hted;
using namespace hted::targets;
using hted::testing::tiny_config;

namespace {

struct Fixture {
  model::FactCorpus corpus = model::generate_corpus(hted::testing::tiny_corpus_params());
  model::TransformerModel model;
  EditRequest request;

  Fixture() {
    model::ModelConfig c = tiny_config(corpus.vocab_size());
    c.max_seq_len = corpus.max_sequence_length();
    model = model::TransformerModel(c);
    request = sample_edit_requests(corpus, model, 1, 4).front();
  }
};

}  // namespace

TEST_CASE("spread target on a hand example") {
  const Tensor h_l = Tensor::vector({0.0, 0.0});
  const Tensor h_last = Tensor::vector({1.0, 1.0});
  const Tensor m_last = Tensor::vector({3.0, 1.0});
  const Tensor d = spread_target(h_l, h_last, m_last, 2, SpreadMode::dividing);
  CHECK(d[0] == 1.0);
  CHECK(d[1] == 0.0);
  const Tensor n = spread_target(h_l, h_last, m_last, 2, SpreadMode::no_dividing);
  CHECK(n[0] == 2.0);
  CHECK(n[1] == 0.0);
}

TEST_CASE("spread target at the last layer is the last target") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    const Tensor h = hted::testing::random_tensor({9}, rng);
    const Tensor m = hted::testing::random_tensor({9}, rng);
    const Tensor got = spread_target(h, h, m, 1, SpreadMode::dividing);
    for (std::size_t k = 0; k < 9; ++k) CHECK(std::abs(got[k] - m[k]) <= 1e-15 * (1.0 + std::abs(m[k])));
  }
}

TEST_CASE("zero residual leaves the layer output unchanged") {
  std::mt19937_64 rng(2);
  const Tensor h_l = hted::testing::random_tensor({6}, rng);
  const Tensor h_last = hted::testing::random_tensor({6}, rng);
  for (auto mode : {SpreadMode::dividing, SpreadMode::no_dividing})
    CHECK(ad::bit_equal(spread_target(h_l, h_last, h_last, 3, mode), h_l));
}

TEST_CASE("spread target rejects zero remaining layers and size mismatches") {
  const Tensor a = Tensor::vector({1.0});
  CHECK_THROWS_AS(spread_target(a, a, a, 0, SpreadMode::dividing), DomainError);
  CHECK_THROWS_AS(spread_target(a, Tensor::vector({1.0, 2.0}), a, 1, SpreadMode::dividing), StructuralError);
}

TEST_CASE("method names parse in both spellings") {
  for (Method m : {Method::onelayer, Method::memit_dividing, Method::memit_nodividing, Method::blue, Method::fe_replay}) {
    CHECK(parse_method(method_tag(m)) == m);
    CHECK(parse_method(method_cli_name(m)) == m);
  }
  CHECK(parse_method("memit-div") == Method::memit_dividing);
  CHECK(parse_method("fe") == Method::fe_replay);
  CHECK_THROWS_AS(parse_method("rome"), InputError);
}

TEST_CASE("solver config validation") {
  TargetSolveConfig c;
  CHECK_NOTHROW(c.validate());
  c.max_iters = 0;
  CHECK_THROWS_AS(c.validate(), InputError);
  c = {};
  c.clamp_ratio = 0.0;
  CHECK_THROWS_AS(c.validate(), InputError);
}

TEST_CASE("sampled requests use distinct subjects and new objects") {
  Fixture f;
  const auto reqs = sample_edit_requests(f.corpus, f.model, 10, 3);
  std::set<std::size_t> subjects;
  for (const auto& r : reqs) {
    const auto& rec = f.corpus.records.at(r.record);
    CHECK(subjects.insert(rec.subject).second);
    CHECK(r.prompt == rec.prompt);
    CHECK(r.target != rec.answer);
    bool valid_object = false;
    for (const auto& o : f.corpus.objects[rec.relation]) valid_object |= o == r.target;
    CHECK(valid_object);
    CHECK(r.original == model::greedy_decode(f.model, r.prompt, r.target.size()));
  }
  CHECK_THROWS_AS(sample_edit_requests(f.corpus, f.model, 1000, 3), InputError);
  const auto again = sample_edit_requests(f.corpus, f.model, 10, 3);
  for (std::size_t i = 0; i < reqs.size(); ++i) CHECK(again[i].record == reqs[i].record);
}

TEST_CASE("editing loss program evaluates the answer cross-entropy") {
  Fixture f;
  for (std::size_t layer : f.model.config().decisive_layers) {
    const auto seq = model::concat(f.request.prompt, f.request.target);
    const Tensor h = model::forward(f.model, seq, true).trace->output(layer, f.request.decisive_index);
    const double got = ad::record_forward(editing_loss_program(f.model, f.request, layer), {h}).output_values[0].item();
    const double want = model::answer_cross_entropy(f.model, f.request.prompt, f.request.target);
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
    const auto report = ad::check_gradient(editing_loss_program(f.model, f.request, layer), h);
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("one solver step is a signed Adam step") {
  Fixture f;
  TargetSolveConfig c;
  c.max_iters = 1;
  c.lr = 0.01;
  const std::size_t layer = 2;
  const SolveResult r = solve_target(f.model, f.request, layer, c);
  CHECK(r.iters == 1);
  // Adam's first bias-corrected update is lr * g / (|g| + eps).
  const Tensor g = ad::reverse_jacobian(editing_loss_program(f.model, f.request, layer), r.h);
  for (std::size_t i = 0; i < r.h.size(); ++i) {
    const double want = r.h[i] - c.lr * g[i] / (std::abs(g[i]) + c.adam_eps);
    CHECK(r.m[i] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("solver lowers the answer cross-entropy and honours the clamp") {
  Fixture f;
  TargetSolveConfig c;
  c.max_iters = 60;
  const double before = model::answer_cross_entropy(f.model, f.request.prompt, f.request.target);
  const SolveResult r = solve_target(f.model, f.request, 3, c);
  CHECK(r.achieved_ce < before);
  const model::HiddenReplacement rep{3, f.request.decisive_index, r.m};
  CHECK(model::answer_cross_entropy(f.model, f.request.prompt, f.request.target,
                                    std::span<const model::HiddenReplacement>(&rep, 1)) == r.achieved_ce);

  c.clamp_ratio = 0.25;
  const SolveResult clamped = solve_target(f.model, f.request, 3, c);
  CHECK(ad::norm((clamped.m - clamped.h).values()) <= 0.25 * ad::norm(clamped.h.values()) * (1.0 + 1e-12));
}

TEST_CASE("replaying the unedited first output reproduces the clean trace") {
  Fixture f;
  const auto seq = model::concat(f.request.prompt, f.request.target);
  const auto clean = model::forward(f.model, seq, true);
  const std::size_t first = f.model.config().first_decisive();
  const TargetPlan plan = forward_replay_targets(f.model, f.request, clean.trace->output(first, f.request.decisive_index));
  REQUIRE(plan.layers == f.model.config().decisive_layers);
  for (std::size_t i = 0; i < plan.layers.size(); ++i)
    CHECK(ad::bit_equal(plan.targets[i], clean.trace->output(plan.layers[i], f.request.decisive_index)));
}

TEST_CASE("replay targets equal an independent replaced forward pass") {
  Fixture f;
  std::mt19937_64 rng(6);
  const Tensor m1 = hted::testing::random_tensor({f.model.config().d_model}, rng);
  const TargetPlan plan = forward_replay_targets(f.model, f.request, m1);
  CHECK(ad::bit_equal(plan.targets.front(), m1));
  // Oracle: the trace of the graph with the replacement applied, read back
  // through the batched decisive-state collector.
  const auto seq = model::concat(f.request.prompt, f.request.target);
  const model::HiddenReplacement rep{f.model.config().first_decisive(), f.request.decisive_index, m1};
  const auto r = model::forward_with_replacements(f.model, seq, std::span<const model::HiddenReplacement>(&rep, 1));
  for (std::size_t i = 0; i < plan.layers.size(); ++i)
    CHECK(ad::bit_equal(plan.targets[i], r.trace->output(plan.layers[i], f.request.decisive_index)));
  CHECK(plan.achieved_ce == doctest::Approx(model::answer_cross_entropy(f.model, f.request.prompt, f.request.target,
                                                                        std::span<const model::HiddenReplacement>(&rep, 1))));
}

TEST_CASE("target plans cover the layers their method edits") {
  Fixture f;
  TargetSolveConfig c;
  c.max_iters = 5;
  const auto& layers = f.model.config().decisive_layers;
  CHECK(onelayer_target(f.model, f.request, c).layers == std::vector<std::size_t>{layers.back()});
  CHECK(blue_targets(f.model, f.request, c).layers == std::vector<std::size_t>{layers.front(), layers.back()});
  const TargetPlan fe = fe_targets(f.model, f.request, c);
  CHECK(fe.layers == layers);
  CHECK_THROWS_AS(fe.target_for(0), InputError);

  nlohmann::json j = fe;
  const TargetPlan back = j.get<TargetPlan>();
  CHECK(back.layers == fe.layers);
  for (std::size_t i = 0; i < fe.targets.size(); ++i) CHECK(ad::bit_equal(back.targets[i], fe.targets[i]));
}

TEST_CASE("edit requests validate their tokens") {
  EditRequest r;
  r.prompt = {1, 2};
  r.decisive_index = 1;
  r.target = {3};
  CHECK_NOTHROW(r.validate(5));
  r.target = {7};
  CHECK_THROWS_AS(r.validate(5), InputError);
  r.target = {};
  CHECK_THROWS_AS(r.validate(5), InputError);
  r.target = {3};
  r.decisive_index = 2;
  CHECK_THROWS_AS(r.validate(5), InputError);
}
