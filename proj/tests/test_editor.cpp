#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "hted/common/errors.hpp"
#include "hted/editor/editor.hpp"
#include "hted/model/forward.hpp"
#include "support.hpp"

using namespace hted;
using namespace hted::editor;
using hted::testing::random_matrix;

namespace {

struct Fixture {
  model::FactCorpus corpus = model::generate_corpus(hted::testing::tiny_corpus_params());
  model::TransformerModel model;
  std::vector<EditRequest> batch;
  std::vector<KeyedPrompt> pool;
  EditConfig cfg;
  targets::TargetSolveConfig solve;

  Fixture() {
    model::ModelConfig c = hted::testing::tiny_config(corpus.vocab_size());
    c.max_seq_len = corpus.max_sequence_length();
    model = model::TransformerModel(c);
    batch = targets::sample_edit_requests(corpus, model, 3, 2);
    pool = preservation_pool(corpus, batch);
    cfg.preservation_samples = 12;
    cfg.seed = 4;
    solve.max_iters = 20;
  }
};

}  // namespace

TEST_CASE("two by two instance with a hand solution") {
  EditMatrices mats;
  mats.keys = Tensor::matrix(2, 1, {1, 0});
  mats.targets = Tensor::matrix(2, 1, {1, 0});
  mats.preserved = Tensor::matrix(2, 1, {0, 1});
  const EditDelta d = solve_delta(Tensor::zeros(2, 2), mats, 1.0, 0.0);
  CHECK(d.delta.at(0, 0) == 1.0);
  CHECK(d.delta.at(0, 1) == 0.0);
  CHECK(d.delta.at(1, 0) == 0.0);
  CHECK(d.delta.at(1, 1) == 0.0);
  CHECK(d.frobenius == 1.0);
}

TEST_CASE("targets already produced by W give an exactly zero delta") {
  std::mt19937_64 rng(1);
  const Tensor w = random_matrix(5, 7, rng);
  EditMatrices mats;
  mats.keys = random_matrix(7, 3, rng);
  mats.targets = ad::matmul(w, mats.keys);
  mats.preserved = random_matrix(7, 10, rng);
  const EditDelta d = solve_delta(w, mats, 1.0, std::nullopt);
  for (double v : d.delta.values()) CHECK(v == 0.0);
}

TEST_CASE("delta agrees with a long double elimination oracle") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t dk = 8, dm = 8;
    const Tensor w = random_matrix(dm, dk, rng);
    EditMatrices mats;
    mats.keys = random_matrix(dk, 4, rng);
    mats.targets = random_matrix(dm, 4, rng);
    mats.preserved = random_matrix(dk, 12, rng);
    const double lambda = 0.7, ridge = 1e-3;
    const EditDelta d = solve_delta(w, mats, lambda, ridge);

    const Tensor want = hted::testing::oracle_delta(w, mats.keys, mats.targets, mats.preserved, lambda, ridge);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(d.delta[i] - want[i]) < 1e-8);
    CHECK(normal_equation_residual(w, d.delta, mats, lambda, ridge) < 1e-10);
  }
}

TEST_CASE("free keys are hit exactly when preservation is negligible") {
  std::mt19937_64 rng(3);
  const Tensor w = random_matrix(6, 10, rng);
  EditMatrices mats;
  mats.keys = random_matrix(10, 4, rng);
  mats.targets = random_matrix(6, 4, rng);
  mats.preserved = random_matrix(10, 3, rng, 1e-6);
  const EditDelta d = solve_delta(w, mats, 1.0, 1e-12);
  const Tensor hit = ad::matmul(w + d.delta, mats.keys);
  for (std::size_t i = 0; i < hit.size(); ++i) CHECK(std::abs(hit[i] - mats.targets[i]) < 1e-6);
}

TEST_CASE("raising lambda suppresses the change on preserved keys") {
  std::mt19937_64 rng(4);
  const Tensor w = random_matrix(6, 10, rng);
  EditMatrices mats;
  mats.keys = random_matrix(10, 3, rng);
  mats.targets = random_matrix(6, 3, rng);
  mats.preserved = random_matrix(10, 20, rng);
  double prev = INFINITY;
  for (double lambda : {0.1, 1.0, 10.0, 100.0}) {
    const EditDelta d = solve_delta(w, mats, lambda, std::nullopt);
    const double moved = ad::frobenius_norm(ad::matmul(d.delta, mats.preserved));
    CHECK(moved < prev);
    prev = moved;
  }
}

TEST_CASE("solver rejects bad inputs") {
  EditMatrices mats;
  mats.keys = Tensor::matrix(2, 1, {1, 0});
  mats.targets = Tensor::matrix(2, 1, {1, 0});
  mats.preserved = Tensor::matrix(2, 1, {0, 0});
  CHECK_THROWS_AS(solve_delta(Tensor::zeros(2, 2), mats, 0.0, 0.0), InputError);
  CHECK_THROWS_AS(solve_delta(Tensor::zeros(2, 2), mats, 1.0, -1.0), InputError);
  // No preservation, no ridge, and a key dimension the batch never spans.
  CHECK_THROWS_AS(solve_delta(Tensor::zeros(2, 2), mats, 1.0, 0.0), NumericError);
  CHECK_THROWS_AS(solve_delta(Tensor::zeros(3, 2), mats, 1.0, 0.0), StructuralError);
}

TEST_CASE("applying a delta and its negation restores the weights bit for bit") {
  Fixture f;
  const std::string before = f.model.checksum();
  const auto ref = f.model.down_projection(2);
  std::mt19937_64 rng(5);
  EditDelta d;
  d.layer = 2;
  d.delta = random_matrix(8, 16, rng);
  apply_edit(f.model, d);
  CHECK(f.model.checksum() != before);
  d.delta = -1.0 * d.delta;
  apply_edit(f.model, d);
  CHECK(ad::bit_equal(f.model.down_projection(2), ref));
  CHECK(f.model.checksum() == before);
}

TEST_CASE("a zero delta keeps the checksum") {
  Fixture f;
  const std::string before = f.model.checksum();
  EditDelta d;
  d.layer = 1;
  d.delta = Tensor::zeros(8, 16);
  apply_edit(f.model, d);
  CHECK(f.model.checksum() == before);
}

TEST_CASE("layers are edited shallow to deep on the partially edited model") {
  Fixture f;
  f.cfg.method = Method::fe_replay;
  model::TransformerModel edited = f.model;
  const EditRunRecord rec = run_edit(edited, f.batch, f.pool, f.cfg, f.solve);
  REQUIRE(rec.deltas.size() == 3);
  CHECK(rec.pre_checksum == f.model.checksum());
  CHECK(rec.post_checksum == edited.checksum());

  // Oracle: rebuild each layer's system from the model holding only the
  // shallower deltas, with the replay targets fixed up front.
  model::TransformerModel replay = f.model;
  for (std::size_t step = 0; step < 3; ++step) {
    const std::size_t layer = rec.deltas[step].layer;
    CHECK(layer == f.model.config().decisive_layers[step]);
    EditMatrices mats;
    mats.keys = collect_keys(replay, f.batch, layer);
    mats.targets = Tensor::zeros(8, f.batch.size());
    for (std::size_t i = 0; i < f.batch.size(); ++i) {
      const Tensor& m = rec.plans[i].target_for(layer);
      for (std::size_t c = 0; c < 8; ++c) mats.targets.at(c, i) = m[c];
    }
    mats.preserved = collect_preservation_keys(replay, f.pool, layer, f.cfg.preservation_samples, f.cfg.seed);
    const EditDelta want = solve_delta(replay.down_projection(layer), mats, f.cfg.lambda, f.cfg.ridge_eps, layer);
    CHECK(ad::bit_equal(want.delta, rec.deltas[step].delta));

    if (step > 0) {
      // Keys from the unedited model give a different answer.
      EditMatrices stale = mats;
      stale.keys = collect_keys(f.model, f.batch, layer);
      CHECK_FALSE(ad::bit_equal(solve_delta(replay.down_projection(layer), stale, f.cfg.lambda, f.cfg.ridge_eps).delta,
                                rec.deltas[step].delta));
    }
    apply_edit(replay, rec.deltas[step]);
  }
  CHECK(replay.checksum() == edited.checksum());
}

TEST_CASE("memit residual ratios follow the recorded trace") {
  Fixture f;
  model::TransformerModel edited = f.model;
  const EditRunRecord rec = run_edit(edited, f.batch, f.pool, f.cfg, f.solve);
  const auto& r = rec.residuals;
  REQUIRE(r.ratios.size() == 4);
  for (double v : r.ratios[0]) CHECK(v == 1.0);
  // Recompute the last ratio from the edited model directly.
  const std::size_t last = f.model.config().last_decisive();
  for (std::size_t i = 0; i < f.batch.size(); ++i) {
    const auto tr = model::forward(edited, f.batch[i].prompt, true).trace;
    const Tensor h = tr->output(last, f.batch[i].decisive_index);
    const Tensor& m = rec.plans[i].targets.back();
    const Tensor h0 = model::forward(f.model, f.batch[i].prompt, true).trace->output(last, f.batch[i].decisive_index);
    const double want = ad::norm((m - h).values()) / ad::norm((m - h0).values());
    CHECK(r.ratios.back()[i] == doctest::Approx(want).epsilon(1e-9));
  }
  CHECK(residual_csv(rec, "h").rfind("# config_hash=h\n", 0) == 0);
}

TEST_CASE("a failing run leaves the model untouched") {
  Fixture f;
  // Zero up-projection at the deepest edited layer: its keys vanish, and
  // without a ridge the system there is singular after two layers were edited.
  for (auto& p : f.model.parameters())
    if (p.name == "blocks.3.w_up") *p.tensor = Tensor::zeros(p.tensor->rows(), p.tensor->cols());
  f.cfg.ridge_eps = 0.0;
  const std::string before = f.model.checksum();
  CHECK_THROWS_AS(run_edit(f.model, f.batch, f.pool, f.cfg, f.solve), NumericError);
  CHECK(f.model.checksum() == before);
  CHECK_FALSE(f.model.has_edits());

  f.cfg.ridge_eps.reset();
  f.cfg.preservation_samples = f.pool.size() + 1;
  CHECK_THROWS_AS(run_edit(f.model, f.batch, f.pool, f.cfg, f.solve), InputError);
  CHECK(f.model.checksum() == before);
}

TEST_CASE("requests already satisfied are flagged degenerate") {
  Fixture f;
  f.solve.ce_threshold = 1e6;
  model::TransformerModel edited = f.model;
  const EditRunRecord rec = run_edit(edited, f.batch, f.pool, f.cfg, f.solve);
  for (bool d : rec.residuals.degenerate) CHECK(d);
  for (const auto& row : rec.residuals.ratios)
    for (double v : row) CHECK(std::isfinite(v));
}

TEST_CASE("preservation pool excludes edited subjects and sampling is seeded") {
  Fixture f;
  for (const auto& kp : f.pool)
    for (const auto& r : f.batch) CHECK(kp.tokens != r.prompt);
  CHECK(choose_preservation_samples(20, 5, 1) == choose_preservation_samples(20, 5, 1));
  CHECK(choose_preservation_samples(20, 5, 1) != choose_preservation_samples(20, 5, 2));
  CHECK_THROWS_AS(choose_preservation_samples(4, 5, 1), InputError);
}

TEST_CASE("edit record survives a JSON roundtrip") {
  Fixture f;
  f.cfg.method = Method::blue;
  model::TransformerModel edited = f.model;
  const EditRunRecord rec = run_edit(edited, f.batch, f.pool, f.cfg, f.solve);
  nlohmann::json j = rec;
  const EditRunRecord back = j.get<EditRunRecord>();
  CHECK(nlohmann::json(back).dump() == j.dump());
  CHECK(back.deltas.size() == 2);
  nlohmann::json broken = j;
  broken.erase("deltas");
  CHECK_THROWS_AS(broken.get<EditRunRecord>(), FormatError);
}
