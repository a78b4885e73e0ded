#include <doctest.h>

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "hted/common/errors.hpp"
#include "hted/diagnostics/diagnostics.hpp"
#include "hted/model/forward.hpp"
#include "support.hpp"

using namespace hted;
using namespace hted::diagnostics;
using hted::testing::random_matrix;
using hted::testing::random_tensor;

namespace {

Tensor from_eigen(const Eigen::MatrixXd& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.at(i, j) = m(i, j);
  return t;
}

struct Fixture {
  model::FactCorpus corpus = model::generate_corpus(hted::testing::tiny_corpus_params());
  model::TransformerModel model;
  Tokens tokens;
  std::size_t position = 0;

  Fixture() {
    model::ModelConfig c = hted::testing::tiny_config(corpus.vocab_size());
    c.max_seq_len = corpus.max_sequence_length();
    model = model::TransformerModel(c);
    tokens = corpus.records[0].prompt;
    position = corpus.records[0].decisive_index;
  }
};

}  // namespace

TEST_CASE("quadratic form of J equals that of its symmetric part") {
  const Tensor j = Tensor::matrix(2, 2, {1, 2, 0, 1});
  const QuadraticForms hand = quadratic_form_check(j, Tensor::vector({1, 1}));
  CHECK(hand.vjv == 4.0);
  CHECK(hand.vsv == 4.0);
  CHECK(hand.vav == 0.0);
  CHECK(hand.antisymmetric_vanishes);

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor m = random_matrix(16, 16, rng);
    const Tensor v = random_tensor({16}, rng);
    const QuadraticForms q = quadratic_form_check(m, v);
    CHECK(std::abs(q.vjv - q.vsv) <= 1e-12 * (1.0 + std::abs(q.vjv)));
    CHECK(q.antisymmetric_vanishes);
  }
}

TEST_CASE("block split reconstructs J") {
  std::mt19937_64 rng(2);
  const Tensor j = random_matrix(6, 6, rng);
  const JacobianBlock b = make_block(j, 1, 3);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 6; ++c) {
      CHECK(b.s.at(r, c) == b.s.at(c, r));
      CHECK(b.a.at(r, c) == -b.a.at(c, r));
      CHECK(b.s.at(r, c) + b.a.at(r, c) == doctest::Approx(j.at(r, c)).epsilon(1e-15));
    }
  const Tensor diag = Tensor::matrix(2, 2, {3, 0, 0, -0.5});
  CHECK(make_block(diag).min_eig_s == doctest::Approx(-0.5));
  CHECK_THROWS_AS(make_block(random_matrix(2, 3, rng)), StructuralError);
}

TEST_CASE("eigen probe recovers a planted eigenpair") {
  for (double beta : {0.3, 1.7, -0.8}) {
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(Eigen::MatrixXd::Random(8, 8)).householderQ();
    Eigen::VectorXd evals = Eigen::VectorXd::LinSpaced(8, 2.0, 3.0);
    evals(0) = beta;
    const Eigen::MatrixXd jm = q * evals.asDiagonal() * q.transpose();
    Tensor delta({8});
    for (std::size_t i = 0; i < 8; ++i) delta[i] = 5.0 * q(i, 0);
    const EigenProbeResult r = eigen_probe(make_block(from_eigen(jm)), delta);
    if (beta > 0) CHECK(std::abs(r.alignment - 1.0) <= 1e-8);
    else CHECK(std::abs(r.alignment + 1.0) <= 1e-8);
    CHECK(std::abs(r.rayleigh - beta) <= 1e-6);
  }
}

TEST_CASE("a positive definite block has no definiteness violations") {
  std::mt19937_64 rng(4);
  const Tensor b = random_matrix(10, 10, rng);
  Tensor j = ad::matmul(b, b.transposed());
  for (std::size_t i = 0; i < 10; ++i) j.at(i, i) += 0.5;
  const Tensor skew = random_matrix(10, 10, rng);
  j = j + 0.5 * (skew - skew.transposed());
  const JacobianBlock block = make_block(j);
  CHECK(block.min_eig_s > 0.0);
  const auto dirs = sample_directions(10, 500, 7);
  const DefinitenessReport rep = definiteness_report(block, dirs);
  CHECK(rep.samples == 500);
  CHECK(rep.fraction_positive == 1.0);
  CHECK(rep.violations == 0);
}

TEST_CASE("sampled directions are unit vectors and seeded") {
  const auto a = sample_directions(12, 30, 5);
  const auto b = sample_directions(12, 30, 5);
  const auto c = sample_directions(12, 30, 6);
  REQUIRE(a.size() == 30);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::abs(ad::norm(a[i].values()) - 1.0) < 1e-14);
    CHECK(ad::bit_equal(a[i], b[i]));
  }
  CHECK_FALSE(ad::bit_equal(a[0], c[0]));
}

TEST_CASE("interlayer map reproduces the clean forward pass") {
  Fixture f;
  const auto trace = model::forward(f.model, f.tokens, true).trace;
  const InterlayerMap map(f.model, f.tokens, f.position, 1, 3);
  CHECK(ad::bit_equal(map.source_value(), trace->output(1, f.position)));
  const Tensor got = map(map.source_value());
  const Tensor want = trace->output(3, f.position);
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
  CHECK_THROWS_AS(InterlayerMap(f.model, f.tokens, f.position, 3, 1), InputError);
}

TEST_CASE("passive shift at the last layer is the perturbation itself") {
  Fixture f;
  std::mt19937_64 rng(8);
  const Tensor d = random_tensor({8}, rng);
  const PerturbationProbe p = passive_shift(f.model, f.tokens, f.position, 3, d);
  CHECK(ad::bit_equal(p.shift, d));
  CHECK(p.cosine == 1.0);
  CHECK(p.gain == 1.0);
}

TEST_CASE("passive shift for a tiny perturbation matches the JVP") {
  Fixture f;
  std::mt19937_64 rng(9);
  for (std::size_t layer : {1, 2}) {
    const Tensor d = 1e-5 * random_tensor({8}, rng);
    const PerturbationProbe p = passive_shift(f.model, f.tokens, f.position, layer, d);
    const double gap = ad::norm((p.shift - p.jvp_estimate).values()) / ad::norm(p.jvp_estimate.values());
    CHECK(gap < 0.01);
    CHECK(p.cosine == doctest::Approx(ad::cosine(p.shift.values(), d.values())));
  }
  CHECK_THROWS_AS(passive_shift(f.model, f.tokens, f.position, 1, Tensor({8})), DomainError);
}

TEST_CASE("assembled Jacobian agrees with reverse mode") {
  Fixture f;
  const JacobianBlock b = assemble_jacobian(f.model, f.tokens, f.position, 1, 3);
  CHECK(b.reverse_check >= 0.0);
  CHECK(b.reverse_check < 1e-5);
  const JacobianBlock id = assemble_jacobian(f.model, f.tokens, f.position, 2, 2, false);
  CHECK(ad::bit_equal(id.j, Tensor::identity(8)));
  CHECK(id.min_eig_s == doctest::Approx(1.0));

  // A small step through the map follows the assembled linearisation.
  std::mt19937_64 rng(10);
  const Tensor v = 1e-6 * random_tensor({8}, rng);
  const InterlayerMap map(f.model, f.tokens, f.position, 1, 3);
  const Tensor jv = ad::matvec(b.j, v.values());
  const Tensor base = map(map.source_value());
  const Tensor moved = map(map.source_value() + v) - base;
  CHECK(ad::norm((moved - jv).values()) / ad::norm(jv.values()) < 1e-3);

  const auto summary = block_summary(b);
  CHECK(summary.at("source") == 1);
  CHECK(summary.at("sink") == 3);
}

TEST_CASE("cosine table of a memit run ends at exactly one") {
  Fixture f;
  const auto batch = targets::sample_edit_requests(f.corpus, f.model, 3, 2);
  const auto pool = editor::preservation_pool(f.corpus, batch);
  editor::EditConfig cfg;
  cfg.preservation_samples = 12;
  targets::TargetSolveConfig solve;
  solve.max_iters = 20;
  model::TransformerModel edited = f.model;
  const auto rec = editor::run_edit(edited, batch, pool, cfg, solve);
  const auto rows = cosine_table(f.model, rec);
  REQUIRE(rows.size() == 3);
  CHECK(rows.back().layer == 3);
  CHECK(rows.back().mean_cosine == 1.0);
  for (const auto& r : rows) {
    CHECK(r.n == 3);
    CHECK(std::abs(r.mean_cosine) <= 1.0);
  }
  const std::string csv = cosine_table_csv(rows, "abc");
  CHECK(csv.find("layer,mean_cosine,n") != std::string::npos);

  cfg.method = targets::Method::fe_replay;
  model::TransformerModel fe = f.model;
  const auto fe_rec = editor::run_edit(fe, batch, pool, cfg, solve);
  CHECK_THROWS_AS(cosine_table(f.model, fe_rec), InputError);
}
