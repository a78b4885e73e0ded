#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <random>
#include <set>

#include "hted/common/errors.hpp"
#include "hted/model/checkpoint.hpp"
#include "hted/model/corpus.hpp"
#include "hted/model/forward.hpp"
#include "hted/model/train.hpp"
#include "support.hpp"

using namespace hted;
using namespace hted::model;
using hted::testing::tiny_config;
using hted::testing::tiny_corpus_params;

namespace {

TransformerModel tiny_model() {
  TransformerModel m(tiny_config());
  return m;
}

const Tokens kSeq{1, 4, 7, 2, 9, 3};

}  // namespace

TEST_CASE("config validation rejects inconsistent fields") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), InputError);
  c = tiny_config();
  c.decisive_layers = {2, 1};
  CHECK_THROWS_AS(c.validate(), InputError);
  c = tiny_config();
  c.decisive_layers = {1, 4};
  CHECK_THROWS_AS(c.validate(), InputError);
  c = tiny_config();
  CHECK(c.decisive_index(3) == 2);
  CHECK_THROWS_AS(c.decisive_index(0), InputError);
}

TEST_CASE("model init is deterministic in the seed") {
  CHECK(TransformerModel(tiny_config()).checksum() == TransformerModel(tiny_config()).checksum());
  ModelConfig other = tiny_config();
  other.seed = 6;
  CHECK(TransformerModel(other).checksum() != TransformerModel(tiny_config()).checksum());
}

TEST_CASE("traced MLP output equals the down projection of the traced key") {
  const TransformerModel m = tiny_model();
  const ForwardResult r = forward(m, kSeq, true);
  REQUIRE(r.trace.has_value());
  for (std::size_t layer : m.config().decisive_layers) {
    const Tensor& w = m.down_projection(layer);
    for (std::size_t p = 0; p < kSeq.size(); ++p) {
      const Tensor k = r.trace->key(layer, p);
      const Tensor h = r.trace->output(layer, p);
      const Tensor wk = ad::matvec(w, k.values());
      for (std::size_t i = 0; i < h.size(); ++i) CHECK(std::abs(h[i] - wk[i]) <= 1e-12 * (1.0 + std::abs(wk[i])));
    }
  }
}

TEST_CASE("replacing an output with its own value changes nothing") {
  const TransformerModel m = tiny_model();
  const ForwardResult base = forward(m, kSeq, true);
  for (std::size_t layer : m.config().decisive_layers) {
    for (std::size_t p = 0; p < kSeq.size(); ++p) {
      const ForwardResult again = forward_with_replacement(m, kSeq, layer, p, base.trace->output(layer, p));
      CHECK(ad::bit_equal(again.logits, base.logits));
    }
  }
}

TEST_CASE("a replacement only affects later layers and later positions") {
  const TransformerModel m = tiny_model();
  const ForwardResult base = forward(m, kSeq, true);
  std::mt19937_64 rng(2);
  const std::size_t layer = 2, pos = 3;
  const Tensor v = hted::testing::random_tensor({m.config().d_model}, rng);
  const ForwardResult rep = forward_with_replacement(m, kSeq, layer, pos, v);
  REQUIRE(rep.trace.has_value());
  CHECK(ad::bit_equal(rep.trace->output(layer, pos), v));
  CHECK(ad::bit_equal(rep.trace->output(1, pos), base.trace->output(1, pos)));
  CHECK_FALSE(ad::bit_equal(rep.trace->output(3, pos), base.trace->output(3, pos)));
  for (std::size_t p = 0; p < pos; ++p) {
    for (std::size_t l : m.config().decisive_layers) CHECK(ad::bit_equal(rep.trace->output(l, p), base.trace->output(l, p)));
    for (std::size_t c = 0; c < rep.logits.cols(); ++c) CHECK(rep.logits.at(p, c) == base.logits.at(p, c));
  }
}

TEST_CASE("a replacement at the last decisive layer does not reach its own key") {
  const TransformerModel m = tiny_model();
  const ForwardResult base = forward(m, kSeq, true);
  const std::size_t last = m.config().last_decisive();
  const ForwardResult rep =
      forward_with_replacement(m, kSeq, last, 2, Tensor::zeros(m.config().d_model, 1).reshaped({m.config().d_model}));
  CHECK(ad::bit_equal(rep.trace->key(last, 2), base.trace->key(last, 2)));
  CHECK_FALSE(ad::bit_equal(rep.logits, base.logits));
}

TEST_CASE("batched next-token logits match single forward passes") {
  const TransformerModel m = tiny_model();
  const std::vector<Tokens> prompts{{1, 4, 5}, {1, 2}, {1, 9, 9, 8, 3}};
  const auto batched = next_token_logits(m, prompts);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const Tensor single = forward(m, prompts[i]).logits;
    for (std::size_t c = 0; c < single.cols(); ++c)
      CHECK(batched[i][c] == doctest::Approx(single.at(prompts[i].size() - 1, c)).epsilon(1e-12));
  }
}

TEST_CASE("out of range tokens are an input error") {
  const TransformerModel m = tiny_model();
  const Tokens bad{1, 12};
  CHECK_THROWS_AS(forward(m, bad), InputError);
  const Tokens too_long(11, 2);
  CHECK_THROWS_AS(forward(m, too_long), InputError);
}

TEST_CASE("argmax ties go to the lowest index") {
  const std::vector<double> v{0.5, 2.0, 2.0, -1.0};
  CHECK(argmax(v) == 1);
}

TEST_CASE("down projection edits accumulate and reset") {
  TransformerModel m = tiny_model();
  const std::string before = m.checksum();
  std::mt19937_64 rng(3);
  const Tensor d = hted::testing::random_matrix(8, 16, rng);
  m.add_to_down_projection(2, d);
  CHECK(m.has_edit(2));
  CHECK(m.checksum() != before);
  CHECK_THROWS_AS(m.add_to_down_projection(2, Tensor::zeros(16, 8)), StructuralError);
  m.reset_edit_state();
  CHECK_FALSE(m.has_edits());
  CHECK(m.checksum() == before);
}

TEST_CASE("checkpoint roundtrip preserves the checksum") {
  TransformerModel m = tiny_model();
  m.round_to_float();
  const std::string bytes = serialize_checkpoint(m);
  const TransformerModel back = deserialize_checkpoint(bytes);
  CHECK(back.config() == m.config());
  CHECK(back.checksum() == m.checksum());
  CHECK(serialize_checkpoint(back) == bytes);

  std::mt19937_64 rng(4);
  m.add_to_down_projection(1, hted::testing::random_matrix(8, 16, rng));
  const TransformerModel edited = deserialize_checkpoint(serialize_checkpoint(m));
  CHECK(edited.checksum() == m.checksum());
  CHECK(edited.has_edit(1));
}

TEST_CASE("checkpoint loader rejects damaged files") {
  TransformerModel m = tiny_model();
  m.round_to_float();
  const std::string bytes = serialize_checkpoint(m);

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(bad_magic), FormatError);

  std::string bad_version = bytes;
  const std::uint32_t v = kCheckpointVersion + 1;
  std::memcpy(bad_version.data() + 4, &v, sizeof v);
  CHECK_THROWS_AS(deserialize_checkpoint(bad_version), UnsupportedVersionError);

  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1})
    CHECK_THROWS_AS(deserialize_checkpoint(std::string_view(bytes).substr(0, cut)), FormatError);

  CHECK_THROWS_AS(deserialize_checkpoint(bytes + "x"), FormatError);

  const auto path = std::filesystem::temp_directory_path() / "hted_test_missing.ckpt";
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), InputError);
}

TEST_CASE("corpus generation is deterministic") {
  const FactCorpus a = generate_corpus(tiny_corpus_params());
  const FactCorpus b = generate_corpus(tiny_corpus_params());
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) CHECK(record_to_jsonl(a.records[i]) == record_to_jsonl(b.records[i]));
  CorpusParams other = tiny_corpus_params();
  other.seed = 10;
  const FactCorpus c = generate_corpus(other);
  bool differs = false;
  for (std::size_t i = 0; i < a.records.size(); ++i) differs |= record_to_jsonl(a.records[i]) != record_to_jsonl(c.records[i]);
  CHECK(differs);
}

TEST_CASE("corpus invariants hold") {
  const CorpusParams p = tiny_corpus_params();
  const FactCorpus c = generate_corpus(p);
  CHECK(c.records.size() == p.subjects * p.relations);
  std::set<std::pair<std::size_t, std::size_t>> facts;
  for (const FactRecord& r : c.records) {
    CHECK(facts.insert({r.subject, r.relation}).second);
    CHECK(r.decisive_index < r.prompt.size());
    // Subject-final prompts: the subject's last token closes the prompt.
    CHECK(r.decisive_index + 1 + p.max_suffix >= r.prompt.size());
    CHECK(r.answer == c.objects[r.relation][r.object]);
    CHECK(r.paraphrases.size() == p.templates_per_relation - 1);
    std::size_t heldout = 0;
    for (const Prompt& q : r.paraphrases) {
      heldout += q.heldout;
      CHECK(q.tokens[q.decisive_index] == r.prompt[r.decisive_index]);
    }
    CHECK(heldout == p.heldout_templates);
    CHECK(r.neighborhood.size() == p.neighbors);
    for (const Tokens& t : r.neighborhood) CHECK(t != r.prompt);
    for (std::int64_t t : r.prompt) CHECK(static_cast<std::size_t>(t) < c.vocab_size());
  }
  CHECK(c.max_sequence_length() <= 16);
}

TEST_CASE("corpus rejects inconsistent parameters") {
  CorpusParams p = tiny_corpus_params();
  p.subject_pool = 1;
  CHECK_THROWS_AS(generate_corpus(p), InputError);
  p = tiny_corpus_params();
  p.heldout_templates = p.templates_per_relation;
  CHECK_THROWS_AS(generate_corpus(p), InputError);
}

TEST_CASE("corpus survives a write and read") {
  const FactCorpus c = generate_corpus(tiny_corpus_params());
  const auto dir = std::filesystem::temp_directory_path() / "hted_test_corpus";
  std::filesystem::remove_all(dir);
  write_corpus(c, dir, "abc");
  const FactCorpus back = read_corpus(dir);
  CHECK(back.params == c.params);
  CHECK(back.vocab == c.vocab);
  REQUIRE(back.records.size() == c.records.size());
  for (std::size_t i = 0; i < c.records.size(); ++i) CHECK(record_to_jsonl(back.records[i]) == record_to_jsonl(c.records[i]));
  std::filesystem::remove_all(dir);
}

TEST_CASE("training loss gradients match finite differences") {
  const FactCorpus c = generate_corpus(tiny_corpus_params());
  ModelConfig cfg = tiny_config(c.vocab_size());
  cfg.max_seq_len = c.max_sequence_length();
  TransformerModel m(cfg);
  auto pairs = c.training_pairs();
  pairs.resize(4);
  std::vector<Tensor> grads;
  batch_loss_and_gradients(m, pairs, &grads);
  auto params = m.parameters();
  REQUIRE(grads.size() == params.size());
  std::mt19937_64 rng(1);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& w = *params[pi].tensor;
    const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, w.size() - 1)(rng);
    const double orig = w[idx], h = 1e-6;
    w[idx] = orig + h;
    m.set_down_projection_delta(1, m.down_projection_delta(1));
    const double up = batch_loss_and_gradients(m, pairs, nullptr);
    w[idx] = orig - h;
    m.set_down_projection_delta(1, m.down_projection_delta(1));
    const double down = batch_loss_and_gradients(m, pairs, nullptr);
    w[idx] = orig;
    m.set_down_projection_delta(1, m.down_projection_delta(1));
    const double fd = (up - down) / (2 * h);
    CHECK_MESSAGE(std::abs(fd - grads[pi][idx]) <= 1e-5 * (1.0 + std::abs(fd)), params[pi].name);
  }
}

TEST_CASE("a one-fact corpus trains to full accuracy") {
  CorpusParams p = tiny_corpus_params();
  p.subjects = 1;
  p.relations = 1;
  p.neighbors = 0;
  const FactCorpus c = generate_corpus(p);
  ModelConfig cfg = tiny_config(c.vocab_size());
  cfg.max_seq_len = c.max_sequence_length();
  TrainConfig tc;
  tc.target_accuracy = 1.0;
  tc.max_epochs = 200;
  tc.seed = 1;
  const TrainResult r = train_toy(c, cfg, tc);
  CHECK(r.train_accuracy == 1.0);
  CHECK(exact_match_accuracy(r.model, c.training_pairs()) == 1.0);
}

TEST_CASE("an unreachable accuracy target raises a threshold error") {
  const FactCorpus c = generate_corpus(tiny_corpus_params());
  ModelConfig cfg = tiny_config(c.vocab_size());
  cfg.max_seq_len = c.max_sequence_length();
  TrainConfig tc;
  tc.max_epochs = 1;
  tc.eval_every = 1;
  CHECK_THROWS_AS(train_toy(c, cfg, tc), ThresholdError);
}
