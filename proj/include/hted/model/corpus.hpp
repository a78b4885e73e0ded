#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hted/model/graph.hpp"

namespace hted::model {

struct CorpusParams {
  std::size_t subjects = 250;
  std::size_t subject_len = 2;
  /// Distinct tokens available to each subject slot. Subjects are distinct
  /// tuples over these, so no single subject token identifies a subject.
  std::size_t subject_pool = 32;
  std::size_t relations = 2;
  std::size_t objects_per_relation = 40;
  std::size_t object_len = 1;
  std::size_t templates_per_relation = 4;
  /// Templates per relation never used for training.
  std::size_t heldout_templates = 1;
  /// Template words after the subject are drawn uniformly from [0, max_suffix].
  std::size_t max_suffix = 0;
  std::size_t neighbors = 2;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const CorpusParams&, const CorpusParams&) = default;
};

void to_json(nlohmann::json& j, const CorpusParams& p);
void from_json(const nlohmann::json& j, CorpusParams& p);

struct Prompt {
  Tokens tokens;
  std::size_t decisive_index = 0;
  bool heldout = false;
};

// One (subject, relation) fact. `prompt` uses the relation's first template;
// paraphrases use its other templates; neighborhood prompts ask the same
// relation about other subjects.
struct FactRecord {
  Tokens prompt;
  std::size_t decisive_index = 0;
  Tokens answer;
  std::vector<Prompt> paraphrases;
  std::vector<Tokens> neighborhood;
  std::size_t subject = 0;
  std::size_t relation = 0;
  std::size_t object = 0;
};

struct FactCorpus {
  CorpusParams params;
  std::vector<std::string> vocab;
  /// Answer token sequences per relation, indexed by object.
  std::vector<std::vector<Tokens>> objects;
  std::vector<FactRecord> records;

  std::size_t vocab_size() const { return vocab.size(); }
  std::size_t max_sequence_length() const;

  /// (prompt, answer) pairs of every training-template prompt.
  std::vector<std::pair<Tokens, Tokens>> training_pairs() const;
  /// (prompt, answer) pairs of held-out template prompts.
  std::vector<std::pair<Tokens, Tokens>> heldout_pairs() const;
};

/// Deterministic for a fixed params.seed. InputError on inconsistent params.
FactCorpus generate_corpus(const CorpusParams& params);

std::string record_to_jsonl(const FactRecord& r);
FactRecord record_from_json(const nlohmann::json& j);

/// corpus.jsonl, vocab.txt and corpus_meta.json under `dir`.
void write_corpus(const FactCorpus& corpus, const std::filesystem::path& dir, const std::string& config_hash);
FactCorpus read_corpus(const std::filesystem::path& dir);

}  // namespace hted::model
