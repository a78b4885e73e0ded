#include "hted/model/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "hted/common/errors.hpp"
#include "hted/common/files.hpp"
#include "hted/model/forward.hpp"

namespace hted::model {

namespace {

struct Template {
  Tokens prefix;
  Tokens suffix;
};

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

Prompt make_prompt(const Template& t, const Tokens& subject, bool heldout) {
  Prompt p;
  p.tokens.push_back(kBosToken);
  p.tokens.insert(p.tokens.end(), t.prefix.begin(), t.prefix.end());
  p.tokens.insert(p.tokens.end(), subject.begin(), subject.end());
  p.decisive_index = p.tokens.size() - 1;
  p.tokens.insert(p.tokens.end(), t.suffix.begin(), t.suffix.end());
  p.heldout = heldout;
  return p;
}

}  // namespace

void CorpusParams::validate() const {
  if (subjects == 0) throw InputError("corpus needs at least one subject");
  if (subject_len == 0 || object_len == 0) throw InputError("subject and object lengths must be positive");
  if (subject_pool == 0) throw InputError("subject_pool must be positive");
  double combos = 1.0;
  for (std::size_t i = 0; i < subject_len; ++i) combos *= static_cast<double>(subject_pool);
  if (combos < static_cast<double>(subjects)) {
    throw InputError("subject_pool^subject_len is smaller than the number of subjects");
  }
  if (relations == 0) throw InputError("corpus needs at least one relation");
  if (objects_per_relation < 2) throw InputError("each relation needs at least two objects");
  if (templates_per_relation < 2) throw InputError("each relation needs at least two templates for paraphrases");
  if (heldout_templates >= templates_per_relation) throw InputError("held-out templates must leave a training template");
  if (neighbors >= subjects) throw InputError("neighbors must be in [0, subjects)");
}

void to_json(nlohmann::json& j, const CorpusParams& p) {
  j = nlohmann::json{{"subjects", p.subjects},
                     {"subject_len", p.subject_len},
                     {"subject_pool", p.subject_pool},
                     {"relations", p.relations},
                     {"objects_per_relation", p.objects_per_relation},
                     {"object_len", p.object_len},
                     {"templates_per_relation", p.templates_per_relation},
                     {"heldout_templates", p.heldout_templates},
                     {"max_suffix", p.max_suffix},
                     {"neighbors", p.neighbors},
                     {"seed", p.seed}};
}

void from_json(const nlohmann::json& j, CorpusParams& p) {
  j.at("subjects").get_to(p.subjects);
  j.at("subject_len").get_to(p.subject_len);
  j.at("subject_pool").get_to(p.subject_pool);
  j.at("relations").get_to(p.relations);
  j.at("objects_per_relation").get_to(p.objects_per_relation);
  j.at("object_len").get_to(p.object_len);
  j.at("templates_per_relation").get_to(p.templates_per_relation);
  j.at("heldout_templates").get_to(p.heldout_templates);
  j.at("max_suffix").get_to(p.max_suffix);
  j.at("neighbors").get_to(p.neighbors);
  j.at("seed").get_to(p.seed);
}

std::size_t FactCorpus::max_sequence_length() const {
  std::size_t n = 0;
  for (const auto& r : records) {
    n = std::max(n, r.prompt.size() + r.answer.size());
    for (const auto& p : r.paraphrases) n = std::max(n, p.tokens.size() + r.answer.size());
    for (const auto& p : r.neighborhood) n = std::max(n, p.size() + r.answer.size());
  }
  return n;
}

std::vector<std::pair<Tokens, Tokens>> FactCorpus::training_pairs() const {
  std::vector<std::pair<Tokens, Tokens>> out;
  for (const auto& r : records) {
    out.emplace_back(r.prompt, r.answer);
    for (const auto& p : r.paraphrases)
      if (!p.heldout) out.emplace_back(p.tokens, r.answer);
  }
  return out;
}

std::vector<std::pair<Tokens, Tokens>> FactCorpus::heldout_pairs() const {
  std::vector<std::pair<Tokens, Tokens>> out;
  for (const auto& r : records)
    for (const auto& p : r.paraphrases)
      if (p.heldout) out.emplace_back(p.tokens, r.answer);
  return out;
}

FactCorpus generate_corpus(const CorpusParams& params) {
  params.validate();
  std::mt19937_64 rng(params.seed);
  FactCorpus c;
  c.params = params;
  c.vocab = {"<pad>", "<bos>"};
  auto add_token = [&](std::string name) {
    c.vocab.push_back(std::move(name));
    return static_cast<std::int64_t>(c.vocab.size() - 1);
  };

  std::vector<Tokens> slot_tokens(params.subject_len);
  for (std::size_t j = 0; j < params.subject_len; ++j) {
    for (std::size_t k = 0; k < params.subject_pool; ++k) {
      slot_tokens[j].push_back(add_token("name" + std::to_string(j) + "_" + std::to_string(k)));
    }
  }
  std::vector<Tokens> subjects;
  std::set<Tokens> seen;
  while (subjects.size() < params.subjects) {
    Tokens subject;
    for (std::size_t j = 0; j < params.subject_len; ++j) {
      subject.push_back(slot_tokens[j][uniform_index(rng, params.subject_pool)]);
    }
    if (seen.insert(subject).second) subjects.push_back(std::move(subject));
  }
  c.objects.resize(params.relations);
  for (std::size_t r = 0; r < params.relations; ++r) {
    for (std::size_t o = 0; o < params.objects_per_relation; ++o) {
      Tokens obj;
      for (std::size_t j = 0; j < params.object_len; ++j) {
        obj.push_back(add_token("obj" + std::to_string(r) + "_" + std::to_string(o) + "_" + std::to_string(j)));
      }
      c.objects[r].push_back(std::move(obj));
    }
  }
  std::vector<std::vector<Template>> templates(params.relations);
  for (std::size_t r = 0; r < params.relations; ++r) {
    std::size_t word = 0;
    auto next_word = [&] { return add_token("rel" + std::to_string(r) + "_w" + std::to_string(word++)); };
    for (std::size_t t = 0; t < params.templates_per_relation; ++t) {
      Template tpl;
      const std::size_t prefix_len = 1 + uniform_index(rng, 3);
      const std::size_t suffix_len = uniform_index(rng, params.max_suffix + 1);
      for (std::size_t i = 0; i < prefix_len; ++i) tpl.prefix.push_back(next_word());
      for (std::size_t i = 0; i < suffix_len; ++i) tpl.suffix.push_back(next_word());
      templates[r].push_back(std::move(tpl));
    }
  }

  const std::size_t first_heldout = params.templates_per_relation - params.heldout_templates;
  for (std::size_t s = 0; s < params.subjects; ++s) {
    for (std::size_t r = 0; r < params.relations; ++r) {
      FactRecord rec;
      rec.subject = s;
      rec.relation = r;
      rec.object = uniform_index(rng, params.objects_per_relation);
      const Prompt main = make_prompt(templates[r][0], subjects[s], false);
      rec.prompt = main.tokens;
      rec.decisive_index = main.decisive_index;
      rec.answer = c.objects[r][rec.object];
      for (std::size_t t = 1; t < params.templates_per_relation; ++t) {
        rec.paraphrases.push_back(make_prompt(templates[r][t], subjects[s], t >= first_heldout));
      }
      std::vector<std::size_t> others;
      while (others.size() < params.neighbors) {
        const std::size_t o = uniform_index(rng, params.subjects);
        if (o != s && std::find(others.begin(), others.end(), o) == others.end()) others.push_back(o);
      }
      for (std::size_t o : others) rec.neighborhood.push_back(make_prompt(templates[r][0], subjects[o], false).tokens);
      c.records.push_back(std::move(rec));
    }
  }
  return c;
}

std::string record_to_jsonl(const FactRecord& r) {
  nlohmann::json j;
  j["prompt"] = r.prompt;
  j["decisive_index"] = r.decisive_index;
  j["answer"] = r.answer;
  std::vector<Tokens> para;
  std::vector<std::size_t> para_decisive;
  std::vector<bool> para_heldout;
  for (const auto& p : r.paraphrases) {
    para.push_back(p.tokens);
    para_decisive.push_back(p.decisive_index);
    para_heldout.push_back(p.heldout);
  }
  j["paraphrases"] = para;
  j["paraphrase_decisive"] = para_decisive;
  j["paraphrase_heldout"] = para_heldout;
  j["neighborhood"] = r.neighborhood;
  j["subject"] = r.subject;
  j["relation"] = r.relation;
  j["object"] = r.object;
  return j.dump();
}

FactRecord record_from_json(const nlohmann::json& j) {
  FactRecord r;
  try {
    j.at("prompt").get_to(r.prompt);
    j.at("decisive_index").get_to(r.decisive_index);
    j.at("answer").get_to(r.answer);
    const auto para = j.at("paraphrases").get<std::vector<Tokens>>();
    const auto decisive = j.value("paraphrase_decisive", std::vector<std::size_t>{});
    const auto heldout = j.value("paraphrase_heldout", std::vector<bool>{});
    for (std::size_t i = 0; i < para.size(); ++i) {
      Prompt p;
      p.tokens = para[i];
      p.decisive_index = i < decisive.size() ? decisive[i] : 0;
      p.heldout = i < heldout.size() ? heldout[i] : false;
      r.paraphrases.push_back(std::move(p));
    }
    j.at("neighborhood").get_to(r.neighborhood);
    r.subject = j.value("subject", std::size_t{0});
    r.relation = j.value("relation", std::size_t{0});
    r.object = j.value("object", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid corpus record: ") + e.what());
  }
  if (r.answer.empty()) throw FormatError("corpus record with empty answer");
  if (r.decisive_index >= r.prompt.size()) throw FormatError("decisive index outside prompt");
  return r;
}

void write_corpus(const FactCorpus& corpus, const std::filesystem::path& dir, const std::string& config_hash) {
  std::string lines;
  for (const auto& r : corpus.records) {
    lines += record_to_jsonl(r);
    lines += '\n';
  }
  std::string vocab;
  for (const auto& v : corpus.vocab) {
    vocab += v;
    vocab += '\n';
  }
  nlohmann::json meta;
  meta["config_hash"] = config_hash;
  meta["params"] = corpus.params;
  meta["vocab_size"] = corpus.vocab.size();
  meta["records"] = corpus.records.size();
  meta["objects"] = corpus.objects;
  write_file_atomic(dir / "corpus.jsonl", lines);
  write_file_atomic(dir / "vocab.txt", vocab);
  write_file_atomic(dir / "corpus_meta.json", meta.dump(2) + "\n");
}

FactCorpus read_corpus(const std::filesystem::path& dir) {
  FactCorpus c;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(dir / "corpus_meta.json"));
    meta.at("params").get_to(c.params);
    meta.at("objects").get_to(c.objects);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid corpus_meta.json: ") + e.what());
  }
  std::istringstream vocab(read_file(dir / "vocab.txt"));
  for (std::string line; std::getline(vocab, line);) c.vocab.push_back(line);
  std::istringstream lines(read_file(dir / "corpus.jsonl"));
  for (std::string line; std::getline(lines, line);) {
    if (line.empty()) continue;
    try {
      c.records.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(std::string("invalid corpus line: ") + e.what());
    }
  }
  if (c.records.empty()) throw InputError("corpus has no records");
  for (const auto& r : c.records) {
    for (auto t : concat(r.prompt, r.answer)) {
      if (t < 0 || static_cast<std::size_t>(t) >= c.vocab.size()) throw FormatError("corpus token outside vocabulary");
    }
  }
  return c;
}

}  // namespace hted::model
