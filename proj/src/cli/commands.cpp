#include "hted/cli/commands.hpp"

#include <chrono>
#include <ctime>
#include <iomanip>
#include <sstream>

#include "hted/common/errors.hpp"
#include "hted/common/files.hpp"
#include "hted/common/format.hpp"
#include "hted/common/hash.hpp"
#include "hted/diagnostics/diagnostics.hpp"
#include "hted/editor/editor.hpp"
#include "hted/evaluation/evaluation.hpp"
#include "hted/model/checkpoint.hpp"
#include "hted/model/corpus.hpp"
#include "hted/model/train.hpp"

namespace hted::cli {

namespace {

using Clock = std::chrono::steady_clock;

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

// Collects artifacts of one command and writes them through an OutputGuard.
class Session {
 public:
  Session(std::string command, std::string config_hash, fs::path out)
      : out_(std::move(out)), start_(Clock::now()) {
    manifest_.command = std::move(command);
    manifest_.config_hash = std::move(config_hash);
    fs::create_directories(out_);
  }

  fs::path path(const std::string& name) const { return out_ / name; }

  void write(const std::string& role, const std::string& name, const std::string& contents) {
    guard_.write(path(name), contents);
    manifest_.artifacts.push_back({role, name, sha256_hex(contents)});
  }

  void write_json(const std::string& role, const std::string& name, const nlohmann::json& j) {
    write(role, name, j.dump(2) + "\n");
  }

  // For files produced by other writers.
  void adopt(const std::string& role, const std::string& name) {
    guard_.track(path(name));
    manifest_.artifacts.push_back({role, name, sha256_hex(read_file(path(name)))});
  }

  ExperimentManifest finish() {
    const double seconds = std::chrono::duration<double>(Clock::now() - start_).count();
    const nlohmann::json timing{{"command", manifest_.command}, {"wall_seconds", seconds}};
    guard_.write(path("timing.json"), timing.dump(2) + "\n");
    manifest_.artifacts.push_back({"timing", "timing.json", ""});
    manifest_.created = utc_now();
    const nlohmann::json j = manifest_;
    guard_.write(path("manifest.json"), j.dump(2) + "\n");
    guard_.commit();
    return manifest_;
  }

 private:
  fs::path out_;
  Clock::time_point start_;
  ExperimentManifest manifest_;
  OutputGuard guard_;
};

nlohmann::json stamped(nlohmann::json body, const std::string& hash) {
  body["config_hash"] = hash;
  return body;
}

nlohmann::json read_json(const fs::path& path) {
  if (!fs::exists(path)) throw InputError("file " + path.string() + " does not exist");
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

template <typename T>
T json_get(const nlohmann::json& j, const fs::path& source) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source.string() + ": " + e.what());
  }
}

std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

}  // namespace

fs::path ExperimentManifest::artifact(const std::string& role, const fs::path& base) const {
  for (const auto& a : artifacts) {
    if (a.role == role) return base / a.path;
  }
  throw InputError("manifest of '" + command + "' has no '" + role + "' artifact");
}

void to_json(nlohmann::json& j, const ExperimentManifest& m) {
  nlohmann::json arts = nlohmann::json::array();
  for (const auto& a : m.artifacts) arts.push_back({{"role", a.role}, {"path", a.path}, {"sha256", a.sha256}});
  j = nlohmann::json{{"command", m.command},
                     {"config_hash", m.config_hash},
                     {"tool_version", m.tool_version},
                     {"created", m.created},
                     {"artifacts", arts}};
}

void from_json(const nlohmann::json& j, ExperimentManifest& m) {
  j.at("command").get_to(m.command);
  j.at("config_hash").get_to(m.config_hash);
  j.at("tool_version").get_to(m.tool_version);
  j.at("created").get_to(m.created);
  m.artifacts.clear();
  for (const auto& a : j.at("artifacts")) {
    m.artifacts.push_back({a.at("role").get<std::string>(), a.at("path").get<std::string>(),
                           a.at("sha256").get<std::string>()});
  }
}

ExperimentManifest read_manifest(const fs::path& path) { return json_get<ExperimentManifest>(read_json(path), path); }

ExperimentManifest cmd_gen_data(const RunConfig& config, const fs::path& out, const Logger& log) {
  const std::string hash = config.hash();
  Session session("gen-data", hash, out);
  const model::FactCorpus corpus = model::generate_corpus(config.corpus);
  model::write_corpus(corpus, out, hash);
  session.adopt("corpus", "corpus.jsonl");
  session.adopt("vocab", "vocab.txt");
  session.adopt("corpus_meta", "corpus_meta.json");
  say(log, "generated " + std::to_string(corpus.records.size()) + " facts over " +
               std::to_string(corpus.vocab_size()) + " tokens");
  return session.finish();
}

ExperimentManifest cmd_train(const RunConfig& config, const fs::path& corpus_dir, const fs::path& out,
                             const Logger& log) {
  const std::string hash = config.hash();
  const model::FactCorpus corpus = model::read_corpus(corpus_dir);
  if (!(corpus.params == config.corpus)) throw InputError("corpus in " + corpus_dir.string() + " was generated with a different [corpus] section");
  Session session("train", hash, out);
  const model::TrainResult result = model::train_toy(corpus, config.model, config.train, log);
  const std::string blob = model::serialize_checkpoint(result.model);
  session.write("checkpoint", "model.ckpt", blob);
  session.write_json("train_summary", "train_summary.json",
                     stamped({{"train_accuracy", result.train_accuracy},
                              {"heldout_accuracy", result.heldout_accuracy},
                              {"final_loss", result.final_loss},
                              {"epochs", result.epochs},
                              {"steps", result.steps},
                              {"model_checksum", result.model.checksum()}},
                             hash));
  say(log, "train accuracy " + format_double(result.train_accuracy) + ", held-out paraphrase accuracy " +
               format_double(result.heldout_accuracy));
  return session.finish();
}

ExperimentManifest cmd_edit(const RunConfig& config, const fs::path& checkpoint, const fs::path& corpus_dir,
                            const fs::path& out, const Logger& log) {
  const std::string hash = config.hash();
  const model::FactCorpus corpus = model::read_corpus(corpus_dir);
  const model::TransformerModel pre = model::load_checkpoint(checkpoint);
  if (pre.config().vocab_size != corpus.vocab_size()) throw InputError("checkpoint and corpus vocabularies differ");
  Session session("edit", hash, out);

  const auto requests = targets::sample_edit_requests(corpus, pre, config.edit.requests, config.seed);
  const auto pool = editor::preservation_pool(corpus, requests);
  const auto probes = evaluation::build_probe_set(corpus, pre, requests);
  model::TransformerModel post = pre;
  const auto start = Clock::now();
  const editor::EditRunRecord record = editor::run_edit(post, requests, pool, config.edit_config(), config.solve);
  const double seconds = std::chrono::duration<double>(Clock::now() - start).count();

  const std::string method(targets::method_cli_name(config.edit.method));
  session.write("checkpoint", "edited.ckpt", model::serialize_checkpoint(post));
  session.write_json("requests", "requests.json", stamped({{"requests", requests}}, hash));
  session.write_json("plans", "plans.json", stamped({{"method", method}, {"plans", record.plans}}, hash));
  session.write_json("record", "record.json", stamped(record, hash));
  session.write_json("probes", "probes.json", stamped({{"method", method}, {"probes", probes}}, hash));
  session.write("residual_ratios", "residual_ratios.csv", editor::residual_csv(record, hash));
  std::string ratios;
  for (double r : record.residuals.mean_ratios) ratios += " " + format_double(r);
  say(log, method + ": " + std::to_string(requests.size()) + " requests, " + std::to_string(record.solver_iterations) +
               " solver iterations, " + fixed(seconds, 2) + " s, residual ratios" + ratios);
  return session.finish();
}

ExperimentManifest cmd_diagnose(const RunConfig& config, const fs::path& checkpoint, const fs::path& record_path,
                                const fs::path& out, const Logger& log) {
  const std::string hash = config.hash();
  const model::TransformerModel pre = model::load_checkpoint(checkpoint);
  const auto record = json_get<editor::EditRunRecord>(read_json(record_path), record_path);
  if (pre.checksum() != record.pre_checksum) {
    throw InputError("checkpoint " + checkpoint.string() + " is not the pre-edit model of " + record_path.string());
  }
  Session session("diagnose", hash, out);

  std::vector<diagnostics::CosineRow> cosine;
  const bool spreading =
      record.method == targets::Method::memit_dividing || record.method == targets::Method::memit_nodividing;
  if (spreading) cosine = diagnostics::cosine_table(pre, record);
  session.write("cosine_table", "cosine_table.csv", diagnostics::cosine_table_csv(cosine, hash));
  session.write("residual_ratios", "residual_ratios.csv", editor::residual_csv(record, hash));

  const auto& mc = pre.config();
  const std::size_t sink = mc.last_decisive();
  const auto directions = diagnostics::sample_directions(mc.d_model, config.diagnose.directions,
                                                         config.diagnose.direction_seed);
  std::vector<diagnostics::DefinitenessRow> rows;
  nlohmann::json blocks = nlohmann::json::array();
  const std::size_t n = std::min(config.diagnose.jacobian_requests, record.requests.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& req = record.requests[i];
    for (std::size_t source : mc.decisive_layers) {
      if (source == sink) continue;
      const auto block = diagnostics::assemble_jacobian(pre, req.prompt, req.decisive_index, source, sink);
      rows.push_back({source, sink, i, diagnostics::definiteness_report(block, directions), block.reverse_check});
      auto summary = diagnostics::block_summary(block);
      summary["request"] = i;
      blocks.push_back(summary);
    }
  }
  session.write("definiteness", "definiteness.csv", diagnostics::definiteness_csv(rows, hash));
  session.write_json("jacobian_blocks", "jacobian_blocks.json", stamped({{"blocks", blocks}}, hash));
  if (spreading && !cosine.empty()) {
    std::string line = "mean cosine by layer:";
    for (const auto& r : cosine) line += " " + std::to_string(r.layer) + "=" + fixed(r.mean_cosine, 4);
    say(log, line);
  } else {
    say(log, "cosine table skipped: record is not a spreading run");
  }
  return session.finish();
}

ExperimentManifest cmd_eval(const RunConfig& config, const fs::path& pre_path, const fs::path& post_path,
                            const fs::path& probes_path, const fs::path& out, const Logger& log) {
  const std::string hash = config.hash();
  const model::TransformerModel pre = model::load_checkpoint(pre_path);
  const model::TransformerModel post = model::load_checkpoint(post_path);
  const nlohmann::json probes_json = read_json(probes_path);
  const auto probes = json_get<evaluation::EvalProbeSet>(probes_json.at("probes"), probes_path);
  evaluation::EvalConfig ec;
  ec.method = probes_json.value("method", std::string(targets::method_cli_name(config.edit.method)));
  ec.seed = config.seed;
  Session session("eval", hash, out);
  const auto report = evaluation::evaluate_run(pre, post, probes, ec);
  session.write_json("eval_report", "eval_report.json", stamped(report, hash));
  session.write("eval_csv", "eval.csv", evaluation::eval_csv(std::span<const evaluation::EvalReport>(&report, 1), hash));
  say(log, ec.method + ": efficacy accuracy " + fixed(report.efficacy_accuracy, 3) + ", generalization accuracy " +
               fixed(report.generalization_accuracy, 3) + ", KL " + fixed(report.specificity_kl, 4));
  return session.finish();
}

std::string report_text(const std::vector<nlohmann::json>& reports) {
  const std::vector<std::string> head1{"", "Efficacy", "", "Generalization", "", "Specificity", "", "", ""};
  const std::vector<std::string> head2{"Method", "Success", "Accuracy", "Success", "Accuracy",
                                       "D_KL",   "Top-1",   "Top-5",    "Top-10"};
  std::vector<std::vector<std::string>> rows{head1, head2};
  for (const auto& r : reports) {
    const auto pct = [](double v) { return fixed(100.0 * v, 1); };
    rows.push_back({r.at("method").get<std::string>() + " (seed " + std::to_string(r.at("seed").get<std::uint64_t>()) + ")",
                    pct(r.at("efficacy").at("success")), pct(r.at("efficacy").at("accuracy")),
                    pct(r.at("generalization").at("success")), pct(r.at("generalization").at("accuracy")),
                    fixed(r.at("specificity").at("kl").get<double>(), 4), pct(r.at("specificity").at("top1")),
                    pct(r.at("specificity").at("top5")), pct(r.at("specificity").at("top10"))});
  }
  std::vector<std::size_t> width(head2.size(), 0);
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::string out;
  for (const auto& row : rows) {
    std::string line;
    for (std::size_t c = 0; c < row.size(); ++c) line += pad(row[c], width[c] + 2);
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
  }
  return out;
}

ExperimentManifest cmd_report(const std::vector<fs::path>& manifests, const fs::path& out, const Logger& log) {
  if (manifests.empty()) throw InputError("report needs at least one eval manifest");
  std::vector<evaluation::EvalReport> reports;
  std::vector<nlohmann::json> raw;
  Sha256 combined;
  for (const auto& path : manifests) {
    const auto m = read_manifest(path);
    if (m.command != "eval") throw InputError(path.string() + " is not an eval manifest");
    const fs::path report_path = m.artifact("eval_report", path.parent_path());
    const nlohmann::json j = read_json(report_path);
    reports.push_back(json_get<evaluation::EvalReport>(j, report_path));
    raw.push_back(j);
    combined.update(m.config_hash);
  }
  const std::string hash = combined.hex_digest();
  Session session("report", hash, out);
  session.write("report_csv", "report.csv", evaluation::eval_csv(reports, hash));
  const std::string text = report_text(raw);
  session.write("report_text", "report.txt", "# config_hash=" + hash + "\n" + text);
  say(log, text);
  return session.finish();
}

}  // namespace hted::cli
