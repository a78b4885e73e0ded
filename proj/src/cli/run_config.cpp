#include "hted/cli/run_config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "hted/common/errors.hpp"
#include "hted/common/files.hpp"
#include "hted/common/format.hpp"
#include "hted/common/hash.hpp"

namespace hted::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& raw) {
  const std::string text = trim(raw);
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    throw InputError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return value;
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& raw) {
  std::vector<std::size_t> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>(key, item));
  if (out.empty()) throw InputError("config key '" + key + "' needs at least one entry");
  return out;
}

std::optional<double> parse_optional(const std::string& key, const std::string& raw) {
  const std::string text = trim(raw);
  if (text == "none" || text == "auto") return std::nullopt;
  return parse_number<double>(key, text);
}

std::string optional_text(const std::optional<double>& v, const char* none) {
  return v ? format_double(*v) : std::string(none);
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto num_u = [&](const std::string& key, auto field) {
      t[key] = [key, field](RunConfig& c, const std::string& v) { field(c) = parse_number<std::uint64_t>(key, v); };
    };
    auto num_d = [&](const std::string& key, auto field) {
      t[key] = [key, field](RunConfig& c, const std::string& v) { field(c) = parse_number<double>(key, v); };
    };
    t["run.out"] = [](RunConfig& c, const std::string& v) { c.out = trim(v); };
    num_u("run.seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; });

    num_u("corpus.subjects", [](RunConfig& c) -> std::size_t& { return c.corpus.subjects; });
    num_u("corpus.subject_len", [](RunConfig& c) -> std::size_t& { return c.corpus.subject_len; });
    num_u("corpus.subject_pool", [](RunConfig& c) -> std::size_t& { return c.corpus.subject_pool; });
    num_u("corpus.relations", [](RunConfig& c) -> std::size_t& { return c.corpus.relations; });
    num_u("corpus.objects_per_relation", [](RunConfig& c) -> std::size_t& { return c.corpus.objects_per_relation; });
    num_u("corpus.object_len", [](RunConfig& c) -> std::size_t& { return c.corpus.object_len; });
    num_u("corpus.templates_per_relation", [](RunConfig& c) -> std::size_t& { return c.corpus.templates_per_relation; });
    num_u("corpus.heldout_templates", [](RunConfig& c) -> std::size_t& { return c.corpus.heldout_templates; });
    num_u("corpus.max_suffix", [](RunConfig& c) -> std::size_t& { return c.corpus.max_suffix; });
    num_u("corpus.neighbors", [](RunConfig& c) -> std::size_t& { return c.corpus.neighbors; });
    num_u("corpus.seed", [](RunConfig& c) -> std::uint64_t& { return c.corpus.seed; });

    num_u("model.d_model", [](RunConfig& c) -> std::size_t& { return c.model.d_model; });
    num_u("model.n_layers", [](RunConfig& c) -> std::size_t& { return c.model.n_layers; });
    num_u("model.n_heads", [](RunConfig& c) -> std::size_t& { return c.model.n_heads; });
    num_u("model.d_mlp", [](RunConfig& c) -> std::size_t& { return c.model.d_mlp; });
    num_u("model.max_seq_len", [](RunConfig& c) -> std::size_t& { return c.model.max_seq_len; });
    t["model.decisive_layers"] = [](RunConfig& c, const std::string& v) {
      c.model.decisive_layers = parse_list("model.decisive_layers", v);
    };
    num_u("model.seed", [](RunConfig& c) -> std::uint64_t& { return c.model.seed; });

    num_d("train.lr", [](RunConfig& c) -> double& { return c.train.lr; });
    num_d("train.beta1", [](RunConfig& c) -> double& { return c.train.beta1; });
    num_d("train.beta2", [](RunConfig& c) -> double& { return c.train.beta2; });
    num_d("train.adam_eps", [](RunConfig& c) -> double& { return c.train.adam_eps; });
    num_d("train.grad_clip", [](RunConfig& c) -> double& { return c.train.grad_clip; });
    num_d("train.weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });
    num_u("train.batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
    num_u("train.max_epochs", [](RunConfig& c) -> std::size_t& { return c.train.max_epochs; });
    num_u("train.eval_every", [](RunConfig& c) -> std::size_t& { return c.train.eval_every; });
    num_d("train.target_accuracy", [](RunConfig& c) -> double& { return c.train.target_accuracy; });
    num_u("train.seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; });

    num_d("solve.lr", [](RunConfig& c) -> double& { return c.solve.lr; });
    num_d("solve.beta1", [](RunConfig& c) -> double& { return c.solve.beta1; });
    num_d("solve.beta2", [](RunConfig& c) -> double& { return c.solve.beta2; });
    num_d("solve.adam_eps", [](RunConfig& c) -> double& { return c.solve.adam_eps; });
    num_u("solve.max_iters", [](RunConfig& c) -> std::size_t& { return c.solve.max_iters; });
    num_d("solve.ce_threshold", [](RunConfig& c) -> double& { return c.solve.ce_threshold; });
    t["solve.clamp_ratio"] = [](RunConfig& c, const std::string& v) {
      c.solve.clamp_ratio = parse_optional("solve.clamp_ratio", v);
    };

    t["edit.method"] = [](RunConfig& c, const std::string& v) { c.edit.method = targets::parse_method(trim(v)); };
    num_d("edit.lambda", [](RunConfig& c) -> double& { return c.edit.lambda; });
    t["edit.ridge_eps"] = [](RunConfig& c, const std::string& v) { c.edit.ridge_eps = parse_optional("edit.ridge_eps", v); };
    num_u("edit.preservation_samples", [](RunConfig& c) -> std::size_t& { return c.edit.preservation_samples; });
    num_u("edit.requests", [](RunConfig& c) -> std::size_t& { return c.edit.requests; });

    num_u("diagnose.jacobian_requests", [](RunConfig& c) -> std::size_t& { return c.diagnose.jacobian_requests; });
    num_u("diagnose.directions", [](RunConfig& c) -> std::size_t& { return c.diagnose.directions; });
    num_u("diagnose.direction_seed", [](RunConfig& c) -> std::uint64_t& { return c.diagnose.direction_seed; });
    return t;
  }();
  return table;
}

}  // namespace

void RunConfig::validate() const {
  corpus.validate();
  model::ModelConfig m = model;
  if (m.vocab_size == 0) m.vocab_size = 2;
  m.validate();
  solve.validate();
  edit_config().validate();
  if (edit.requests == 0) throw InputError("edit.requests must be positive");
  if (diagnose.directions == 0) throw InputError("diagnose.directions must be positive");
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json model_json = model;
  model_json.erase("vocab_size");
  return nlohmann::json{
      {"run", {{"seed", seed}, {"out", out.generic_string()}}},
      {"corpus", corpus},
      {"model", model_json},
      {"train",
       {{"lr", train.lr},
        {"beta1", train.beta1},
        {"beta2", train.beta2},
        {"adam_eps", train.adam_eps},
        {"grad_clip", train.grad_clip},
        {"weight_decay", train.weight_decay},
        {"batch_size", train.batch_size},
        {"max_epochs", train.max_epochs},
        {"eval_every", train.eval_every},
        {"target_accuracy", train.target_accuracy},
        {"seed", train.seed}}},
      {"solve",
       {{"lr", solve.lr},
        {"beta1", solve.beta1},
        {"beta2", solve.beta2},
        {"adam_eps", solve.adam_eps},
        {"max_iters", solve.max_iters},
        {"ce_threshold", solve.ce_threshold},
        {"clamp_ratio", optional_text(solve.clamp_ratio, "none")}}},
      {"edit",
       {{"method", targets::method_cli_name(edit.method)},
        {"lambda", edit.lambda},
        {"ridge_eps", optional_text(edit.ridge_eps, "auto")},
        {"preservation_samples", edit.preservation_samples},
        {"requests", edit.requests}}},
      {"diagnose",
       {{"jacobian_requests", diagnose.jacobian_requests},
        {"directions", diagnose.directions},
        {"direction_seed", diagnose.direction_seed}}}};
}

std::string RunConfig::hash() const { return sha256_hex(to_json().dump()); }

editor::EditConfig RunConfig::edit_config() const {
  editor::EditConfig e;
  e.method = edit.method;
  e.lambda = edit.lambda;
  e.ridge_eps = edit.ridge_eps;
  e.preservation_samples = edit.preservation_samples;
  e.seed = seed;
  return e;
}

RunConfig parse_run_config(const std::string& ini_text) {
  boost::property_tree::ptree tree;
  std::istringstream in(ini_text);
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw InputError(std::string("config parse error: ") + e.what());
  }
  RunConfig c;
  const auto& table = setters();
  for (const auto& [section, keys] : tree) {
    if (keys.empty() && !keys.data().empty()) throw InputError("config key '" + section + "' is outside any section");
    for (const auto& [key, value] : keys) {
      const std::string name = section + "." + key;
      const auto it = table.find(name);
      if (it == table.end()) throw InputError("unknown config key '" + name + "'");
      it->second(c, value.data());
    }
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw InputError("config file " + path.string() + " does not exist");
  return parse_run_config(read_file(path));
}

std::string default_config_ini() {
  const RunConfig c;
  const nlohmann::json j = c.to_json();
  std::string out;
  for (const char* section : {"run", "corpus", "model", "train", "solve", "edit", "diagnose"}) {
    out += "[" + std::string(section) + "]\n";
    for (const auto& [key, value] : j.at(section).items()) {
      std::string text;
      if (value.is_string()) {
        text = value.get<std::string>();
      } else if (value.is_array()) {
        for (const auto& v : value) text += (text.empty() ? "" : ",") + v.dump();
      } else if (value.is_number_float()) {
        text = format_double(value.get<double>());
      } else {
        text = value.dump();
      }
      out += key + " = " + text + "\n";
    }
    out += "\n";
  }
  return out;
}

}  // namespace hted::cli
