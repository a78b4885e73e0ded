#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hted/cli/commands.hpp"
#include "hted/cli/run_config.hpp"
#include "hted/common/errors.hpp"

namespace fs = std::filesystem;
using namespace hted;

namespace {

constexpr int kUsage = 1;
constexpr int kNumeric = 2;
constexpr int kThreshold = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string method;
  bool quiet = false;
  std::string corpus;
  std::string checkpoint;
  std::string record;
  std::string pre;
  std::string post;
  std::string probes;
  std::vector<std::string> manifests;
};

cli::RunConfig resolve(const Options& o) {
  cli::RunConfig c = o.config.empty() ? cli::RunConfig{} : cli::load_run_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.method.empty()) c.edit.method = targets::parse_method(o.method);
  c.validate();
  return c;
}

fs::path out_dir(const Options& o, const cli::RunConfig& c, const char* name) {
  return o.out.empty() ? c.out / name : fs::path(o.out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy-scale hidden-state target editing experiments"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "INI run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Override [run] seed");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_flag("--quiet", o.quiet, "Suppress progress messages");
  };
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic fact corpus");
  add_common(gen);
  auto* train = app.add_subcommand("train", "Train and checkpoint the toy model");
  add_common(train);
  train->add_option("--corpus", o.corpus, "Corpus directory")->required();
  auto* edit = app.add_subcommand("edit", "Run an edit batch");
  add_common(edit);
  edit->add_option("--checkpoint", o.checkpoint, "Pre-edit checkpoint")->required();
  edit->add_option("--corpus", o.corpus, "Corpus directory")->required();
  edit->add_option("--method", o.method, "onelayer|memit-div|memit-nodiv|blue|fe")
      ->check(CLI::IsMember({"onelayer", "memit-div", "memit-nodiv", "blue", "fe"}));
  auto* diag = app.add_subcommand("diagnose", "Cosine table, residual ratios and Jacobian definiteness");
  add_common(diag);
  diag->add_option("--checkpoint", o.checkpoint, "Pre-edit checkpoint")->required();
  diag->add_option("--record", o.record, "record.json of an edit run")->required();
  auto* eval = app.add_subcommand("eval", "Efficacy, generalization and specificity metrics");
  add_common(eval);
  eval->add_option("--pre", o.pre, "Pre-edit checkpoint")->required();
  eval->add_option("--post", o.post, "Post-edit checkpoint")->required();
  eval->add_option("--probes", o.probes, "probes.json of an edit run")->required();
  auto* report = app.add_subcommand("report", "Methods x metrics table from eval manifests");
  add_common(report);
  report->add_option("manifests", o.manifests, "manifest.json files of eval runs")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  const cli::Logger log = [&](const std::string& msg) {
    if (!o.quiet) std::cerr << msg << '\n';
  };
  try {
    const cli::RunConfig config = resolve(o);
    if (gen->parsed()) {
      cli::cmd_gen_data(config, out_dir(o, config, "data"), log);
    } else if (train->parsed()) {
      cli::cmd_train(config, o.corpus, out_dir(o, config, "train"), log);
    } else if (edit->parsed()) {
      cli::cmd_edit(config, o.checkpoint, o.corpus, out_dir(o, config, "edit"), log);
    } else if (diag->parsed()) {
      cli::cmd_diagnose(config, o.checkpoint, o.record, out_dir(o, config, "diagnose"), log);
    } else if (eval->parsed()) {
      cli::cmd_eval(config, o.pre, o.post, o.probes, out_dir(o, config, "eval"), log);
    } else if (report->parsed()) {
      std::vector<fs::path> paths(o.manifests.begin(), o.manifests.end());
      cli::cmd_report(paths, out_dir(o, config, "report"), log);
    }
  } catch (const ThresholdError& e) {
    std::cerr << "threshold not met: " << e.what() << '\n';
    return kThreshold;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const DomainError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
  return 0;
}
