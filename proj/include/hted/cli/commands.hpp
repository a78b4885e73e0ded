#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hted/cli/run_config.hpp"

namespace hted::cli {

namespace fs = std::filesystem;

using Logger = std::function<void(const std::string&)>;

inline constexpr const char* kToolVersion = "0.1.0";

struct Artifact {
  std::string role;
  std::string path;
  /// Empty for files that are not covered by the determinism contract.
  std::string sha256;
};

struct ExperimentManifest {
  std::string command;
  std::string config_hash;
  std::string tool_version = kToolVersion;
  std::string created;
  std::vector<Artifact> artifacts;

  /// Path of the artifact with `role`, resolved against `base`; InputError if absent.
  fs::path artifact(const std::string& role, const fs::path& base) const;
};

void to_json(nlohmann::json& j, const ExperimentManifest& m);
void from_json(const nlohmann::json& j, ExperimentManifest& m);

ExperimentManifest read_manifest(const fs::path& path);

/// Each command writes its artifacts plus manifest.json and timing.json into `out`.
/// Files written before a failure are removed.
ExperimentManifest cmd_gen_data(const RunConfig& config, const fs::path& out, const Logger& log);
ExperimentManifest cmd_train(const RunConfig& config, const fs::path& corpus_dir, const fs::path& out,
                             const Logger& log);
ExperimentManifest cmd_edit(const RunConfig& config, const fs::path& checkpoint, const fs::path& corpus_dir,
                            const fs::path& out, const Logger& log);
ExperimentManifest cmd_diagnose(const RunConfig& config, const fs::path& checkpoint, const fs::path& record,
                                const fs::path& out, const Logger& log);
ExperimentManifest cmd_eval(const RunConfig& config, const fs::path& pre, const fs::path& post,
                            const fs::path& probes, const fs::path& out, const Logger& log);
ExperimentManifest cmd_report(const std::vector<fs::path>& manifests, const fs::path& out, const Logger& log);

/// Methods x metrics table as aligned plain text.
std::string report_text(const std::vector<nlohmann::json>& reports);

}  // namespace hted::cli
