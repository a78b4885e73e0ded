#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "hted/editor/editor.hpp"
#include "hted/model/config.hpp"
#include "hted/model/corpus.hpp"
#include "hted/model/train.hpp"
#include "hted/targets/targets.hpp"

namespace hted::cli {

struct EditSection {
  targets::Method method = targets::Method::memit_dividing;
  double lambda = 1.0;
  std::optional<double> ridge_eps;
  std::size_t preservation_samples = 400;
  std::size_t requests = 100;
};

struct DiagnoseSection {
  /// Requests whose (l, L) Jacobian blocks are assembled.
  std::size_t jacobian_requests = 2;
  std::size_t directions = 1000;
  std::uint64_t direction_seed = 11;
};

struct RunConfig {
  RunConfig() {
    corpus.seed = 1;
    model.seed = 2;
    train.seed = 3;
  }

  /// Seeds the edit batch and the preservation sample.
  std::uint64_t seed = 0;
  std::filesystem::path out = "runs/default";
  model::CorpusParams corpus;
  model::ModelConfig model;
  model::TrainConfig train;
  targets::TargetSolveConfig solve;
  EditSection edit;
  DiagnoseSection diagnose;

  void validate() const;
  /// Canonical JSON of every resolved field.
  nlohmann::json to_json() const;
  /// SHA-256 of the canonical JSON dump.
  std::string hash() const;
  editor::EditConfig edit_config() const;
};

/// Parses an INI file; missing keys keep their defaults, unknown sections or keys are input errors.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(const std::string& ini_text);

/// INI text holding every default, as shipped in configs/default.ini.
std::string default_config_ini();

}  // namespace hted::cli
