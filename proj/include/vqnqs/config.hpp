#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "vqnqs/hamiltonian.hpp"
#include "vqnqs/model.hpp"
#include "vqnqs/trainer.hpp"

namespace vqnqs {

struct SystemConfig {
  std::string kind = "tfim";     // "tfim" | "heisenberg"
  std::vector<int> dims = {16};  // (L) chain or (Lx, Ly) grid
  double j = 1.0;
  double gamma = 1.0;   // transverse field (tfim only)
  bool marshall = true;  // sign rule (heisenberg only)

  int n_sites() const;
  HamiltonianModel build() const;
};

struct MeasureConfig {
  int samples_per_batch = 512;
  int batches = 20;
};

// Fully resolved run description. Every run directory stores this (with all
// defaults materialized) as config.json, so a run is reproducible from its
// own artifacts.
struct RunConfig {
  SystemConfig system;
  ModelConfig model;   // n_sites is derived from the system
  TrainConfig train;   // out_dir is resolved to the run directory
  MeasureConfig measure;
  uint64_t seed = 0;
  std::string out_dir = "run";

  void validate() const;
};

// Parses the configuration text format: [section] / [section.sub] headers and
// key = value lines with strings, integers, floats, booleans, and flat
// arrays. Diagnostics carry 1-based line numbers. Returns the nested tree.
nlohmann::json parse_config_text(const std::string& text);

// json tree <-> RunConfig; unknown or ill-typed keys raise ConfigError naming
// the offending path, and omitted keys take defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& c);

// Loads a run config from a .json file or configuration-text file (decided by
// extension), applying seed resolution: a missing train.seed inherits the
// master seed.
RunConfig load_run_config(const std::string& path);

// Writes the fully resolved config as pretty JSON.
void write_resolved_config(const RunConfig& c, const std::string& path);

}  // namespace vqnqs
