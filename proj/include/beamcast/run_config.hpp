#pragma once

// Hierarchical run configuration: one JSON file (comments allowed), with
// dotted-path overrides layered on top. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "beamcast/channel_sim.hpp"
#include "beamcast/dataset.hpp"
#include "beamcast/eval_harness.hpp"
#include "beamcast/model_config.hpp"
#include "beamcast/pilot_frontend.hpp"
#include "beamcast/training.hpp"

namespace beamcast {

struct RunConfig {
  std::uint64_t seed = 20240611;
  std::size_t num_sequences = 4000;
  std::filesystem::path data_dir = "data";
  std::filesystem::path output_dir = "runs";
  int threads = 1;
  int micro_batch = 32;

  SimConfig sim;
  SoundingConfig sounding;
  DatasetOptions dataset;
  ModelConfig model;  // slots/subcarriers/codewords/classes come from the data
  CurriculumPlans plans;
  StagePlan end_to_end = StagePlan::end_to_end();
  StagePlan baseline = StagePlan::end_to_end();

  /// Checks every module-level invariant that does not need the dataset.
  void validate() const;

  /// Model config with the data-dependent shape fields filled in.
  ModelConfig model_for(const DatasetContainer& ds) const;

  ExperimentConfig experiment(const DatasetContainer& ds) const;

  std::uint64_t sim_seed() const;
  std::uint64_t split_seed() const;
  std::uint64_t init_seed() const;

  std::filesystem::path split_path(const std::string& split) const {
    return data_dir / (split + ".bin");
  }
};

/// Canonical JSON text of the fully resolved configuration.
std::string dump_run_config(const RunConfig& config);

/// Parses JSON text (comments allowed) layered over the defaults.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies "dotted.path=value" overrides in order. The value is read as JSON
/// when it parses, otherwise as a string.
void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides);

}  // namespace beamcast
