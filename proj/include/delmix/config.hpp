#pragma once

#include <filesystem>
#include <string>

#include "delmix/countmodel.hpp"
#include "delmix/simulator.hpp"

namespace delmix {

// Run configuration: a sectioned key=value document mirroring the pipeline
// stages. Unknown sections or keys are rejected.
struct RunConfig {
  SimConfig simulate;

  // [model]
  std::string predictor = "embed";  // embed | mpnn
  CountModelParams model;
  int dim = 32;  // embed trunk width
  MpnnConfig mpnn;

  // [train]
  TrainOptions train;
  double holdout_fraction = 0.2;
  int n_ntc_only = 0;
  int n_unsequenced = 0;

  // [eval]
  int k = 10;
  std::string external_path;
  int external_size = 150;
  double external_binder_fraction = 0.2;
  std::string external_mode = "combos";  // combos | heldout_bb

  void validate() const;
};

RunConfig parse_run_config_text(const std::string& text);
RunConfig parse_run_config(const std::filesystem::path& path);

// Canonical serialization; re-parsing it reproduces the config.
std::string serialize_run_config(const RunConfig& cfg);

// Provenance copy written into every output directory.
void echo_config(const std::filesystem::path& out_dir, const RunConfig& cfg);

}  // namespace delmix
