#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pfsm/data.hpp"
#include "pfsm/federation.hpp"
#include "pfsm/segmodel.hpp"

namespace pfsm {

// Whole-experiment configuration. The single root seed feeds model init and
// training streams; each dataset keeps its own seed so the data stays fixed
// while the experiment seed varies.
struct ExperimentConfig {
  std::uint64_t seed = 42;
  Preset preset = Preset::Ours;
  std::string out_dir = "runs/out";
  ModelConfig model;
  FedConfig fed;
  std::vector<DatasetSpec> clients;
  DatasetSpec unseen;

  void validate() const;
};

// Built-in roster: four clients with strongly different intensity domains
// (identity, dim gamma-compressed, inverted, bright gamma-expanded) plus an
// unseen blob domain for generalization checks.
ExperimentConfig default_config();

// Minimal TOML subset: comments, [section], [[clients]] tables and
// key = value scalars (quoted string, integer, float, bool). Unknown keys
// and sections are rejected by name with their line number.
ExperimentConfig parse_config_text(const std::string& text, const std::string& source_name);
ExperimentConfig parse_config_file(const std::string& path);

}  // namespace pfsm
