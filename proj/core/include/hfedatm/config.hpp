#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "hfedatm/orchestrator.hpp"

namespace hfedatm {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Synthetic data generation knobs. `domains` counts source domains only; one
// extra held-out target domain is always generated after them.
struct DataConfig {
  int domains = 3;
  int classes = 4;
  int per_domain = 240;
  int target_samples = 240;
  int image = 14;           // square, single channel
  double lambda = 1.0;      // heterogeneity: 1 = IID, 0 = exclusive
};

// File-backed experiment description: flat `section.key = value` lines,
// '#' comments, schema-checked (unknown keys rejected).
struct ExperimentConfig {
  Topology topology;
  RunConfig run;             // run.seed is filled per entry of `seeds`
  DataConfig data;
  std::vector<std::uint64_t> seeds{0};
  std::vector<AggregationMode> modes{AggregationMode::Avg,
                                     AggregationMode::HfedAtm};
  std::string output_dir = "out";
};

// Materialized federation data for one seed: client shards over the source
// domains plus the held-out target domain's samples. Same seed, same bits.
struct BuiltData {
  ClientShards shards;
  std::vector<Sample> target;
};

BuiltData build_data(const DataConfig& data, const Topology& topo,
                     std::uint64_t seed);

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Canonical serialization, one line per key in schema order. Round-trips
// through parse_config_text; used for the summary's config echo.
std::string config_to_text(const ExperimentConfig& cfg);

}  // namespace hfedatm
