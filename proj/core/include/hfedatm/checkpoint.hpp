#pragma once

#include <string>
#include <vector>

#include "hfedatm/gram.hpp"
#include "hfedatm/model.hpp"

namespace hfedatm {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FingerprintMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint container: magic "HFAM", version u16, length-prefixed UTF-8 spec
// manifest, then per-layer little-endian float64 payload in manifest order
// (conv: filter tensor then biases; linear: weight matrix then biases).
// Round trips are bit-exact.
void save_checkpoint(const ModelSpec& spec, const ModelWeights& weights,
                     const std::string& path);

struct LoadedCheckpoint {
  ModelSpec spec;
  ModelWeights weights;
};

// expected_fingerprint != 0 enforces an architecture match on load.
LoadedCheckpoint load_checkpoint(const std::string& path,
                                 std::uint64_t expected_fingerprint = 0);

// Gram sidecar: magic "HFGM", same framing, one record per linear layer.
void save_grams(const std::vector<GramStat>& grams, const std::string& path);
std::vector<GramStat> load_grams(const std::string& path);

// Optional dataset dump (magic "HFDT"): flat samples for one client.
struct DatasetDump {
  int c = 0, h = 0, w = 0;
  std::vector<int> labels;
  std::vector<std::vector<double>> images;  // each c*h*w long
};
void save_dataset(const DatasetDump& d, const std::string& path);
DatasetDump load_dataset(const std::string& path);

// Optional per-client update dump (magic "HFUP"): weights + grams + count.
struct UpdateDump {
  ModelSpec spec;
  ModelWeights weights;
  std::vector<GramStat> grams;
  std::int64_t n_samples = 0;
};
void save_update(const UpdateDump& u, const std::string& path);
UpdateDump load_update(const std::string& path);

}  // namespace hfedatm
