#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "hfedatm/client.hpp"
#include "hfedatm/data.hpp"
#include "hfedatm/merge.hpp"
#include "hfedatm/model.hpp"

namespace hfedatm {

enum class AggregationMode { Avg, HfedAtm };

std::string mode_name(AggregationMode m);

struct Topology {
  int stations = 3;
  int clients_per_station = 5;
};

struct RunConfig {
  int rounds = 10;          // R, global rounds
  int station_rounds = 5;   // N, station rounds per global round
  int epochs = 10;          // E, local epochs per station round
  int batch = 32;
  double lr = 0.01;
  LocalAlgo algo = LocalAlgo::FedAvg;
  double prox_mu = 0.0;
  AggregationMode mode = AggregationMode::HfedAtm;
  double lambda_ot = 0.05;
  int sinkhorn_iters = 25;
  double alpha = 0.75;
  DpBudget dp;  // eps = inf means no privacy mechanism
  std::uint64_t seed = 0;
  // Zeroes the wall-clock columns of every round record so that metrics
  // files are byte-identical across re-runs of the same seed.
  bool deterministic_timing = false;
};

struct RoundRecord {
  int round = 0;
  double target_acc = 0.0;
  double mean_station_loss = 0.0;
  double breadth_pre = 0.0;
  double breadth_post = 0.0;
  double t_train_s = 0.0;
  double t_align_s = 0.0;
  double t_merge_s = 0.0;
  int jitter_count = 0;
};

struct RunResult {
  std::vector<RoundRecord> rounds;
  ModelWeights global;
  bool aborted = false;
  std::string abort_reason;
};

struct AbortError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Fraction of samples whose argmax logit (lowest index on ties) matches the
// label.
double evaluate(const ModelSpec& spec, const ModelWeights& weights,
                const std::vector<Sample>& samples);

// One client shard per (station, client) slot, station-major:
// shards[e * clients_per_station + i].
using ClientShards = std::vector<std::vector<Sample>>;

// Full round protocol. Each global round pushes the global model to every
// station, runs N station rounds of local training + station aggregation,
// captures Grams on the last station round (hfedatm mode only), then merges
// station models back into the global model. A station whose clients all
// diverge in some station round aborts the run (result.aborted is set, the
// partial record stream is kept).
RunResult run(const ModelSpec& spec, const RunConfig& cfg, const Topology& topo,
              const ClientShards& shards, const std::vector<Sample>& target);

// Relative per-round wall-clock increase of the hfedatm record stream over
// the avg stream: (median_h - median_a) / median_a over the per-round totals
// t_train + t_align + t_merge, with the warm-up round 0 excluded when more
// rounds are available.
double measure_overhead(const std::vector<RoundRecord>& hfedatm_rounds,
                        const std::vector<RoundRecord>& avg_rounds);

// CSV emission for the record stream; columns are fixed:
// round,mode,seed,target_acc,mean_station_loss,breadth_pre,breadth_post,
// t_train_s,t_align_s,t_merge_s,jitter_count
std::string metrics_csv_header();
std::string metrics_csv_row(const RoundRecord& rec, AggregationMode mode,
                            std::uint64_t seed);

}  // namespace hfedatm
