#pragma once

#include <string>
#include <vector>

#include "hfedatm/fot.hpp"
#include "hfedatm/model.hpp"
#include "hfedatm/update.hpp"

namespace hfedatm {

// What a station sends to the server: its aggregated model and shrunk Grams.
struct StationPackage {
  int station_id = 0;
  ModelWeights model;
  // Optional; when the station's architecture differs in conv kernel size
  // (same fingerprint), its own spec goes here. Empty means the server spec.
  ModelSpec spec;
  std::vector<GramStat> grams;  // shrunk, one per linear layer
  long active_clients = 0;
  long total_samples = 0;
};

struct LayerMergeEntry {
  int layer_id = 0;
  std::string method;  // "conv-weighted-mean" | "regmean" | "bias-avg" | "copy"
  double jitter = 0.0;
  int solve_attempts = 0;
};

struct MergeReport {
  std::vector<LayerMergeEntry> layers;
  double breadth_pre = 0.0;
  double breadth_post = 0.0;
  double align_seconds = 0.0;
  double merge_seconds = 0.0;
  int jitter_count = 0;
};

// FedAvg of client updates weighted by n_samples, reduced in client-id order.
ModelWeights station_aggregate(const ModelSpec& spec,
                               const std::vector<ClientUpdate>& updates);

// Unweighted arithmetic mean of per-client Grams for one layer.
Matrix station_gram(const std::vector<Matrix>& grams);

// Diagonal shrinkage: alpha*G + (1-alpha)*diag(G).
Matrix shrink(const Matrix& g, double alpha);

// Per-filter weighted arithmetic mean of aligned banks.
Tensor4 conv_merge(const std::vector<Tensor4>& banks,
                   const std::vector<double>& gamma);

struct RegmeanResult {
  Matrix w;
  double jitter = 0.0;
  int attempts = 1;
};

// Closed-form merge W = (sum G_e)^{-1} sum(G_e W_e), via the SPD solve with
// ridge jitter on rank deficiency.
RegmeanResult regmean_solve(const std::vector<std::pair<Matrix, Matrix>>& pairs);

// Quadratic objective RegMean minimizes: sum_e tr((W-W_e)^T G_e (W-W_e)).
double regmean_objective(const std::vector<std::pair<Matrix, Matrix>>& pairs,
                         const Matrix& w);

// Plain gamma-weighted average of whole models (the "+Avg" path and biases).
ModelWeights weighted_average_models(const ModelSpec& spec,
                                     const std::vector<ModelWeights>& models,
                                     const std::vector<double>& gamma);

struct MergeOptions {
  double lambda_ot = 0.05;
  int sinkhorn_iters = 25;
  double alpha = 0.75;        // shrinkage applied if grams are not already shrunk
  std::vector<double> gamma;  // per station; defaults to active client counts
};

struct MergeOutcome {
  ModelWeights model;
  MergeReport report;
};

// Full HFedATM server step on station packages: FOT-align every station to
// the first (lowest id), re-index its Grams accordingly, weighted-mean the
// conv banks, RegMean the linear layers, gamma-average the biases, assemble.
MergeOutcome hfedatm_merge(const ModelSpec& spec,
                           const std::vector<StationPackage>& stations,
                           const MergeOptions& opts);

// Rebuilds a ModelWeights from per-layer merged pieces; every layer of the
// spec must be covered exactly once.
ModelWeights assemble_global(const ModelSpec& spec,
                             const std::vector<std::pair<int, Tensor4>>& conv_banks,
                             const std::vector<std::pair<int, std::vector<double>>>& conv_biases,
                             const std::vector<std::pair<int, Matrix>>& linear_weights,
                             const std::vector<std::pair<int, std::vector<double>>>& linear_biases);

}  // namespace hfedatm
