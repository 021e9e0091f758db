#pragma once

#include <vector>

#include "hfedatm/matrix.hpp"
#include "hfedatm/model.hpp"

namespace hfedatm {

struct NormalizedFilters {
  Matrix vectors;  // k rows, each a flattened, l2-normalized kernel
  bool had_zero_kernel = false;  // zero kernels were replaced by e1
};

// Flatten each of the k kernels to length c*h*w and l2-normalize. All-zero
// kernels map to the canonical unit vector e1 and raise the warning flag.
NormalizedFilters normalize_filters(const Tensor4& bank);

// Squared Euclidean distances between rows of A and rows of B. For unit
// vectors the range is [0, 4].
Matrix cost_matrix(const Matrix& a, const Matrix& b);

struct TransportPlan {
  Matrix plan;  // k x k, row/col sums = 1 (paper convention Pi*1 = 1)
  double lambda = 0.0;
  int iterations = 0;
  double marginal_residual = 0.0;
};

// Entropic OT with uniform marginals, log-domain stabilized. Internally runs
// on probability marginals 1/k and rescales the output by k.
TransportPlan sinkhorn(const Matrix& cost, double lambda, int max_iter,
                       double tol = 1e-9);

struct PermutationMap {
  std::vector<int> sigma;  // bijection; aligned[a] = source[sigma[a]]
  double residual = 0.0;   // how far the plan was from hard (1 - mass/k)
};

// Exact minimum-cost linear assignment (Hungarian with potentials). Returns
// sigma with sigma[row] = assigned column. Ties break toward lower indices.
std::vector<int> assignment_min(const Matrix& cost);

// Hard permutation from a soft plan: exact assignment on cost -plan.
PermutationMap round_to_permutation(const TransportPlan& plan);

struct LayerAlignment {
  int layer_id = 0;
  PermutationMap perm;
  double pre_cost = 0.0;   // index-wise mean squared distance before permuting
  double post_cost = 0.0;  // same, after permuting
  double sinkhorn_residual = 0.0;
  int iterations = 0;
};

struct AlignResult {
  ModelWeights aligned;
  std::vector<LayerAlignment> conv_layers;
  // Input-feature permutation induced on each linear layer by upstream conv
  // permutations (identity entries omitted). Gram sidecars of the aligned
  // model must be re-indexed with the same map.
  std::vector<std::pair<int, std::vector<int>>> linear_input_perms;
};

// Aligns target's conv filter banks to reference, layer by layer: resize the
// target kernels to the reference spatial size if they differ, normalize,
// solve entropic OT against the reference bank, permute the original filters
// and re-index every consumer's input channels (conv or flatten->linear) so
// the permuted network computes the same function.
AlignResult align_station(const ModelSpec& ref_spec, const ModelWeights& reference,
                          const ModelSpec& target_spec, const ModelWeights& target,
                          double lambda_ot, int max_iter);

// Re-index a Gram matrix by an input-feature permutation: out(i,j) =
// g(p[i], p[j]).
Matrix permute_gram(const Matrix& g, const std::vector<int>& p);

// Weight-space breadth diagnostic: banks[0] is the reference; returns the
// max over other banks of the index-wise mean squared distance between
// normalized filters. Contracts (or stays) under alignment.
double breadth_proxy(const std::vector<Tensor4>& banks);

}  // namespace hfedatm
