#pragma once

#include <cmath>
#include <limits>

#include "hfedatm/matrix.hpp"

namespace hfedatm {

struct GramFlags {
  bool clipped = false;
  double clip_bound = 0.0;
  bool has_dp = false;
  double eps = std::numeric_limits<double>::infinity();
  double delta = 0.0;
  bool shrunk = false;
  double alpha = 0.0;
};

// Second-moment statistic G = X^T X of a linear layer's input activations
// (X is m x d, one sample per row), plus its clip/noise/shrinkage state.
struct GramStat {
  int layer_id = 0;
  Matrix g;  // d x d, symmetric
  GramFlags flags;
  int batch_m = 0;
};

struct DpBudget {
  double eps = std::numeric_limits<double>::infinity();  // inf = nonprivate
  double delta = 1e-5;
  double clip = 1.0;

  bool is_private() const { return std::isfinite(eps); }
};

}  // namespace hfedatm
