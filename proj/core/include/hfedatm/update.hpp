#pragma once

#include <vector>

#include "hfedatm/gram.hpp"
#include "hfedatm/model.hpp"

namespace hfedatm {

// What a client uploads: weights and Gram statistics, never raw samples.
// Station- and server-side code sees only this type.
struct ClientUpdate {
  int station_id = 0;
  int client_id = 0;
  ModelWeights weights;
  std::vector<GramStat> grams;  // one per linear layer when captured
  long n_samples = 0;
  double wall_seconds = 0.0;
  double mean_loss = 0.0;  // average minibatch loss of the final epoch
  bool diverged = false;   // non-finite loss; caller must drop this update
};

}  // namespace hfedatm
