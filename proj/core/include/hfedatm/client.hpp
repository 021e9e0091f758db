#pragma once

#include <vector>

#include "hfedatm/data.hpp"
#include "hfedatm/gram.hpp"
#include "hfedatm/model.hpp"
#include "hfedatm/update.hpp"

namespace hfedatm {

enum class LocalAlgo { FedAvg, FedProx };

struct LocalTrainConfig {
  LocalAlgo algo = LocalAlgo::FedAvg;
  double prox_mu = 0.0;  // FedProx proximal strength, anchored at weights_in
  int epochs = 1;
  int batch = 32;
  double lr = 0.01;
  bool capture_grams = false;
};

// E epochs of shuffled-minibatch SGD (FedAvg, or FedProx anchored at
// weights_in). When capture_grams is set, the Gram of every linear layer is
// taken from one extra forward pass over the first min(batch, |data|)
// samples of the final shuffle order.
ClientUpdate train_local(const ModelSpec& spec, const ModelWeights& weights_in,
                         const std::vector<Sample>& data,
                         const LocalTrainConfig& cfg, SeededRng& rng);

// Spectral-norm scaling clip: if ||G||_2 > bound, scale by bound/||G||_2.
// Eigenvector geometry is preserved; the clip bound is recorded either way.
GramStat clip_gram(const GramStat& g, double bound);

// Gaussian mechanism on the upper triangle, mirrored to keep symmetry, with
// sigma = C*sqrt(2*ln(1.25/delta))/eps. Requires a prior clip at budget.clip;
// eps = inf leaves G untouched.
GramStat dp_noise_gram(const GramStat& g, const DpBudget& budget, SeededRng& rng);

double gaussian_mechanism_sigma(const DpBudget& budget);

}  // namespace hfedatm
