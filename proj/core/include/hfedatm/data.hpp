#pragma once

#include <vector>

#include "hfedatm/model.hpp"
#include "hfedatm/rng.hpp"

namespace hfedatm {

struct Sample {
  std::vector<double> x;  // c*h*w, channel-major
  int label = 0;
};

// One synthetic source/target domain: class-conditional Gaussian-blob images
// under a fixed domain transform (quarter-turn rotation + channel gain +
// pixel noise), so domains share labels but shift in appearance.
struct DomainDataset {
  int domain_id = 0;
  int rotation_quarter = 0;  // multiples of 90 degrees
  double gain = 1.0;
  double noise_level = 0.0;
  int classes = 0;
  Shape3 shape;
  std::vector<Sample> samples;
};

// D >= 2 (at least one source + one held-out target). Per-domain generation
// derives its own RNG from (rng, domain id), so regenerating any single
// domain with the same master seed is bit-identical.
std::vector<DomainDataset> generate_domains(const SeededRng& rng, int domains,
                                            int classes, int per_domain,
                                            Shape3 shape);

struct PartitionSpec {
  double lambda = 1.0;
  int domains = 0;
  int clients = 0;
  std::vector<std::vector<int>> owned;        // owned[c] = domain ids client c owns
  std::vector<std::vector<long>> counts;      // counts[d][c], column sums hit n_d
};

// Heterogeneous allocation n_{d,c}(lambda) = lambda*n_d/C
// + (1-lambda)*1[d in D_c]*n_d/#owners(d), rounded by largest remainder so
// every domain's samples are fully assigned.
PartitionSpec partition(double lambda, const std::vector<long>& n_d,
                        const std::vector<std::vector<int>>& owned);

// Deals domains round-robin to stations; every client of a station owns the
// station's domains. Stations left empty wrap around so each owns >= 1.
std::vector<std::vector<int>> round_robin_ownership(int domains, int stations,
                                                    int clients_per_station);

// Draws samples without replacement per (d,c) count; disjoint across clients
// within a domain. Returns one sample list per client.
std::vector<std::vector<Sample>> materialize(const PartitionSpec& spec,
                                             const std::vector<DomainDataset>& domains,
                                             const SeededRng& rng);

}  // namespace hfedatm
