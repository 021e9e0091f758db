#include "hfedatm/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hfedatm {

namespace {

// Rotate (y, x) by quarter turns within an h x w grid (h == w assumed for
// quarter != 0).
std::pair<int, int> rotate_index(int y, int x, int h, int w, int quarter) {
  switch (quarter & 3) {
    case 1:
      return {x, h - 1 - y};
    case 2:
      return {h - 1 - y, w - 1 - x};
    case 3:
      return {w - 1 - x, y};
    default:
      return {y, x};
  }
}

constexpr double kGains[] = {1.0, 0.6, 1.4, 0.8, 1.2, 0.7, 1.3, 0.9};

}  // namespace

std::vector<DomainDataset> generate_domains(const SeededRng& rng, int domains,
                                            int classes, int per_domain,
                                            Shape3 shape) {
  if (domains < 2)
    throw std::invalid_argument("generate_domains: need at least 2 domains");
  if (per_domain < classes)
    throw std::invalid_argument("generate_domains: per_domain < classes");
  if (shape.h != shape.w)
    throw std::invalid_argument("generate_domains: images must be square");

  std::vector<DomainDataset> out;
  for (int d = 0; d < domains; ++d) {
    DomainDataset ds;
    ds.domain_id = d;
    ds.rotation_quarter = d & 3;
    ds.gain = kGains[d % 8];
    ds.noise_level = 0.08;
    ds.classes = classes;
    ds.shape = shape;

    SeededRng drng = rng.derive(0x646f6d61696eULL /* "domain" */, d);
    const int h = shape.h, w = shape.w;
    ds.samples.reserve(per_domain);
    for (int i = 0; i < per_domain; ++i) {
      Sample s;
      s.label = i % classes;  // uniform label histogram within +-1
      s.x.assign(static_cast<std::size_t>(shape.count()), 0.0);

      // Class geometry: blob radius from center encodes the class so the
      // label survives the per-domain rotation; the angle is sample noise.
      const double angle = 2.0 * M_PI * drng.uniform01();
      const double r =
          (0.08 + 0.30 * s.label / std::max(1, classes - 1)) * h;
      double cy = 0.5 * (h - 1) + r * std::sin(angle) + 0.3 * drng.normal();
      double cx = 0.5 * (w - 1) + r * std::cos(angle) + 0.3 * drng.normal();
      const double sigma = 1.0 + 0.25 * s.label;
      const double amp = 1.0 + 0.15 * drng.normal();

      for (int ch = 0; ch < shape.c; ++ch) {
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            auto [ry, rx] = rotate_index(y, x, h, w, ds.rotation_quarter);
            const double dy = ry - cy, dx = rx - cx;
            double v = amp * std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
            v = ds.gain * v + ds.noise_level * drng.normal();
            s.x[static_cast<std::size_t>((ch * h + y) * w + x)] = v;
          }
        }
      }
      ds.samples.push_back(std::move(s));
    }
    out.push_back(std::move(ds));
  }
  return out;
}

PartitionSpec partition(double lambda, const std::vector<long>& n_d,
                        const std::vector<std::vector<int>>& owned) {
  if (lambda < 0.0 || lambda > 1.0)
    throw std::invalid_argument("partition: lambda must be in [0,1]");
  const int D = static_cast<int>(n_d.size());
  const int C = static_cast<int>(owned.size());
  if (C < 1) throw std::invalid_argument("partition: need at least one client");

  std::vector<int> owners(D, 0);
  for (const auto& doms : owned)
    for (int d : doms) {
      if (d < 0 || d >= D) throw std::invalid_argument("partition: bad domain id");
      ++owners[d];
    }
  for (int d = 0; d < D; ++d)
    if (owners[d] == 0)
      throw std::invalid_argument("partition: domain " + std::to_string(d) +
                                  " owned by no client");

  std::vector<std::vector<bool>> is_owner(static_cast<std::size_t>(C),
                                          std::vector<bool>(D, false));
  for (int c = 0; c < C; ++c)
    for (int d : owned[c]) is_owner[c][d] = true;

  PartitionSpec spec;
  spec.lambda = lambda;
  spec.domains = D;
  spec.clients = C;
  spec.owned = owned;
  spec.counts.assign(D, std::vector<long>(C, 0));

  for (int d = 0; d < D; ++d) {
    std::vector<double> frac(C);
    for (int c = 0; c < C; ++c) {
      frac[c] = lambda * static_cast<double>(n_d[d]) / C +
                (1.0 - lambda) * (is_owner[c][d] ? 1.0 : 0.0) *
                    static_cast<double>(n_d[d]) / owners[d];
    }
    // Largest-remainder rounding: conservation must hold exactly.
    long assigned = 0;
    std::vector<double> rem(C);
    for (int c = 0; c < C; ++c) {
      const long fl = static_cast<long>(std::floor(frac[c] + 1e-12));
      spec.counts[d][c] = fl;
      rem[c] = frac[c] - static_cast<double>(fl);
      assigned += fl;
    }
    long left = n_d[d] - assigned;
    std::vector<int> order(C);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return rem[a] > rem[b]; });
    for (int i = 0; left > 0 && i < C; ++i, --left) ++spec.counts[d][order[i]];
    if (left != 0)
      throw std::logic_error("partition: rounding failed to conserve samples");
  }
  return spec;
}

std::vector<std::vector<int>> round_robin_ownership(int domains, int stations,
                                                    int clients_per_station) {
  std::vector<std::vector<int>> per_station(stations);
  for (int d = 0; d < domains; ++d) per_station[d % stations].push_back(d);
  for (int s = 0; s < stations; ++s)
    if (per_station[s].empty()) per_station[s].push_back(s % domains);

  std::vector<std::vector<int>> owned;
  owned.reserve(static_cast<std::size_t>(stations) * clients_per_station);
  for (int s = 0; s < stations; ++s)
    for (int c = 0; c < clients_per_station; ++c) owned.push_back(per_station[s]);
  return owned;
}

std::vector<std::vector<Sample>> materialize(const PartitionSpec& spec,
                                             const std::vector<DomainDataset>& domains,
                                             const SeededRng& rng) {
  if (static_cast<int>(domains.size()) < spec.domains)
    throw std::invalid_argument("materialize: fewer datasets than partition domains");
  std::vector<std::vector<Sample>> out(static_cast<std::size_t>(spec.clients));
  for (int d = 0; d < spec.domains; ++d) {
    long total = 0;
    for (int c = 0; c < spec.clients; ++c) total += spec.counts[d][c];
    if (total > static_cast<long>(domains[d].samples.size()))
      throw std::invalid_argument("materialize: insufficient samples in domain " +
                                  std::to_string(d));
    std::vector<std::size_t> idx(domains[d].samples.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    SeededRng drng = rng.derive(0x6d6174ULL /* "mat" */, d);
    drng.shuffle(idx);
    std::size_t cursor = 0;
    for (int c = 0; c < spec.clients; ++c)
      for (long i = 0; i < spec.counts[d][c]; ++i)
        out[c].push_back(domains[d].samples[idx[cursor++]]);
  }
  return out;
}

}  // namespace hfedatm
