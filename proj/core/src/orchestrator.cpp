#include "hfedatm/orchestrator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <utility>

namespace hfedatm {

std::string mode_name(AggregationMode m) {
  return m == AggregationMode::Avg ? "avg" : "hfedatm";
}

double evaluate(const ModelSpec& spec, const ModelWeights& weights,
                const std::vector<Sample>& samples) {
  if (samples.empty()) return 0.0;
  const Shape3 in = spec.input;
  const std::size_t dim = static_cast<std::size_t>(in.c) * in.h * in.w;
  const std::size_t chunk = 64;
  long correct = 0;
  for (std::size_t base = 0; base < samples.size(); base += chunk) {
    const std::size_t m = std::min(chunk, samples.size() - base);
    Tensor4 batch(static_cast<int>(m), in.c, in.h, in.w);
    for (std::size_t i = 0; i < m; ++i) {
      const Sample& s = samples[base + i];
      if (s.x.size() != dim) throw std::invalid_argument("evaluate: sample dim");
      std::copy(s.x.begin(), s.x.end(),
                batch.data.begin() + static_cast<std::ptrdiff_t>(i * dim));
    }
    const ForwardResult fr = forward(spec, weights, batch);
    for (std::size_t i = 0; i < m; ++i) {
      int best = 0;
      for (int c = 1; c < spec.classes; ++c) {
        if (fr.logits.at(static_cast<int>(i), c) >
            fr.logits.at(static_cast<int>(i), best)) {
          best = c;
        }
      }
      if (best == samples[base + i].label) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

// Breadth diagnostic for the avg path: same statistic the alignment step
// reports, computed directly on the station conv banks.
double station_breadth(const ModelSpec& spec,
                       const std::vector<ModelWeights>& models) {
  double worst = 0.0;
  if (models.size() < 2) return worst;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    if (spec.layers[l].kind != LayerKind::Conv) continue;
    std::vector<Tensor4> banks;
    banks.reserve(models.size());
    for (const ModelWeights& m : models) {
      banks.push_back(std::get<ConvParams>(m.layers[l]).w);
    }
    worst = std::max(worst, breadth_proxy(banks));
  }
  return worst;
}

}  // namespace

RunResult run(const ModelSpec& spec, const RunConfig& cfg, const Topology& topo,
              const ClientShards& shards, const std::vector<Sample>& target) {
  if (topo.stations < 1 || topo.clients_per_station < 1) {
    throw std::invalid_argument("run: topology must be positive");
  }
  if (shards.size() !=
      static_cast<std::size_t>(topo.stations) * topo.clients_per_station) {
    throw std::invalid_argument("run: one shard per (station, client) slot");
  }
  if (cfg.rounds < 1 || cfg.station_rounds < 1) {
    throw std::invalid_argument("run: rounds and station_rounds must be >= 1");
  }

  SeededRng root(cfg.seed);
  SeededRng init_rng = root.derive(0x696e6974);  // "init"
  RunResult result;
  result.global = ModelWeights::random_init(spec, init_rng);

  LocalTrainConfig base_cfg;
  base_cfg.algo = cfg.algo;
  base_cfg.prox_mu = cfg.prox_mu;
  base_cfg.epochs = cfg.epochs;
  base_cfg.batch = cfg.batch;
  base_cfg.lr = cfg.lr;

  MergeOptions mopts;
  mopts.lambda_ot = cfg.lambda_ot;
  mopts.sinkhorn_iters = cfg.sinkhorn_iters;
  mopts.alpha = cfg.alpha;

  for (int r = 0; r < cfg.rounds; ++r) {
    RoundRecord rec;
    rec.round = r;

    const auto t_train0 = std::chrono::steady_clock::now();
    std::vector<StationPackage> packages;
    packages.reserve(topo.stations);
    double loss_sum = 0.0;

    for (int e = 0; e < topo.stations; ++e) {
      ModelWeights h = result.global;
      std::vector<ClientUpdate> last_round;
      double station_loss = 0.0;
      long station_loss_n = 0;

      for (int n = 0; n < cfg.station_rounds; ++n) {
        LocalTrainConfig lcfg = base_cfg;
        // Grams describe the model the server will merge, so they are taken
        // on the final station round only, and only when they will be used.
        lcfg.capture_grams = (cfg.mode == AggregationMode::HfedAtm &&
                              n == cfg.station_rounds - 1);
        std::vector<ClientUpdate> ok;
        for (int i = 0; i < topo.clients_per_station; ++i) {
          const std::vector<Sample>& shard =
              shards[static_cast<std::size_t>(e) * topo.clients_per_station + i];
          if (shard.empty()) continue;
          // The training stream is keyed by (round, station round, client
          // slot) but not the station id, so stations holding identical data
          // train identically and merge to the station model exactly.
          SeededRng crng = root.derive(static_cast<std::uint64_t>(r),
                                       static_cast<std::uint64_t>(n),
                                       static_cast<std::uint64_t>(i));
          ClientUpdate up = train_local(spec, h, shard, lcfg, crng);
          up.station_id = e;
          up.client_id = i;
          if (up.diverged) continue;
          if (lcfg.capture_grams && cfg.dp.is_private()) {
            // Privacy noise, by contrast, must be independent per client.
            SeededRng dprng = root.derive(0x64702d6e6f697365,
                                          static_cast<std::uint64_t>(r),
                                          static_cast<std::uint64_t>(e),
                                          static_cast<std::uint64_t>(i));
            for (GramStat& g : up.grams) {
              g = dp_noise_gram(clip_gram(g, cfg.dp.clip), cfg.dp, dprng);
            }
          }
          station_loss += up.mean_loss;
          ++station_loss_n;
          ok.push_back(std::move(up));
        }
        if (ok.empty()) {
          result.aborted = true;
          result.abort_reason = "station " + std::to_string(e) +
                                " lost all clients in round " +
                                std::to_string(r);
          return result;
        }
        h = station_aggregate(spec, ok);
        if (n == cfg.station_rounds - 1) last_round = std::move(ok);
      }

      StationPackage pkg;
      pkg.station_id = e;
      pkg.model = std::move(h);
      pkg.active_clients = static_cast<long>(last_round.size());
      for (const ClientUpdate& up : last_round) pkg.total_samples += up.n_samples;

      if (cfg.mode == AggregationMode::HfedAtm) {
        // Average client Grams per linear layer, then shrink station-side.
        const std::size_t n_lin = last_round.front().grams.size();
        for (std::size_t l = 0; l < n_lin; ++l) {
          GramStat st = last_round.front().grams[l];
          std::vector<Matrix> gs;
          gs.reserve(last_round.size());
          for (const ClientUpdate& up : last_round) {
            gs.push_back(up.grams[l].g);
            st.flags.has_dp = st.flags.has_dp || up.grams[l].flags.has_dp;
            st.flags.clipped = st.flags.clipped || up.grams[l].flags.clipped;
          }
          st.g = shrink(station_gram(gs), cfg.alpha);
          st.flags.shrunk = true;
          st.flags.alpha = cfg.alpha;
          pkg.grams.push_back(std::move(st));
        }
      }
      loss_sum += station_loss_n > 0 ? station_loss / station_loss_n : 0.0;
      packages.push_back(std::move(pkg));
    }
    rec.t_train_s = seconds_since(t_train0);
    rec.mean_station_loss = loss_sum / topo.stations;

    if (cfg.mode == AggregationMode::HfedAtm) {
      MergeOutcome out = hfedatm_merge(spec, packages, mopts);
      result.global = std::move(out.model);
      rec.breadth_pre = out.report.breadth_pre;
      rec.breadth_post = out.report.breadth_post;
      rec.t_align_s = out.report.align_seconds;
      rec.t_merge_s = out.report.merge_seconds;
      rec.jitter_count = out.report.jitter_count;
    } else {
      const auto t_merge0 = std::chrono::steady_clock::now();
      std::vector<ModelWeights> models;
      std::vector<double> gamma;
      for (StationPackage& p : packages) {
        gamma.push_back(static_cast<double>(p.total_samples));
        models.push_back(std::move(p.model));
      }
      result.global = weighted_average_models(spec, models, gamma);
      rec.breadth_pre = station_breadth(spec, models);
      rec.breadth_post = rec.breadth_pre;
      rec.t_merge_s = seconds_since(t_merge0);
    }

    rec.target_acc = evaluate(spec, result.global, target);
    if (cfg.deterministic_timing) {
      rec.t_train_s = rec.t_align_s = rec.t_merge_s = 0.0;
    }
    result.rounds.push_back(rec);
  }
  return result;
}

namespace {

double median_round_time(const std::vector<RoundRecord>& rounds) {
  std::vector<double> totals;
  for (std::size_t i = rounds.size() > 1 ? 1 : 0; i < rounds.size(); ++i) {
    totals.push_back(rounds[i].t_train_s + rounds[i].t_align_s +
                     rounds[i].t_merge_s);
  }
  if (totals.empty()) throw std::invalid_argument("measure_overhead: no rounds");
  std::sort(totals.begin(), totals.end());
  const std::size_t m = totals.size();
  return m % 2 ? totals[m / 2] : 0.5 * (totals[m / 2 - 1] + totals[m / 2]);
}

}  // namespace

double measure_overhead(const std::vector<RoundRecord>& hfedatm_rounds,
                        const std::vector<RoundRecord>& avg_rounds) {
  const double th = median_round_time(hfedatm_rounds);
  const double ta = median_round_time(avg_rounds);
  if (ta <= 0.0) throw std::invalid_argument("measure_overhead: zero baseline");
  return (th - ta) / ta;
}

std::string metrics_csv_header() {
  return "round,mode,seed,target_acc,mean_station_loss,breadth_pre,"
         "breadth_post,t_train_s,t_align_s,t_merge_s,jitter_count";
}

std::string metrics_csv_row(const RoundRecord& rec, AggregationMode mode,
                            std::uint64_t seed) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%d,%s,%llu,%.8f,%.8f,%.8f,%.8f,%.6f,%.6f,%.6f,%d", rec.round,
                mode_name(mode).c_str(),
                static_cast<unsigned long long>(seed), rec.target_acc,
                rec.mean_station_loss, rec.breadth_pre, rec.breadth_post,
                rec.t_train_s, rec.t_align_s, rec.t_merge_s, rec.jitter_count);
  return std::string(buf);
}

}  // namespace hfedatm
