// hfedatm command line: experiment runner, standalone checkpoint merger, and
// Gram sidecar inspector.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "hfedatm/checkpoint.hpp"
#include "hfedatm/config.hpp"
#include "hfedatm/linalg.hpp"
#include "hfedatm/orchestrator.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hfedatm;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitFormat = 4;
constexpr int kExitSingular = 5;

struct RunArgs {
  std::string config_path;
  std::string out_dir;  // overrides output.dir when non-empty
  long seed = -1;       // overrides the seeds list when >= 0
  double lambda = -1.0; // overrides data.lambda when >= 0
  std::string mode;     // "avg" | "hfedatm" | "" (both from config)
  double dp_eps = 0.0;  // overrides dp.eps when > 0
};

json flags_json(const GramFlags& f) {
  json j;
  j["clipped"] = f.clipped;
  j["clip_bound"] = f.clip_bound;
  j["has_dp"] = f.has_dp;
  if (f.has_dp) {
    j["eps"] = f.eps;
    j["delta"] = f.delta;
  }
  j["shrunk"] = f.shrunk;
  if (f.shrunk) j["alpha"] = f.alpha;
  return j;
}

int cmd_run(const RunArgs& args) {
  ExperimentConfig cfg = load_config(args.config_path);
  if (!args.out_dir.empty()) cfg.output_dir = args.out_dir;
  if (args.seed >= 0) cfg.seeds = {static_cast<std::uint64_t>(args.seed)};
  if (args.lambda >= 0.0) {
    if (args.lambda > 1.0) throw ConfigError("--lambda must be in [0, 1]");
    cfg.data.lambda = args.lambda;
  }
  if (!args.mode.empty()) {
    if (args.mode == "avg") cfg.modes = {AggregationMode::Avg};
    else if (args.mode == "hfedatm") cfg.modes = {AggregationMode::HfedAtm};
    else throw ConfigError("--mode must be avg or hfedatm");
  }
  if (args.dp_eps > 0.0) cfg.run.dp.eps = args.dp_eps;

  fs::create_directories(cfg.output_dir);
  const ModelSpec spec = ModelSpec::reduced_lenet(cfg.data.classes, 1, cfg.data.image, cfg.data.image);

  std::ofstream csv(fs::path(cfg.output_dir) / "metrics.csv",
                    std::ios::binary | std::ios::trunc);
  if (!csv) throw ConfigError("cannot write to output dir: " + cfg.output_dir);
  csv << metrics_csv_header() << "\n";

  json summary;
  summary["config"] = config_to_text(cfg);
  summary["model_fingerprint"] = spec.fingerprint();
  json results = json::array();
  // Per mode: record streams of the last seed, for the overhead estimate.
  std::map<std::string, std::vector<RoundRecord>> last_rounds;
  long jitter_total = 0;

  for (std::uint64_t seed : cfg.seeds) {
    const BuiltData data = build_data(cfg.data, cfg.topology, seed);
    for (AggregationMode mode : cfg.modes) {
      RunConfig rc = cfg.run;
      rc.seed = seed;
      rc.mode = mode;
      const RunResult res = run(spec, rc, cfg.topology, data.shards, data.target);
      for (const RoundRecord& rec : res.rounds) {
        csv << metrics_csv_row(rec, mode, seed) << "\n";
        jitter_total += rec.jitter_count;
      }
      if (res.aborted) {
        std::cerr << "run aborted (seed " << seed << ", mode "
                  << mode_name(mode) << "): " << res.abort_reason << "\n";
        return kExitRuntime;
      }
      const std::string tag =
          mode_name(mode) + "_seed" + std::to_string(seed);
      save_checkpoint(spec, res.global,
                      (fs::path(cfg.output_dir) / ("final_" + tag + ".hfam")).string());
      json r;
      r["seed"] = seed;
      r["mode"] = mode_name(mode);
      r["rounds"] = res.rounds.size();
      r["final_target_acc"] = res.rounds.back().target_acc;
      r["final_breadth_pre"] = res.rounds.back().breadth_pre;
      r["final_breadth_post"] = res.rounds.back().breadth_post;
      results.push_back(r);
      last_rounds[mode_name(mode)] = res.rounds;
    }
  }
  csv.close();

  summary["results"] = results;
  summary["jitter_count"] = jitter_total;
  summary["lambda"] = cfg.data.lambda;
  summary["dp_eps"] = std::isinf(cfg.run.dp.eps) ? json("inf")
                                                 : json(cfg.run.dp.eps);
  if (last_rounds.count("avg") && last_rounds.count("hfedatm") &&
      !cfg.run.deterministic_timing) {
    summary["overhead"] =
        measure_overhead(last_rounds["hfedatm"], last_rounds["avg"]);
  }
  std::ofstream sj(fs::path(cfg.output_dir) / "summary.json",
                   std::ios::binary | std::ios::trunc);
  sj << summary.dump(2) << "\n";
  std::cout << "wrote " << (fs::path(cfg.output_dir) / "metrics.csv").string()
            << "\n";
  return 0;
}

int cmd_merge(const std::vector<std::string>& ckpts,
              const std::vector<std::string>& gram_paths, double alpha,
              double lambda_ot, int sinkhorn_iters, const std::string& out) {
  if (ckpts.size() < 2) throw ConfigError("merge needs at least 2 checkpoints");
  if (gram_paths.size() != ckpts.size()) {
    throw ConfigError("merge needs one --grams sidecar per checkpoint");
  }
  LoadedCheckpoint ref = load_checkpoint(ckpts[0]);
  const std::uint64_t fp = ref.spec.fingerprint();

  std::vector<StationPackage> stations;
  for (std::size_t i = 0; i < ckpts.size(); ++i) {
    LoadedCheckpoint c = i == 0 ? std::move(ref) : load_checkpoint(ckpts[i], fp);
    StationPackage p;
    p.station_id = static_cast<int>(i);
    p.spec = c.spec;
    p.model = std::move(c.weights);
    p.grams = load_grams(gram_paths[i]);
    p.active_clients = 1;
    stations.push_back(std::move(p));
  }

  MergeOptions opts;
  opts.alpha = alpha;
  opts.lambda_ot = lambda_ot;
  opts.sinkhorn_iters = sinkhorn_iters;
  opts.gamma.assign(stations.size(), 1.0);

  const ModelSpec spec = stations[0].spec;
  MergeOutcome res = hfedatm_merge(spec, stations, opts);
  save_checkpoint(spec, res.model, out);

  json rep;
  rep["inputs"] = ckpts;
  rep["alpha"] = alpha;
  rep["lambda_ot"] = lambda_ot;
  rep["breadth_pre"] = res.report.breadth_pre;
  rep["breadth_post"] = res.report.breadth_post;
  rep["jitter_count"] = res.report.jitter_count;
  json layers = json::array();
  for (const LayerMergeEntry& l : res.report.layers) {
    layers.push_back({{"layer", l.layer_id},
                      {"method", l.method},
                      {"jitter", l.jitter},
                      {"solve_attempts", l.solve_attempts}});
  }
  rep["layers"] = layers;
  std::ofstream rj(out + ".report.json", std::ios::binary | std::ios::trunc);
  rj << rep.dump(2) << "\n";
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_inspect_gram(const std::string& path, bool demo_ambiguity, int trials,
                     std::uint64_t seed) {
  if (demo_ambiguity) {
    // A Gram matrix G = X^T X cannot identify X: for any orthogonal Q acting
    // on the sample axis, QX has the same Gram. Demonstrated numerically.
    SeededRng rng(seed);
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
      SeededRng trng = rng.derive(0x616d62, static_cast<std::uint64_t>(t));
      const int m = 4 + static_cast<int>(trng.uniform_index(13));  // 4..16
      const int d = 2 + static_cast<int>(trng.uniform_index(7));   // 2..8
      Matrix x(m, d);
      for (double& v : x.data) v = trng.normal();
      const Matrix q = random_orthogonal(trng, static_cast<std::size_t>(m));
      const Matrix qx = matmul(q, x);
      const Matrix g1 = matmul(transpose(x), x);
      const Matrix g2 = matmul(transpose(qx), qx);
      worst = std::max(worst, fro_norm(sub(g1, g2)));
    }
    std::printf("ambiguity demo: %d trials, max ||G(X) - G(QX)||_F = %.3e\n",
                trials, worst);
    if (!(worst <= 1e-10)) {
      std::cerr << "ambiguity demo exceeded 1e-10\n";
      return kExitRuntime;
    }
    if (path.empty()) return 0;
  }

  const std::vector<GramStat> grams = load_grams(path);
  std::printf("%s: %zu gram record(s)\n", path.c_str(), grams.size());
  for (const GramStat& g : grams) {
    const SymEigen eig = sym_eigen(g.g);
    std::printf("  layer %d: %zux%zu  sym_residual=%.3e  eig=[%.6g, %.6g]  m=%d\n",
                g.layer_id, g.g.rows, g.g.cols, symmetry_residual(g.g),
                eig.values.front(), eig.values.back(), g.batch_m);
    std::printf("    flags: %s\n", flags_json(g.flags).dump().c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical federated alignment + merging simulator"};
  app.require_subcommand(1);

  RunArgs ra;
  CLI::App* srun = app.add_subcommand("run", "execute an experiment config");
  srun->add_option("--config", ra.config_path, "config file path")->required();
  srun->add_option("--seed", ra.seed, "single seed override");
  srun->add_option("--lambda", ra.lambda, "heterogeneity override in [0,1]");
  srun->add_option("--mode", ra.mode, "avg | hfedatm (default: both)");
  srun->add_option("--dp-eps", ra.dp_eps, "DP epsilon override");
  srun->add_option("--out", ra.out_dir, "output directory override");

  std::vector<std::string> ckpts, gram_paths;
  double alpha = 0.75, lambda_ot = 0.05;
  int sinkhorn_iters = 25;
  std::string out_path;
  CLI::App* smerge = app.add_subcommand("merge", "merge checkpoints offline");
  smerge->add_option("ckpts", ckpts, "input checkpoints")->required();
  smerge->add_option("--grams", gram_paths, "gram sidecars, one per checkpoint")
      ->required();
  smerge->add_option("--alpha", alpha, "shrinkage alpha");
  smerge->add_option("--lambda", lambda_ot, "entropic OT lambda");
  smerge->add_option("--sinkhorn-iters", sinkhorn_iters, "sinkhorn iterations");
  smerge->add_option("--out", out_path, "merged checkpoint path")->required();

  std::string gram_path;
  bool demo = false;
  int trials = 1;
  std::uint64_t demo_seed = 0;
  CLI::App* sinspect = app.add_subcommand("inspect-gram", "describe a gram sidecar");
  sinspect->add_option("path", gram_path, "sidecar path");
  sinspect->add_flag("--demo-ambiguity", demo,
                     "show that G does not identify its samples");
  sinspect->add_option("--trials", trials, "ambiguity demo trials");
  sinspect->add_option("--seed", demo_seed, "ambiguity demo seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) ? kExitConfig : 0;
  }

  try {
    if (srun->parsed()) return cmd_run(ra);
    if (smerge->parsed())
      return cmd_merge(ckpts, gram_paths, alpha, lambda_ot, sinkhorn_iters,
                       out_path);
    if (!demo && gram_path.empty()) {
      std::cerr << "inspect-gram: need a sidecar path or --demo-ambiguity\n";
      return kExitConfig;
    }
    return cmd_inspect_gram(gram_path, demo, trials, demo_seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FingerprintMismatch& e) {
    std::cerr << "fingerprint mismatch: " << e.what() << "\n";
    return kExitFormat;
  } catch (const FormatError& e) {
    std::cerr << "file format error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const SingularMatrixError& e) {
    std::cerr << "singular system: " << e.what() << "\n";
    return kExitSingular;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
