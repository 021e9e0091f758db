#include "hfedatm/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <utility>

#include "hfedatm/data.hpp"

namespace hfedatm {

namespace {

std::string trim(const std::string& s) {
  const std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

long parse_int(const std::string& key, const std::string& v, long lo, long hi) {
  std::size_t pos = 0;
  long x = 0;
  try {
    x = std::stol(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(key + ": not an integer: '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError(key + ": not an integer: '" + v + "'");
  if (x < lo || x > hi) {
    throw ConfigError(key + ": " + v + " out of range [" + std::to_string(lo) +
                      ", " + std::to_string(hi) + "]");
  }
  return x;
}

double parse_real(const std::string& key, const std::string& v, double lo,
                  double hi) {
  if (v == "inf") return std::numeric_limits<double>::infinity();
  std::size_t pos = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(key + ": not a number: '" + v + "'");
  }
  if (pos != v.size() || std::isnan(x)) {
    throw ConfigError(key + ": not a number: '" + v + "'");
  }
  if (x < lo || x > hi) throw ConfigError(key + ": " + v + " out of range");
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string fmt_real(double x) {
  if (std::isinf(x)) return "inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace

BuiltData build_data(const DataConfig& data, const Topology& topo,
                     std::uint64_t seed) {
  SeededRng root(seed);
  const Shape3 shape{1, data.image, data.image};
  SeededRng gen = root.derive(0x64617461);  // "data"
  std::vector<DomainDataset> sources =
      generate_domains(gen, data.domains + 1, data.classes, data.per_domain,
                       shape);
  // The last domain id is held out as the target. Its per-domain stream only
  // depends on the master seed and the domain id, so regenerating it at its
  // own sample count is consistent with the source generation above.
  std::vector<DomainDataset> with_target =
      generate_domains(gen, data.domains + 1, data.classes,
                       data.target_samples, shape);
  BuiltData out;
  out.target = std::move(with_target.back().samples);
  sources.pop_back();

  const std::vector<std::vector<int>> owned = round_robin_ownership(
      data.domains, topo.stations, topo.clients_per_station);
  std::vector<long> n_d(sources.size(), data.per_domain);
  const PartitionSpec part = partition(data.lambda, n_d, owned);
  out.shards = materialize(part, sources, root.derive(0x736861726473));
  return out;
}

ExperimentConfig parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) +
                        ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty() || val.empty()) {
      throw ConfigError("line " + std::to_string(lineno) +
                        ": empty key or value");
    }
    if (!kv.emplace(key, val).second) {
      throw ConfigError("duplicate key: " + key);
    }
  }

  ExperimentConfig cfg;
  auto take = [&kv](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) return std::pair<bool, std::string>{false, ""};
    std::string v = it->second;
    kv.erase(it);
    return std::pair<bool, std::string>{true, v};
  };

  if (auto [ok, v] = take("topology.stations"); ok)
    cfg.topology.stations = static_cast<int>(parse_int("topology.stations", v, 1, 1024));
  if (auto [ok, v] = take("topology.clients_per_station"); ok)
    cfg.topology.clients_per_station =
        static_cast<int>(parse_int("topology.clients_per_station", v, 1, 4096));

  if (auto [ok, v] = take("run.rounds"); ok)
    cfg.run.rounds = static_cast<int>(parse_int("run.rounds", v, 1, 100000));
  if (auto [ok, v] = take("run.station_rounds"); ok)
    cfg.run.station_rounds =
        static_cast<int>(parse_int("run.station_rounds", v, 1, 100000));
  if (auto [ok, v] = take("run.epochs"); ok)
    cfg.run.epochs = static_cast<int>(parse_int("run.epochs", v, 1, 100000));
  if (auto [ok, v] = take("run.batch"); ok)
    cfg.run.batch = static_cast<int>(parse_int("run.batch", v, 1, 1 << 20));
  if (auto [ok, v] = take("run.lr"); ok)
    cfg.run.lr = parse_real("run.lr", v, 0.0, 1e6);
  if (auto [ok, v] = take("run.algo"); ok) {
    if (v == "fedavg") cfg.run.algo = LocalAlgo::FedAvg;
    else if (v == "fedprox") cfg.run.algo = LocalAlgo::FedProx;
    else throw ConfigError("run.algo: expected fedavg or fedprox, got '" + v + "'");
  }
  if (auto [ok, v] = take("run.prox_mu"); ok)
    cfg.run.prox_mu = parse_real("run.prox_mu", v, 0.0, 1e6);
  if (auto [ok, v] = take("run.lambda_ot"); ok)
    cfg.run.lambda_ot = parse_real("run.lambda_ot", v, 1e-12, 1e6);
  if (auto [ok, v] = take("run.sinkhorn_iters"); ok)
    cfg.run.sinkhorn_iters =
        static_cast<int>(parse_int("run.sinkhorn_iters", v, 1, 1000000));
  if (auto [ok, v] = take("run.alpha"); ok)
    cfg.run.alpha = parse_real("run.alpha", v, 0.0, 1.0);
  if (auto [ok, v] = take("run.deterministic_timing"); ok)
    cfg.run.deterministic_timing = parse_bool("run.deterministic_timing", v);

  if (auto [ok, v] = take("dp.eps"); ok)
    cfg.run.dp.eps = parse_real("dp.eps", v, 1e-12,
                                std::numeric_limits<double>::infinity());
  if (auto [ok, v] = take("dp.delta"); ok)
    cfg.run.dp.delta = parse_real("dp.delta", v, 1e-300, 1.0);
  if (auto [ok, v] = take("dp.clip"); ok)
    cfg.run.dp.clip = parse_real("dp.clip", v, 1e-12, 1e12);

  if (auto [ok, v] = take("data.domains"); ok)
    cfg.data.domains = static_cast<int>(parse_int("data.domains", v, 1, 256));
  if (auto [ok, v] = take("data.classes"); ok)
    cfg.data.classes = static_cast<int>(parse_int("data.classes", v, 2, 64));
  if (auto [ok, v] = take("data.per_domain"); ok)
    cfg.data.per_domain =
        static_cast<int>(parse_int("data.per_domain", v, 1, 1 << 24));
  if (auto [ok, v] = take("data.target_samples"); ok)
    cfg.data.target_samples =
        static_cast<int>(parse_int("data.target_samples", v, 1, 1 << 24));
  if (auto [ok, v] = take("data.image"); ok)
    cfg.data.image = static_cast<int>(parse_int("data.image", v, 4, 256));
  if (auto [ok, v] = take("data.lambda"); ok)
    cfg.data.lambda = parse_real("data.lambda", v, 0.0, 1.0);

  if (auto [ok, v] = take("seeds"); ok) {
    cfg.seeds.clear();
    std::istringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      tok = trim(tok);
      if (tok.empty()) continue;
      cfg.seeds.push_back(
          static_cast<std::uint64_t>(parse_int("seeds", tok, 0, (1L << 62))));
    }
    if (cfg.seeds.empty()) throw ConfigError("seeds: empty list");
  }
  if (auto [ok, v] = take("modes"); ok) {
    cfg.modes.clear();
    std::istringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      tok = trim(tok);
      if (tok == "avg") cfg.modes.push_back(AggregationMode::Avg);
      else if (tok == "hfedatm") cfg.modes.push_back(AggregationMode::HfedAtm);
      else if (!tok.empty())
        throw ConfigError("modes: expected avg or hfedatm, got '" + tok + "'");
    }
    if (cfg.modes.empty()) throw ConfigError("modes: empty list");
  }
  if (auto [ok, v] = take("output.dir"); ok) cfg.output_dir = v;

  if (!kv.empty()) throw ConfigError("unknown key: " + kv.begin()->first);

  if (cfg.data.classes > cfg.data.per_domain) {
    throw ConfigError("data.per_domain must be >= data.classes");
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string config_to_text(const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << "topology.stations = " << cfg.topology.stations << "\n";
  out << "topology.clients_per_station = " << cfg.topology.clients_per_station
      << "\n";
  out << "run.rounds = " << cfg.run.rounds << "\n";
  out << "run.station_rounds = " << cfg.run.station_rounds << "\n";
  out << "run.epochs = " << cfg.run.epochs << "\n";
  out << "run.batch = " << cfg.run.batch << "\n";
  out << "run.lr = " << fmt_real(cfg.run.lr) << "\n";
  out << "run.algo = "
      << (cfg.run.algo == LocalAlgo::FedAvg ? "fedavg" : "fedprox") << "\n";
  out << "run.prox_mu = " << fmt_real(cfg.run.prox_mu) << "\n";
  out << "run.lambda_ot = " << fmt_real(cfg.run.lambda_ot) << "\n";
  out << "run.sinkhorn_iters = " << cfg.run.sinkhorn_iters << "\n";
  out << "run.alpha = " << fmt_real(cfg.run.alpha) << "\n";
  out << "run.deterministic_timing = "
      << (cfg.run.deterministic_timing ? "true" : "false") << "\n";
  out << "dp.eps = " << fmt_real(cfg.run.dp.eps) << "\n";
  out << "dp.delta = " << fmt_real(cfg.run.dp.delta) << "\n";
  out << "dp.clip = " << fmt_real(cfg.run.dp.clip) << "\n";
  out << "data.domains = " << cfg.data.domains << "\n";
  out << "data.classes = " << cfg.data.classes << "\n";
  out << "data.per_domain = " << cfg.data.per_domain << "\n";
  out << "data.target_samples = " << cfg.data.target_samples << "\n";
  out << "data.image = " << cfg.data.image << "\n";
  out << "data.lambda = " << fmt_real(cfg.data.lambda) << "\n";
  out << "seeds = ";
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    if (i) out << ",";
    out << cfg.seeds[i];
  }
  out << "\n";
  out << "modes = ";
  for (std::size_t i = 0; i < cfg.modes.size(); ++i) {
    if (i) out << ",";
    out << mode_name(cfg.modes[i]);
  }
  out << "\n";
  out << "output.dir = " << cfg.output_dir << "\n";
  return out.str();
}

}  // namespace hfedatm
