#include "hfedatm/client.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "hfedatm/linalg.hpp"

namespace hfedatm {

namespace {

Tensor4 make_batch(const ModelSpec& spec, const std::vector<Sample>& data,
                   const std::vector<std::size_t>& order, std::size_t begin,
                   std::size_t end, std::vector<int>* labels) {
  Tensor4 batch(end - begin, spec.input.c, spec.input.h, spec.input.w);
  const std::size_t px = static_cast<std::size_t>(spec.input.count());
  for (std::size_t i = begin; i < end; ++i) {
    const Sample& s = data[order[i]];
    std::copy(s.x.begin(), s.x.end(), batch.data.begin() + (i - begin) * px);
    if (labels) labels->push_back(s.label);
  }
  return batch;
}

bool weights_finite(const ModelWeights& w) {
  for (const auto& layer : w.layers) {
    if (const auto* cp = std::get_if<ConvParams>(&layer)) {
      for (double v : cp->w.data)
        if (!std::isfinite(v)) return false;
      for (double v : cp->b)
        if (!std::isfinite(v)) return false;
    } else if (const auto* lp = std::get_if<LinearParams>(&layer)) {
      for (double v : lp->w.data)
        if (!std::isfinite(v)) return false;
      for (double v : lp->b)
        if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

std::vector<int> linear_layer_ids(const ModelSpec& spec) {
  std::vector<int> ids;
  for (std::size_t li = 0; li < spec.layers.size(); ++li)
    if (spec.layers[li].kind == LayerKind::Linear) ids.push_back(static_cast<int>(li));
  return ids;
}

}  // namespace

ClientUpdate train_local(const ModelSpec& spec, const ModelWeights& weights_in,
                         const std::vector<Sample>& data,
                         const LocalTrainConfig& cfg, SeededRng& rng) {
  if (cfg.epochs < 1) throw std::invalid_argument("train_local: epochs must be >= 1");
  if (data.empty()) throw std::invalid_argument("train_local: empty client dataset");

  const auto t0 = std::chrono::steady_clock::now();
  ClientUpdate up;
  up.n_samples = static_cast<long>(data.size());
  up.weights = weights_in;

  std::optional<ProxTerm> prox;
  if (cfg.algo == LocalAlgo::FedProx && cfg.prox_mu != 0.0)
    prox = ProxTerm{cfg.prox_mu, &weights_in};

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bsz = static_cast<std::size_t>(std::max(1, cfg.batch));

  for (int epoch = 0; epoch < cfg.epochs && !up.diverged; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < data.size(); begin += bsz) {
      const std::size_t end = std::min(begin + bsz, data.size());
      std::vector<int> labels;
      Tensor4 batch = make_batch(spec, data, order, begin, end, &labels);
      StepResult step = backward_sgd_step(spec, up.weights, batch, labels, cfg.lr, prox);
      if (!std::isfinite(step.loss) || !weights_finite(step.weights)) {
        up.diverged = true;
        break;
      }
      up.weights = std::move(step.weights);
      epoch_loss += step.loss;
      ++batches;
    }
    if (batches > 0) up.mean_loss = epoch_loss / static_cast<double>(batches);
  }

  if (cfg.capture_grams && !up.diverged) {
    // One dedicated forward pass over one full batch of the final shuffle.
    const std::size_t m = std::min(bsz, data.size());
    Tensor4 batch = make_batch(spec, data, order, 0, m, nullptr);
    const std::vector<int> taps = linear_layer_ids(spec);
    ForwardResult fwd = forward(spec, up.weights, batch, taps);
    for (const auto& tap : fwd.taps) {
      GramStat g;
      g.layer_id = tap.layer_id;
      g.batch_m = static_cast<int>(m);
      g.g = matmul(transpose(tap.x), tap.x);
      // Mirror away multiply-order rounding so symmetry is exact.
      for (std::size_t i = 0; i < g.g.rows; ++i)
        for (std::size_t j = i + 1; j < g.g.cols; ++j) {
          const double v = 0.5 * (g.g.at(i, j) + g.g.at(j, i));
          g.g.at(i, j) = v;
          g.g.at(j, i) = v;
        }
      up.grams.push_back(std::move(g));
    }
  }

  up.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return up;
}

GramStat clip_gram(const GramStat& g, double bound) {
  if (bound <= 0.0) throw std::invalid_argument("clip_gram: bound must be > 0");
  GramStat out = g;
  const double norm = spectral_norm_psd(g.g);
  if (norm > bound) out.g = scale(g.g, bound / norm);
  out.flags.clipped = true;
  out.flags.clip_bound = bound;
  return out;
}

double gaussian_mechanism_sigma(const DpBudget& budget) {
  if (!budget.is_private()) return 0.0;
  return budget.clip * std::sqrt(2.0 * std::log(1.25 / budget.delta)) / budget.eps;
}

GramStat dp_noise_gram(const GramStat& g, const DpBudget& budget, SeededRng& rng) {
  if (!budget.is_private()) return g;  // eps = inf is the nonprivate scenario
  if (budget.eps <= 0.0 || budget.delta <= 0.0 || budget.delta >= 1.0)
    throw std::invalid_argument("dp_noise_gram: invalid (eps, delta)");
  if (!g.flags.clipped || g.flags.clip_bound != budget.clip)
    throw std::invalid_argument("dp_noise_gram: gram must be clipped at budget.clip first");

  const double sigma = gaussian_mechanism_sigma(budget);
  GramStat out = g;
  for (std::size_t i = 0; i < out.g.rows; ++i)
    for (std::size_t j = i; j < out.g.cols; ++j) {
      const double noise = sigma * rng.normal();
      out.g.at(i, j) += noise;
      if (j != i) out.g.at(j, i) = out.g.at(i, j);
    }
  out.flags.has_dp = true;
  out.flags.eps = budget.eps;
  out.flags.delta = budget.delta;
  return out;
}

}  // namespace hfedatm
