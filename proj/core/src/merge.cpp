#include "hfedatm/merge.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>

#include "hfedatm/linalg.hpp"

namespace hfedatm {

ModelWeights station_aggregate(const ModelSpec& spec,
                               const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw std::invalid_argument("station_aggregate: no updates");
  std::vector<const ClientUpdate*> sorted;
  for (const auto& u : updates) sorted.push_back(&u);
  std::sort(sorted.begin(), sorted.end(), [](const ClientUpdate* a, const ClientUpdate* b) {
    return a->client_id < b->client_id;
  });

  std::vector<ModelWeights> models;
  std::vector<double> gamma;
  for (const ClientUpdate* u : sorted) {
    if (u->weights.fingerprint != sorted.front()->weights.fingerprint)
      throw std::invalid_argument("station_aggregate: fingerprint mismatch");
    models.push_back(u->weights);
    gamma.push_back(static_cast<double>(u->n_samples));
  }
  return weighted_average_models(spec, models, gamma);
}

Matrix station_gram(const std::vector<Matrix>& grams) {
  if (grams.empty()) throw std::invalid_argument("station_gram: no grams");
  Matrix sum = grams.front();
  for (std::size_t i = 1; i < grams.size(); ++i) {
    if (!sum.same_shape(grams[i]))
      throw std::invalid_argument("station_gram: dimension mismatch");
    sum = add(sum, grams[i]);
  }
  return scale(sum, 1.0 / static_cast<double>(grams.size()));
}

Matrix shrink(const Matrix& g, double alpha) {
  if (alpha < 0.0 || alpha > 1.0)
    throw std::invalid_argument("shrink: alpha must be in [0,1]");
  if (g.rows != g.cols) throw std::invalid_argument("shrink: not square");
  Matrix out = scale(g, alpha);
  for (std::size_t i = 0; i < g.rows; ++i)
    out.at(i, i) = g.at(i, i);  // diagonal passes through unchanged
  return out;
}

Tensor4 conv_merge(const std::vector<Tensor4>& banks,
                   const std::vector<double>& gamma) {
  if (banks.empty() || banks.size() != gamma.size())
    throw std::invalid_argument("conv_merge: banks/gamma mismatch");
  double total = 0.0;
  for (double g : gamma) total += g;
  if (total <= 0.0) throw std::invalid_argument("conv_merge: zero total weight");
  Tensor4 out(banks[0].k, banks[0].c, banks[0].h, banks[0].w);
  for (std::size_t e = 0; e < banks.size(); ++e) {
    if (banks[e].size() != out.size())
      throw std::invalid_argument("conv_merge: bank shapes differ");
    const double w = gamma[e] / total;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += w * banks[e].data[i];
  }
  return out;
}

RegmeanResult regmean_solve(const std::vector<std::pair<Matrix, Matrix>>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("regmean_solve: no inputs");
  Matrix gsum = pairs.front().first;
  Matrix rhs = matmul(pairs.front().first, pairs.front().second);
  for (std::size_t e = 1; e < pairs.size(); ++e) {
    gsum = add(gsum, pairs[e].first);
    rhs = add(rhs, matmul(pairs[e].first, pairs[e].second));
  }
  SpdSolveResult sol = solve_spd(gsum, rhs);
  if (sol.jitter > 0.0) {
    // Rank-deficient Gram sum: the ridge alone would drag rows in the null
    // space toward zero. Anchor them at the plain mean of the inputs instead,
    // which leaves the constrained subspace untouched.
    Matrix wbar = pairs.front().second;
    for (std::size_t e = 1; e < pairs.size(); ++e)
      wbar = add(wbar, pairs[e].second);
    const double inv = 1.0 / static_cast<double>(pairs.size());
    Matrix gj = gsum;
    Matrix rj = rhs;
    for (std::size_t i = 0; i < gj.rows; ++i) gj.at(i, i) += sol.jitter;
    for (std::size_t i = 0; i < rj.rows; ++i)
      for (std::size_t j = 0; j < rj.cols; ++j)
        rj.at(i, j) += sol.jitter * inv * wbar.at(i, j);
    const int attempts = sol.attempts;
    const double jitter = sol.jitter;
    sol = solve_spd(gj, rj);
    sol.jitter = jitter;
    sol.attempts = attempts;
  }
  return {sol.x, sol.jitter, sol.attempts};
}

double regmean_objective(const std::vector<std::pair<Matrix, Matrix>>& pairs,
                         const Matrix& w) {
  double obj = 0.0;
  for (const auto& [g, we] : pairs) {
    const Matrix d = sub(w, we);
    const Matrix gd = matmul(g, d);
    for (std::size_t i = 0; i < d.rows; ++i)
      for (std::size_t j = 0; j < d.cols; ++j) obj += d.at(i, j) * gd.at(i, j);
  }
  return obj;
}

ModelWeights weighted_average_models(const ModelSpec& spec,
                                     const std::vector<ModelWeights>& models,
                                     const std::vector<double>& gamma) {
  if (models.empty() || models.size() != gamma.size())
    throw std::invalid_argument("weighted_average_models: models/gamma mismatch");
  double total = 0.0;
  for (double g : gamma) total += g;
  if (total <= 0.0)
    throw std::invalid_argument("weighted_average_models: zero total weight");

  ModelWeights out = ModelWeights::zeros(spec);
  for (std::size_t e = 0; e < models.size(); ++e) {
    if (models[e].fingerprint != out.fingerprint)
      throw std::invalid_argument("weighted_average_models: fingerprint mismatch");
    const double w = gamma[e] / total;
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
      if (std::holds_alternative<ConvParams>(out.layers[li])) {
        auto& o = std::get<ConvParams>(out.layers[li]);
        const auto& m = std::get<ConvParams>(models[e].layers[li]);
        for (std::size_t i = 0; i < o.w.data.size(); ++i) o.w.data[i] += w * m.w.data[i];
        for (std::size_t i = 0; i < o.b.size(); ++i) o.b[i] += w * m.b[i];
      } else if (std::holds_alternative<LinearParams>(out.layers[li])) {
        auto& o = std::get<LinearParams>(out.layers[li]);
        const auto& m = std::get<LinearParams>(models[e].layers[li]);
        for (std::size_t i = 0; i < o.w.data.size(); ++i) o.w.data[i] += w * m.w.data[i];
        for (std::size_t i = 0; i < o.b.size(); ++i) o.b[i] += w * m.b[i];
      }
    }
  }
  return out;
}

ModelWeights assemble_global(const ModelSpec& spec,
                             const std::vector<std::pair<int, Tensor4>>& conv_banks,
                             const std::vector<std::pair<int, std::vector<double>>>& conv_biases,
                             const std::vector<std::pair<int, Matrix>>& linear_weights,
                             const std::vector<std::pair<int, std::vector<double>>>& linear_biases) {
  ModelWeights out = ModelWeights::zeros(spec);
  std::map<int, int> covered;
  auto mark = [&](int id) {
    if (++covered[id] > 1)
      throw std::invalid_argument("assemble_global: layer covered twice");
  };
  for (const auto& [id, bank] : conv_banks) {
    auto& p = std::get<ConvParams>(out.layers[id]);
    if (bank.size() != p.w.size())
      throw std::invalid_argument("assemble_global: conv shape mismatch");
    p.w = bank;
    mark(id);
  }
  for (const auto& [id, b] : conv_biases)
    std::get<ConvParams>(out.layers[id]).b = b;
  for (const auto& [id, w] : linear_weights) {
    auto& p = std::get<LinearParams>(out.layers[id]);
    if (!w.same_shape(p.w))
      throw std::invalid_argument("assemble_global: linear shape mismatch");
    p.w = w;
    mark(id);
  }
  for (const auto& [id, b] : linear_biases)
    std::get<LinearParams>(out.layers[id]).b = b;

  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const auto kind = spec.layers[li].kind;
    if ((kind == LayerKind::Conv || kind == LayerKind::Linear) &&
        covered.find(static_cast<int>(li)) == covered.end())
      throw std::invalid_argument("assemble_global: missing layer " + std::to_string(li));
  }
  return out;
}

MergeOutcome hfedatm_merge(const ModelSpec& spec,
                           const std::vector<StationPackage>& stations,
                           const MergeOptions& opts) {
  if (stations.empty()) throw std::invalid_argument("hfedatm_merge: no stations");
  std::vector<const StationPackage*> sorted;
  for (const auto& s : stations) sorted.push_back(&s);
  std::sort(sorted.begin(), sorted.end(), [](const StationPackage* a, const StationPackage* b) {
    return a->station_id < b->station_id;
  });

  std::vector<double> gamma = opts.gamma;
  if (gamma.empty())
    for (const StationPackage* s : sorted)
      gamma.push_back(static_cast<double>(s->active_clients));

  MergeOutcome out;
  auto t0 = std::chrono::steady_clock::now();

  // Reference is the lowest station id. Align others, carrying Grams along.
  std::vector<ModelWeights> aligned;
  std::vector<std::vector<GramStat>> grams;
  aligned.push_back(sorted[0]->model);
  grams.push_back(sorted[0]->grams);

  std::vector<int> conv_ids, linear_ids;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    if (spec.layers[li].kind == LayerKind::Conv) conv_ids.push_back(static_cast<int>(li));
    if (spec.layers[li].kind == LayerKind::Linear) linear_ids.push_back(static_cast<int>(li));
  }

  auto collect_banks = [&](int layer_id, const std::vector<ModelWeights>& models) {
    std::vector<Tensor4> banks;
    for (const auto& m : models)
      banks.push_back(std::get<ConvParams>(m.layers[layer_id]).w);
    return banks;
  };

  if (sorted.size() > 1) {
    std::vector<ModelWeights> raw;
    for (const StationPackage* s : sorted) raw.push_back(s->model);
    // Raw banks can differ in spatial size; breadth compares at the
    // reference size, so resize-only-align first (identity permutations are
    // fine for the "pre" reading, the proxy uses index-wise distances).
    double pre = 0.0, post = 0.0;
    for (std::size_t e = 1; e < sorted.size(); ++e) {
      const ModelSpec& tspec =
          sorted[e]->spec.layers.empty() ? spec : sorted[e]->spec;
      AlignResult ar = align_station(spec, sorted[0]->model, tspec, sorted[e]->model,
                                     opts.lambda_ot, opts.sinkhorn_iters);
      for (const auto& la : ar.conv_layers) {
        pre = std::max(pre, la.pre_cost);
        post = std::max(post, la.post_cost);
      }
      aligned.push_back(std::move(ar.aligned));
      // Re-index this station's Grams wherever alignment permuted a linear
      // layer's input features.
      std::vector<GramStat> g = sorted[e]->grams;
      for (const auto& [lid, perm] : ar.linear_input_perms)
        for (auto& gs : g)
          if (gs.layer_id == lid) gs.g = permute_gram(gs.g, perm);
      grams.push_back(std::move(g));
    }
    out.report.breadth_pre = pre;
    out.report.breadth_post = post;
  }
  out.report.align_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  t0 = std::chrono::steady_clock::now();

  std::vector<std::pair<int, Tensor4>> conv_banks;
  std::vector<std::pair<int, std::vector<double>>> conv_biases;
  std::vector<std::pair<int, Matrix>> linear_weights;
  std::vector<std::pair<int, std::vector<double>>> linear_biases;

  const ModelWeights bias_avg = weighted_average_models(spec, aligned, gamma);

  for (int id : conv_ids) {
    conv_banks.emplace_back(id, conv_merge(collect_banks(id, aligned), gamma));
    conv_biases.emplace_back(id, std::get<ConvParams>(bias_avg.layers[id]).b);
    out.report.layers.push_back({id, "conv-weighted-mean", 0.0, 0});
  }

  for (int id : linear_ids) {
    std::vector<std::pair<Matrix, Matrix>> pairs;
    for (std::size_t e = 0; e < aligned.size(); ++e) {
      const Matrix& w = std::get<LinearParams>(aligned[e].layers[id]).w;
      const GramStat* gs = nullptr;
      for (const auto& g : grams[e])
        if (g.layer_id == id) gs = &g;
      if (!gs)
        throw std::invalid_argument("hfedatm_merge: missing gram for layer " +
                                    std::to_string(id));
      Matrix g = gs->g;
      if (gs->flags.has_dp) g = project_psd(g);  // noise can push G indefinite
      if (!gs->flags.shrunk) g = shrink(g, opts.alpha);
      pairs.emplace_back(std::move(g), w);
    }
    RegmeanResult rm = regmean_solve(pairs);
    if (rm.jitter > 0.0) ++out.report.jitter_count;
    linear_weights.emplace_back(id, std::move(rm.w));
    linear_biases.emplace_back(id, std::get<LinearParams>(bias_avg.layers[id]).b);
    out.report.layers.push_back({id, "regmean", rm.jitter, rm.attempts});
  }

  out.model = assemble_global(spec, conv_banks, conv_biases, linear_weights, linear_biases);
  out.report.merge_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace hfedatm
