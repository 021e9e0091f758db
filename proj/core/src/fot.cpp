#include "hfedatm/fot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "hfedatm/linalg.hpp"

namespace hfedatm {

NormalizedFilters normalize_filters(const Tensor4& bank) {
  if (bank.k == 0) throw std::invalid_argument("normalize_filters: empty bank");
  const std::size_t len = bank.c * bank.h * bank.w;
  NormalizedFilters out;
  out.vectors = Matrix(bank.k, len);
  for (std::size_t a = 0; a < bank.k; ++a) {
    const double* src = &bank.data[a * len];
    double norm = 0.0;
    for (std::size_t i = 0; i < len; ++i) norm += src[i] * src[i];
    norm = std::sqrt(norm);
    if (norm == 0.0) {
      out.vectors.at(a, 0) = 1.0;  // canonical e1 for the degenerate kernel
      out.had_zero_kernel = true;
    } else {
      for (std::size_t i = 0; i < len; ++i) out.vectors.at(a, i) = src[i] / norm;
    }
  }
  return out;
}

Matrix cost_matrix(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw std::invalid_argument("cost_matrix: filter counts/lengths differ");
  const std::size_t k = a.rows;
  Matrix d(k, k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < a.cols; ++l) {
        const double diff = a.at(i, l) - b.at(j, l);
        s += diff * diff;
      }
      d.at(i, j) = s;
    }
  return d;
}

TransportPlan sinkhorn(const Matrix& cost, double lambda, int max_iter, double tol) {
  if (cost.rows != cost.cols) throw std::invalid_argument("sinkhorn: cost not square");
  if (lambda <= 0.0) throw std::invalid_argument("sinkhorn: lambda must be > 0");
  if (!all_finite(cost)) throw std::invalid_argument("sinkhorn: non-finite cost");
  const std::size_t k = cost.rows;
  const double log_marginal = -std::log(static_cast<double>(k));

  // Log-domain potentials; plan(i,j) = exp((f_i + g_j - D_ij)/lambda) with
  // probability marginals 1/k, rescaled by k on output.
  std::vector<double> f(k, 0.0), g(k, 0.0);
  auto lse_row = [&](std::size_t i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j)
      mx = std::max(mx, (g[j] - cost.at(i, j)) / lambda);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      s += std::exp((g[j] - cost.at(i, j)) / lambda - mx);
    return mx + std::log(s);
  };
  auto lse_col = [&](std::size_t j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i)
      mx = std::max(mx, (f[i] - cost.at(i, j)) / lambda);
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i)
      s += std::exp((f[i] - cost.at(i, j)) / lambda - mx);
    return mx + std::log(s);
  };

  TransportPlan out;
  out.lambda = lambda;
  Matrix plan(k, k);
  auto residual = [&]() {
    // Max deviation of row/col sums from 1 in the k-rescaled convention.
    double r = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      double rs = 0.0;
      for (std::size_t j = 0; j < k; ++j) rs += plan.at(i, j);
      r = std::max(r, std::fabs(rs - 1.0));
    }
    for (std::size_t j = 0; j < k; ++j) {
      double cs = 0.0;
      for (std::size_t i = 0; i < k; ++i) cs += plan.at(i, j);
      r = std::max(r, std::fabs(cs - 1.0));
    }
    return r;
  };
  auto fill_plan = [&]() {
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j)
        plan.at(i, j) = static_cast<double>(k) *
                        std::exp((f[i] + g[j] - cost.at(i, j)) / lambda);
  };

  int it = 0;
  for (; it < max_iter; ++it) {
    for (std::size_t i = 0; i < k; ++i) f[i] = lambda * (log_marginal - lse_row(i));
    for (std::size_t j = 0; j < k; ++j) g[j] = lambda * (log_marginal - lse_col(j));
    fill_plan();
    if (!all_finite(plan))
      throw std::runtime_error("sinkhorn: non-finite plan (lambda too small for cost range)");
    if (residual() <= tol) {
      ++it;
      break;
    }
  }
  out.marginal_residual = residual();
  out.plan = std::move(plan);
  out.iterations = it;
  return out;
}

std::vector<int> assignment_min(const Matrix& cost) {
  if (cost.rows != cost.cols) throw std::invalid_argument("assignment_min: not square");
  const int n = static_cast<int>(cost.rows);
  const double inf = std::numeric_limits<double>::infinity();
  // Hungarian algorithm with potentials, O(n^3). 1-based work arrays;
  // p[j] = row matched to column j.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = -1;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> sigma(n, -1);
  for (int j = 1; j <= n; ++j) sigma[p[j] - 1] = j - 1;
  return sigma;
}

PermutationMap round_to_permutation(const TransportPlan& plan) {
  const std::size_t k = plan.plan.rows;
  PermutationMap out;
  out.sigma = assignment_min(scale(plan.plan, -1.0));
  double mass = 0.0;
  for (std::size_t a = 0; a < k; ++a) mass += plan.plan.at(a, out.sigma[a]);
  out.residual = 1.0 - mass / static_cast<double>(k);
  return out;
}

Matrix permute_gram(const Matrix& g, const std::vector<int>& p) {
  if (g.rows != g.cols || g.rows != p.size())
    throw std::invalid_argument("permute_gram: size mismatch");
  Matrix out(g.rows, g.cols);
  for (std::size_t i = 0; i < g.rows; ++i)
    for (std::size_t j = 0; j < g.cols; ++j)
      out.at(i, j) = g.at(p[i], p[j]);
  return out;
}

namespace {

bool is_identity(const std::vector<int>& p) {
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] != static_cast<int>(i)) return false;
  return true;
}

Tensor4 resize_bank(const Tensor4& bank, std::size_t target) {
  if (bank.h == target && bank.w == target) return bank;
  Tensor4 out(bank.k, bank.c, target, target);
  Matrix slice(bank.h, bank.w);
  for (std::size_t a = 0; a < bank.k; ++a)
    for (std::size_t ci = 0; ci < bank.c; ++ci) {
      for (std::size_t y = 0; y < bank.h; ++y)
        for (std::size_t x = 0; x < bank.w; ++x) slice.at(y, x) = bank.at(a, ci, y, x);
      const Matrix r = bilinear_resize(slice, target);
      for (std::size_t y = 0; y < target; ++y)
        for (std::size_t x = 0; x < target; ++x) out.at(a, ci, y, x) = r.at(y, x);
    }
  return out;
}

Tensor4 permute_input_channels(const Tensor4& bank, const std::vector<int>& p) {
  Tensor4 out = bank;
  for (std::size_t a = 0; a < bank.k; ++a)
    for (std::size_t ci = 0; ci < bank.c; ++ci)
      for (std::size_t y = 0; y < bank.h; ++y)
        for (std::size_t x = 0; x < bank.w; ++x)
          out.at(a, ci, y, x) = bank.at(a, p[ci], y, x);
  return out;
}

}  // namespace

AlignResult align_station(const ModelSpec& ref_spec, const ModelWeights& reference,
                          const ModelSpec& target_spec, const ModelWeights& target,
                          double lambda_ot, int max_iter) {
  if (reference.fingerprint != target.fingerprint)
    throw std::invalid_argument("align_station: fingerprints differ");

  AlignResult out;
  out.aligned = target;
  out.aligned.fingerprint = ref_spec.fingerprint();

  const auto shapes = target_spec.shapes();
  std::vector<int> pending;  // channel permutation owed to the next consumer

  for (std::size_t li = 0; li < target_spec.layers.size(); ++li) {
    const auto& l = target_spec.layers[li];
    switch (l.kind) {
      case LayerKind::Conv: {
        auto& p = std::get<ConvParams>(out.aligned.layers[li]);
        const auto& ref = std::get<ConvParams>(reference.layers[li]);
        if (p.w.k != ref.w.k)
          throw std::invalid_argument("align_station: differing filter counts unsupported");
        if (!pending.empty()) p.w = permute_input_channels(p.w, pending);
        p.w = resize_bank(p.w, ref.w.h);

        const NormalizedFilters nr = normalize_filters(ref.w);
        const NormalizedFilters nt = normalize_filters(p.w);
        const Matrix cost = cost_matrix(nr.vectors, nt.vectors);
        const TransportPlan plan = sinkhorn(cost, lambda_ot, max_iter);
        PermutationMap perm = round_to_permutation(plan);

        double id_cost = 0.0, perm_cost = 0.0;
        for (std::size_t a = 0; a < cost.rows; ++a) {
          id_cost += cost.at(a, a);
          perm_cost += cost.at(a, perm.sigma[a]);
        }
        if (perm_cost > id_cost) {
          // Soft-plan rounding picked a worse bijection than the identity;
          // keep the identity so alignment never increases the index-wise cost.
          std::iota(perm.sigma.begin(), perm.sigma.end(), 0);
          perm_cost = id_cost;
        }

        LayerAlignment la;
        la.layer_id = static_cast<int>(li);
        la.pre_cost = id_cost / static_cast<double>(cost.rows);
        la.post_cost = perm_cost / static_cast<double>(cost.rows);
        la.sinkhorn_residual = plan.marginal_residual;
        la.iterations = plan.iterations;
        la.perm = perm;

        // Permute the original (unnormalized, resized) filters and biases.
        Tensor4 permuted = p.w;
        std::vector<double> pb = p.b;
        for (std::size_t a = 0; a < p.w.k; ++a) {
          const std::size_t src = static_cast<std::size_t>(perm.sigma[a]);
          std::copy(&p.w.data[src * p.w.c * p.w.h * p.w.w],
                    &p.w.data[(src + 1) * p.w.c * p.w.h * p.w.w],
                    &permuted.data[a * p.w.c * p.w.h * p.w.w]);
          pb[a] = p.b[src];
        }
        p.w = std::move(permuted);
        p.b = std::move(pb);
        pending = perm.sigma;
        out.conv_layers.push_back(std::move(la));
        break;
      }
      case LayerKind::Flatten: {
        if (!pending.empty() && !is_identity(pending)) {
          // Expand channel permutation into the flattened feature index
          // space: block re-indexing by spatial-position groups.
          const Shape3 in_shape = shapes[li];
          const int hw = in_shape.h * in_shape.w;
          std::vector<int> feat(static_cast<std::size_t>(in_shape.count()));
          for (int ch = 0; ch < in_shape.c; ++ch)
            for (int pos = 0; pos < hw; ++pos)
              feat[static_cast<std::size_t>(ch * hw + pos)] = pending[ch] * hw + pos;
          pending = std::move(feat);
        }
        break;
      }
      case LayerKind::Linear: {
        if (!pending.empty() && !is_identity(pending)) {
          auto& p = std::get<LinearParams>(out.aligned.layers[li]);
          Matrix w(p.w.rows, p.w.cols);
          for (std::size_t i = 0; i < p.w.rows; ++i)
            for (std::size_t j = 0; j < p.w.cols; ++j)
              w.at(i, j) = p.w.at(pending[i], j);
          p.w = std::move(w);
          out.linear_input_perms.emplace_back(static_cast<int>(li), pending);
        }
        pending.clear();  // linear outputs are not permuted
        break;
      }
      case LayerKind::Relu:
      case LayerKind::AvgPool2:
        break;  // channel permutations pass through unchanged
    }
  }
  return out;
}

double breadth_proxy(const std::vector<Tensor4>& banks) {
  if (banks.size() < 2)
    throw std::invalid_argument("breadth_proxy: need at least 2 banks");
  const NormalizedFilters ref = normalize_filters(banks[0]);
  double worst = 0.0;
  for (std::size_t e = 1; e < banks.size(); ++e) {
    const NormalizedFilters other = normalize_filters(banks[e]);
    if (!ref.vectors.same_shape(other.vectors))
      throw std::invalid_argument("breadth_proxy: bank shapes differ");
    double mean = 0.0;
    for (std::size_t a = 0; a < ref.vectors.rows; ++a) {
      double s = 0.0;
      for (std::size_t i = 0; i < ref.vectors.cols; ++i) {
        const double diff = ref.vectors.at(a, i) - other.vectors.at(a, i);
        s += diff * diff;
      }
      mean += s;
    }
    worst = std::max(worst, mean / static_cast<double>(ref.vectors.rows));
  }
  return worst;
}

}  // namespace hfedatm
