#include "hfedatm/linalg.hpp"

#include <algorithm>
#include <cmath>

namespace hfedatm {

namespace {

// In-place Cholesky of a into l (lower). Returns false on a non-positive
// pivot.
bool cholesky(const Matrix& a, Matrix& l) {
  const std::size_t n = a.rows;
  l = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a.at(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l.at(i, k) * l.at(j, k);
      if (i == j) {
        if (s <= 0.0 || !std::isfinite(s)) return false;
        l.at(i, i) = std::sqrt(s);
      } else {
        l.at(i, j) = s / l.at(j, j);
      }
    }
  }
  return true;
}

Matrix cholesky_solve(const Matrix& l, const Matrix& b) {
  const std::size_t n = l.rows;
  Matrix x(n, b.cols);
  // L y = b, then L^T x = y, column by column.
  for (std::size_t col = 0; col < b.cols; ++col) {
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = b.at(i, col);
      for (std::size_t k = 0; k < i; ++k) s -= l.at(i, k) * y[k];
      y[i] = s / l.at(i, i);
    }
    for (std::size_t ii = n; ii > 0; --ii) {
      const std::size_t i = ii - 1;
      double s = y[i];
      for (std::size_t k = i + 1; k < n; ++k) s -= l.at(k, i) * x.at(k, col);
      x.at(i, col) = s / l.at(i, i);
    }
  }
  return x;
}

}  // namespace

SpdSolveResult solve_spd(const Matrix& a, const Matrix& b) {
  if (a.rows != a.cols) throw std::invalid_argument("solve_spd: A not square");
  if (a.cols != b.rows) throw std::invalid_argument("solve_spd: A.cols != B.rows");
  if (!all_finite(a) || !all_finite(b))
    throw std::invalid_argument("solve_spd: non-finite input");
  if (symmetry_residual(a) > 1e-9 * (1.0 + fro_norm(a)))
    throw std::invalid_argument("solve_spd: A not symmetric");

  double trace = 0.0;
  for (std::size_t i = 0; i < a.rows; ++i) trace += a.at(i, i);
  const double delta0 = 1e-8 * trace / static_cast<double>(a.rows);

  Matrix l;
  SpdSolveResult res;
  double jitter = 0.0;
  for (int attempt = 0; attempt <= 3; ++attempt) {
    Matrix aj = a;
    if (attempt > 0) {
      jitter = delta0 * static_cast<double>(1 << (attempt - 1));
      for (std::size_t i = 0; i < aj.rows; ++i) aj.at(i, i) += jitter;
    }
    if (cholesky(aj, l)) {
      res.x = cholesky_solve(l, b);
      res.jitter = attempt > 0 ? jitter : 0.0;
      res.attempts = attempt + 1;
      return res;
    }
  }
  throw SingularMatrixError("solve_spd: matrix still not SPD after max jitter");
}

Matrix bilinear_resize(const Matrix& kernel, std::size_t target) {
  if (kernel.rows != kernel.cols || kernel.rows == 0)
    throw std::invalid_argument("bilinear_resize: kernel must be square, n >= 1");
  const std::size_t n = kernel.rows;
  if (target == 0) throw std::invalid_argument("bilinear_resize: target must be >= 1");
  if (target == n) return kernel;

  Matrix out(target, target);
  // Align-corners mapping: src = dst * (n-1)/(n1-1); a 1x1 source or target
  // collapses to the single anchored cell.
  const double ratio =
      (target > 1 && n > 1)
          ? static_cast<double>(n - 1) / static_cast<double>(target - 1)
          : 0.0;
  for (std::size_t y = 0; y < target; ++y) {
    const double sy = static_cast<double>(y) * ratio;
    const std::size_t y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, n - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < target; ++x) {
      const double sx = static_cast<double>(x) * ratio;
      const std::size_t x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, n - 1);
      const double fx = sx - static_cast<double>(x0);
      out.at(y, x) = (1.0 - fy) * ((1.0 - fx) * kernel.at(y0, x0) + fx * kernel.at(y0, x1)) +
                     fy * ((1.0 - fx) * kernel.at(y1, x0) + fx * kernel.at(y1, x1));
    }
  }
  return out;
}

Matrix gaussian_sample(SeededRng& rng, std::size_t rows, std::size_t cols,
                       double sigma) {
  if (sigma < 0.0) throw std::invalid_argument("gaussian_sample: sigma < 0");
  Matrix out(rows, cols);
  if (sigma == 0.0) return out;
  for (double& v : out.data) v = sigma * rng.normal();
  return out;
}

SymEigen sym_eigen(const Matrix& a) {
  if (a.rows != a.cols) throw std::invalid_argument("sym_eigen: not square");
  const std::size_t n = a.rows;
  Matrix m = a;
  Matrix v = Matrix::identity(n);

  const int max_sweeps = 100;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += m.at(i, j) * m.at(i, j);
    if (off < 1e-26 * (1.0 + fro_norm(a))) break;

    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = m.at(p, q);
        if (std::fabs(apq) < 1e-300) continue;
        const double theta = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double cth = 1.0 / std::sqrt(t * t + 1.0);
        const double sth = t * cth;
        for (std::size_t i = 0; i < n; ++i) {
          const double mip = m.at(i, p), miq = m.at(i, q);
          m.at(i, p) = cth * mip - sth * miq;
          m.at(i, q) = sth * mip + cth * miq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double mpi = m.at(p, i), mqi = m.at(q, i);
          m.at(p, i) = cth * mpi - sth * mqi;
          m.at(q, i) = sth * mpi + cth * mqi;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vip = v.at(i, p), viq = v.at(i, q);
          v.at(i, p) = cth * vip - sth * viq;
          v.at(i, q) = sth * vip + cth * viq;
        }
      }
    }
  }

  SymEigen out;
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.values[i] = m.at(i, i);
  out.vectors = std::move(v);
  // Sort ascending, carrying eigenvector columns along.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t x, std::size_t y) { return out.values[x] < out.values[y]; });
  std::vector<double> vals(n);
  Matrix vecs(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    vals[j] = out.values[order[j]];
    for (std::size_t i = 0; i < n; ++i) vecs.at(i, j) = out.vectors.at(i, order[j]);
  }
  out.values = std::move(vals);
  out.vectors = std::move(vecs);
  return out;
}

double spectral_norm_psd(const Matrix& a, int max_iter, double tol) {
  if (a.rows != a.cols) throw std::invalid_argument("spectral_norm_psd: not square");
  const std::size_t n = a.rows;
  if (n == 0) return 0.0;
  // Deterministic start with unequal components so no eigenvector is exactly
  // orthogonal by accident.
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i)
    v[i] = 1.0 + 0.013 * static_cast<double>(i % 7);
  double lambda = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    std::vector<double> w(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) w[i] += a.at(i, j) * v[j];
    double norm = 0.0;
    for (double x : w) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) return 0.0;
    for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / norm;
    if (std::fabs(norm - lambda) <= tol * std::max(1.0, norm)) return norm;
    lambda = norm;
  }
  return lambda;
}

Matrix project_psd(const Matrix& a) {
  SymEigen eig = sym_eigen(a);
  const std::size_t n = a.rows;
  Matrix out(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    const double lam = std::max(0.0, eig.values[j]);
    if (lam == 0.0) continue;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t l = 0; l < n; ++l)
        out.at(i, l) += lam * eig.vectors.at(i, j) * eig.vectors.at(l, j);
  }
  // Mirror to kill rounding asymmetry.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double m = 0.5 * (out.at(i, j) + out.at(j, i));
      out.at(i, j) = m;
      out.at(j, i) = m;
    }
  return out;
}

Matrix random_orthogonal(SeededRng& rng, std::size_t n) {
  Matrix q = gaussian_sample(rng, n, n, 1.0);
  // Modified Gram-Schmidt on columns.
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += q.at(i, j) * q.at(i, k);
      for (std::size_t i = 0; i < n; ++i) q.at(i, j) -= dot * q.at(i, k);
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) norm += q.at(i, j) * q.at(i, j);
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
      // Degenerate draw; fall back to a basis vector.
      for (std::size_t i = 0; i < n; ++i) q.at(i, j) = (i == j) ? 1.0 : 0.0;
      norm = 1.0;
    }
    for (std::size_t i = 0; i < n; ++i) q.at(i, j) /= norm;
  }
  return q;
}

}  // namespace hfedatm
