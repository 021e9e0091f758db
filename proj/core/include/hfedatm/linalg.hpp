#pragma once

#include "hfedatm/matrix.hpp"
#include "hfedatm/rng.hpp"

namespace hfedatm {

struct SingularMatrixError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SpdSolveResult {
  Matrix x;
  double jitter = 0.0;  // ridge added to the diagonal, 0 if none was needed
  int attempts = 1;     // factorization attempts, first is jitter-free
};

// Solves A x = B for symmetric positive definite A via Cholesky. If the
// factorization fails, retries with ridge jitter delta*I where
// delta = 1e-8 * trace(A)/dim, doubling, at most 3 jittered attempts, then
// throws SingularMatrixError.
SpdSolveResult solve_spd(const Matrix& a, const Matrix& b);

// Align-corners bilinear interpolation of a square kernel to target size.
// A 1x1 source broadcasts its single cell.
Matrix bilinear_resize(const Matrix& kernel, std::size_t target);

// Matrix of i.i.d. N(0, sigma^2) entries; sigma = 0 gives all zeros.
Matrix gaussian_sample(SeededRng& rng, std::size_t rows, std::size_t cols,
                       double sigma);

struct SymEigen {
  std::vector<double> values;  // ascending
  Matrix vectors;              // column j is the eigenvector for values[j]
};

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Intended for the
// small Gram matrices this project works with (d <= a few hundred).
SymEigen sym_eigen(const Matrix& a);

// Largest eigenvalue of a symmetric PSD matrix by power iteration with a
// deterministic start vector.
double spectral_norm_psd(const Matrix& a, int max_iter = 1000, double tol = 1e-13);

// Nearest PSD matrix in Frobenius norm: clamp negative eigenvalues to zero.
Matrix project_psd(const Matrix& a);

// Random orthogonal n x n matrix: Gram-Schmidt on a Gaussian matrix.
Matrix random_orthogonal(SeededRng& rng, std::size_t n);

}  // namespace hfedatm
