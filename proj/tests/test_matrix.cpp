#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hfedatm/linalg.hpp"
#include "hfedatm/matrix.hpp"
#include "hfedatm/rng.hpp"

using namespace hfedatm;

namespace {

// Independent dense solver: Gaussian elimination with partial pivoting.
Matrix gauss_solve(Matrix a, Matrix b) {
  const std::size_t n = a.rows;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::fabs(a.at(r, col)) > std::fabs(a.at(piv, col))) piv = r;
    for (std::size_t j = 0; j < n; ++j) std::swap(a.at(col, j), a.at(piv, j));
    for (std::size_t j = 0; j < b.cols; ++j) std::swap(b.at(col, j), b.at(piv, j));
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a.at(r, col) / a.at(col, col);
      for (std::size_t j = col; j < n; ++j) a.at(r, j) -= f * a.at(col, j);
      for (std::size_t j = 0; j < b.cols; ++j) b.at(r, j) -= f * b.at(col, j);
    }
  }
  Matrix x(n, b.cols);
  for (std::size_t r = n; r-- > 0;) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      double acc = b.at(r, j);
      for (std::size_t k = r + 1; k < n; ++k) acc -= a.at(r, k) * x.at(k, j);
      x.at(r, j) = acc / a.at(r, r);
    }
  }
  return x;
}

Matrix random_spd(std::size_t n, SeededRng& rng) {
  Matrix m(n, n);
  for (double& v : m.data) v = rng.normal();
  Matrix a = matmul(transpose(m), m);
  for (std::size_t i = 0; i < n; ++i) a.at(i, i) += 0.5;
  return a;
}

}  // namespace

TEST_CASE("matmul and transpose basics") {
  Matrix a(2, 3, {1, 2, 3, 4, 5, 6});
  Matrix b(3, 2, {7, 8, 9, 10, 11, 12});
  Matrix c = matmul(a, b);
  CHECK(c.rows == 2);
  CHECK(c.at(0, 0) == doctest::Approx(58));
  CHECK(c.at(0, 1) == doctest::Approx(64));
  CHECK(c.at(1, 0) == doctest::Approx(139));
  CHECK(c.at(1, 1) == doctest::Approx(154));
  Matrix t = transpose(a);
  CHECK(t.rows == 3);
  CHECK(t.at(2, 1) == 6);
  CHECK(max_abs_diff(transpose(t), a) == 0.0);
  CHECK_THROWS_AS(matmul(a, a), std::invalid_argument);
}

TEST_CASE("norm helpers") {
  Matrix a(2, 2, {3, 0, 0, 4});
  CHECK(fro_norm(a) == doctest::Approx(5.0));
  Matrix b(2, 2, {3, 0, 1, 4});
  CHECK(max_abs_diff(a, b) == 1.0);
  CHECK(symmetry_residual(b) == 1.0);
  CHECK(symmetry_residual(a) == 0.0);
  CHECK(all_finite(a));
  b.at(0, 0) = std::nan("");
  CHECK_FALSE(all_finite(b));
}

TEST_CASE("solve_spd matches Gaussian elimination oracle") {
  SeededRng rng(101);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(10);
    const std::size_t m = 1 + rng.uniform_index(4);
    Matrix a = random_spd(n, rng);
    Matrix b(n, m);
    for (double& v : b.data) v = rng.normal();
    SpdSolveResult res = solve_spd(a, b);
    CHECK(res.jitter == 0.0);
    CHECK(res.attempts == 1);
    Matrix oracle = gauss_solve(a, b);
    CHECK(max_abs_diff(res.x, oracle) < 1e-8);
    CHECK(max_abs_diff(matmul(a, res.x), b) < 1e-8);
  }
}

TEST_CASE("solve_spd identity and exact 2x2") {
  Matrix b(3, 1, {1, -2, 5});
  CHECK(max_abs_diff(solve_spd(Matrix::identity(3), b).x, b) == 0.0);
  Matrix a(2, 2, {4, 2, 2, 3});  // inv = 1/8 [[3,-2],[-2,4]]
  Matrix rhs(2, 1, {2, 1});
  Matrix x = solve_spd(a, rhs).x;
  CHECK(x.at(0, 0) == doctest::Approx(0.5));
  CHECK(x.at(1, 0) == doctest::Approx(0.0));
}

TEST_CASE("solve_spd jitters rank-deficient PSD systems") {
  // Rank-1 outer product: plain Cholesky must fail, ridge must rescue it.
  Matrix v(3, 1, {1, 2, 3});
  Matrix a = matmul(v, transpose(v));
  Matrix b(3, 1, {1, 2, 3});
  SpdSolveResult res = solve_spd(a, b);
  CHECK(res.jitter > 0.0);
  CHECK(res.attempts > 1);
  CHECK(all_finite(res.x));
}

TEST_CASE("solve_spd throws on hopeless input") {
  Matrix zero(3, 3);
  Matrix b(3, 1, {1, 1, 1});
  CHECK_THROWS_AS(solve_spd(zero, b), SingularMatrixError);  // trace 0, no jitter
  Matrix asym(2, 2, {1, 2, 3, 4});
  CHECK_THROWS_AS(solve_spd(asym, b), std::invalid_argument);
}

TEST_CASE("bilinear_resize against a per-pixel oracle") {
  SeededRng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(5);
    const std::size_t t = 2 + rng.uniform_index(6);
    Matrix src(n, n);
    for (double& v : src.data) v = rng.normal();
    Matrix dst = bilinear_resize(src, t);
    REQUIRE(dst.rows == t);
    const double s = static_cast<double>(n - 1) / static_cast<double>(t - 1);
    for (std::size_t y = 0; y < t; ++y) {
      for (std::size_t x = 0; x < t; ++x) {
        const double fy = y * s, fx = x * s;
        const std::size_t y0 = std::min(static_cast<std::size_t>(fy), n - 2);
        const std::size_t x0 = std::min(static_cast<std::size_t>(fx), n - 2);
        const double ay = fy - y0, ax = fx - x0;
        const double want =
            (1 - ay) * ((1 - ax) * src.at(y0, x0) + ax * src.at(y0, x0 + 1)) +
            ay * ((1 - ax) * src.at(y0 + 1, x0) + ax * src.at(y0 + 1, x0 + 1));
        CHECK(dst.at(y, x) == doctest::Approx(want).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("bilinear_resize exactness cases") {
  Matrix flat(5, 5);
  for (double& v : flat.data) v = 2.5;
  CHECK(max_abs_diff(bilinear_resize(flat, 3), Matrix(3, 3, {2.5, 2.5, 2.5, 2.5, 2.5, 2.5, 2.5, 2.5, 2.5})) < 1e-15);

  // Align-corners keeps a linear ramp linear, and corners exact.
  Matrix ramp(5, 5);
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 5; ++x) ramp.at(y, x) = 2.0 * x + 3.0 * y;
  Matrix r3 = bilinear_resize(ramp, 3);
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 3; ++x)
      CHECK(r3.at(y, x) == doctest::Approx(4.0 * x + 6.0 * y));

  Matrix one(1, 1, {7.0});
  Matrix up = bilinear_resize(one, 3);
  CHECK(max_abs_diff(up, Matrix(3, 3, {7, 7, 7, 7, 7, 7, 7, 7, 7})) == 0.0);

  Matrix same(4, 4);
  SeededRng rng(3);
  for (double& v : same.data) v = rng.normal();
  CHECK(max_abs_diff(bilinear_resize(same, 4), same) == 0.0);
}

TEST_CASE("gaussian_sample statistics") {
  SeededRng rng(42);
  Matrix m = gaussian_sample(rng, 200, 200, 2.0);
  double sum = 0.0, sq = 0.0;
  for (double v : m.data) {
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(m.data.size());
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::fabs(mean) < 3.0 * 2.0 / std::sqrt(n));
  CHECK(var == doctest::Approx(4.0).epsilon(0.05));

  Matrix z = gaussian_sample(rng, 3, 3, 0.0);
  CHECK(fro_norm(z) == 0.0);
  CHECK_THROWS_AS(gaussian_sample(rng, 2, 2, -1.0), std::invalid_argument);
}

TEST_CASE("sym_eigen known values and reconstruction") {
  Matrix a(2, 2, {2, 1, 1, 2});
  SymEigen e = sym_eigen(a);
  CHECK(e.values[0] == doctest::Approx(1.0));
  CHECK(e.values[1] == doctest::Approx(3.0));

  SeededRng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(9);
    Matrix m(n, n);
    for (double& v : m.data) v = rng.normal();
    Matrix s = scale(add(m, transpose(m)), 0.5);
    SymEigen se = sym_eigen(s);
    for (std::size_t i = 0; i + 1 < n; ++i) CHECK(se.values[i] <= se.values[i + 1]);
    Matrix lambda(n, n);
    for (std::size_t i = 0; i < n; ++i) lambda.at(i, i) = se.values[i];
    Matrix rec = matmul(matmul(se.vectors, lambda), transpose(se.vectors));
    CHECK(max_abs_diff(rec, s) < 1e-9);
    CHECK(max_abs_diff(matmul(transpose(se.vectors), se.vectors), Matrix::identity(n)) < 1e-10);
  }
}

TEST_CASE("spectral_norm_psd matches the max eigenvalue") {
  SeededRng rng(9);
  for (int trial = 0; trial < 15; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(12);
    Matrix a = random_spd(n, rng);
    SymEigen e = sym_eigen(a);
    CHECK(spectral_norm_psd(a) == doctest::Approx(e.values.back()).epsilon(1e-8));
  }
}

TEST_CASE("project_psd clamps and is idempotent") {
  Matrix indef(2, 2, {0, 1, 1, 0});  // eigenvalues -1, 1
  Matrix p = project_psd(indef);
  Matrix want(2, 2, {0.5, 0.5, 0.5, 0.5});
  CHECK(max_abs_diff(p, want) < 1e-12);

  SeededRng rng(11);
  Matrix spd = random_spd(5, rng);
  CHECK(max_abs_diff(project_psd(spd), spd) < 1e-9);
  Matrix again = project_psd(p);
  CHECK(max_abs_diff(again, p) < 1e-12);
}

TEST_CASE("random_orthogonal is orthogonal") {
  SeededRng rng(13);
  for (std::size_t n : {2u, 5u, 16u}) {
    Matrix q = random_orthogonal(rng, n);
    CHECK(max_abs_diff(matmul(transpose(q), q), Matrix::identity(n)) < 1e-10);
  }
}

TEST_CASE("SeededRng determinism and derivation") {
  SeededRng a(77), b(77);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform01() == b.uniform01());
  SeededRng c1 = a.derive(1, 2, 3, 4);
  SeededRng c2 = b.derive(1, 2, 3, 4);
  CHECK(c1.next_u64() == c2.next_u64());
  SeededRng other = a.derive(1, 2, 3, 5);
  CHECK(c1.next_u64() != other.next_u64());
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform01();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(b.uniform_index(7) < 7);
  }
}
