#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hfedatm/linalg.hpp"
#include "hfedatm/merge.hpp"
#include "test_util.hpp"

using namespace hfedatm;

namespace {

ModelSpec merge_spec() {
  ModelSpec s;
  s.input = {1, 8, 8};
  s.classes = 3;
  s.layers = {LayerDesc::conv(6, 1, 3), LayerDesc::relu(),
              LayerDesc::avgpool2(),    LayerDesc::flatten(),
              LayerDesc::linear(96, 8), LayerDesc::relu(),
              LayerDesc::linear(8, 3)};
  s.validate();
  return s;
}

Matrix random_gram(std::size_t d, SeededRng& rng, std::size_t m = 0) {
  if (m == 0) m = d + 4;
  Matrix x(m, d);
  for (double& v : x.data) v = rng.normal();
  return matmul(transpose(x), x);
}

// Gradient descent oracle for the RegMean objective, with a conservative
// fixed step from the Lipschitz bound 2*sum ||G_e||_2.
Matrix gd_minimize(const std::vector<std::pair<Matrix, Matrix>>& pairs,
                   int iters) {
  Matrix w(pairs[0].second.rows, pairs[0].second.cols);
  double lip = 0.0;
  for (const auto& [g, we] : pairs) lip += 2.0 * spectral_norm_psd(g);
  const double lr = 1.0 / lip;
  for (int it = 0; it < iters; ++it) {
    Matrix grad(w.rows, w.cols);
    for (const auto& [g, we] : pairs)
      grad = add(grad, scale(matmul(g, sub(w, we)), 2.0));
    w = sub(w, scale(grad, lr));
  }
  return w;
}

GramStat make_stat(Matrix g, int layer_id, bool shrunk = true) {
  GramStat s;
  s.layer_id = layer_id;
  s.g = std::move(g);
  s.flags.shrunk = shrunk;
  s.flags.alpha = shrunk ? 0.75 : 0.0;
  return s;
}

std::vector<GramStat> model_grams(const ModelSpec& spec, const ModelWeights& w,
                                  SeededRng& rng) {
  const Tensor4 batch = testutil::random_batch(spec, 12, rng);
  std::vector<int> lids;
  for (std::size_t li = 0; li < spec.layers.size(); ++li)
    if (spec.layers[li].kind == LayerKind::Linear)
      lids.push_back(static_cast<int>(li));
  const ForwardResult fr = forward(spec, w, batch, lids);
  std::vector<GramStat> out;
  for (const ActivationTap& t : fr.taps) {
    Matrix g = matmul(transpose(t.x), t.x);
    out.push_back(make_stat(shrink(g, 0.75), t.layer_id));
  }
  return out;
}

}  // namespace

TEST_CASE("station_aggregate is the sample-weighted mean") {
  const ModelSpec spec = merge_spec();
  SeededRng rng(3);
  ClientUpdate a, b;
  a.client_id = 1;
  a.weights = ModelWeights::random_init(spec, rng);
  a.n_samples = 30;
  b.client_id = 0;
  b.weights = ModelWeights::random_init(spec, rng);
  b.n_samples = 10;
  const ModelWeights m = station_aggregate(spec, {a, b});

  const auto& wa = std::get<LinearParams>(a.weights.layers[4]).w;
  const auto& wb = std::get<LinearParams>(b.weights.layers[4]).w;
  const auto& wm = std::get<LinearParams>(m.layers[4]).w;
  for (std::size_t i = 0; i < wm.data.size(); ++i)
    CHECK(wm.data[i] == doctest::Approx(0.75 * wa.data[i] + 0.25 * wb.data[i]));

  ClientUpdate bad = b;
  bad.weights.fingerprint ^= 1;
  CHECK_THROWS(station_aggregate(spec, {a, bad}));
  CHECK_THROWS(station_aggregate(spec, {}));
}

TEST_CASE("station_gram is the unweighted mean") {
  Matrix a(2, 2, {2, 0, 0, 2});
  Matrix b(2, 2, {4, 2, 2, 4});
  const Matrix m = station_gram({a, b});
  CHECK(max_abs_diff(m, Matrix(2, 2, {3, 1, 1, 3})) == 0.0);
}

TEST_CASE("shrink blends toward the diagonal") {
  Matrix g(2, 2, {4, 2, 2, 4});
  const Matrix s = shrink(g, 0.75);
  CHECK(max_abs_diff(s, Matrix(2, 2, {4, 1.5, 1.5, 4})) == 0.0);
  CHECK(max_abs_diff(shrink(g, 1.0), g) == 0.0);
  CHECK(max_abs_diff(shrink(g, 0.0), Matrix(2, 2, {4, 0, 0, 4})) == 0.0);
  Matrix d(2, 2, {3, 0, 0, 5});
  CHECK(max_abs_diff(shrink(d, 0.3), d) == 0.0);  // diagonal is a fixed point
  CHECK_THROWS_AS(shrink(g, 1.5), std::invalid_argument);
}

TEST_CASE("conv_merge is the per-filter weighted mean") {
  Tensor4 a(2, 1, 3, 3), b(2, 1, 3, 3);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    a.data[i] = 1.0;
    b.data[i] = 4.0;
  }
  const Tensor4 m = conv_merge({a, b}, {1.0, 2.0});
  for (double v : m.data) CHECK(v == doctest::Approx(3.0));
  CHECK_THROWS_AS(conv_merge({a, b}, {0.0, 0.0}), std::invalid_argument);
}

TEST_CASE("regmean closed form on an analytic instance") {
  // Diagonal grams weight each input dimension independently:
  // W(0,:) = (2*1 + 1*5)/3, W(1,:) = (1*2 + 3*6)/4.
  Matrix g1(2, 2, {2, 0, 0, 1});
  Matrix g2(2, 2, {1, 0, 0, 3});
  Matrix w1(2, 1, {1, 2});
  Matrix w2(2, 1, {5, 6});
  const RegmeanResult r = regmean_solve({{g1, w1}, {g2, w2}});
  CHECK(r.w.at(0, 0) == doctest::Approx(7.0 / 3.0));
  CHECK(r.w.at(1, 0) == doctest::Approx(20.0 / 4.0));
  CHECK(r.jitter == 0.0);

  // Single input: exact interpolation.
  const RegmeanResult one = regmean_solve({{g1, w1}});
  CHECK(max_abs_diff(one.w, w1) < 1e-12);
  CHECK(regmean_objective({{g1, w1}}, one.w) == doctest::Approx(0.0));
}

TEST_CASE("regmean beats gradient descent and the plain mean") {
  SeededRng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 2 + rng.uniform_index(15);
    const std::size_t cols = 1 + rng.uniform_index(4);
    const std::size_t stations = 2 + rng.uniform_index(4);
    std::vector<std::pair<Matrix, Matrix>> pairs;
    Matrix mean(d, cols);
    for (std::size_t e = 0; e < stations; ++e) {
      Matrix w(d, cols);
      for (double& v : w.data) v = rng.normal();
      mean = add(mean, scale(w, 1.0 / stations));
      pairs.emplace_back(random_gram(d, rng), std::move(w));
    }
    const RegmeanResult r = regmean_solve(pairs);
    const double closed = regmean_objective(pairs, r.w);
    const double gd = regmean_objective(pairs, gd_minimize(pairs, 4000));
    CHECK(closed <= gd + 1e-6);
    CHECK(closed <= regmean_objective(pairs, mean) + 1e-9);
  }
}

TEST_CASE("regmean jitters rank-deficient sums and throws on zero") {
  Matrix g(3, 3);  // rank-1
  g.at(0, 0) = 1.0;
  Matrix w(3, 2, {1, 2, 3, 4, 5, 6});
  const RegmeanResult r = regmean_solve({{g, w}});
  CHECK(r.jitter > 0.0);
  CHECK(all_finite(r.w));
  Matrix zero(3, 3);
  CHECK_THROWS_AS(regmean_solve({{zero, w}}), SingularMatrixError);
}

TEST_CASE("weighted_average_models matches hand arithmetic") {
  const ModelSpec spec = merge_spec();
  SeededRng rng(11);
  const ModelWeights a = ModelWeights::random_init(spec, rng);
  const ModelWeights b = ModelWeights::random_init(spec, rng);
  const ModelWeights m = weighted_average_models(spec, {a, b}, {3.0, 1.0});
  const auto& ca = std::get<ConvParams>(a.layers[0]);
  const auto& cb = std::get<ConvParams>(b.layers[0]);
  const auto& cm = std::get<ConvParams>(m.layers[0]);
  for (std::size_t i = 0; i < cm.w.data.size(); ++i)
    CHECK(cm.w.data[i] == doctest::Approx(0.75 * ca.w.data[i] + 0.25 * cb.w.data[i]));
  for (std::size_t i = 0; i < cm.b.size(); ++i)
    CHECK(cm.b[i] == doctest::Approx(0.75 * ca.b[i] + 0.25 * cb.b[i]));
}

TEST_CASE("assemble_global coverage errors") {
  const ModelSpec spec = merge_spec();
  SeededRng rng(13);
  const ModelWeights w = ModelWeights::random_init(spec, rng);
  const auto& conv = std::get<ConvParams>(w.layers[0]);
  const auto& l4 = std::get<LinearParams>(w.layers[4]);
  const auto& l6 = std::get<LinearParams>(w.layers[6]);

  const ModelWeights ok = assemble_global(spec, {{0, conv.w}}, {{0, conv.b}},
                                          {{4, l4.w}, {6, l6.w}},
                                          {{4, l4.b}, {6, l6.b}});
  CHECK(bit_equal(ok, w));
  CHECK_THROWS(assemble_global(spec, {}, {}, {{4, l4.w}, {6, l6.w}},
                               {{4, l4.b}, {6, l6.b}}));
  CHECK_THROWS(assemble_global(spec, {{0, conv.w}, {0, conv.w}}, {{0, conv.b}},
                               {{4, l4.w}, {6, l6.w}}, {{4, l4.b}, {6, l6.b}}));
}

TEST_CASE("hfedatm_merge of identical stations returns the station model") {
  const ModelSpec spec = merge_spec();
  SeededRng rng(17);
  const ModelWeights w = ModelWeights::random_init(spec, rng);
  std::vector<StationPackage> stations;
  for (int e = 0; e < 3; ++e) {
    StationPackage p;
    p.station_id = e;
    p.model = w;
    p.grams = model_grams(spec, w, rng);
    p.active_clients = 2;
    stations.push_back(std::move(p));
  }
  // Identical gram inputs per station, regenerated with one shared batch.
  SeededRng grng(19);
  const auto shared = model_grams(spec, w, grng);
  for (auto& p : stations) p.grams = shared;

  const MergeOutcome out = hfedatm_merge(spec, stations, {});
  CHECK(max_param_diff(out.model, w) < 1e-8);
  CHECK(out.report.breadth_post <= out.report.breadth_pre + 1e-12);
  CHECK(out.report.breadth_pre < 1e-12);
}

TEST_CASE("hfedatm_merge recovers the reference from a permuted clone") {
  const ModelSpec spec = merge_spec();
  SeededRng rng(23);
  const ModelWeights ref = ModelWeights::random_init(spec, rng);
  const std::vector<std::vector<int>> perms{testutil::random_perm(6, rng)};
  const ModelWeights clone = testutil::permuted_clone(spec, ref, perms);

  SeededRng grng(29);
  const auto ref_grams = model_grams(spec, ref, grng);
  SeededRng grng2(29);  // same gram batch through the clone
  const auto clone_grams = model_grams(spec, clone, grng2);

  StationPackage a, b;
  a.station_id = 0;
  a.model = ref;
  a.grams = ref_grams;
  a.active_clients = 1;
  b.station_id = 1;
  b.model = clone;
  b.grams = clone_grams;
  b.active_clients = 1;

  MergeOptions opts;
  opts.sinkhorn_iters = 5000;
  const MergeOutcome out = hfedatm_merge(spec, {a, b}, opts);
  CHECK(max_param_diff(out.model, ref) < 1e-8);
  CHECK(out.report.breadth_post <= out.report.breadth_pre + 1e-12);
  CHECK(out.report.breadth_post < 1e-10);
}

TEST_CASE("hfedatm_merge requires grams for every linear layer") {
  const ModelSpec spec = merge_spec();
  SeededRng rng(31);
  StationPackage a, b;
  a.station_id = 0;
  a.model = ModelWeights::random_init(spec, rng);
  a.active_clients = 1;
  b = a;
  b.station_id = 1;
  CHECK_THROWS(hfedatm_merge(spec, {a, b}, {}));
}
