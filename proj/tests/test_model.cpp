#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hfedatm/checkpoint.hpp"
#include "hfedatm/model.hpp"
#include "test_util.hpp"

using namespace hfedatm;

namespace {

ModelSpec tiny_spec(int ksize = 3) {
  ModelSpec s;
  s.input = {1, 6, 6};
  s.classes = 3;
  s.layers = {LayerDesc::conv(4, 1, ksize), LayerDesc::relu(),
              LayerDesc::avgpool2(),        LayerDesc::conv(5, 4, 3),
              LayerDesc::relu(),            LayerDesc::avgpool2(),
              LayerDesc::flatten(),         LayerDesc::linear(5, 3)};
  s.validate();
  return s;
}

double step_loss(const ModelSpec& spec, const ModelWeights& w,
                 const Tensor4& batch, const std::vector<int>& labels) {
  return backward_sgd_step(spec, w, batch, labels, 0.0).loss;
}

}  // namespace

TEST_CASE("spec validation and shapes") {
  ModelSpec s = ModelSpec::reduced_lenet(4);
  s.validate();
  const auto shapes = s.shapes();
  CHECK(shapes.back().c == 4);
  CHECK(shapes.back().h == 1);

  ModelSpec bad = s;
  bad.layers[0].ksize = 4;  // same-padding needs odd kernels
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  ModelSpec bad2 = s;
  bad2.layers.back().d_in = 7;
  CHECK_THROWS_AS(bad2.validate(), std::invalid_argument);
}

TEST_CASE("manifest round trip") {
  const ModelSpec s = ModelSpec::reduced_lenet(5, 1, 12, 12);
  const ModelSpec back = ModelSpec::parse_manifest(s.manifest());
  CHECK(back.manifest() == s.manifest());
  CHECK(back.fingerprint() == s.fingerprint());
  CHECK_THROWS_AS(ModelSpec::parse_manifest("garbage"), std::invalid_argument);
}

TEST_CASE("fingerprint wildcards conv kernel size only") {
  const ModelSpec a = ModelSpec::reduced_lenet(4);
  ModelSpec b = a;
  b.layers[0].ksize = 5;  // alignable variant
  b.validate();
  CHECK(a.fingerprint() == b.fingerprint());

  ModelSpec c = a;
  c.layers[0].out_ch = 9;
  c.layers[3].in_ch = 9;
  CHECK(a.fingerprint() != c.fingerprint());
  CHECK(a.fingerprint() != ModelSpec::reduced_lenet(5).fingerprint());
}

TEST_CASE("forward matches the naive reference") {
  for (int ksize : {1, 3, 5}) {
    const ModelSpec s = tiny_spec(ksize);
    SeededRng rng(21 + ksize);
    const ModelWeights w = ModelWeights::random_init(s, rng);
    const Tensor4 batch = testutil::random_batch(s, 4, rng);
    const ForwardResult fr = forward(s, w, batch);
    REQUIRE(fr.logits.rows == 4);
    for (int n = 0; n < 4; ++n) {
      std::vector<double> x(batch.data.begin() + n * 36,
                            batch.data.begin() + (n + 1) * 36);
      const std::vector<double> want = testutil::ref_forward_one(s, w, x);
      for (int j = 0; j < s.classes; ++j)
        CHECK(fr.logits.at(n, j) == doctest::Approx(want[j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("forward taps capture linear inputs") {
  const ModelSpec s = tiny_spec();
  SeededRng rng(31);
  const ModelWeights w = ModelWeights::random_init(s, rng);
  const Tensor4 batch = testutil::random_batch(s, 3, rng);
  const ForwardResult fr = forward(s, w, batch, {7});
  REQUIRE(fr.taps.size() == 1);
  CHECK(fr.taps[0].layer_id == 7);
  CHECK(fr.taps[0].x.rows == 3);
  CHECK(fr.taps[0].x.cols == 5);
  // Tap times the weight (+ bias) must reproduce the logits.
  const auto& lin = std::get<LinearParams>(w.layers[7]);
  Matrix y = matmul(fr.taps[0].x, lin.w);
  for (std::size_t i = 0; i < y.rows; ++i)
    for (std::size_t j = 0; j < y.cols; ++j)
      CHECK(y.at(i, j) + lin.b[j] == doctest::Approx(fr.logits.at(i, j)));
}

TEST_CASE("gradients match central finite differences") {
  const ModelSpec s = tiny_spec();
  SeededRng rng(41);
  ModelWeights w = ModelWeights::random_init(s, rng);
  const Tensor4 batch = testutil::random_batch(s, 3, rng);
  const std::vector<int> labels{0, 2, 1};

  const double lr = 1.0;
  const StepResult step = backward_sgd_step(s, w, batch, labels, lr);
  const double eps = 1e-5;

  int checked = 0;
  for (std::size_t li = 0; li < s.layers.size(); ++li) {
    auto check_param = [&](double& slot, double stepped) {
      const double orig = slot;
      slot = orig + eps;
      const double lp = step_loss(s, w, batch, labels);
      slot = orig - eps;
      const double lm = step_loss(s, w, batch, labels);
      slot = orig;
      const double fd = (lp - lm) / (2 * eps);
      const double grad = (orig - stepped) / lr;
      CHECK(std::fabs(grad - fd) <= 1e-4 * std::max(1.0, std::fabs(fd)));
      ++checked;
    };
    if (auto* cp = std::get_if<ConvParams>(&w.layers[li])) {
      const auto& sp = std::get<ConvParams>(step.weights.layers[li]);
      for (std::size_t i = 0; i < cp->w.data.size(); ++i)
        check_param(cp->w.data[i], sp.w.data[i]);
      for (std::size_t i = 0; i < cp->b.size(); ++i)
        check_param(cp->b[i], sp.b[i]);
    } else if (auto* lp2 = std::get_if<LinearParams>(&w.layers[li])) {
      const auto& sp = std::get<LinearParams>(step.weights.layers[li]);
      for (std::size_t i = 0; i < lp2->w.data.size(); ++i)
        check_param(lp2->w.data[i], sp.w.data[i]);
      for (std::size_t i = 0; i < lp2->b.size(); ++i)
        check_param(lp2->b[i], sp.b[i]);
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("proximal term pulls toward the anchor and changes the loss") {
  const ModelSpec s = tiny_spec();
  SeededRng rng(43);
  ModelWeights w = ModelWeights::random_init(s, rng);
  ModelWeights anchor = ModelWeights::random_init(s, rng);
  const Tensor4 batch = testutil::random_batch(s, 2, rng);
  const std::vector<int> labels{0, 1};

  const StepResult plain = backward_sgd_step(s, w, batch, labels, 0.05);
  ProxTerm prox{5.0, &anchor};
  const StepResult pulled = backward_sgd_step(s, w, batch, labels, 0.05, prox);
  const double d2 = 0.5 * 5.0 * param_l2_dist(w, anchor) * param_l2_dist(w, anchor);
  CHECK(pulled.loss == doctest::Approx(plain.loss + d2).epsilon(1e-9));
  CHECK(param_l2_dist(pulled.weights, anchor) < param_l2_dist(plain.weights, anchor));

  ProxTerm zero{0.0, &anchor};
  const StepResult same = backward_sgd_step(s, w, batch, labels, 0.05, zero);
  CHECK(bit_equal(same.weights, plain.weights));
}

TEST_CASE("sgd decreases the loss on a small problem") {
  const ModelSpec s = tiny_spec();
  SeededRng rng(47);
  ModelWeights w = ModelWeights::random_init(s, rng);
  Tensor4 batch = testutil::random_batch(s, 8, rng);
  std::vector<int> labels;
  for (int i = 0; i < 8; ++i) labels.push_back(i % 3);
  // Shift each image by its label so the task is linearly separable.
  const std::size_t px = batch.c * batch.h * batch.w;
  for (std::size_t n = 0; n < batch.k; ++n)
    for (std::size_t p = 0; p < px; ++p)
      batch.data[n * px + p] += 1.5 * (labels[n] - 1);
  const double first = step_loss(s, w, batch, labels);
  for (int it = 0; it < 200; ++it)
    w = backward_sgd_step(s, w, batch, labels, 0.05).weights;
  const double last = step_loss(s, w, batch, labels);
  CHECK(last < first * 0.5);
}

TEST_CASE("label range and lr validation") {
  const ModelSpec s = tiny_spec();
  SeededRng rng(53);
  ModelWeights w = ModelWeights::random_init(s, rng);
  const Tensor4 batch = testutil::random_batch(s, 1, rng);
  CHECK_THROWS_AS(backward_sgd_step(s, w, batch, {3}, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(backward_sgd_step(s, w, batch, {-1}, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(backward_sgd_step(s, w, batch, {0}, -0.1), std::invalid_argument);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const ModelSpec s = ModelSpec::reduced_lenet(3, 1, 8, 8);
  SeededRng rng(59);
  const ModelWeights w = ModelWeights::random_init(s, rng);
  const std::string path = "ckpt_roundtrip.hfam";
  save_checkpoint(s, w, path);
  const LoadedCheckpoint back = load_checkpoint(path);
  CHECK(back.spec.manifest() == s.manifest());
  CHECK(bit_equal(back.weights, w));
  // Enforced fingerprint.
  CHECK_NOTHROW(load_checkpoint(path, s.fingerprint()));
  CHECK_THROWS_AS(load_checkpoint(path, s.fingerprint() ^ 1), FingerprintMismatch);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint rejects corrupt files") {
  const std::string path = "ckpt_bad.hfam";
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("NOPE this is not a checkpoint", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_checkpoint("does_not_exist.hfam"), FormatError);
}

TEST_CASE("gram sidecar round trip") {
  GramStat g;
  g.layer_id = 7;
  g.g = Matrix(3, 3, {2, 1, 0, 1, 2, 1, 0, 1, 2});
  g.batch_m = 16;
  g.flags.clipped = true;
  g.flags.clip_bound = 5.0;
  g.flags.has_dp = true;
  g.flags.eps = 4.0;
  g.flags.delta = 1e-5;
  g.flags.shrunk = true;
  g.flags.alpha = 0.75;
  const std::string path = "grams_roundtrip.hfgm";
  save_grams({g}, path);
  const auto back = load_grams(path);
  REQUIRE(back.size() == 1);
  CHECK(back[0].layer_id == 7);
  CHECK(max_abs_diff(back[0].g, g.g) == 0.0);
  CHECK(back[0].flags.has_dp);
  CHECK(back[0].flags.eps == 4.0);
  CHECK(back[0].flags.alpha == 0.75);
  CHECK(back[0].batch_m == 16);
  std::remove(path.c_str());
}
