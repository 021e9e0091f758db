#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "hfedatm/matrix.hpp"
#include "hfedatm/rng.hpp"

namespace hfedatm {

enum class LayerKind { Conv, Relu, AvgPool2, Flatten, Linear };

// Layer descriptor. Conv is stride 1 with zero same-padding (odd kernel), so
// models that differ only in conv kernel size keep identical downstream
// shapes and can be aligned against each other.
struct LayerDesc {
  LayerKind kind;
  // Conv
  int out_ch = 0, in_ch = 0, ksize = 0;
  // Linear
  int d_in = 0, d_out = 0;

  static LayerDesc conv(int out_ch, int in_ch, int ksize) {
    return {LayerKind::Conv, out_ch, in_ch, ksize, 0, 0};
  }
  static LayerDesc relu() { return {LayerKind::Relu}; }
  static LayerDesc avgpool2() { return {LayerKind::AvgPool2}; }
  static LayerDesc flatten() { return {LayerKind::Flatten}; }
  static LayerDesc linear(int d_in, int d_out) {
    return {LayerKind::Linear, 0, 0, 0, d_in, d_out};
  }
};

struct Shape3 {
  int c = 0, h = 0, w = 0;
  int count() const { return c * h * w; }
};

struct ModelSpec {
  std::vector<LayerDesc> layers;
  Shape3 input;
  int classes = 0;

  // Throws if consecutive layer shapes do not compose or if the spec lacks a
  // conv or a linear layer.
  void validate() const;

  // Canonical text form; the checkpoint manifest.
  std::string manifest() const;
  static ModelSpec parse_manifest(const std::string& text);

  // Architecture hash. Conv spatial size is wildcarded so models that differ
  // only in kernel size (and are therefore alignable) share a fingerprint.
  std::uint64_t fingerprint() const;

  // Output shape after each layer; index i is the shape feeding layer i,
  // back() is the final output width (classes).
  std::vector<Shape3> shapes() const;

  // conv(8,3x3) relu pool conv(16,3x3) relu pool flatten linear(.,32) relu
  // linear(32,classes); trains in seconds on CPU.
  static ModelSpec reduced_lenet(int classes, int in_ch = 1, int in_h = 14,
                                 int in_w = 14);
};

struct ConvParams {
  Tensor4 w;              // [out_ch][in_ch][k][k]
  std::vector<double> b;  // per output channel
};

struct LinearParams {
  Matrix w;               // d_in x d_out; layer computes y = W^T x + b
  std::vector<double> b;  // per output
};

using LayerParams = std::variant<std::monostate, ConvParams, LinearParams>;

struct ModelWeights {
  std::uint64_t fingerprint = 0;
  std::vector<LayerParams> layers;  // aligned with ModelSpec::layers

  static ModelWeights zeros(const ModelSpec& spec);
  static ModelWeights random_init(const ModelSpec& spec, SeededRng& rng);
};

bool bit_equal(const ModelWeights& a, const ModelWeights& b);
double max_param_diff(const ModelWeights& a, const ModelWeights& b);
double param_l2_dist(const ModelWeights& a, const ModelWeights& b);

// Input activations of a linear layer, captured during forward. One row per
// sample: X is m x d with d the layer's input width.
struct ActivationTap {
  int layer_id = 0;
  Matrix x;
};

struct ForwardResult {
  Matrix logits;  // batch x classes
  std::vector<ActivationTap> taps;
};

// batch is [n][c][h][w]. tap_layers lists linear layer indices whose inputs
// should be captured.
ForwardResult forward(const ModelSpec& spec, const ModelWeights& weights,
                      const Tensor4& batch,
                      const std::vector<int>& tap_layers = {});

struct ProxTerm {
  double mu = 0.0;
  const ModelWeights* anchor = nullptr;
};

struct StepResult {
  ModelWeights weights;
  double loss = 0.0;  // pre-step cross-entropy (+ prox penalty when enabled)
};

// One SGD step on mean cross-entropy over the batch. Throws on out-of-range
// labels; a non-finite loss is returned as-is for the caller to abort on.
StepResult backward_sgd_step(const ModelSpec& spec, const ModelWeights& weights,
                             const Tensor4& batch, const std::vector<int>& labels,
                             double lr,
                             const std::optional<ProxTerm>& prox = std::nullopt);

}  // namespace hfedatm
