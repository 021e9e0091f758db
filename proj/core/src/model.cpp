#include "hfedatm/model.hpp"

#include <cmath>
#include <sstream>

namespace hfedatm {

namespace {

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Manifest with conv kernel size wildcarded; basis of the fingerprint.
std::string structure_string(const ModelSpec& spec) {
  std::ostringstream os;
  os << "input " << spec.input.c << " " << spec.input.h << " " << spec.input.w << "\n";
  os << "classes " << spec.classes << "\n";
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        os << "conv " << l.out_ch << " " << l.in_ch << " *\n";
        break;
      case LayerKind::Relu:
        os << "relu\n";
        break;
      case LayerKind::AvgPool2:
        os << "avgpool2\n";
        break;
      case LayerKind::Flatten:
        os << "flatten\n";
        break;
      case LayerKind::Linear:
        os << "linear " << l.d_in << " " << l.d_out << "\n";
        break;
    }
  }
  return os.str();
}

}  // namespace

std::vector<Shape3> ModelSpec::shapes() const {
  std::vector<Shape3> out;
  Shape3 cur = input;
  out.push_back(cur);
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        if (l.in_ch != cur.c)
          throw std::invalid_argument("ModelSpec: conv in_ch does not match");
        if (l.ksize < 1 || l.ksize % 2 == 0)
          throw std::invalid_argument("ModelSpec: conv kernel must be odd, >= 1");
        cur = {l.out_ch, cur.h, cur.w};  // same padding, stride 1
        break;
      case LayerKind::Relu:
        break;
      case LayerKind::AvgPool2:
        if (cur.h < 2 || cur.w < 2)
          throw std::invalid_argument("ModelSpec: avgpool2 input too small");
        cur = {cur.c, cur.h / 2, cur.w / 2};
        break;
      case LayerKind::Flatten:
        cur = {cur.count(), 1, 1};
        break;
      case LayerKind::Linear:
        if (l.d_in != cur.count())
          throw std::invalid_argument("ModelSpec: linear d_in does not match");
        cur = {l.d_out, 1, 1};
        break;
    }
    out.push_back(cur);
  }
  return out;
}

void ModelSpec::validate() const {
  if (classes < 2) throw std::invalid_argument("ModelSpec: classes must be >= 2");
  bool has_conv = false, has_linear = false;
  for (const auto& l : layers) {
    has_conv |= l.kind == LayerKind::Conv;
    has_linear |= l.kind == LayerKind::Linear;
  }
  if (!has_conv || !has_linear)
    throw std::invalid_argument("ModelSpec: need at least one conv and one linear layer");
  const auto s = shapes();
  if (s.back().count() != classes)
    throw std::invalid_argument("ModelSpec: final width must equal class count");
}

std::string ModelSpec::manifest() const {
  std::ostringstream os;
  os << "input " << input.c << " " << input.h << " " << input.w << "\n";
  os << "classes " << classes << "\n";
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        os << "conv " << l.out_ch << " " << l.in_ch << " " << l.ksize << "\n";
        break;
      case LayerKind::Relu:
        os << "relu\n";
        break;
      case LayerKind::AvgPool2:
        os << "avgpool2\n";
        break;
      case LayerKind::Flatten:
        os << "flatten\n";
        break;
      case LayerKind::Linear:
        os << "linear " << l.d_in << " " << l.d_out << "\n";
        break;
    }
  }
  return os.str();
}

ModelSpec ModelSpec::parse_manifest(const std::string& text) {
  ModelSpec spec;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "input") {
      ls >> spec.input.c >> spec.input.h >> spec.input.w;
    } else if (tok == "classes") {
      ls >> spec.classes;
    } else if (tok == "conv") {
      int oc, ic, k;
      ls >> oc >> ic >> k;
      spec.layers.push_back(LayerDesc::conv(oc, ic, k));
    } else if (tok == "relu") {
      spec.layers.push_back(LayerDesc::relu());
    } else if (tok == "avgpool2") {
      spec.layers.push_back(LayerDesc::avgpool2());
    } else if (tok == "flatten") {
      spec.layers.push_back(LayerDesc::flatten());
    } else if (tok == "linear") {
      int di, dout_w;
      ls >> di >> dout_w;
      spec.layers.push_back(LayerDesc::linear(di, dout_w));
    } else {
      throw std::invalid_argument("ModelSpec: unknown manifest token '" + tok + "'");
    }
    if (ls.fail()) throw std::invalid_argument("ModelSpec: bad manifest line '" + line + "'");
  }
  spec.validate();
  return spec;
}

std::uint64_t ModelSpec::fingerprint() const {
  return fnv1a64(structure_string(*this));
}

ModelSpec ModelSpec::reduced_lenet(int classes, int in_ch, int in_h, int in_w) {
  ModelSpec spec;
  spec.input = {in_ch, in_h, in_w};
  spec.classes = classes;
  spec.layers.push_back(LayerDesc::conv(8, in_ch, 3));
  spec.layers.push_back(LayerDesc::relu());
  spec.layers.push_back(LayerDesc::avgpool2());
  spec.layers.push_back(LayerDesc::conv(16, 8, 3));
  spec.layers.push_back(LayerDesc::relu());
  spec.layers.push_back(LayerDesc::avgpool2());
  spec.layers.push_back(LayerDesc::flatten());
  const int flat = 16 * (in_h / 4) * (in_w / 4);
  spec.layers.push_back(LayerDesc::linear(flat, 32));
  spec.layers.push_back(LayerDesc::relu());
  spec.layers.push_back(LayerDesc::linear(32, classes));
  spec.validate();
  return spec;
}

ModelWeights ModelWeights::zeros(const ModelSpec& spec) {
  ModelWeights w;
  w.fingerprint = spec.fingerprint();
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::Conv: {
        ConvParams p;
        p.w = Tensor4(l.out_ch, l.in_ch, l.ksize, l.ksize);
        p.b.assign(l.out_ch, 0.0);
        w.layers.emplace_back(std::move(p));
        break;
      }
      case LayerKind::Linear: {
        LinearParams p;
        p.w = Matrix(l.d_in, l.d_out);
        p.b.assign(l.d_out, 0.0);
        w.layers.emplace_back(std::move(p));
        break;
      }
      default:
        w.layers.emplace_back(std::monostate{});
    }
  }
  return w;
}

ModelWeights ModelWeights::random_init(const ModelSpec& spec, SeededRng& rng) {
  ModelWeights w = zeros(spec);
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const auto& l = spec.layers[li];
    if (l.kind == LayerKind::Conv) {
      auto& p = std::get<ConvParams>(w.layers[li]);
      const double std_dev = std::sqrt(2.0 / (l.in_ch * l.ksize * l.ksize));
      for (double& v : p.w.data) v = std_dev * rng.normal();
    } else if (l.kind == LayerKind::Linear) {
      auto& p = std::get<LinearParams>(w.layers[li]);
      const double std_dev = std::sqrt(2.0 / l.d_in);
      for (double& v : p.w.data) v = std_dev * rng.normal();
    }
  }
  return w;
}

namespace {

template <typename Fn>
void for_each_param(const ModelWeights& a, const ModelWeights& b, Fn&& fn) {
  for (std::size_t li = 0; li < a.layers.size(); ++li) {
    if (std::holds_alternative<ConvParams>(a.layers[li])) {
      const auto& pa = std::get<ConvParams>(a.layers[li]);
      const auto& pb = std::get<ConvParams>(b.layers[li]);
      for (std::size_t i = 0; i < pa.w.data.size(); ++i) fn(pa.w.data[i], pb.w.data[i]);
      for (std::size_t i = 0; i < pa.b.size(); ++i) fn(pa.b[i], pb.b[i]);
    } else if (std::holds_alternative<LinearParams>(a.layers[li])) {
      const auto& pa = std::get<LinearParams>(a.layers[li]);
      const auto& pb = std::get<LinearParams>(b.layers[li]);
      for (std::size_t i = 0; i < pa.w.data.size(); ++i) fn(pa.w.data[i], pb.w.data[i]);
      for (std::size_t i = 0; i < pa.b.size(); ++i) fn(pa.b[i], pb.b[i]);
    }
  }
}

}  // namespace

bool bit_equal(const ModelWeights& a, const ModelWeights& b) {
  if (a.fingerprint != b.fingerprint || a.layers.size() != b.layers.size()) return false;
  bool eq = true;
  for_each_param(a, b, [&](double x, double y) { eq &= (x == y); });
  return eq;
}

double max_param_diff(const ModelWeights& a, const ModelWeights& b) {
  double m = 0.0;
  for_each_param(a, b, [&](double x, double y) { m = std::max(m, std::fabs(x - y)); });
  return m;
}

double param_l2_dist(const ModelWeights& a, const ModelWeights& b) {
  double s = 0.0;
  for_each_param(a, b, [&](double x, double y) { s += (x - y) * (x - y); });
  return std::sqrt(s);
}

namespace {

// Per-layer activation: n samples by (c*h*w) features, channel-major.
struct Act {
  Shape3 shape;
  Matrix data;  // n x shape.count()
};

Act conv_forward(const LayerDesc& l, const ConvParams& p, const Act& in) {
  const int n = static_cast<int>(in.data.rows);
  const int h = in.shape.h, w = in.shape.w;
  const int k = l.ksize, pad = k / 2;
  Act out{{l.out_ch, h, w}, Matrix(n, static_cast<std::size_t>(l.out_ch) * h * w)};
  for (int s = 0; s < n; ++s) {
    const double* xin = &in.data.data[static_cast<std::size_t>(s) * in.shape.count()];
    double* xout = &out.data.data[static_cast<std::size_t>(s) * out.shape.count()];
    for (int oc = 0; oc < l.out_ch; ++oc) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          double acc = p.b[oc];
          for (int ic = 0; ic < l.in_ch; ++ic) {
            for (int dy = 0; dy < k; ++dy) {
              const int iy = y + dy - pad;
              if (iy < 0 || iy >= h) continue;
              for (int dx = 0; dx < k; ++dx) {
                const int ix = x + dx - pad;
                if (ix < 0 || ix >= w) continue;
                acc += p.w.at(oc, ic, dy, dx) * xin[(ic * h + iy) * w + ix];
              }
            }
          }
          xout[(oc * h + y) * w + x] = acc;
        }
      }
    }
  }
  return out;
}

void conv_backward(const LayerDesc& l, const ConvParams& p, const Act& in,
                   const Matrix& dout, Matrix& din, Tensor4& dw,
                   std::vector<double>& db) {
  const int n = static_cast<int>(in.data.rows);
  const int h = in.shape.h, w = in.shape.w;
  const int k = l.ksize, pad = k / 2;
  din = Matrix(in.data.rows, in.data.cols);
  dw = Tensor4(l.out_ch, l.in_ch, k, k);
  db.assign(l.out_ch, 0.0);
  for (int s = 0; s < n; ++s) {
    const double* xin = &in.data.data[static_cast<std::size_t>(s) * in.shape.count()];
    const double* g = &dout.data[static_cast<std::size_t>(s) * dout.cols];
    double* gx = &din.data[static_cast<std::size_t>(s) * din.cols];
    for (int oc = 0; oc < l.out_ch; ++oc) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double go = g[(oc * h + y) * w + x];
          if (go == 0.0) continue;
          db[oc] += go;
          for (int ic = 0; ic < l.in_ch; ++ic) {
            for (int dy = 0; dy < k; ++dy) {
              const int iy = y + dy - pad;
              if (iy < 0 || iy >= h) continue;
              for (int dx = 0; dx < k; ++dx) {
                const int ix = x + dx - pad;
                if (ix < 0 || ix >= w) continue;
                dw.at(oc, ic, dy, dx) += go * xin[(ic * h + iy) * w + ix];
                gx[(ic * h + iy) * w + ix] += go * p.w.at(oc, ic, dy, dx);
              }
            }
          }
        }
      }
    }
  }
}

Act pool_forward(const Act& in) {
  const int n = static_cast<int>(in.data.rows);
  const int c = in.shape.c, h = in.shape.h, w = in.shape.w;
  const int oh = h / 2, ow = w / 2;
  Act out{{c, oh, ow}, Matrix(n, static_cast<std::size_t>(c) * oh * ow)};
  for (int s = 0; s < n; ++s) {
    const double* xin = &in.data.data[static_cast<std::size_t>(s) * in.shape.count()];
    double* xout = &out.data.data[static_cast<std::size_t>(s) * out.shape.count()];
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
          xout[(ci * oh + y) * ow + x] =
              0.25 * (xin[(ci * h + 2 * y) * w + 2 * x] +
                      xin[(ci * h + 2 * y) * w + 2 * x + 1] +
                      xin[(ci * h + 2 * y + 1) * w + 2 * x] +
                      xin[(ci * h + 2 * y + 1) * w + 2 * x + 1]);
  }
  return out;
}

Matrix pool_backward(const Act& in, const Matrix& dout) {
  const int n = static_cast<int>(in.data.rows);
  const int c = in.shape.c, h = in.shape.h, w = in.shape.w;
  const int oh = h / 2, ow = w / 2;
  Matrix din(in.data.rows, in.data.cols);
  for (int s = 0; s < n; ++s) {
    const double* g = &dout.data[static_cast<std::size_t>(s) * dout.cols];
    double* gx = &din.data[static_cast<std::size_t>(s) * din.cols];
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          const double v = 0.25 * g[(ci * oh + y) * ow + x];
          gx[(ci * h + 2 * y) * w + 2 * x] = v;
          gx[(ci * h + 2 * y) * w + 2 * x + 1] = v;
          gx[(ci * h + 2 * y + 1) * w + 2 * x] = v;
          gx[(ci * h + 2 * y + 1) * w + 2 * x + 1] = v;
        }
  }
  return din;
}

struct Trace {
  std::vector<Act> acts;  // input of each layer; acts[0] is the batch
};

Act run_forward(const ModelSpec& spec, const ModelWeights& weights,
                const Tensor4& batch, Trace* trace,
                const std::vector<int>& tap_layers,
                std::vector<ActivationTap>* taps) {
  if (static_cast<int>(batch.c) != spec.input.c ||
      static_cast<int>(batch.h) != spec.input.h ||
      static_cast<int>(batch.w) != spec.input.w)
    throw std::invalid_argument("forward: batch shape mismatch");
  Act cur{spec.input, Matrix(batch.k, spec.input.count())};
  cur.data.data = batch.data;

  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    if (trace) trace->acts.push_back(cur);
    const auto& l = spec.layers[li];
    switch (l.kind) {
      case LayerKind::Conv:
        cur = conv_forward(l, std::get<ConvParams>(weights.layers[li]), cur);
        break;
      case LayerKind::Relu:
        for (double& v : cur.data.data) v = v > 0.0 ? v : 0.0;
        break;
      case LayerKind::AvgPool2:
        cur = pool_forward(cur);
        break;
      case LayerKind::Flatten:
        cur.shape = {cur.shape.count(), 1, 1};
        break;
      case LayerKind::Linear: {
        if (taps) {
          for (int t : tap_layers) {
            if (t == static_cast<int>(li))
              taps->push_back({static_cast<int>(li), cur.data});
          }
        }
        const auto& p = std::get<LinearParams>(weights.layers[li]);
        Matrix y = matmul(cur.data, p.w);
        for (std::size_t s = 0; s < y.rows; ++s)
          for (std::size_t j = 0; j < y.cols; ++j) y.at(s, j) += p.b[j];
        cur = Act{{l.d_out, 1, 1}, std::move(y)};
        break;
      }
    }
  }
  return cur;
}

}  // namespace

ForwardResult forward(const ModelSpec& spec, const ModelWeights& weights,
                      const Tensor4& batch, const std::vector<int>& tap_layers) {
  ForwardResult out;
  out.logits =
      run_forward(spec, weights, batch, nullptr, tap_layers, &out.taps).data;
  return out;
}

StepResult backward_sgd_step(const ModelSpec& spec, const ModelWeights& weights,
                             const Tensor4& batch, const std::vector<int>& labels,
                             double lr, const std::optional<ProxTerm>& prox) {
  if (lr < 0.0) throw std::invalid_argument("backward_sgd_step: lr must be >= 0");
  if (labels.size() != batch.k)
    throw std::invalid_argument("backward_sgd_step: labels/batch size mismatch");
  for (int y : labels)
    if (y < 0 || y >= spec.classes)
      throw std::invalid_argument("backward_sgd_step: label out of range");
  if (prox && prox->mu != 0.0 &&
      (!prox->anchor || prox->anchor->fingerprint != weights.fingerprint))
    throw std::invalid_argument("backward_sgd_step: prox anchor fingerprint mismatch");

  Trace trace;
  Act logits = run_forward(spec, weights, batch, &trace, {}, nullptr);
  const std::size_t n = logits.data.rows;
  const std::size_t k = logits.data.cols;

  // Mean cross-entropy with log-sum-exp stabilization; dlogits in place.
  double loss = 0.0;
  Matrix dlogits(n, k);
  for (std::size_t s = 0; s < n; ++s) {
    double mx = logits.data.at(s, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits.data.at(s, j));
    double lse = 0.0;
    for (std::size_t j = 0; j < k; ++j) lse += std::exp(logits.data.at(s, j) - mx);
    lse = mx + std::log(lse);
    loss += lse - logits.data.at(s, static_cast<std::size_t>(labels[s]));
    for (std::size_t j = 0; j < k; ++j) {
      const double pj = std::exp(logits.data.at(s, j) - lse);
      dlogits.at(s, j) =
          (pj - (j == static_cast<std::size_t>(labels[s]) ? 1.0 : 0.0)) /
          static_cast<double>(n);
    }
  }
  loss /= static_cast<double>(n);

  StepResult out;
  out.weights = weights;

  Matrix grad = std::move(dlogits);
  for (std::size_t lii = spec.layers.size(); lii > 0; --lii) {
    const std::size_t li = lii - 1;
    const auto& l = spec.layers[li];
    const Act& in = trace.acts[li];
    switch (l.kind) {
      case LayerKind::Linear: {
        const auto& p = std::get<LinearParams>(weights.layers[li]);
        auto& pw = std::get<LinearParams>(out.weights.layers[li]);
        Matrix dw = matmul(transpose(in.data), grad);
        std::vector<double> db(static_cast<std::size_t>(l.d_out), 0.0);
        for (std::size_t s = 0; s < grad.rows; ++s)
          for (std::size_t j = 0; j < grad.cols; ++j) db[j] += grad.at(s, j);
        Matrix din = matmul(grad, transpose(p.w));
        if (prox && prox->mu != 0.0) {
          const auto& anchor = std::get<LinearParams>(prox->anchor->layers[li]);
          for (std::size_t i = 0; i < dw.data.size(); ++i)
            dw.data[i] += prox->mu * (p.w.data[i] - anchor.w.data[i]);
          for (std::size_t i = 0; i < db.size(); ++i)
            db[i] += prox->mu * (p.b[i] - anchor.b[i]);
        }
        for (std::size_t i = 0; i < pw.w.data.size(); ++i)
          pw.w.data[i] -= lr * dw.data[i];
        for (std::size_t i = 0; i < pw.b.size(); ++i) pw.b[i] -= lr * db[i];
        grad = std::move(din);
        break;
      }
      case LayerKind::Conv: {
        const auto& p = std::get<ConvParams>(weights.layers[li]);
        auto& pw = std::get<ConvParams>(out.weights.layers[li]);
        Matrix din;
        Tensor4 dw;
        std::vector<double> db;
        conv_backward(l, p, in, grad, din, dw, db);
        if (prox && prox->mu != 0.0) {
          const auto& anchor = std::get<ConvParams>(prox->anchor->layers[li]);
          for (std::size_t i = 0; i < dw.data.size(); ++i)
            dw.data[i] += prox->mu * (p.w.data[i] - anchor.w.data[i]);
          for (std::size_t i = 0; i < db.size(); ++i)
            db[i] += prox->mu * (p.b[i] - anchor.b[i]);
        }
        for (std::size_t i = 0; i < pw.w.data.size(); ++i)
          pw.w.data[i] -= lr * dw.data[i];
        for (std::size_t i = 0; i < pw.b.size(); ++i) pw.b[i] -= lr * db[i];
        grad = std::move(din);
        break;
      }
      case LayerKind::Relu: {
        // Gradient flows where the pre-activation was positive.
        for (std::size_t i = 0; i < grad.data.size(); ++i)
          if (in.data.data[i] <= 0.0) grad.data[i] = 0.0;
        break;
      }
      case LayerKind::AvgPool2:
        grad = pool_backward(in, grad);
        break;
      case LayerKind::Flatten:
        break;  // reshape only; flat layout is already channel-major
    }
  }

  if (prox && prox->mu != 0.0) {
    const double dist = param_l2_dist(weights, *prox->anchor);
    loss += 0.5 * prox->mu * dist * dist;
  }
  out.loss = loss;
  return out;
}

}  // namespace hfedatm
