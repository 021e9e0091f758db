#include "hfedatm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "container formats are little-endian; byte-swapping not implemented");

namespace hfedatm {

namespace {

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw FormatError("cannot open for write: " + path);
  }
  void magic(const char m[4]) { out_.write(m, 4); }
  void u16(std::uint16_t v) { raw(&v, sizeof v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void i32(std::int32_t v) { raw(&v, sizeof v); }
  void i64(std::int64_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void u8(std::uint8_t v) { raw(&v, sizeof v); }
  void f64s(const std::vector<double>& v) { raw(v.data(), v.size() * sizeof(double)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }

 private:
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw FormatError("cannot open for read: " + path);
  }
  void expect_magic(const char m[4]) {
    char buf[4];
    raw(buf, 4);
    if (std::memcmp(buf, m, 4) != 0)
      throw FormatError(std::string("bad magic, expected ") + std::string(m, 4));
  }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::int32_t i32() { return get<std::int32_t>(); }
  std::int64_t i64() { return get<std::int64_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return get<double>(); }
  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::vector<double> f64s(std::size_t n) {
    std::vector<double> v(n);
    raw(v.data(), n * sizeof(double));
    return v;
  }
  std::string str() {
    std::uint32_t n = u32();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

 private:
  template <typename T>
  T get() {
    T v;
    raw(&v, sizeof v);
    return v;
  }
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n))
      throw FormatError("truncated file");
  }
  std::ifstream in_;
};

constexpr std::uint16_t kVersion = 1;

void write_weights_payload(Writer& w, const ModelSpec& spec,
                           const ModelWeights& weights) {
  w.str(spec.manifest());
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    if (std::holds_alternative<ConvParams>(weights.layers[li])) {
      const auto& p = std::get<ConvParams>(weights.layers[li]);
      w.f64s(p.w.data);
      w.f64s(p.b);
    } else if (std::holds_alternative<LinearParams>(weights.layers[li])) {
      const auto& p = std::get<LinearParams>(weights.layers[li]);
      w.f64s(p.w.data);
      w.f64s(p.b);
    }
  }
}

LoadedCheckpoint read_weights_payload(Reader& r) {
  LoadedCheckpoint out;
  out.spec = ModelSpec::parse_manifest(r.str());
  out.weights = ModelWeights::zeros(out.spec);
  for (std::size_t li = 0; li < out.spec.layers.size(); ++li) {
    if (std::holds_alternative<ConvParams>(out.weights.layers[li])) {
      auto& p = std::get<ConvParams>(out.weights.layers[li]);
      p.w.data = r.f64s(p.w.data.size());
      p.b = r.f64s(p.b.size());
    } else if (std::holds_alternative<LinearParams>(out.weights.layers[li])) {
      auto& p = std::get<LinearParams>(out.weights.layers[li]);
      p.w.data = r.f64s(p.w.data.size());
      p.b = r.f64s(p.b.size());
    }
  }
  return out;
}

void write_gram_records(Writer& w, const std::vector<GramStat>& grams) {
  w.u32(static_cast<std::uint32_t>(grams.size()));
  for (const auto& g : grams) {
    w.i32(g.layer_id);
    w.u32(static_cast<std::uint32_t>(g.g.rows));
    w.u8(g.flags.clipped ? 1 : 0);
    w.f64(g.flags.clip_bound);
    w.u8(g.flags.has_dp ? 1 : 0);
    w.f64(g.flags.eps);
    w.f64(g.flags.delta);
    w.u8(g.flags.shrunk ? 1 : 0);
    w.f64(g.flags.alpha);
    w.i32(g.batch_m);
    w.f64s(g.g.data);
  }
}

std::vector<GramStat> read_gram_records(Reader& r) {
  std::vector<GramStat> out(r.u32());
  for (auto& g : out) {
    g.layer_id = r.i32();
    const std::size_t d = r.u32();
    g.flags.clipped = r.u8() != 0;
    g.flags.clip_bound = r.f64();
    g.flags.has_dp = r.u8() != 0;
    g.flags.eps = r.f64();
    g.flags.delta = r.f64();
    g.flags.shrunk = r.u8() != 0;
    g.flags.alpha = r.f64();
    g.batch_m = r.i32();
    g.g = Matrix(d, d, r.f64s(d * d));
  }
  return out;
}

}  // namespace

void save_checkpoint(const ModelSpec& spec, const ModelWeights& weights,
                     const std::string& path) {
  if (weights.fingerprint != spec.fingerprint())
    throw FingerprintMismatch("save_checkpoint: weights do not match spec");
  Writer w(path);
  w.magic("HFAM");
  w.u16(kVersion);
  write_weights_payload(w, spec, weights);
}

LoadedCheckpoint load_checkpoint(const std::string& path,
                                 std::uint64_t expected_fingerprint) {
  Reader r(path);
  r.expect_magic("HFAM");
  if (r.u16() != kVersion) throw FormatError("unsupported checkpoint version");
  LoadedCheckpoint out = read_weights_payload(r);
  out.weights.fingerprint = out.spec.fingerprint();
  if (expected_fingerprint != 0 && out.weights.fingerprint != expected_fingerprint)
    throw FingerprintMismatch("load_checkpoint: architecture mismatch");
  return out;
}

void save_grams(const std::vector<GramStat>& grams, const std::string& path) {
  Writer w(path);
  w.magic("HFGM");
  w.u16(kVersion);
  write_gram_records(w, grams);
}

std::vector<GramStat> load_grams(const std::string& path) {
  Reader r(path);
  r.expect_magic("HFGM");
  if (r.u16() != kVersion) throw FormatError("unsupported gram sidecar version");
  return read_gram_records(r);
}

void save_dataset(const DatasetDump& d, const std::string& path) {
  Writer w(path);
  w.magic("HFDT");
  w.u16(kVersion);
  w.i32(d.c);
  w.i32(d.h);
  w.i32(d.w);
  w.u32(static_cast<std::uint32_t>(d.labels.size()));
  for (std::size_t i = 0; i < d.labels.size(); ++i) {
    w.i32(d.labels[i]);
    w.f64s(d.images[i]);
  }
}

DatasetDump load_dataset(const std::string& path) {
  Reader r(path);
  r.expect_magic("HFDT");
  if (r.u16() != kVersion) throw FormatError("unsupported dataset dump version");
  DatasetDump d;
  d.c = r.i32();
  d.h = r.i32();
  d.w = r.i32();
  const std::size_t n = r.u32();
  const std::size_t px = static_cast<std::size_t>(d.c) * d.h * d.w;
  d.labels.resize(n);
  d.images.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = r.i32();
    d.images[i] = r.f64s(px);
  }
  return d;
}

void save_update(const UpdateDump& u, const std::string& path) {
  Writer w(path);
  w.magic("HFUP");
  w.u16(kVersion);
  write_weights_payload(w, u.spec, u.weights);
  write_gram_records(w, u.grams);
  w.i64(u.n_samples);
}

UpdateDump load_update(const std::string& path) {
  Reader r(path);
  r.expect_magic("HFUP");
  if (r.u16() != kVersion) throw FormatError("unsupported update dump version");
  UpdateDump u;
  LoadedCheckpoint lc = read_weights_payload(r);
  u.spec = std::move(lc.spec);
  u.weights = std::move(lc.weights);
  u.weights.fingerprint = u.spec.fingerprint();
  u.grams = read_gram_records(r);
  u.n_samples = r.i64();
  return u;
}

}  // namespace hfedatm
