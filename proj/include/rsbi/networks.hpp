#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rsbi/io.hpp"
#include "rsbi/rng.hpp"
#include "rsbi/simulators.hpp"
#include "rsbi/types.hpp"

namespace rsbi {

enum class Activation { relu, tanh };

inline std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

inline Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Parameter stores
// ---------------------------------------------------------------------------

struct LayoutEntry {
  std::string name;
  std::size_t offset = 0;
  std::vector<std::size_t> shape;

  std::size_t size() const {
    std::size_t s = 1;
    for (const auto d : shape) s *= d;
    return s;
  }
  bool operator==(const LayoutEntry&) const = default;
};

/// Flat parameter vector plus the map from named tensors to offsets.
struct NetworkParams {
  std::vector<double> values;
  std::vector<LayoutEntry> layout;

  std::size_t size() const { return values.size(); }
  std::span<const double> span() const { return values; }

  /// Throws unless the layout tiles the vector exactly and all values are finite.
  void validate() const {
    std::size_t expected = 0;
    for (const auto& e : layout) {
      if (e.offset != expected) throw std::invalid_argument("parameter layout has a gap or overlap at " + e.name);
      expected += e.size();
    }
    if (expected != values.size()) throw std::invalid_argument("parameter layout does not cover the vector");
    if (!all_finite(values)) throw NumericError("non-finite network parameter");
  }

  const LayoutEntry& entry(std::string_view name) const {
    for (const auto& e : layout)
      if (e.name == name) return e;
    throw std::invalid_argument("no parameter tensor named '" + std::string(name) + "'");
  }

  std::span<double> tensor(std::string_view name) {
    const auto& e = entry(name);
    return {values.data() + e.offset, e.size()};
  }

  bool operator==(const NetworkParams&) const = default;
};

class LayoutBuilder {
 public:
  std::size_t add(std::string name, std::vector<std::size_t> shape) {
    LayoutEntry e{std::move(name), total_, std::move(shape)};
    total_ += e.size();
    entries_.push_back(std::move(e));
    return entries_.back().offset;
  }
  std::size_t total() const { return total_; }
  const std::vector<LayoutEntry>& entries() const { return entries_; }

 private:
  std::size_t total_ = 0;
  std::vector<LayoutEntry> entries_;
};

// ---------------------------------------------------------------------------
// Layer primitives. Batched feature maps are stored [channel][position][item]
// so the innermost loops run over contiguous items.
// ---------------------------------------------------------------------------

struct LayerSpec {
  enum class Kind { conv, dense };
  Kind kind = Kind::conv;
  std::size_t width = 4;  // channels (conv) or units (dense)
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t padding = 1;

  static LayerSpec conv(std::size_t channels, std::size_t kernel = 3, std::size_t stride = 2, std::size_t padding = 1) {
    return {Kind::conv, channels, kernel, stride, padding};
  }
  static LayerSpec dense(std::size_t units) { return {Kind::dense, units, 0, 0, 0}; }

  std::string to_string() const {
    if (kind == Kind::dense) return "dense:" + std::to_string(width);
    return "conv:" + std::to_string(width) + ":" + std::to_string(kernel) + ":" + std::to_string(stride) + ":" +
           std::to_string(padding);
  }

  static LayerSpec parse(std::string_view s) {
    const auto parts = io::split(s, ':');
    if (parts[0] == "dense" && parts.size() == 2) return dense(std::stoul(parts[1]));
    if (parts[0] == "conv" && parts.size() == 5)
      return conv(std::stoul(parts[1]), std::stoul(parts[2]), std::stoul(parts[3]), std::stoul(parts[4]));
    throw std::invalid_argument("malformed layer spec '" + std::string(s) + "'");
  }

  bool operator==(const LayerSpec&) const = default;
};

struct FeatureShape {
  std::size_t channels = 1;
  std::size_t length = 1;
  std::size_t size() const { return channels * length; }
  bool operator==(const FeatureShape&) const = default;
};

namespace detail {

inline double activate(Activation a, double x) { return a == Activation::relu ? (x > 0.0 ? x : 0.0) : std::tanh(x); }

/// Derivative expressed through the activation output.
inline double activation_slope(Activation a, double y) { return a == Activation::relu ? (y > 0.0 ? 1.0 : 0.0) : 1.0 - y * y; }

inline std::size_t conv_out_length(std::size_t len, const LayerSpec& s) {
  if (len + 2 * s.padding < s.kernel || s.stride == 0)
    throw std::invalid_argument("convolution does not fit its input length");
  return (len + 2 * s.padding - s.kernel) / s.stride + 1;
}

/// out[o][t][r] = b[o] + sum_{c,j} w[o][c][j] in[c][t*s-p+j][r]
inline void conv_forward(std::span<const double> in, FeatureShape is, std::span<double> out, FeatureShape os,
                         const LayerSpec& spec, const double* w, const double* b, std::size_t items) {
  const auto K = spec.kernel;
  for (std::size_t o = 0; o < os.channels; ++o) {
    for (std::size_t t = 0; t < os.length; ++t) {
      double* y = out.data() + (o * os.length + t) * items;
      std::fill(y, y + items, b[o]);
      for (std::size_t c = 0; c < is.channels; ++c) {
        for (std::size_t j = 0; j < K; ++j) {
          const auto pos = static_cast<std::ptrdiff_t>(t * spec.stride + j) - static_cast<std::ptrdiff_t>(spec.padding);
          if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(is.length)) continue;
          const double wv = w[(o * is.channels + c) * K + j];
          const double* x = in.data() + (c * is.length + static_cast<std::size_t>(pos)) * items;
          for (std::size_t r = 0; r < items; ++r) y[r] += wv * x[r];
        }
      }
    }
  }
}

/// `dout` already includes the activation slope. `din` may be empty.
inline void conv_backward(std::span<const double> in, FeatureShape is, std::span<const double> dout, FeatureShape os,
                          const LayerSpec& spec, const double* w, double* dw, double* db, std::span<double> din,
                          std::size_t items) {
  const auto K = spec.kernel;
  for (std::size_t o = 0; o < os.channels; ++o) {
    for (std::size_t t = 0; t < os.length; ++t) {
      const double* g = dout.data() + (o * os.length + t) * items;
      double gsum = 0.0;
      for (std::size_t r = 0; r < items; ++r) gsum += g[r];
      db[o] += gsum;
      for (std::size_t c = 0; c < is.channels; ++c) {
        for (std::size_t j = 0; j < K; ++j) {
          const auto pos = static_cast<std::ptrdiff_t>(t * spec.stride + j) - static_cast<std::ptrdiff_t>(spec.padding);
          if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(is.length)) continue;
          const std::size_t widx = (o * is.channels + c) * K + j;
          const std::size_t xoff = (c * is.length + static_cast<std::size_t>(pos)) * items;
          const double* x = in.data() + xoff;
          double acc = 0.0;
          for (std::size_t r = 0; r < items; ++r) acc += g[r] * x[r];
          dw[widx] += acc;
          if (!din.empty()) {
            const double wv = w[widx];
            double* dx = din.data() + xoff;
            for (std::size_t r = 0; r < items; ++r) dx[r] += wv * g[r];
          }
        }
      }
    }
  }
}

/// out[u][r] = b[u] + sum_f w[u][f] in[f][r]
inline void dense_forward(std::span<const double> in, std::size_t fin, std::span<double> out, std::size_t fout,
                          const double* w, const double* b, std::size_t items) {
  for (std::size_t u = 0; u < fout; ++u) {
    double* y = out.data() + u * items;
    std::fill(y, y + items, b[u]);
    for (std::size_t f = 0; f < fin; ++f) {
      const double wv = w[u * fin + f];
      const double* x = in.data() + f * items;
      for (std::size_t r = 0; r < items; ++r) y[r] += wv * x[r];
    }
  }
}

inline void dense_backward(std::span<const double> in, std::size_t fin, std::span<const double> dout, std::size_t fout,
                           const double* w, double* dw, double* db, std::span<double> din, std::size_t items) {
  for (std::size_t u = 0; u < fout; ++u) {
    const double* g = dout.data() + u * items;
    double gsum = 0.0;
    for (std::size_t r = 0; r < items; ++r) gsum += g[r];
    db[u] += gsum;
    for (std::size_t f = 0; f < fin; ++f) {
      const double* x = in.data() + f * items;
      double acc = 0.0;
      for (std::size_t r = 0; r < items; ++r) acc += g[r] * x[r];
      dw[u * fin + f] += acc;
      if (!din.empty()) {
        const double wv = w[u * fin + f];
        double* dx = din.data() + f * items;
        for (std::size_t r = 0; r < items; ++r) dx[r] += wv * g[r];
      }
    }
  }
}

/// Transposed convolution on a single item: out[o][t*s-p+j] += w[c][o][j] in[c][t].
inline void tconv_forward(std::span<const double> in, FeatureShape is, std::span<double> out, FeatureShape os,
                          const LayerSpec& spec, const double* w, const double* b) {
  for (std::size_t o = 0; o < os.channels; ++o)
    std::fill(out.begin() + static_cast<std::ptrdiff_t>(o * os.length),
              out.begin() + static_cast<std::ptrdiff_t>((o + 1) * os.length), b[o]);
  const auto K = spec.kernel;
  for (std::size_t c = 0; c < is.channels; ++c) {
    for (std::size_t t = 0; t < is.length; ++t) {
      const double x = in[c * is.length + t];
      for (std::size_t o = 0; o < os.channels; ++o) {
        for (std::size_t j = 0; j < K; ++j) {
          const auto pos = static_cast<std::ptrdiff_t>(t * spec.stride + j) - static_cast<std::ptrdiff_t>(spec.padding);
          if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(os.length)) continue;
          out[o * os.length + static_cast<std::size_t>(pos)] += w[(c * os.channels + o) * K + j] * x;
        }
      }
    }
  }
}

inline void tconv_backward(std::span<const double> in, FeatureShape is, std::span<const double> dout, FeatureShape os,
                           const LayerSpec& spec, const double* w, double* dw, double* db, std::span<double> din) {
  for (std::size_t o = 0; o < os.channels; ++o)
    for (std::size_t t = 0; t < os.length; ++t) db[o] += dout[o * os.length + t];
  const auto K = spec.kernel;
  for (std::size_t c = 0; c < is.channels; ++c) {
    for (std::size_t t = 0; t < is.length; ++t) {
      const double x = in[c * is.length + t];
      double dx = 0.0;
      for (std::size_t o = 0; o < os.channels; ++o) {
        for (std::size_t j = 0; j < K; ++j) {
          const auto pos = static_cast<std::ptrdiff_t>(t * spec.stride + j) - static_cast<std::ptrdiff_t>(spec.padding);
          if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(os.length)) continue;
          const std::size_t widx = (c * os.channels + o) * K + j;
          const double g = dout[o * os.length + static_cast<std::size_t>(pos)];
          dw[widx] += g * x;
          dx += w[widx] * g;
        }
      }
      if (!din.empty()) din[c * is.length + t] += dx;
    }
  }
}

inline void init_uniform(std::span<double> values, const std::vector<LayoutEntry>& layout,
                         const std::vector<std::size_t>& fan_in, Rng& rng) {
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in[i], 1)));
    for (std::size_t k = 0; k < layout[i].size(); ++k) values[layout[i].offset + k] = rng.uniform(-bound, bound);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Summary encoder: per-realization layers, mean over realizations, linear head
// ---------------------------------------------------------------------------

struct EncoderConfig {
  std::size_t d = 100;           // per-realization input length
  std::size_t n = 0;             // expected realizations, 0 accepts any
  std::vector<LayerSpec> layers;
  std::size_t stat_dim = 4;
  Activation activation = Activation::relu;
  double input_shift = 0.0;      // inputs enter as (x - shift) / scale
  double input_scale = 1.0;

  static EncoderConfig defaults(ModelTag tag) {
    EncoderConfig c;
    switch (tag) {
      case ModelTag::ricker:
        c.d = 100;
        c.layers = {LayerSpec::conv(4), LayerSpec::conv(4), LayerSpec::conv(4)};
        break;
      case ModelTag::oup:
        c.d = 25;
        c.layers = {LayerSpec::conv(8), LayerSpec::conv(8), LayerSpec::conv(8)};
        break;
      case ModelTag::turin:
        c.d = 801;
        c.layers = {LayerSpec::conv(8), LayerSpec::conv(16), LayerSpec::conv(32), LayerSpec::conv(64),
                    LayerSpec::conv(8)};
        break;
      case ModelTag::gaussian_linear:
        c.d = 10;
        c.layers = {LayerSpec::dense(20), LayerSpec::dense(20)};
        break;
    }
    return c;
  }

  std::string layers_string() const {
    std::string out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (i) out += ',';
      out += layers[i].to_string();
    }
    return out;
  }

  static std::vector<LayerSpec> parse_layers(std::string_view s) {
    std::vector<LayerSpec> out;
    if (s.empty()) return out;
    for (const auto& tok : io::split(s, ',')) out.push_back(LayerSpec::parse(tok));
    return out;
  }

  bool operator==(const EncoderConfig&) const = default;
};

/// Per-pass record needed by Encoder::backward.
struct EncoderTape {
  std::size_t items = 0;
  std::vector<std::vector<double>> acts;  // acts[0] = standardized input
  std::vector<double> pooled;
  bool valid = false;
};

class Encoder {
 public:
  explicit Encoder(EncoderConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.stat_dim < 1) throw std::invalid_argument("encoder statistic dimension must be >= 1");
    if (cfg_.d < 1) throw std::invalid_argument("encoder input dimension must be >= 1");
    if (!(cfg_.input_scale > 0.0)) throw std::invalid_argument("encoder input scale must be positive");
    shapes_.push_back({1, cfg_.d});
    LayoutBuilder lb;
    for (std::size_t i = 0; i < cfg_.layers.size(); ++i) {
      const auto& spec = cfg_.layers[i];
      const auto in = shapes_.back();
      FeatureShape out;
      if (spec.kind == LayerSpec::Kind::conv) {
        if (spec.width < 1 || spec.kernel < 1) throw std::invalid_argument("conv layer needs channels and kernel");
        out = {spec.width, detail::conv_out_length(in.length, spec)};
        weight_offsets_.push_back(lb.add("layer" + std::to_string(i) + ".weight", {spec.width, in.channels, spec.kernel}));
        fan_in_.push_back(in.channels * spec.kernel);
      } else {
        if (spec.width < 1) throw std::invalid_argument("dense layer needs units");
        out = {spec.width, 1};
        weight_offsets_.push_back(lb.add("layer" + std::to_string(i) + ".weight", {spec.width, in.size()}));
        fan_in_.push_back(in.size());
      }
      bias_offsets_.push_back(lb.add("layer" + std::to_string(i) + ".bias", {spec.width}));
      fan_in_.push_back(fan_in_.back());
      shapes_.push_back(out);
    }
    head_w_ = lb.add("head.weight", {cfg_.stat_dim, shapes_.back().size()});
    fan_in_.push_back(shapes_.back().size());
    head_b_ = lb.add("head.bias", {cfg_.stat_dim});
    fan_in_.push_back(shapes_.back().size());
    layout_ = lb.entries();
    count_ = lb.total();
  }

  const EncoderConfig& config() const { return cfg_; }
  const std::vector<LayoutEntry>& layout() const { return layout_; }
  std::size_t param_count() const { return count_; }
  const std::vector<FeatureShape>& shapes() const { return shapes_; }

  NetworkParams init_params(std::uint64_t seed) const {
    NetworkParams p{std::vector<double>(count_), layout_};
    Rng rng(seed);
    detail::init_uniform(p.values, layout_, fan_in_, rng);
    return p;
  }

  /// Forward pass that records what backward needs.
  SummaryStat forward(std::span<const double> params, const Dataset& data, EncoderTape& tape) const {
    check(params, data);
    const std::size_t n = data.n;
    tape.items = n;
    tape.acts.resize(shapes_.size());
    auto& x0 = tape.acts[0];
    x0.resize(cfg_.d * n);
    const double inv_scale = 1.0 / cfg_.input_scale;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t t = 0; t < cfg_.d; ++t) x0[t * n + r] = (data(r, t) - cfg_.input_shift) * inv_scale;
    for (std::size_t i = 0; i < cfg_.layers.size(); ++i) {
      const auto& spec = cfg_.layers[i];
      auto& out = tape.acts[i + 1];
      out.resize(shapes_[i + 1].size() * n);
      const double* w = params.data() + weight_offsets_[i];
      const double* b = params.data() + bias_offsets_[i];
      if (spec.kind == LayerSpec::Kind::conv) {
        detail::conv_forward(tape.acts[i], shapes_[i], out, shapes_[i + 1], spec, w, b, n);
      } else {
        detail::dense_forward(tape.acts[i], shapes_[i].size(), out, shapes_[i + 1].size(), w, b, n);
      }
      for (auto& v : out) v = detail::activate(cfg_.activation, v);
    }
    const auto& last = tape.acts.back();
    const std::size_t F = shapes_.back().size();
    tape.pooled.assign(F, 0.0);
    for (std::size_t f = 0; f < F; ++f) {
      double acc = 0.0;
      for (std::size_t r = 0; r < n; ++r) acc += last[f * n + r];
      tape.pooled[f] = acc / static_cast<double>(n);
    }
    SummaryStat s(cfg_.stat_dim);
    for (std::size_t k = 0; k < cfg_.stat_dim; ++k) {
      double acc = params[head_b_ + k];
      for (std::size_t f = 0; f < F; ++f) acc += params[head_w_ + k * F + f] * tape.pooled[f];
      s[k] = acc;
    }
    if (!all_finite(s)) throw NumericError("encoder produced a non-finite statistic");
    tape.valid = true;
    return s;
  }

  SummaryStat encode(std::span<const double> params, const Dataset& data) const {
    EncoderTape tape;
    return forward(params, data, tape);
  }

  StatSet encode_all(std::span<const double> params, std::span<const Dataset> data) const {
    StatSet out(data.size(), cfg_.stat_dim);
    EncoderTape tape;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto s = forward(params, data[i], tape);
      std::copy(s.begin(), s.end(), out.row(i).begin());
    }
    return out;
  }

  /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(statistic).
  void backward(std::span<const double> params, const EncoderTape& tape, std::span<const double> d_stat,
                std::span<double> grad) const {
    if (!tape.valid) throw std::logic_error("Encoder::backward without a taped forward pass");
    if (d_stat.size() != cfg_.stat_dim || grad.size() != count_ || params.size() != count_)
      throw std::invalid_argument("Encoder::backward: shape mismatch");
    const std::size_t n = tape.items;
    const std::size_t F = shapes_.back().size();
    std::vector<double> d_pooled(F, 0.0);
    for (std::size_t k = 0; k < cfg_.stat_dim; ++k) {
      grad[head_b_ + k] += d_stat[k];
      for (std::size_t f = 0; f < F; ++f) {
        grad[head_w_ + k * F + f] += d_stat[k] * tape.pooled[f];
        d_pooled[f] += params[head_w_ + k * F + f] * d_stat[k];
      }
    }
    std::vector<double> d_cur(F * n);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t r = 0; r < n; ++r) d_cur[f * n + r] = d_pooled[f] * inv_n;
    std::vector<double> d_prev;
    for (std::size_t i = cfg_.layers.size(); i-- > 0;) {
      const auto& out = tape.acts[i + 1];
      for (std::size_t q = 0; q < d_cur.size(); ++q) d_cur[q] *= detail::activation_slope(cfg_.activation, out[q]);
      const auto& spec = cfg_.layers[i];
      std::span<double> din;
      if (i > 0) {
        d_prev.assign(shapes_[i].size() * n, 0.0);
        din = d_prev;
      }
      const double* w = params.data() + weight_offsets_[i];
      double* dw = grad.data() + weight_offsets_[i];
      double* db = grad.data() + bias_offsets_[i];
      if (spec.kind == LayerSpec::Kind::conv) {
        detail::conv_backward(tape.acts[i], shapes_[i], d_cur, shapes_[i + 1], spec, w, dw, db, din, n);
      } else {
        detail::dense_backward(tape.acts[i], shapes_[i].size(), d_cur, shapes_[i + 1].size(), w, dw, db, din, n);
      }
      if (i > 0) std::swap(d_cur, d_prev);
    }
  }

 private:
  void check(std::span<const double> params, const Dataset& data) const {
    if (params.size() != count_) throw std::invalid_argument("encoder parameter count mismatch");
    if (data.d != cfg_.d) throw std::invalid_argument("dataset dimension does not match encoder input");
    if (data.n < 1 || (cfg_.n != 0 && data.n != cfg_.n))
      throw std::invalid_argument("dataset realization count does not match encoder");
  }

  EncoderConfig cfg_;
  std::vector<FeatureShape> shapes_;
  std::vector<std::size_t> weight_offsets_, bias_offsets_;
  std::size_t head_w_ = 0, head_b_ = 0;
  std::vector<LayoutEntry> layout_;
  std::vector<std::size_t> fan_in_;
  std::size_t count_ = 0;
};

// ---------------------------------------------------------------------------
// Decoder: mirror image of an encoder's per-realization stack
// ---------------------------------------------------------------------------

/// Dense stat -> last encoder feature map, then each encoder layer undone in
/// reverse (transposed conv or dense). Produces one d-length row in the
/// encoder's standardized input units; it is broadcast over all realizations.
class Decoder {
 public:
  explicit Decoder(const EncoderConfig& enc) : enc_cfg_(enc) {
    const Encoder e(enc);
    const auto& shapes = e.shapes();
    LayoutBuilder lb;
    const auto top = shapes.back();
    shapes_.push_back({enc.stat_dim, 1});
    shapes_.push_back(top);
    steps_.push_back({LayerSpec::dense(top.size())});
    w_.push_back(lb.add("in.weight", {top.size(), enc.stat_dim}));
    b_.push_back(lb.add("in.bias", {top.size()}));
    fan_in_.push_back(enc.stat_dim);
    fan_in_.push_back(enc.stat_dim);
    for (std::size_t i = enc.layers.size(); i-- > 0;) {
      const auto& spec = enc.layers[i];
      const auto from = shapes[i + 1];
      const auto to = shapes[i];
      const std::string name = "up" + std::to_string(enc.layers.size() - 1 - i);
      if (spec.kind == LayerSpec::Kind::conv) {
        const std::size_t base = (from.length - 1) * spec.stride + spec.kernel;
        if (base < 2 * spec.padding || base - 2 * spec.padding > to.length ||
            to.length - (base - 2 * spec.padding) >= std::max<std::size_t>(spec.stride, 1))
          throw std::invalid_argument("cannot mirror convolution layer " + std::to_string(i));
        steps_.push_back({spec});
        w_.push_back(lb.add(name + ".weight", {from.channels, to.channels, spec.kernel}));
        fan_in_.push_back(from.channels * spec.kernel);
      } else {
        steps_.push_back({LayerSpec::dense(to.size())});
        w_.push_back(lb.add(name + ".weight", {to.size(), from.size()}));
        fan_in_.push_back(from.size());
      }
      b_.push_back(lb.add(name + ".bias", {spec.kind == LayerSpec::Kind::conv ? to.channels : to.size()}));
      fan_in_.push_back(fan_in_.back());
      shapes_.push_back(to);
    }
    layout_ = lb.entries();
    count_ = lb.total();
  }

  std::size_t param_count() const { return count_; }
  const std::vector<LayoutEntry>& layout() const { return layout_; }
  std::size_t output_length() const { return enc_cfg_.d; }

  NetworkParams init_params(std::uint64_t seed) const {
    NetworkParams p{std::vector<double>(count_), layout_};
    Rng rng(seed);
    detail::init_uniform(p.values, layout_, fan_in_, rng);
    return p;
  }

  struct Tape {
    std::vector<std::vector<double>> acts;  // acts[0] = statistic
    bool valid = false;
  };

  std::vector<double> forward(std::span<const double> params, std::span<const double> stat, Tape& tape) const {
    if (params.size() != count_) throw std::invalid_argument("decoder parameter count mismatch");
    if (stat.size() != enc_cfg_.stat_dim) throw std::invalid_argument("decoder statistic dimension mismatch");
    tape.acts.resize(shapes_.size());
    tape.acts[0].assign(stat.begin(), stat.end());
    for (std::size_t i = 0; i < steps_.size(); ++i) {
      auto& out = tape.acts[i + 1];
      out.assign(shapes_[i + 1].size(), 0.0);
      const auto& spec = steps_[i].spec;
      const double* w = params.data() + w_[i];
      const double* b = params.data() + b_[i];
      if (spec.kind == LayerSpec::Kind::dense) {
        detail::dense_forward(tape.acts[i], shapes_[i].size(), out, shapes_[i + 1].size(), w, b, 1);
      } else {
        detail::tconv_forward(tape.acts[i], shapes_[i], out, shapes_[i + 1], spec, w, b);
      }
      if (i + 1 < steps_.size())
        for (auto& v : out) v = detail::activate(enc_cfg_.activation, v);
    }
    tape.valid = true;
    return tape.acts.back();
  }

  std::vector<double> decode_row(std::span<const double> params, std::span<const double> stat) const {
    Tape tape;
    return forward(params, stat, tape);
  }

  /// Reconstruction broadcast to n rows (standardized units).
  Dataset decode(std::span<const double> params, std::span<const double> stat, std::size_t n, ModelTag tag) const {
    const auto row = decode_row(params, stat);
    Dataset out(tag, n, row.size());
    for (std::size_t r = 0; r < n; ++r) std::copy(row.begin(), row.end(), out.row(r).begin());
    return out;
  }

  /// Accumulates parameter gradients; returns d(loss)/d(statistic).
  std::vector<double> backward(std::span<const double> params, const Tape& tape, std::span<const double> d_out,
                               std::span<double> grad) const {
    if (!tape.valid) throw std::logic_error("Decoder::backward without a taped forward pass");
    std::vector<double> d_cur(d_out.begin(), d_out.end());
    std::vector<double> d_prev;
    for (std::size_t i = steps_.size(); i-- > 0;) {
      if (i + 1 < steps_.size()) {
        const auto& out = tape.acts[i + 1];
        for (std::size_t q = 0; q < d_cur.size(); ++q) d_cur[q] *= detail::activation_slope(enc_cfg_.activation, out[q]);
      }
      d_prev.assign(shapes_[i].size(), 0.0);
      const auto& spec = steps_[i].spec;
      const double* w = params.data() + w_[i];
      double* dw = grad.data() + w_[i];
      double* db = grad.data() + b_[i];
      if (spec.kind == LayerSpec::Kind::dense) {
        detail::dense_backward(tape.acts[i], shapes_[i].size(), d_cur, shapes_[i + 1].size(), w, dw, db, d_prev, 1);
      } else {
        detail::tconv_backward(tape.acts[i], shapes_[i], d_cur, shapes_[i + 1], spec, w, dw, db, d_prev);
      }
      std::swap(d_cur, d_prev);
    }
    return d_cur;
  }

 private:
  struct Step {
    LayerSpec spec;
  };
  EncoderConfig enc_cfg_;
  std::vector<FeatureShape> shapes_;
  std::vector<Step> steps_;
  std::vector<std::size_t> w_, b_;
  std::vector<LayoutEntry> layout_;
  std::vector<std::size_t> fan_in_;
  std::size_t count_ = 0;
};

// ---------------------------------------------------------------------------
// Mixture-density posterior head
// ---------------------------------------------------------------------------

/// C diagonal-Gaussian components over theta.
struct MixtureParams {
  std::vector<double> weights;
  Matrix means;   // C x k
  Matrix scales;  // C x k, standard deviations

  std::size_t components() const { return weights.size(); }
  std::size_t dim() const { return means.cols; }

  void validate() const {
    const auto C = weights.size();
    if (C == 0 || means.rows != C || scales.rows != C || scales.cols != means.cols)
      throw std::invalid_argument("mixture shape mismatch");
    double total = 0.0;
    for (const double w : weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("mixture weights must be non-negative");
      total += w;
    }
    if (std::fabs(total - 1.0) > 1e-12) throw std::invalid_argument("mixture weights must sum to 1");
    if (!all_finite(means.values)) throw NumericError("non-finite mixture mean");
    for (const double s : scales.values)
      if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("mixture scales must be positive");
  }
};

namespace detail {

inline double log_sum_exp(std::span<const double> a) {
  const double mx = *std::max_element(a.begin(), a.end());
  if (!std::isfinite(mx)) return mx;
  double acc = 0.0;
  for (const double v : a) acc += std::exp(v - mx);
  return mx + std::log(acc);
}

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;

/// Per-component log(w_c) + log N(theta; mu_c, diag sigma_c^2).
inline std::vector<double> component_log_terms(const MixtureParams& nu, std::span<const double> theta) {
  const auto C = nu.components();
  const auto k = nu.dim();
  std::vector<double> a(C);
  for (std::size_t c = 0; c < C; ++c) {
    double acc = std::log(nu.weights[c]);
    for (std::size_t j = 0; j < k; ++j) {
      const double z = (theta[j] - nu.means(c, j)) / nu.scales(c, j);
      acc += -0.5 * z * z - std::log(nu.scales(c, j)) - kHalfLog2Pi;
    }
    a[c] = acc;
  }
  return a;
}

}  // namespace detail

/// log sum_c w_c N(theta; mu_c, diag sigma_c^2), log-sum-exp stabilized.
inline double mdn_log_prob(const MixtureParams& nu, std::span<const double> theta) {
  nu.validate();
  if (theta.size() != nu.dim()) throw std::invalid_argument("mdn_log_prob: theta dimension mismatch");
  return detail::log_sum_exp(detail::component_log_terms(nu, theta));
}

/// Categorical component choice (one uniform) followed by k normals.
inline Matrix mdn_sample(const MixtureParams& nu, std::size_t N, std::uint64_t seed) {
  nu.validate();
  if (N < 1) throw std::invalid_argument("mdn_sample: N must be >= 1");
  const auto C = nu.components();
  const auto k = nu.dim();
  Rng rng(seed);
  Matrix out(N, k);
  for (std::size_t i = 0; i < N; ++i) {
    const double u = rng.uniform();
    std::size_t c = 0;
    double cum = nu.weights[0];
    while (c + 1 < C && u >= cum) cum += nu.weights[++c];
    for (std::size_t j = 0; j < k; ++j) out(i, j) = nu.means(c, j) + nu.scales(c, j) * rng.normal();
  }
  return out;
}

struct MdnConfig {
  std::size_t stat_dim = 4;
  std::size_t theta_dim = 2;
  std::size_t components = 5;
  std::size_t hidden = 50;
  std::size_t hidden_layers = 2;
  Activation activation = Activation::relu;
  std::vector<double> theta_shift;  // affine map from unconstrained means
  std::vector<double> theta_scale;

  /// Means map onto the prior box: shift = centre, scale = half-width (for
  /// lognormal dimensions the prior mean and standard deviation).
  static MdnConfig for_prior(const PriorSpec& prior, std::size_t stat_dim) {
    MdnConfig c;
    c.stat_dim = stat_dim;
    c.theta_dim = prior.size();
    for (const auto& d : prior.dims) {
      c.theta_shift.push_back(d.mean());
      c.theta_scale.push_back(d.spread());
    }
    return c;
  }

  std::size_t output_dim() const { return components * (1 + 2 * theta_dim); }

  bool operator==(const MdnConfig&) const = default;
};

class Mdn {
 public:
  explicit Mdn(MdnConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.theta_shift.empty()) cfg_.theta_shift.assign(cfg_.theta_dim, 0.0);
    if (cfg_.theta_scale.empty()) cfg_.theta_scale.assign(cfg_.theta_dim, 1.0);
    if (cfg_.components < 1 || cfg_.theta_dim < 1 || cfg_.stat_dim < 1)
      throw std::invalid_argument("mixture head needs components, theta and statistic dimensions");
    if (cfg_.theta_shift.size() != cfg_.theta_dim || cfg_.theta_scale.size() != cfg_.theta_dim)
      throw std::invalid_argument("mixture head affine map has the wrong dimension");
    LayoutBuilder lb;
    std::size_t in = cfg_.stat_dim;
    for (std::size_t h = 0; h < cfg_.hidden_layers; ++h) {
      widths_.push_back(cfg_.hidden);
      w_.push_back(lb.add("hidden" + std::to_string(h) + ".weight", {cfg_.hidden, in}));
      b_.push_back(lb.add("hidden" + std::to_string(h) + ".bias", {cfg_.hidden}));
      fan_in_.push_back(in);
      fan_in_.push_back(in);
      in = cfg_.hidden;
    }
    widths_.push_back(cfg_.output_dim());
    w_.push_back(lb.add("out.weight", {cfg_.output_dim(), in}));
    b_.push_back(lb.add("out.bias", {cfg_.output_dim()}));
    fan_in_.push_back(in);
    fan_in_.push_back(in);
    layout_ = lb.entries();
    count_ = lb.total();
  }

  const MdnConfig& config() const { return cfg_; }
  std::size_t param_count() const { return count_; }
  const std::vector<LayoutEntry>& layout() const { return layout_; }

  NetworkParams init_params(std::uint64_t seed) const {
    NetworkParams p{std::vector<double>(count_), layout_};
    Rng rng(seed);
    detail::init_uniform(p.values, layout_, fan_in_, rng);
    return p;
  }

  struct Tape {
    std::vector<std::vector<double>> acts;  // acts[0] = statistic, back() = raw outputs
    bool valid = false;
  };

  /// Raw head outputs: [C logits | C*k mean coordinates | C*k scale coordinates].
  std::span<const double> forward_raw(std::span<const double> params, std::span<const double> stat, Tape& tape) const {
    if (params.size() != count_) throw std::invalid_argument("mixture head parameter count mismatch");
    if (stat.size() != cfg_.stat_dim) throw std::invalid_argument("mixture head statistic dimension mismatch");
    tape.acts.resize(widths_.size() + 1);
    tape.acts[0].assign(stat.begin(), stat.end());
    for (std::size_t i = 0; i < widths_.size(); ++i) {
      auto& out = tape.acts[i + 1];
      out.assign(widths_[i], 0.0);
      detail::dense_forward(tape.acts[i], tape.acts[i].size(), out, widths_[i], params.data() + w_[i],
                            params.data() + b_[i], 1);
      if (i + 1 < widths_.size())
        for (auto& v : out) v = detail::activate(cfg_.activation, v);
    }
    tape.valid = true;
    return tape.acts.back();
  }

  MixtureParams mixture_from_raw(std::span<const double> raw) const {
    const auto C = cfg_.components, k = cfg_.theta_dim;
    MixtureParams nu;
    const auto logits = raw.subspan(0, C);
    const double lse = detail::log_sum_exp(logits);
    nu.weights.resize(C);
    for (std::size_t c = 0; c < C; ++c) nu.weights[c] = std::exp(logits[c] - lse);
    nu.means = Matrix(C, k);
    nu.scales = Matrix(C, k);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t j = 0; j < k; ++j) {
        nu.means(c, j) = cfg_.theta_shift[j] + cfg_.theta_scale[j] * raw[C + c * k + j];
        nu.scales(c, j) = cfg_.theta_scale[j] * detail::softplus(raw[C + C * k + c * k + j]);
      }
    }
    if (!all_finite(nu.weights) || !all_finite(nu.means.values) || !all_finite(nu.scales.values))
      throw NumericError("mixture head produced non-finite parameters");
    return nu;
  }

  MixtureParams forward(std::span<const double> params, std::span<const double> stat) const {
    Tape tape;
    return mixture_from_raw(forward_raw(params, stat, tape));
  }

  /// log q(theta) for a taped pass, with d(log q)/d(raw outputs) in `d_raw`.
  double log_prob_raw_grad(const Tape& tape, std::span<const double> theta, std::vector<double>& d_raw) const {
    const auto C = cfg_.components, k = cfg_.theta_dim;
    const auto& raw = tape.acts.back();
    const auto nu = mixture_from_raw(raw);
    if (theta.size() != k) throw std::invalid_argument("theta dimension mismatch");
    const auto a = detail::component_log_terms(nu, theta);
    const double lp = detail::log_sum_exp(a);
    d_raw.assign(raw.size(), 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      const double resp = std::exp(a[c] - lp);
      d_raw[c] = resp - nu.weights[c];
      for (std::size_t j = 0; j < k; ++j) {
        const double mu = nu.means(c, j), sd = nu.scales(c, j);
        const double diff = theta[j] - mu;
        d_raw[C + c * k + j] = resp * diff / (sd * sd) * cfg_.theta_scale[j];
        const double dsd = -1.0 / sd + diff * diff / (sd * sd * sd);
        d_raw[C + C * k + c * k + j] = resp * dsd * cfg_.theta_scale[j] * detail::sigmoid(raw[C + C * k + c * k + j]);
      }
    }
    return lp;
  }

  /// Accumulates parameter gradients; returns d(loss)/d(statistic).
  std::vector<double> backward(std::span<const double> params, const Tape& tape, std::span<const double> d_raw,
                               std::span<double> grad) const {
    if (!tape.valid) throw std::logic_error("Mdn::backward without a taped forward pass");
    std::vector<double> d_cur(d_raw.begin(), d_raw.end());
    std::vector<double> d_prev;
    for (std::size_t i = widths_.size(); i-- > 0;) {
      if (i + 1 < widths_.size()) {
        const auto& out = tape.acts[i + 1];
        for (std::size_t q = 0; q < d_cur.size(); ++q) d_cur[q] *= detail::activation_slope(cfg_.activation, out[q]);
      }
      const auto fin = tape.acts[i].size();
      d_prev.assign(fin, 0.0);
      detail::dense_backward(tape.acts[i], fin, d_cur, widths_[i], params.data() + w_[i], grad.data() + w_[i],
                             grad.data() + b_[i], d_prev, 1);
      std::swap(d_cur, d_prev);
    }
    return d_cur;
  }

 private:
  MdnConfig cfg_;
  std::vector<std::size_t> widths_;
  std::vector<std::size_t> w_, b_;
  std::vector<LayoutEntry> layout_;
  std::vector<std::size_t> fan_in_;
  std::size_t count_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: text header (config echo, layout, metadata) + float64 block
// ---------------------------------------------------------------------------

struct Checkpoint {
  std::string method;  // npe, npe-rs, ae, ae-rs
  Simulator simulator;
  PriorSpec prior;
  EncoderConfig encoder;
  NetworkParams encoder_params;
  std::optional<MdnConfig> mdn;
  NetworkParams mdn_params;
  bool has_decoder = false;
  NetworkParams decoder_params;
  io::TextHeader metadata;  // seed, lambda, regularizer, epochs, beta, ...

  bool operator==(const Checkpoint& o) const {
    return method == o.method && simulator == o.simulator && prior == o.prior && encoder == o.encoder &&
           encoder_params == o.encoder_params && mdn == o.mdn && mdn_params == o.mdn_params &&
           has_decoder == o.has_decoder && decoder_params == o.decoder_params &&
           metadata.entries() == o.metadata.entries();
  }
};

namespace detail {

inline std::vector<LayoutEntry> read_layout(const io::TextHeader& h, std::string_view prefix) {
  std::vector<LayoutEntry> out;
  for (const auto& [k, v] : h.entries()) {
    if (k != "layout") continue;
    if (v.rfind(std::string(prefix) + "/", 0) != 0) continue;
    const auto parts = io::split(v, ' ');
    if (parts.size() != 3) throw IoError("malformed layout line");
    LayoutEntry e;
    e.name = parts[0].substr(prefix.size() + 1);
    e.offset = std::stoul(parts[1]);
    for (const auto& s : io::split(parts[2], 'x')) e.shape.push_back(std::stoul(s));
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck, const io::TextHeader& extra = {}) {
  io::TextHeader h;
  h.set("format", "rsbi-checkpoint-v1");
  for (const auto& [k, v] : extra.entries()) h.set(k, v);
  h.set("method", ck.method);
  write_simulator_header(h, ck.simulator);
  h.set("prior", ck.prior.to_string());
  h.set("encoder-d", std::to_string(ck.encoder.d));
  h.set("encoder-n", std::to_string(ck.encoder.n));
  h.set("encoder-layers", ck.encoder.layers_string());
  h.set("encoder-stat-dim", std::to_string(ck.encoder.stat_dim));
  h.set("encoder-activation", std::string(to_string(ck.encoder.activation)));
  h.set("encoder-input-shift", io::format_double(ck.encoder.input_shift));
  h.set("encoder-input-scale", io::format_double(ck.encoder.input_scale));
  h.set("has-mdn", ck.mdn ? "1" : "0");
  if (ck.mdn) {
    h.set("mdn-components", std::to_string(ck.mdn->components));
    h.set("mdn-hidden", std::to_string(ck.mdn->hidden));
    h.set("mdn-hidden-layers", std::to_string(ck.mdn->hidden_layers));
    h.set("mdn-theta-dim", std::to_string(ck.mdn->theta_dim));
    h.set("mdn-activation", std::string(to_string(ck.mdn->activation)));
    h.set("mdn-theta-shift", io::join_doubles(ck.mdn->theta_shift));
    h.set("mdn-theta-scale", io::join_doubles(ck.mdn->theta_scale));
  }
  h.set("has-decoder", ck.has_decoder ? "1" : "0");
  for (const auto& [k, v] : ck.metadata.entries()) h.set("meta-" + k, v);
  // Layout lines share the key "layout", so they are appended verbatim.
  std::string text = h.serialize();
  text.erase(text.size() - std::string("end-header\n").size());
  auto append_layout = [&text](std::string_view prefix, const NetworkParams& p) {
    text += std::string(prefix) + "-count " + std::to_string(p.size()) + "\n";
    for (const auto& e : p.layout) {
      std::string shape;
      for (std::size_t i = 0; i < e.shape.size(); ++i) {
        if (i) shape += 'x';
        shape += std::to_string(e.shape[i]);
      }
      text += "layout " + std::string(prefix) + "/" + e.name + " " + std::to_string(e.offset) + " " + shape + "\n";
    }
  };
  append_layout("encoder", ck.encoder_params);
  if (ck.mdn) append_layout("mdn", ck.mdn_params);
  if (ck.has_decoder) append_layout("decoder", ck.decoder_params);
  text += "end-header\n";
  io::append_le_doubles(text, ck.encoder_params.values);
  if (ck.mdn) io::append_le_doubles(text, ck.mdn_params.values);
  if (ck.has_decoder) io::append_le_doubles(text, ck.decoder_params.values);
  return text;
}

inline Checkpoint parse_checkpoint(std::string_view bytes, io::TextHeader* header_out = nullptr) {
  const auto h = io::TextHeader::parse(bytes);
  if (h.get("format") != "rsbi-checkpoint-v1") throw IoError("not a checkpoint file");
  Checkpoint ck;
  ck.method = h.get("method");
  ck.simulator = read_simulator_header(h);
  ck.prior = PriorSpec::parse(h.get("prior"));
  ck.encoder.d = std::stoul(h.get("encoder-d"));
  ck.encoder.n = std::stoul(h.get("encoder-n"));
  ck.encoder.layers = EncoderConfig::parse_layers(h.get("encoder-layers"));
  ck.encoder.stat_dim = std::stoul(h.get("encoder-stat-dim"));
  ck.encoder.activation = parse_activation(h.get("encoder-activation"));
  ck.encoder.input_shift = io::parse_double(h.get("encoder-input-shift"));
  ck.encoder.input_scale = io::parse_double(h.get("encoder-input-scale"));
  if (h.get("has-mdn") == "1") {
    MdnConfig m;
    m.stat_dim = ck.encoder.stat_dim;
    m.components = std::stoul(h.get("mdn-components"));
    m.hidden = std::stoul(h.get("mdn-hidden"));
    m.hidden_layers = std::stoul(h.get("mdn-hidden-layers"));
    m.theta_dim = std::stoul(h.get("mdn-theta-dim"));
    m.activation = parse_activation(h.get("mdn-activation"));
    m.theta_shift = io::parse_doubles(h.get("mdn-theta-shift"));
    m.theta_scale = io::parse_doubles(h.get("mdn-theta-scale"));
    ck.mdn = m;
  }
  ck.has_decoder = h.get("has-decoder") == "1";
  for (const auto& [k, v] : h.entries())
    if (k.rfind("meta-", 0) == 0) ck.metadata.set(k.substr(5), v);

  auto read_block = [&](std::string_view prefix, NetworkParams& p) {
    p.layout = detail::read_layout(h, prefix);
    p.values.resize(std::stoul(h.get(std::string(prefix) + "-count")));
    io::read_le_doubles(bytes, p.values);
    p.validate();
  };
  read_block("encoder", ck.encoder_params);
  if (ck.mdn) read_block("mdn", ck.mdn_params);
  if (ck.has_decoder) read_block("decoder", ck.decoder_params);
  if (!bytes.empty()) throw IoError("trailing bytes after checkpoint block");
  if (ck.encoder_params.layout != Encoder(ck.encoder).layout()) throw IoError("encoder layout does not match config");
  if (header_out) *header_out = h;
  return ck;
}

}  // namespace rsbi
