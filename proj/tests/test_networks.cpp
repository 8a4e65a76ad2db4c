#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "rsbi/networks.hpp"

using namespace rsbi;
using Catch::Approx;

namespace {

Dataset random_dataset(std::size_t n, std::size_t d, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Dataset ds(ModelTag::ricker, n, d);
  for (auto& v : ds.values) v = scale * rng.normal();
  return ds;
}

std::vector<double> randomize(std::size_t count, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  std::vector<double> p(count);
  for (auto& v : p) v = scale * rng.normal();
  return p;
}

const double* tensor_at(const std::vector<double>& values, const std::vector<LayoutEntry>& layout,
                        const std::string& name) {
  for (const auto& e : layout)
    if (e.name == name) return values.data() + e.offset;
  FAIL("missing tensor " << name);
  return nullptr;
}

double act(Activation a, double x) { return a == Activation::relu ? std::max(x, 0.0) : std::tanh(x); }

// Layer-by-layer forward on one realization, nested loops, no shared helpers.
std::vector<double> oracle_encode(const EncoderConfig& cfg, const std::vector<double>& p,
                                  const std::vector<LayoutEntry>& layout, const Dataset& ds) {
  std::vector<double> pooled;
  for (std::size_t r = 0; r < ds.n; ++r) {
    std::vector<std::vector<double>> x(1, std::vector<double>(cfg.d));
    for (std::size_t t = 0; t < cfg.d; ++t) x[0][t] = (ds(r, t) - cfg.input_shift) / cfg.input_scale;
    for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
      const auto& L = cfg.layers[i];
      const double* w = tensor_at(p, layout, "layer" + std::to_string(i) + ".weight");
      const double* b = tensor_at(p, layout, "layer" + std::to_string(i) + ".bias");
      const std::size_t C = x.size(), len = x[0].size();
      std::vector<std::vector<double>> y;
      if (L.kind == LayerSpec::Kind::conv) {
        const std::size_t out_len = (len + 2 * L.padding - L.kernel) / L.stride + 1;
        y.assign(L.width, std::vector<double>(out_len));
        for (std::size_t o = 0; o < L.width; ++o)
          for (std::size_t t = 0; t < out_len; ++t) {
            double acc = b[o];
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t j = 0; j < L.kernel; ++j) {
                const long pos = static_cast<long>(t * L.stride + j) - static_cast<long>(L.padding);
                if (pos >= 0 && pos < static_cast<long>(len)) acc += w[(o * C + c) * L.kernel + j] * x[c][pos];
              }
            y[o][t] = act(cfg.activation, acc);
          }
      } else {
        std::vector<double> flat;
        for (const auto& ch : x) flat.insert(flat.end(), ch.begin(), ch.end());
        y.assign(L.width, std::vector<double>(1));
        for (std::size_t u = 0; u < L.width; ++u) {
          double acc = b[u];
          for (std::size_t f = 0; f < flat.size(); ++f) acc += w[u * flat.size() + f] * flat[f];
          y[u][0] = act(cfg.activation, acc);
        }
      }
      x = std::move(y);
    }
    std::vector<double> flat;
    for (const auto& ch : x) flat.insert(flat.end(), ch.begin(), ch.end());
    if (pooled.empty()) pooled.assign(flat.size(), 0.0);
    for (std::size_t f = 0; f < flat.size(); ++f) pooled[f] += flat[f] / static_cast<double>(ds.n);
  }
  const double* hw = tensor_at(p, layout, "head.weight");
  const double* hb = tensor_at(p, layout, "head.bias");
  std::vector<double> s(cfg.stat_dim);
  for (std::size_t k = 0; k < cfg.stat_dim; ++k) {
    s[k] = hb[k];
    for (std::size_t f = 0; f < pooled.size(); ++f) s[k] += hw[k * pooled.size() + f] * pooled[f];
  }
  return s;
}

}  // namespace

TEST_CASE("encoder: row permutation leaves the statistic unchanged") {
  for (const auto tag : {ModelTag::ricker, ModelTag::oup, ModelTag::gaussian_linear}) {
    const auto cfg = EncoderConfig::defaults(tag);
    const Encoder enc(cfg);
    const auto p = enc.init_params(3);
    const auto ds = random_dataset(30, cfg.d, 4, 3.0);
    Dataset perm = ds;
    std::vector<std::size_t> order(ds.n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(5);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t r = 0; r < ds.n; ++r) std::copy(ds.row(order[r]).begin(), ds.row(order[r]).end(), perm.row(r).begin());
    const auto a = enc.encode(p.values, ds);
    const auto b = enc.encode(p.values, perm);
    for (std::size_t k = 0; k < a.size(); ++k) CHECK(std::abs(a[k] - b[k]) <= 1e-12 * std::max(1.0, std::abs(a[k])));
  }
}

TEST_CASE("encoder: zero parameters give a zero statistic") {
  auto cfg = EncoderConfig::defaults(ModelTag::ricker);
  cfg.activation = Activation::tanh;
  const Encoder enc(cfg);
  const std::vector<double> zeros(enc.param_count(), 0.0);
  for (const double v : enc.encode(zeros, random_dataset(7, 100, 1))) CHECK(v == 0.0);
}

TEST_CASE("encoder: forward matches a layer-by-layer oracle") {
  for (const auto act_kind : {Activation::relu, Activation::tanh}) {
    for (const auto tag : {ModelTag::ricker, ModelTag::oup, ModelTag::gaussian_linear}) {
      auto cfg = EncoderConfig::defaults(tag);
      cfg.activation = act_kind;
      cfg.input_shift = 0.3;
      cfg.input_scale = 2.5;
      const Encoder enc(cfg);
      const auto p = randomize(enc.param_count(), 11);
      const auto ds = random_dataset(9, cfg.d, 12, 2.0);
      const auto got = enc.encode(p, ds);
      const auto want = oracle_encode(cfg, p, enc.layout(), ds);
      for (std::size_t k = 0; k < got.size(); ++k) CHECK(std::abs(got[k] - want[k]) <= 1e-10);
    }
  }
  SECTION("mixed conv and dense stack") {
    EncoderConfig cfg;
    cfg.d = 17;
    cfg.layers = {LayerSpec::conv(3, 5, 3, 2), LayerSpec::dense(6)};
    cfg.stat_dim = 3;
    const Encoder enc(cfg);
    const auto p = randomize(enc.param_count(), 21);
    const auto ds = random_dataset(4, 17, 22);
    const auto got = enc.encode(p, ds);
    const auto want = oracle_encode(cfg, p, enc.layout(), ds);
    for (std::size_t k = 0; k < got.size(); ++k) CHECK(std::abs(got[k] - want[k]) <= 1e-10);
  }
}

TEST_CASE("encoder: rejects mismatched inputs") {
  auto cfg = EncoderConfig::defaults(ModelTag::oup);
  cfg.n = 10;
  const Encoder enc(cfg);
  const auto p = enc.init_params(0);
  CHECK_THROWS_AS(enc.encode(p.values, random_dataset(9, 25, 0)), std::invalid_argument);
  CHECK_THROWS_AS(enc.encode(p.values, random_dataset(10, 24, 0)), std::invalid_argument);
  CHECK_THROWS_AS(enc.encode(std::vector<double>(3), random_dataset(10, 25, 0)), std::invalid_argument);
}

TEST_CASE("encoder: backward matches central differences") {
  EncoderConfig cfg;
  cfg.d = 12;
  cfg.layers = {LayerSpec::conv(3), LayerSpec::conv(2), LayerSpec::dense(5)};
  cfg.stat_dim = 3;
  cfg.activation = Activation::tanh;
  const Encoder enc(cfg);
  auto p = randomize(enc.param_count(), 31);
  const auto ds = random_dataset(6, 12, 32);
  const std::vector<double> c{0.7, -1.3, 0.4};
  auto loss = [&](const std::vector<double>& q) {
    const auto s = enc.encode(q, ds);
    return c[0] * s[0] + c[1] * s[1] + c[2] * s[2];
  };
  EncoderTape tape;
  enc.forward(p, ds, tape);
  std::vector<double> grad(p.size(), 0.0);
  enc.backward(p, tape, c, grad);
  const double h = 1e-6;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = loss(p);
    p[i] = keep - h;
    const double down = loss(p);
    p[i] = keep;
    INFO("param " << i);
    CHECK(std::abs(grad[i] - (up - down) / (2 * h)) <= 1e-6 * std::max(1.0, std::abs(grad[i])));
  }
}

TEST_CASE("encoder: zero upstream gradient gives zero parameter gradient") {
  const auto cfg = EncoderConfig::defaults(ModelTag::ricker);
  const Encoder enc(cfg);
  const auto p = enc.init_params(1);
  EncoderTape tape;
  enc.forward(p.values, random_dataset(5, 100, 2), tape);
  std::vector<double> grad(p.size(), 0.0);
  enc.backward(p.values, tape, std::vector<double>(cfg.stat_dim, 0.0), grad);
  CHECK(std::all_of(grad.begin(), grad.end(), [](double g) { return g == 0.0; }));
}

TEST_CASE("transposed convolution is the adjoint of convolution") {
  const auto spec = LayerSpec::conv(3, 3, 2, 1);
  const FeatureShape small{2, 13};
  const FeatureShape big{3, detail::conv_out_length(13, spec)};
  const auto w = randomize(3 * 2 * 3, 41, 1.0);
  const std::vector<double> zb(3, 0.0), zb2(2, 0.0);
  const auto x = randomize(small.size(), 42, 1.0);
  const auto y = randomize(big.size(), 43, 1.0);
  std::vector<double> cx(big.size()), ty(small.size());
  detail::conv_forward(x, small, cx, big, spec, w.data(), zb.data(), 1);
  detail::tconv_forward(y, big, ty, small, spec, w.data(), zb2.data());
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) lhs += cx[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * ty[i];
  CHECK(std::abs(lhs - rhs) <= 1e-12 * std::max(1.0, std::abs(lhs)));
}

TEST_CASE("decoder: mirrors the encoder and backward matches central differences") {
  auto cfg = EncoderConfig::defaults(ModelTag::ricker);
  cfg.activation = Activation::tanh;
  const Decoder dec(cfg);
  CHECK(dec.output_length() == 100);
  auto p = randomize(dec.param_count(), 51, 0.3);
  const std::vector<double> stat{0.5, -0.2, 1.1, 0.3};
  const auto row = dec.decode_row(p, stat);
  REQUIRE(row.size() == 100);
  const auto target = randomize(100, 52, 1.0);
  auto loss = [&](const std::vector<double>& q, const std::vector<double>& s) {
    const auto out = dec.decode_row(q, s);
    double acc = 0.0;
    for (std::size_t t = 0; t < out.size(); ++t) acc += target[t] * out[t];
    return acc;
  };
  Decoder::Tape tape;
  dec.forward(p, stat, tape);
  std::vector<double> grad(p.size(), 0.0);
  const auto d_stat = dec.backward(p, tape, target, grad);
  const double h = 1e-6;
  for (std::size_t i = 0; i < p.size(); i += 7) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = loss(p, stat);
    p[i] = keep - h;
    const double down = loss(p, stat);
    p[i] = keep;
    CHECK(std::abs(grad[i] - (up - down) / (2 * h)) <= 1e-6 * std::max(1.0, std::abs(grad[i])));
  }
  for (std::size_t k = 0; k < stat.size(); ++k) {
    auto s = stat;
    s[k] += h;
    const double up = loss(p, s);
    s[k] -= 2 * h;
    const double down = loss(p, s);
    CHECK(std::abs(d_stat[k] - (up - down) / (2 * h)) <= 1e-6 * std::max(1.0, std::abs(d_stat[k])));
  }
  const auto wide = dec.decode(p, stat, 5, ModelTag::ricker);
  for (std::size_t r = 0; r < 5; ++r) CHECK(std::equal(row.begin(), row.end(), wide.row(r).begin()));
}

TEST_CASE("mixture: log density closed forms") {
  MixtureParams nu{{1.0}, Matrix(1, 2, {0.3, -2.0}), Matrix(1, 2, {1.0, 1.0})};
  const std::vector<double> at{0.3, -2.0};
  CHECK(mdn_log_prob(nu, at) == Approx(-std::log(2 * M_PI)).epsilon(1e-14));

  MixtureParams two{{0.3, 0.7}, Matrix(2, 2, {0.0, 1.0, 2.0, -1.0}), Matrix(2, 2, {0.5, 2.0, 1.5, 0.8})};
  const std::vector<double> th{0.4, 0.2};
  double direct = 0.0;
  for (std::size_t c = 0; c < 2; ++c) {
    double dens = two.weights[c];
    for (std::size_t j = 0; j < 2; ++j) {
      const double z = (th[j] - two.means(c, j)) / two.scales(c, j);
      dens *= std::exp(-0.5 * z * z) / (std::sqrt(2 * M_PI) * two.scales(c, j));
    }
    direct += dens;
  }
  CHECK(std::abs(mdn_log_prob(two, th) - std::log(direct)) <= 1e-12);

  double mass = 0.0;
  const double step = 0.02;
  for (double a = -8.0; a < 10.0; a += step)
    for (double b = -9.0; b < 9.0; b += step) {
      const std::vector<double> g{a + step / 2, b + step / 2};
      mass += std::exp(mdn_log_prob(two, g)) * step * step;
    }
  CHECK(std::abs(mass - 1.0) < 1e-3);

  const std::vector<double> far{1e3, 1e3};
  CHECK(std::isfinite(mdn_log_prob(two, far)));
}

TEST_CASE("mixture: rejects malformed parameters") {
  CHECK_THROWS_AS(mdn_log_prob(MixtureParams{{0.5, 0.4}, Matrix(2, 1, {0, 1}), Matrix(2, 1, {1, 1})},
                               std::vector<double>{0.0}),
                  std::invalid_argument);
  CHECK_THROWS_AS(mdn_log_prob(MixtureParams{{1.0}, Matrix(1, 1, {0}), Matrix(1, 1, {0})}, std::vector<double>{0.0}),
                  std::invalid_argument);
}

TEST_CASE("mixture: sampling frequencies, degenerate scales and determinism") {
  const MixtureParams nu{{0.2, 0.8}, Matrix(2, 1, {-50.0, 50.0}), Matrix(2, 1, {1.0, 1.0})};
  const std::size_t N = 20000;
  const auto s = mdn_sample(nu, N, 3);
  std::size_t low = 0;
  for (std::size_t i = 0; i < N; ++i) low += s(i, 0) < 0.0;
  CHECK(std::abs(static_cast<double>(low) / N - 0.2) < 4.0 * std::sqrt(0.2 * 0.8 / N));
  CHECK(mdn_sample(nu, 50, 9) == mdn_sample(nu, 50, 9));

  const MixtureParams point{{1.0}, Matrix(1, 2, {1.5, -3.25}), Matrix(1, 2, {1e-300, 1e-300})};
  const auto p = mdn_sample(point, 100, 4);
  for (std::size_t i = 0; i < 100; ++i) {
    CHECK(p(i, 0) == 1.5);
    CHECK(p(i, 1) == -3.25);
  }
}

TEST_CASE("mixture head: uniform logits and zero raw scale") {
  MdnConfig cfg;
  cfg.stat_dim = 3;
  cfg.components = 4;
  cfg.theta_dim = 2;
  const Mdn head(cfg);
  const std::vector<double> raw(cfg.output_dim(), 0.0);
  const auto nu = head.mixture_from_raw(raw);
  for (const double w : nu.weights) CHECK(w == Approx(0.25).epsilon(1e-15));
  for (const double s : nu.scales.values) CHECK(s == Approx(std::log(2.0)).epsilon(1e-15));
  for (const double m : nu.means.values) CHECK(m == 0.0);
}

TEST_CASE("mixture head: forward matches a dense oracle") {
  auto cfg = MdnConfig::for_prior(ricker_prior(), 4);
  const Mdn head(cfg);
  const auto p = randomize(head.param_count(), 61);
  const std::vector<double> stat{0.2, -1.0, 0.7, 1.4};
  const auto nu = head.forward(p, stat);

  auto layer = [&](const std::vector<double>& in, const std::string& name, std::size_t width, bool relu) {
    const double* w = tensor_at(p, head.layout(), name + ".weight");
    const double* b = tensor_at(p, head.layout(), name + ".bias");
    std::vector<double> out(width);
    for (std::size_t u = 0; u < width; ++u) {
      double acc = b[u];
      for (std::size_t f = 0; f < in.size(); ++f) acc += w[u * in.size() + f] * in[f];
      out[u] = relu ? std::max(acc, 0.0) : acc;
    }
    return out;
  };
  auto h = layer(stat, "hidden0", 50, true);
  h = layer(h, "hidden1", 50, true);
  const auto raw = layer(h, "out", cfg.output_dim(), false);
  const std::size_t C = 5, k = 2;
  double z = 0.0;
  for (std::size_t c = 0; c < C; ++c) z += std::exp(raw[c]);
  const double centre[2] = {5.0, 10.0}, half[2] = {3.0, 10.0};
  for (std::size_t c = 0; c < C; ++c) {
    CHECK(std::abs(nu.weights[c] - std::exp(raw[c]) / z) <= 1e-10);
    for (std::size_t j = 0; j < k; ++j) {
      CHECK(std::abs(nu.means(c, j) - (centre[j] + half[j] * raw[C + c * k + j])) <= 1e-10);
      CHECK(std::abs(nu.scales(c, j) - half[j] * std::log1p(std::exp(raw[C + C * k + c * k + j]))) <= 1e-10);
    }
  }
}

TEST_CASE("mixture head: log-probability gradient matches central differences") {
  MdnConfig cfg;
  cfg.stat_dim = 3;
  cfg.components = 3;
  cfg.theta_dim = 2;
  cfg.hidden = 8;
  cfg.activation = Activation::tanh;
  cfg.theta_shift = {5.0, 10.0};
  cfg.theta_scale = {3.0, 10.0};
  const Mdn head(cfg);
  auto p = randomize(head.param_count(), 71, 0.4);
  const std::vector<double> stat{0.3, -0.8, 1.2};
  const std::vector<double> theta{4.2, 12.0};
  auto lp = [&](const std::vector<double>& q, const std::vector<double>& s) {
    return mdn_log_prob(head.forward(q, s), theta);
  };
  Mdn::Tape tape;
  head.forward_raw(p, stat, tape);
  std::vector<double> d_raw;
  const double value = head.log_prob_raw_grad(tape, theta, d_raw);
  CHECK(value == Approx(lp(p, stat)).epsilon(1e-12));
  std::vector<double> grad(p.size(), 0.0);
  const auto d_stat = head.backward(p, tape, d_raw, grad);
  const double h = 1e-6;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = lp(p, stat);
    p[i] = keep - h;
    const double down = lp(p, stat);
    p[i] = keep;
    INFO("param " << i);
    CHECK(std::abs(grad[i] - (up - down) / (2 * h)) <= 1e-6 * std::max(1.0, std::abs(grad[i])));
  }
  for (std::size_t k = 0; k < stat.size(); ++k) {
    auto s = stat;
    s[k] += h;
    const double up = lp(p, s);
    s[k] -= 2 * h;
    const double down = lp(p, s);
    CHECK(std::abs(d_stat[k] - (up - down) / (2 * h)) <= 1e-6 * std::max(1.0, std::abs(d_stat[k])));
  }
}

TEST_CASE("checkpoint: save and load is bit-exact") {
  Checkpoint ck;
  ck.method = "npe-rs";
  ck.simulator = Simulator::defaults(ModelTag::ricker);
  ck.prior = ricker_prior();
  ck.encoder = EncoderConfig::defaults(ModelTag::ricker);
  ck.encoder.input_shift = 0.1 + 1e-17;
  ck.encoder.input_scale = 1.0 / 3.0;
  const Encoder enc(ck.encoder);
  ck.encoder_params = enc.init_params(5);
  ck.encoder_params.values[3] = -0.0;
  ck.encoder_params.values[4] = 5e-324;
  ck.mdn = MdnConfig::for_prior(ck.prior, ck.encoder.stat_dim);
  ck.mdn_params = Mdn(*ck.mdn).init_params(6);
  ck.metadata.set("lambda", "10");
  const auto bytes = serialize_checkpoint(ck);
  const auto back = parse_checkpoint(bytes);
  CHECK(back == ck);
  CHECK(std::signbit(back.encoder_params.values[3]));
  CHECK(serialize_checkpoint(back) == bytes);

  Checkpoint ae = ck;
  ae.method = "ae";
  ae.mdn.reset();
  ae.mdn_params = {};
  ae.has_decoder = true;
  ae.decoder_params = Decoder(ae.encoder).init_params(7);
  CHECK(parse_checkpoint(serialize_checkpoint(ae)) == ae);

  CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 8)), IoError);
  CHECK_THROWS_AS(parse_checkpoint(bytes + "x"), IoError);
}

TEST_CASE("decoder: dense stack mirrors to the full input width") {
  const auto cfg = EncoderConfig::defaults(ModelTag::gaussian_linear);
  const Decoder dec(cfg);
  // in: 20x4 + 20, up0: 20x20 + 20, up1: 10x20 + 10
  CHECK(dec.param_count() == 100 + 420 + 210);
  std::vector<double> p(dec.param_count(), 0.0);
  for (const auto& e : dec.layout())
    if (e.name == "up1.bias")
      for (std::size_t t = 0; t < e.size(); ++t) p[e.offset + t] = static_cast<double>(t);
  const auto row = dec.decode_row(p, std::vector<double>(4, 1.0));
  REQUIRE(row.size() == 10);
  for (std::size_t t = 0; t < 10; ++t) CHECK(row[t] == static_cast<double>(t));
}
