#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rsbi/io.hpp"
#include "rsbi/rng.hpp"
#include "rsbi/types.hpp"

namespace rsbi {

// ---------------------------------------------------------------------------
// Priors
// ---------------------------------------------------------------------------

struct PriorDim {
  enum class Kind { uniform, lognormal };
  Kind kind = Kind::uniform;
  double a = 0.0;  // lo, or mu of log
  double b = 1.0;  // hi, or sigma of log

  static PriorDim uniform(double lo, double hi) { return {Kind::uniform, lo, hi}; }
  static PriorDim lognormal(double mu, double sigma) { return {Kind::lognormal, mu, sigma}; }

  void validate() const {
    if (!std::isfinite(a) || !std::isfinite(b)) throw std::invalid_argument("prior bounds must be finite");
    if (kind == Kind::uniform && !(a < b)) throw std::invalid_argument("uniform prior requires lo < hi");
    if (kind == Kind::lognormal && !(b > 0.0)) throw std::invalid_argument("lognormal prior requires sigma > 0");
  }

  bool contains(double x) const {
    if (kind == Kind::uniform) return x >= a && x <= b;
    return x > 0.0;
  }

  double mean() const {
    return kind == Kind::uniform ? 0.5 * (a + b) : std::exp(a + 0.5 * b * b);
  }

  double spread() const {
    if (kind == Kind::uniform) return 0.5 * (b - a);
    return std::sqrt((std::exp(b * b) - 1.0) * std::exp(2.0 * a + b * b));
  }

  std::string to_string() const {
    return std::string(kind == Kind::uniform ? "uniform(" : "lognormal(") + io::format_double(a) + "," +
           io::format_double(b) + ")";
  }

  static PriorDim parse(std::string_view s) {
    const auto open = s.find('(');
    const auto close = s.rfind(')');
    if (open == std::string_view::npos || close == std::string_view::npos || close < open) {
      throw std::invalid_argument("malformed prior '" + std::string(s) + "'");
    }
    const auto name = s.substr(0, open);
    const auto args = io::parse_doubles(s.substr(open + 1, close - open - 1));
    if (args.size() != 2) throw std::invalid_argument("prior '" + std::string(s) + "' needs two arguments");
    PriorDim d;
    if (name == "uniform") {
      d = uniform(args[0], args[1]);
    } else if (name == "lognormal") {
      d = lognormal(args[0], args[1]);
    } else {
      throw std::invalid_argument("unknown prior family '" + std::string(name) + "'");
    }
    d.validate();
    return d;
  }

  bool operator==(const PriorDim&) const = default;
};

struct PriorSpec {
  std::vector<PriorDim> dims;

  std::size_t size() const { return dims.size(); }

  void validate() const {
    if (dims.empty()) throw std::invalid_argument("prior has no dimensions");
    for (const auto& d : dims) d.validate();
  }

  bool contains(std::span<const double> theta) const {
    for (std::size_t j = 0; j < dims.size(); ++j)
      if (!dims[j].contains(theta[j])) return false;
    return true;
  }

  std::string to_string() const {
    std::string out;
    for (std::size_t j = 0; j < dims.size(); ++j) {
      if (j) out += ';';
      out += dims[j].to_string();
    }
    return out;
  }

  static PriorSpec parse(std::string_view s) {
    PriorSpec p;
    for (const auto& tok : io::split(s, ';')) p.dims.push_back(PriorDim::parse(tok));
    p.validate();
    return p;
  }

  bool operator==(const PriorSpec&) const = default;
};

/// U([2,8] x [0,20]).
inline PriorSpec ricker_prior() { return {{PriorDim::uniform(2, 8), PriorDim::uniform(0, 20)}}; }
/// U([0,2] x [-2,2]).
inline PriorSpec oup_prior() { return {{PriorDim::uniform(0, 2), PriorDim::uniform(-2, 2)}}; }
/// U([-1,1])^10.
inline PriorSpec gaussian_linear_prior() { return {std::vector<PriorDim>(10, PriorDim::uniform(-1, 1))}; }
/// G0, T, nu, sigma_W^2.
inline PriorSpec turin_prior() {
  return {{PriorDim::uniform(1e-9, 1e-8), PriorDim::uniform(1e-9, 1e-8), PriorDim::uniform(1e7, 5e9),
           PriorDim::uniform(1e-10, 1e-9)}};
}

inline PriorSpec default_prior(ModelTag tag) {
  switch (tag) {
    case ModelTag::ricker: return ricker_prior();
    case ModelTag::oup: return oup_prior();
    case ModelTag::gaussian_linear: return gaussian_linear_prior();
    case ModelTag::turin: return turin_prior();
  }
  return {};
}

/// m iid prior draws from a single stream. Uniform dims consume one uniform,
/// lognormal dims one normal, in dimension order.
inline std::vector<ParamVector> sample_prior(const PriorSpec& prior, std::size_t m, std::uint64_t seed) {
  prior.validate();
  if (m < 1) throw std::invalid_argument("sample_prior: m must be >= 1");
  Rng rng(seed);
  std::vector<ParamVector> out(m);
  for (auto& theta : out) {
    theta.values.resize(prior.size());
    for (std::size_t j = 0; j < prior.size(); ++j) {
      const auto& d = prior.dims[j];
      theta[j] = d.kind == PriorDim::Kind::uniform ? rng.uniform(d.a, d.b) : std::exp(rng.normal(d.a, d.b));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Simulators. Row r of every dataset draws from Rng(stream_seed(seed, r)).
// ---------------------------------------------------------------------------

struct RickerOptions {
  double sigma_e2 = 0.09;
};

struct OupOptions {
  double dt = 0.2;
  double x0 = 10.0;
  double noise_scale = 0.5;  // 0 switches the noise off
};

struct GaussianLinearOptions {
  double variance = 0.1;
};

struct TurinOptions {
  double bandwidth = 4e9;
  bool paths = true;  // false leaves only the noise term
};

namespace detail {

inline void require_finite(const ParamVector& theta, std::size_t expected, std::string_view who) {
  if (theta.size() != expected) {
    throw std::invalid_argument(std::string(who) + ": expected " + std::to_string(expected) + " parameters, got " +
                                std::to_string(theta.size()));
  }
  if (!all_finite(theta.span())) throw std::invalid_argument(std::string(who) + ": non-finite parameter");
}

}  // namespace detail

/// One Ricker trajectory. Per step: e_t ~ N(0, sigma_e^2) (one normal), then
/// x_t ~ Poisson(theta2 * N_t). The population is carried in log space so it
/// stays strictly positive; `log_population`, if non-empty, receives log N_t.
inline void ricker_row(const ParamVector& theta, Rng& rng, std::span<double> out, const RickerOptions& opt = {},
                       std::span<double> log_population = {}) {
  const double sd = std::sqrt(opt.sigma_e2);
  double log_n = 0.0;  // N_0 = 1
  for (std::size_t t = 0; t < out.size(); ++t) {
    const double e = sd * rng.normal();
    log_n = theta[0] + log_n - std::exp(log_n) + e;
    if (!log_population.empty()) log_population[t] = log_n;
    out[t] = static_cast<double>(rng.poisson(theta[1] * std::exp(log_n)));
  }
}

inline void validate_ricker(const ParamVector& theta) {
  detail::require_finite(theta, 2, "simulate_ricker");
  if (theta[1] < 0.0) throw std::invalid_argument("simulate_ricker: theta2 must be >= 0");
}

inline Dataset simulate_ricker(const ParamVector& theta, std::size_t T, std::size_t n, std::uint64_t seed,
                               const RickerOptions& opt = {}) {
  validate_ricker(theta);
  if (T < 1 || n < 1) throw std::invalid_argument("simulate_ricker: T and n must be >= 1");
  Dataset ds(ModelTag::ricker, n, T);
  for (std::size_t r = 0; r < n; ++r) {
    Rng rng(stream_seed(seed, r));
    ricker_row(theta, rng, ds.row(r), opt);
  }
  return ds;
}

/// Euler scheme x_{t+1} = x_t + theta1 (exp(theta2) - x_t) dt + noise_scale * w,
/// w ~ N(0, dt). Emits x_1..x_T.
inline void oup_row(const ParamVector& theta, Rng& rng, std::span<double> out, const OupOptions& opt = {}) {
  const double target = std::exp(theta[1]);
  const double wsd = std::sqrt(opt.dt);
  double x = opt.x0;
  for (auto& v : out) {
    const double w = wsd * rng.normal();
    x = x + theta[0] * (target - x) * opt.dt + opt.noise_scale * w;
    v = x;
  }
}

inline Dataset simulate_oup(const ParamVector& theta, std::size_t T, std::size_t n, std::uint64_t seed,
                            const OupOptions& opt = {}) {
  detail::require_finite(theta, 2, "simulate_oup");
  if (T < 1 || n < 1) throw std::invalid_argument("simulate_oup: T and n must be >= 1");
  Dataset ds(ModelTag::oup, n, T);
  for (std::size_t r = 0; r < n; ++r) {
    Rng rng(stream_seed(seed, r));
    oup_row(theta, rng, ds.row(r), opt);
  }
  return ds;
}

inline void gaussian_linear_row(const ParamVector& theta, Rng& rng, std::span<double> out,
                                const GaussianLinearOptions& opt = {}) {
  const double sd = std::sqrt(opt.variance);
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = theta[j] + sd * rng.normal();
}

inline Dataset simulate_gaussian_linear(const ParamVector& theta, std::size_t n, std::uint64_t seed,
                                        const GaussianLinearOptions& opt = {}) {
  detail::require_finite(theta, 10, "simulate_gaussian_linear");
  if (n < 1) throw std::invalid_argument("simulate_gaussian_linear: n must be >= 1");
  Dataset ds(ModelTag::gaussian_linear, n, 10);
  for (std::size_t r = 0; r < n; ++r) {
    Rng rng(stream_seed(seed, r));
    gaussian_linear_row(theta, rng, ds.row(r), opt);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Turin radio channel
// ---------------------------------------------------------------------------

struct TurinPath {
  double delay = 0.0;
  std::complex<double> gain;
};

/// Power floor applied before the dB transform.
inline constexpr double kTurinPowerFloor = 1e-30;

/// Delay window of the inverse-DFT grid, (K - 1) / B.
inline double turin_max_delay(std::size_t K, double bandwidth) { return static_cast<double>(K - 1) / bandwidth; }

/// H_k = sum_l alpha_l exp(-j 2 pi df k tau_l), df = B / (K - 1).
inline std::vector<std::complex<double>> turin_transfer_function(std::span<const TurinPath> paths, std::size_t K,
                                                                 double bandwidth) {
  const double df = bandwidth / static_cast<double>(K - 1);
  std::vector<std::complex<double>> H(K);
  for (const auto& p : paths) {
    const std::complex<double> step = std::polar(1.0, -2.0 * std::numbers::pi * df * p.delay);
    std::complex<double> w = p.gain;
    for (std::size_t k = 0; k < K; ++k) {
      H[k] += w;
      w *= step;
    }
  }
  return H;
}

/// Twiddle table exp(j 2 pi m / K), m = 0..K-1.
inline std::vector<std::complex<double>> idft_twiddles(std::size_t K) {
  std::vector<std::complex<double>> tw(K);
  for (std::size_t m = 0; m < K; ++m)
    tw[m] = std::polar(1.0, 2.0 * std::numbers::pi * static_cast<double>(m) / static_cast<double>(K));
  return tw;
}

/// y(t_k) = (1/K) sum_i Y_i exp(j 2 pi i k / K); direct O(K^2) evaluation.
inline std::vector<std::complex<double>> turin_time_signal(std::span<const std::complex<double>> Y,
                                                           std::span<const std::complex<double>> twiddles) {
  const std::size_t K = Y.size();
  std::vector<std::complex<double>> y(K);
  const double inv_k = 1.0 / static_cast<double>(K);
  for (std::size_t k = 0; k < K; ++k) {
    double re = 0.0, im = 0.0;
    std::size_t idx = 0;
    for (std::size_t i = 0; i < K; ++i) {
      const auto& w = twiddles[idx];
      re += Y[i].real() * w.real() - Y[i].imag() * w.imag();
      im += Y[i].real() * w.imag() + Y[i].imag() * w.real();
      idx += k;
      if (idx >= K) idx -= K;
    }
    y[k] = {re * inv_k, im * inv_k};
  }
  return y;
}

inline void turin_power_db(std::span<const std::complex<double>> y, std::span<double> out) {
  for (std::size_t k = 0; k < y.size(); ++k) out[k] = 10.0 * std::log10(std::max(std::norm(y[k]), kTurinPowerFloor));
}

/// Draw order per realization: L ~ Poisson(nu tau_max); per path the delay
/// (one uniform) then the gain (two normals); then K complex noise samples.
inline void turin_row(const ParamVector& theta, Rng& rng, std::span<double> out,
                      std::span<const std::complex<double>> twiddles, const TurinOptions& opt = {}) {
  const std::size_t K = out.size();
  const double g0 = theta[0], t_decay = theta[1], nu = theta[2], noise_var = theta[3];
  const double tau_max = turin_max_delay(K, opt.bandwidth);
  std::vector<TurinPath> paths;
  if (opt.paths) {
    const auto L = rng.poisson(nu * tau_max);
    paths.resize(L);
    for (auto& p : paths) {
      p.delay = rng.uniform() * tau_max;
      const double sd = std::sqrt(0.5 * g0 * std::exp(-p.delay / t_decay) / nu);
      const double re = rng.normal();
      const double im = rng.normal();
      p.gain = {sd * re, sd * im};
    }
  }
  auto Y = turin_transfer_function(paths, K, opt.bandwidth);
  const double wsd = std::sqrt(0.5 * noise_var);
  for (auto& v : Y) {
    const double re = rng.normal();
    const double im = rng.normal();
    v += std::complex<double>(wsd * re, wsd * im);
  }
  turin_power_db(turin_time_signal(Y, twiddles), out);
}

inline void validate_turin(const ParamVector& theta) {
  detail::require_finite(theta, 4, "simulate_turin");
  for (const double v : theta.values)
    if (!(v > 0.0)) throw std::invalid_argument("simulate_turin: parameters must be positive");
}

inline Dataset simulate_turin(const ParamVector& theta, std::size_t K, std::size_t n, std::uint64_t seed,
                              const TurinOptions& opt = {}) {
  validate_turin(theta);
  if (K < 2 || n < 1) throw std::invalid_argument("simulate_turin: K must be >= 2 and n >= 1");
  if (!(opt.bandwidth > 0.0)) throw std::invalid_argument("simulate_turin: bandwidth must be positive");
  const auto tw = idft_twiddles(K);
  Dataset ds(ModelTag::turin, n, K);
  for (std::size_t r = 0; r < n; ++r) {
    Rng rng(stream_seed(seed, r));
    turin_row(theta, rng, ds.row(r), tw, opt);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Model-generic front end
// ---------------------------------------------------------------------------

/// A model together with its output length (T, K, or 10) and options.
struct Simulator {
  ModelTag model = ModelTag::ricker;
  std::size_t length = 100;
  RickerOptions ricker;
  OupOptions oup;
  GaussianLinearOptions gaussian;
  TurinOptions turin;

  static Simulator defaults(ModelTag tag) {
    Simulator s;
    s.model = tag;
    switch (tag) {
      case ModelTag::ricker: s.length = 100; break;
      case ModelTag::oup: s.length = 25; break;
      case ModelTag::gaussian_linear: s.length = 10; break;
      case ModelTag::turin: s.length = 801; break;
    }
    return s;
  }

  std::size_t dim() const { return model == ModelTag::gaussian_linear ? 10 : length; }

  void validate(const ParamVector& theta) const {
    switch (model) {
      case ModelTag::ricker: validate_ricker(theta); break;
      case ModelTag::oup: detail::require_finite(theta, 2, "simulate_oup"); break;
      case ModelTag::gaussian_linear: detail::require_finite(theta, 10, "simulate_gaussian_linear"); break;
      case ModelTag::turin: validate_turin(theta); break;
    }
  }

  /// Fills one realization. `twiddles` is only read by the Turin model.
  void row(const ParamVector& theta, Rng& rng, std::span<double> out,
           std::span<const std::complex<double>> twiddles = {}) const {
    switch (model) {
      case ModelTag::ricker: ricker_row(theta, rng, out, ricker); break;
      case ModelTag::oup: oup_row(theta, rng, out, oup); break;
      case ModelTag::gaussian_linear: gaussian_linear_row(theta, rng, out, gaussian); break;
      case ModelTag::turin: turin_row(theta, rng, out, twiddles, turin); break;
    }
  }

  Dataset simulate(const ParamVector& theta, std::size_t n, std::uint64_t seed) const {
    switch (model) {
      case ModelTag::ricker: return simulate_ricker(theta, length, n, seed, ricker);
      case ModelTag::oup: return simulate_oup(theta, length, n, seed, oup);
      case ModelTag::gaussian_linear: return simulate_gaussian_linear(theta, n, seed, gaussian);
      case ModelTag::turin: return simulate_turin(theta, length, n, seed, turin);
    }
    return {};
  }

  bool operator==(const Simulator& o) const {
    return model == o.model && length == o.length && ricker.sigma_e2 == o.ricker.sigma_e2 && oup.dt == o.oup.dt &&
           oup.x0 == o.oup.x0 && oup.noise_scale == o.oup.noise_scale &&
           gaussian.variance == o.gaussian.variance && turin.bandwidth == o.turin.bandwidth &&
           turin.paths == o.turin.paths;
  }
};

// ---------------------------------------------------------------------------
// Contamination
// ---------------------------------------------------------------------------

struct ContaminationSpec {
  double epsilon = 0.0;
  ParamVector theta_true;
  ParamVector theta_c;

  void validate() const {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("contamination epsilon must lie in [0, 1]");
  }
};

inline std::size_t contaminated_count(double epsilon, std::size_t n) {
  return static_cast<std::size_t>(std::llround(epsilon * static_cast<double>(n)));
}

/// Sorted indices of the rows drawn at theta_c: a uniformly random subset of
/// size round(epsilon * n) chosen from stream (seed, "contamination").
inline std::vector<std::size_t> contaminated_rows(double epsilon, std::size_t n, std::uint64_t seed) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("contamination epsilon must lie in [0, 1]");
  const std::size_t k = contaminated_count(epsilon, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(stream_seed(seed, "contamination"));
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Observed data from (1 - eps) P_true + eps P_c. Row r keeps its own stream,
/// so eps = 0 and eps = 1 reproduce the plain simulator bit for bit.
inline Dataset contaminate(const Simulator& sim, const ContaminationSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  if (n < 1) throw std::invalid_argument("contaminate: n must be >= 1");
  sim.validate(spec.theta_true);
  const auto rows = contaminated_rows(spec.epsilon, n, seed);
  if (!rows.empty()) sim.validate(spec.theta_c);
  std::vector<bool> from_c(n, false);
  for (const auto r : rows) from_c[r] = true;
  const auto tw = sim.model == ModelTag::turin ? idft_twiddles(sim.length) : std::vector<std::complex<double>>{};
  Dataset ds(sim.model, n, sim.dim());
  for (std::size_t r = 0; r < n; ++r) {
    Rng rng(stream_seed(seed, r));
    sim.row(from_c[r] ? spec.theta_c : spec.theta_true, rng, ds.row(r), tw);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Training sets
// ---------------------------------------------------------------------------

struct PairSeeds {
  std::uint64_t theta;
  std::uint64_t data;
};

/// Seeds of pair i; every pair is reproducible from (seed, i) alone.
inline PairSeeds pair_seeds(std::uint64_t seed, std::size_t i) {
  const auto base = stream_seed(seed, static_cast<std::uint64_t>(i));
  return {stream_seed(base, "theta"), stream_seed(base, "data")};
}

struct TrainingSet {
  Simulator simulator;
  PriorSpec prior;
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::vector<ParamVector> thetas;
  std::vector<Dataset> data;

  std::size_t m() const { return thetas.size(); }
  std::size_t d() const { return simulator.dim(); }
};

inline std::pair<ParamVector, Dataset> generate_pair(const Simulator& sim, const PriorSpec& prior, std::size_t n,
                                                     std::uint64_t seed, std::size_t i) {
  const auto s = pair_seeds(seed, i);
  auto theta = sample_prior(prior, 1, s.theta).front();
  auto data = sim.simulate(theta, n, s.data);
  return {std::move(theta), std::move(data)};
}

inline TrainingSet generate_training_set(const Simulator& sim, const PriorSpec& prior, std::size_t m, std::size_t n,
                                         std::uint64_t seed) {
  if (m < 1 || n < 1) throw std::invalid_argument("generate_training_set: m and n must be >= 1");
  prior.validate();
  if (prior.size() != param_count(sim.model)) throw std::invalid_argument("prior dimension does not match model");
  TrainingSet ts{sim, prior, seed, n, {}, {}};
  ts.thetas.reserve(m);
  ts.data.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    auto [theta, data] = generate_pair(sim, prior, n, seed, i);
    ts.thetas.push_back(std::move(theta));
    ts.data.push_back(std::move(data));
  }
  return ts;
}

// ---------------------------------------------------------------------------
// Persistence: text header + little-endian float64 block
// ---------------------------------------------------------------------------

inline void write_simulator_header(io::TextHeader& h, const Simulator& sim) {
  h.set("model", std::string(to_string(sim.model)));
  h.set("length", std::to_string(sim.length));
  h.set("ricker-sigma-e2", io::format_double(sim.ricker.sigma_e2));
  h.set("oup-dt", io::format_double(sim.oup.dt));
  h.set("oup-x0", io::format_double(sim.oup.x0));
  h.set("oup-noise-scale", io::format_double(sim.oup.noise_scale));
  h.set("gaussian-variance", io::format_double(sim.gaussian.variance));
  h.set("turin-bandwidth", io::format_double(sim.turin.bandwidth));
}

inline Simulator read_simulator_header(const io::TextHeader& h) {
  auto sim = Simulator::defaults(parse_model_tag(h.get("model")));
  sim.length = std::stoul(h.get("length"));
  sim.ricker.sigma_e2 = io::parse_double(h.get("ricker-sigma-e2"));
  sim.oup.dt = io::parse_double(h.get("oup-dt"));
  sim.oup.x0 = io::parse_double(h.get("oup-x0"));
  sim.oup.noise_scale = io::parse_double(h.get("oup-noise-scale"));
  sim.gaussian.variance = io::parse_double(h.get("gaussian-variance"));
  sim.turin.bandwidth = io::parse_double(h.get("turin-bandwidth"));
  return sim;
}

inline std::string serialize_training_set(const TrainingSet& ts, const io::TextHeader& extra = {}) {
  io::TextHeader h;
  h.set("format", "rsbi-training-set-v1");
  for (const auto& [k, v] : extra.entries()) h.set(k, v);
  write_simulator_header(h, ts.simulator);
  h.set("m", std::to_string(ts.m()));
  h.set("n", std::to_string(ts.n));
  h.set("d", std::to_string(ts.d()));
  h.set("k", std::to_string(ts.prior.size()));
  h.set("seed", std::to_string(ts.seed));
  h.set("prior", ts.prior.to_string());
  std::string out = h.serialize();
  for (std::size_t i = 0; i < ts.m(); ++i) {
    io::append_le_doubles(out, ts.thetas[i].values);
    io::append_le_doubles(out, ts.data[i].values);
  }
  return out;
}

inline TrainingSet parse_training_set(std::string_view bytes) {
  const auto h = io::TextHeader::parse(bytes);
  if (h.get("format") != "rsbi-training-set-v1") throw IoError("not a training-set file");
  TrainingSet ts;
  ts.simulator = read_simulator_header(h);
  ts.prior = PriorSpec::parse(h.get("prior"));
  ts.seed = std::stoull(h.get("seed"));
  ts.n = std::stoul(h.get("n"));
  const auto m = std::stoul(h.get("m"));
  const auto d = std::stoul(h.get("d"));
  const auto k = std::stoul(h.get("k"));
  if (d != ts.simulator.dim() || k != ts.prior.size()) throw IoError("training-set header is inconsistent");
  for (std::size_t i = 0; i < m; ++i) {
    ParamVector theta{std::vector<double>(k)};
    io::read_le_doubles(bytes, theta.values);
    Dataset ds(ts.simulator.model, ts.n, d);
    io::read_le_doubles(bytes, ds.values);
    ts.thetas.push_back(std::move(theta));
    ts.data.push_back(std::move(ds));
  }
  if (!bytes.empty()) throw IoError("trailing bytes after training-set block");
  return ts;
}

inline std::string serialize_dataset(const Dataset& ds, const io::TextHeader& extra = {}) {
  io::TextHeader h;
  h.set("format", "rsbi-dataset-v1");
  for (const auto& [k, v] : extra.entries()) h.set(k, v);
  h.set("model", std::string(to_string(ds.model)));
  h.set("n", std::to_string(ds.n));
  h.set("d", std::to_string(ds.d));
  std::string out = h.serialize();
  io::append_le_doubles(out, ds.values);
  return out;
}

inline Dataset parse_dataset(std::string_view bytes, io::TextHeader* header_out = nullptr) {
  const auto h = io::TextHeader::parse(bytes);
  if (h.get("format") != "rsbi-dataset-v1") throw IoError("not a dataset file");
  Dataset ds(parse_model_tag(h.get("model")), std::stoul(h.get("n")), std::stoul(h.get("d")));
  io::read_le_doubles(bytes, ds.values);
  if (!bytes.empty()) throw IoError("trailing bytes after dataset block");
  if (header_out) *header_out = h;
  return ds;
}

}  // namespace rsbi
