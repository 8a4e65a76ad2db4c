#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rsbi/io.hpp"
#include "rsbi/networks.hpp"
#include "rsbi/rng.hpp"
#include "rsbi/simulators.hpp"
#include "rsbi/types.hpp"

namespace rsbi {

/// N parameter draws (rows) plus provenance.
struct PosteriorSamples {
  Matrix samples;
  io::TextHeader metadata;  // method, lambda, epsilon, seed, model, ...
  std::vector<std::string> warnings;

  std::size_t size() const { return samples.rows; }
  std::size_t dim() const { return samples.cols; }
  std::span<const double> row(std::size_t i) const { return samples.row(i); }

  void validate() const {
    if (samples.rows < 1) throw std::invalid_argument("posterior sample set is empty");
    if (!all_finite(samples.values)) throw NumericError("non-finite posterior sample");
  }
};

inline std::string posterior_csv(const PosteriorSamples& ps, std::string_view header_comment = {}) {
  std::string out;
  if (!header_comment.empty()) out += "# " + std::string(header_comment) + "\n";
  for (std::size_t j = 0; j < ps.dim(); ++j) {
    if (j) out += ',';
    out += "theta_" + std::to_string(j + 1);
  }
  out += '\n';
  for (std::size_t i = 0; i < ps.size(); ++i) out += io::join_doubles(ps.row(i)) + "\n";
  return out;
}

/// Sidecar text block: metadata lines followed by one "warning" line each.
inline std::string posterior_meta(const PosteriorSamples& ps, std::string_view header_comment = {}) {
  std::string out;
  if (!header_comment.empty()) out += "# " + std::string(header_comment) + "\n";
  io::TextHeader h = ps.metadata;
  h.set("samples", std::to_string(ps.size()));
  h.set("dim", std::to_string(ps.dim()));
  out += h.serialize();
  for (const auto& w : ps.warnings) out += "warning " + w + "\n";
  return out;
}

inline PosteriorSamples parse_posterior_csv(std::string_view text) {
  PosteriorSamples ps;
  std::size_t cols = 0;
  std::vector<double> values;
  bool header_seen = false;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    if (!header_seen) {
      cols = io::split(line, ',').size();
      header_seen = true;
      continue;
    }
    std::vector<double> row;
    try {
      row = io::parse_doubles(line);
    } catch (const std::invalid_argument&) {
      throw IoError("posterior CSV line " + std::to_string(line_no) + " is not numeric");
    }
    if (row.size() != cols) throw IoError("posterior CSV line " + std::to_string(line_no) + " has the wrong width");
    values.insert(values.end(), row.begin(), row.end());
  }
  if (!header_seen || values.empty()) throw IoError("posterior CSV has no samples");
  const std::size_t rows = values.size() / cols;
  ps.samples = Matrix(rows, cols, std::move(values));
  return ps;
}

// ---------------------------------------------------------------------------
// Neural posterior estimation
// ---------------------------------------------------------------------------

/// Mixture parameters for the observed dataset under a trained checkpoint.
inline MixtureParams npe_mixture(const Checkpoint& ck, const Dataset& obs) {
  if (!ck.mdn) throw std::invalid_argument("checkpoint has no mixture head");
  const Encoder enc(ck.encoder);
  const auto s = enc.encode(ck.encoder_params.values, obs);
  return Mdn(*ck.mdn).forward(ck.mdn_params.values, s);
}

/// Samples may fall outside the prior support; they are kept.
inline PosteriorSamples npe_posterior(const Checkpoint& ck, const Dataset& obs, std::size_t N, std::uint64_t seed) {
  const auto nu = npe_mixture(ck, obs);
  PosteriorSamples ps;
  ps.samples = mdn_sample(nu, N, seed);
  ps.metadata.set("method", ck.method);
  ps.metadata.set("model", std::string(to_string(ck.simulator.model)));
  ps.metadata.set("sample-seed", std::to_string(seed));
  for (const auto& [k, v] : ck.metadata.entries()) ps.metadata.set(k, v);
  return ps;
}

// ---------------------------------------------------------------------------
// Rejection ABC
// ---------------------------------------------------------------------------

struct AbcConfig {
  std::size_t draws = 4000;
  double quantile = 0.05;

  void validate() const {
    if (draws < 1) throw std::invalid_argument("ABC needs at least one prior draw");
    if (!(quantile > 0.0 && quantile <= 1.0)) throw std::invalid_argument("ABC quantile must lie in (0, 1]");
  }

  std::size_t accepted() const {
    const double target = quantile * static_cast<double>(draws);
    auto k = static_cast<std::size_t>(std::ceil(target - 1e-9 * target));
    return std::clamp<std::size_t>(k, 1, draws);
  }
};

struct AbcResult {
  std::vector<std::size_t> indices;  // accepted draw indices, closest first
  Matrix thetas;                     // accepted parameters
  StatSet stats;                     // accepted statistics, raw
  StatSet stats_normalized;          // accepted statistics / MAD scale
  SummaryStat obs_stat;
  SummaryStat obs_normalized;
  std::vector<double> scales;        // unscaled MAD per coordinate
  std::vector<double> distances;
  std::vector<std::string> warnings;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty set");
  const auto n = v.size();
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (n % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

/// Median absolute deviation per column (no consistency factor). A zero
/// scale is replaced by 1 and reported in `warnings`.
inline std::vector<double> mad_scales(const StatSet& stats, std::vector<std::string>* warnings = nullptr) {
  std::vector<double> scales(stats.cols);
  std::vector<double> col(stats.rows);
  for (std::size_t k = 0; k < stats.cols; ++k) {
    for (std::size_t i = 0; i < stats.rows; ++i) col[i] = stats(i, k);
    const double med = median_of(col);
    for (std::size_t i = 0; i < stats.rows; ++i) col[i] = std::fabs(stats(i, k) - med);
    double mad = median_of(col);
    if (!(mad > 0.0)) {
      if (warnings) warnings->push_back("statistic coordinate " + std::to_string(k) + " has zero MAD; scale set to 1");
      mad = 1.0;
    }
    scales[k] = mad;
  }
  return scales;
}

/// Rank prior draws by MAD-normalized Euclidean distance to the observed
/// statistic and keep the closest ceil(quantile * draws); ties go to the
/// lower draw index.
inline AbcResult abc_accept(const Matrix& thetas, const StatSet& stats, std::span<const double> obs_stat,
                            const AbcConfig& cfg) {
  cfg.validate();
  if (thetas.rows != stats.rows || stats.rows != cfg.draws)
    throw std::invalid_argument("abc_accept: draw count mismatch");
  if (obs_stat.size() != stats.cols) throw std::invalid_argument("abc_accept: statistic dimension mismatch");
  AbcResult res;
  res.scales = mad_scales(stats, &res.warnings);
  const std::size_t p = stats.cols, M = stats.rows;
  res.obs_stat.assign(obs_stat.begin(), obs_stat.end());
  res.obs_normalized.resize(p);
  for (std::size_t k = 0; k < p; ++k) res.obs_normalized[k] = obs_stat[k] / res.scales[k];
  std::vector<double> dist(M);
  for (std::size_t i = 0; i < M; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < p; ++k) {
      const double diff = stats(i, k) / res.scales[k] - res.obs_normalized[k];
      acc += diff * diff;
    }
    dist[i] = std::sqrt(acc);
  }
  std::vector<std::size_t> order(M);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  const auto keep = cfg.accepted();
  order.resize(keep);
  res.indices = order;
  res.thetas = Matrix(keep, thetas.cols);
  res.stats = StatSet(keep, p);
  res.stats_normalized = StatSet(keep, p);
  res.distances.resize(keep);
  for (std::size_t q = 0; q < keep; ++q) {
    const auto i = order[q];
    std::copy(thetas.row(i).begin(), thetas.row(i).end(), res.thetas.row(q).begin());
    for (std::size_t k = 0; k < p; ++k) {
      res.stats(q, k) = stats(i, k);
      res.stats_normalized(q, k) = stats(i, k) / res.scales[k];
    }
    res.distances[q] = dist[i];
  }
  return res;
}

/// Prior draws and their encoded simulations. Draw i uses pair_seeds(seed, i).
struct PriorPredictiveStats {
  Matrix thetas;
  StatSet stats;
};

inline PriorPredictiveStats encode_prior_predictive(const Encoder& enc, std::span<const double> psi,
                                                    const Simulator& sim, const PriorSpec& prior, std::size_t draws,
                                                    std::size_t n, std::uint64_t seed) {
  PriorPredictiveStats out{Matrix(draws, prior.size()), StatSet(draws, enc.config().stat_dim)};
  EncoderTape tape;
  for (std::size_t i = 0; i < draws; ++i) {
    const auto [theta, data] = generate_pair(sim, prior, n, seed, i);
    std::copy(theta.values.begin(), theta.values.end(), out.thetas.row(i).begin());
    const auto s = enc.forward(psi, data, tape);
    std::copy(s.begin(), s.end(), out.stats.row(i).begin());
  }
  return out;
}

/// Simulates cfg.draws prior-predictive datasets of obs.n realizations,
/// encodes them with the checkpoint's encoder and applies abc_accept.
inline AbcResult rejection_abc(const Checkpoint& ck, const Simulator& sim, const PriorSpec& prior, const Dataset& obs,
                               const AbcConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  prior.validate();
  if (obs.d != sim.dim()) throw std::invalid_argument("rejection_abc: observed data dimension mismatch");
  const Encoder enc(ck.encoder);
  const auto s_obs = enc.encode(ck.encoder_params.values, obs);
  const auto pp = encode_prior_predictive(enc, ck.encoder_params.values, sim, prior, cfg.draws, obs.n, seed);
  return abc_accept(pp.thetas, pp.stats, s_obs, cfg);
}

struct RegressionFit {
  std::vector<double> intercept;  // k
  Matrix slope;                   // k x p
  bool adjusted = true;
};

/// Least squares theta_i = a + B s_i + w_i over the accepted pairs; outputs
/// a + B s_obs + w_i. Rank deficiency returns the inputs unchanged with a
/// warning.
inline PosteriorSamples regression_adjust(const Matrix& thetas, const StatSet& stats, std::span<const double> s_obs,
                                          RegressionFit* fit_out = nullptr) {
  const std::size_t N = thetas.rows, k = thetas.cols, p = stats.cols;
  if (stats.rows != N) throw std::invalid_argument("regression_adjust: pair count mismatch");
  if (s_obs.size() != p) throw std::invalid_argument("regression_adjust: statistic dimension mismatch");
  if (N < p + 2) throw std::invalid_argument("regression_adjust: need at least p + 2 accepted pairs");
  PosteriorSamples ps;
  ps.samples = thetas;
  Eigen::MatrixXd X(N, p + 1);
  Eigen::MatrixXd Y(N, k);
  for (std::size_t i = 0; i < N; ++i) {
    X(i, 0) = 1.0;
    for (std::size_t c = 0; c < p; ++c) X(i, c + 1) = stats(i, c);
    for (std::size_t j = 0; j < k; ++j) Y(i, j) = thetas(i, j);
  }
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  RegressionFit fit;
  if (qr.rank() < static_cast<Eigen::Index>(p + 1)) {
    ps.warnings.push_back("regression design matrix is rank deficient; samples left unadjusted");
    fit.adjusted = false;
    if (fit_out) *fit_out = fit;
    return ps;
  }
  const Eigen::MatrixXd coef = qr.solve(Y);  // (p+1) x k
  fit.intercept.resize(k);
  fit.slope = Matrix(k, p);
  for (std::size_t j = 0; j < k; ++j) {
    fit.intercept[j] = coef(0, static_cast<Eigen::Index>(j));
    for (std::size_t c = 0; c < p; ++c) fit.slope(j, c) = coef(static_cast<Eigen::Index>(c + 1), static_cast<Eigen::Index>(j));
  }
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double shift = 0.0;
      for (std::size_t c = 0; c < p; ++c) shift += fit.slope(j, c) * (s_obs[c] - stats(i, c));
      ps.samples(i, j) = thetas(i, j) + shift;
    }
  }
  if (fit_out) *fit_out = fit;
  return ps;
}

/// ABC posterior: accepted draws, regression-adjusted toward the observed
/// statistic in MAD-normalized space.
inline PosteriorSamples abc_posterior(const AbcResult& res, bool adjust = true) {
  PosteriorSamples ps;
  if (adjust) {
    ps = regression_adjust(res.thetas, res.stats_normalized, res.obs_normalized);
  } else {
    ps.samples = res.thetas;
  }
  ps.warnings.insert(ps.warnings.begin(), res.warnings.begin(), res.warnings.end());
  ps.metadata.set("mad-scale", "unscaled");
  ps.metadata.set("accepted", std::to_string(res.indices.size()));
  return ps;
}

}  // namespace rsbi
