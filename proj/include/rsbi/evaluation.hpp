#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsbi/inference.hpp"
#include "rsbi/io.hpp"
#include "rsbi/kernel.hpp"
#include "rsbi/simulators.hpp"
#include "rsbi/types.hpp"

namespace rsbi {

/// sqrt((1/N) sum_i ||theta_i - theta_true||^2).
inline double rmse(const PosteriorSamples& ps, std::span<const double> theta_true) {
  if (ps.size() == 0) throw std::invalid_argument("rmse: empty sample set");
  if (ps.dim() != theta_true.size()) throw std::invalid_argument("rmse: dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) acc += detail::squared_distance(ps.row(i), theta_true);
  return std::sqrt(acc / static_cast<double>(ps.size()));
}

/// Fraction of samples with any coordinate outside its prior support.
inline double frac_outside_prior(const PosteriorSamples& ps, const PriorSpec& prior) {
  if (ps.size() == 0) return 0.0;
  if (ps.dim() != prior.size()) throw std::invalid_argument("frac_outside_prior: dimension mismatch");
  std::size_t outside = 0;
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (!prior.contains(ps.row(i))) ++outside;
  return static_cast<double>(outside) / static_cast<double>(ps.size());
}

/// Nearest parameter the simulator accepts: Ricker theta2 < 0 becomes 0,
/// non-positive Turin parameters become the smallest positive double.
inline ParamVector clamp_to_simulator_domain(const Simulator& sim, ParamVector theta, bool* changed = nullptr) {
  bool c = false;
  if (sim.model == ModelTag::ricker && theta[1] < 0.0) {
    theta[1] = 0.0;
    c = true;
  }
  if (sim.model == ModelTag::turin) {
    for (auto& v : theta.values)
      if (!(v > 0.0)) {
        v = std::numeric_limits<double>::min();
        c = true;
      }
  }
  if (changed) *changed = c;
  return theta;
}

/// mmd_sq_full after per-column standardization by `reference` and division
/// by sqrt(d).
inline double standardized_mmd(StatSet a, StatSet reference, double beta) {
  const std::size_t d = reference.cols;
  if (a.cols != d) throw std::invalid_argument("standardized_mmd: dimension mismatch");
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  const double n = static_cast<double>(reference.rows);
  for (std::size_t r = 0; r < reference.rows; ++r)
    for (std::size_t t = 0; t < d; ++t) mean[t] += reference(r, t);
  for (auto& v : mean) v /= n;
  for (std::size_t r = 0; r < reference.rows; ++r)
    for (std::size_t t = 0; t < d; ++t) sd[t] += (reference(r, t) - mean[t]) * (reference(r, t) - mean[t]);
  const double root_d = std::sqrt(static_cast<double>(d));
  for (auto& v : sd) {
    v = std::sqrt(v / n);
    if (!(v > 0.0)) v = 1.0;
    v *= root_d;
  }
  auto standardize = [&](StatSet& s) {
    for (std::size_t r = 0; r < s.rows; ++r)
      for (std::size_t t = 0; t < d; ++t) s(r, t) = (s(r, t) - mean[t]) / sd[t];
  };
  standardize(a);
  standardize(reference);
  return mmd_sq_full(a, reference, KernelConfig{beta});
}

struct PredictiveConfig {
  std::size_t max_thetas = 100;  // posterior draws used, taken from the front
  std::size_t n_sim = 10;        // realizations simulated per draw
  double beta = 1.0;
};

/// Pools realizations simulated at the first max_thetas posterior draws and
/// compares them with the observed realizations by mmd_sq_full. Every
/// coordinate is standardized by the observed mean and standard deviation
/// and the vectors are divided by sqrt(d), so beta = 1 is on the scale of a
/// typical distance.
inline double predictive_mmd(const PosteriorSamples& ps, const Simulator& sim, const Dataset& obs,
                             const PredictiveConfig& cfg, std::uint64_t seed,
                             std::vector<std::string>* warnings = nullptr) {
  if (obs.n < 1) throw std::invalid_argument("predictive_mmd: empty observed data");
  if (ps.size() == 0) throw std::invalid_argument("predictive_mmd: empty sample set");
  if (obs.d != sim.dim()) throw std::invalid_argument("predictive_mmd: observed dimension mismatch");
  const std::size_t d = obs.d;
  const std::size_t T = std::min(cfg.max_thetas, ps.size());
  StatSet pool(T * cfg.n_sim, d);
  std::size_t clamped = 0;
  for (std::size_t i = 0; i < T; ++i) {
    bool changed = false;
    const auto theta =
        clamp_to_simulator_domain(sim, ParamVector(std::vector<double>(ps.row(i).begin(), ps.row(i).end())), &changed);
    if (changed) ++clamped;
    const auto ds = sim.simulate(theta, cfg.n_sim, stream_seed(seed, i));
    std::copy(ds.values.begin(), ds.values.end(), pool.values.begin() + static_cast<std::ptrdiff_t>(i * cfg.n_sim * d));
  }
  if (clamped && warnings)
    warnings->push_back(std::to_string(clamped) + " posterior draws clamped to the simulator domain");
  StatSet observed(obs.n, d, obs.values);
  return standardized_mmd(pool, observed, cfg.beta);
}

/// mmd_sq_full between two parameter sample sets, bandwidth from the median
/// heuristic on the pooled set.
inline double posterior_mmd(const PosteriorSamples& a, const PosteriorSamples& b) {
  if (a.size() == 0 || b.size() == 0) throw std::invalid_argument("posterior_mmd: empty sample set");
  if (a.dim() != b.dim()) throw std::invalid_argument("posterior_mmd: dimension mismatch");
  StatSet pooled(a.size() + b.size(), a.dim());
  std::copy(a.samples.values.begin(), a.samples.values.end(), pooled.values.begin());
  std::copy(b.samples.values.begin(), b.samples.values.end(),
            pooled.values.begin() + static_cast<std::ptrdiff_t>(a.samples.values.size()));
  double beta = 1.0;
  try {
    beta = median_heuristic(pooled);
  } catch (const std::domain_error&) {
    // all points coincide; any bandwidth gives zero
  }
  return mmd_sq_full(a.samples, b.samples, KernelConfig{beta});
}

/// Prior draws wrapped as a sample set.
inline PosteriorSamples prior_samples(const PriorSpec& prior, std::size_t N, std::uint64_t seed) {
  const auto draws = sample_prior(prior, N, seed);
  PosteriorSamples ps;
  ps.samples = Matrix(N, prior.size());
  for (std::size_t i = 0; i < N; ++i) std::copy(draws[i].values.begin(), draws[i].values.end(), ps.samples.row(i).begin());
  ps.metadata.set("method", "prior");
  return ps;
}

struct MetricReport {
  std::string method;
  std::string model;
  double epsilon = 0.0;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  double rmse = 0.0;
  double predictive_mmd = 0.0;
  double frac_outside_prior = 0.0;
  double seconds = 0.0;
};

inline constexpr std::string_view kMetricsHeader =
    "method,model,epsilon,lambda,seed,rmse,predictive_mmd,frac_outside_prior,seconds";

inline std::string metrics_row(const MetricReport& r) {
  return r.method + "," + r.model + "," + io::format_double(r.epsilon) + "," + io::format_double(r.lambda) + "," +
         std::to_string(r.seed) + "," + io::format_double(r.rmse) + "," + io::format_double(r.predictive_mmd) + "," +
         io::format_double(r.frac_outside_prior) + "," + io::format_double(r.seconds);
}

inline std::string metrics_csv(std::span<const MetricReport> rows, std::string_view header_comment = {}) {
  std::string out;
  if (!header_comment.empty()) out += "# " + std::string(header_comment) + "\n";
  out += std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) out += metrics_row(r) + "\n";
  return out;
}

inline std::vector<MetricReport> parse_metrics_csv(std::string_view text) {
  std::vector<MetricReport> out;
  bool header = false;
  for (const auto& line : io::split(text, '\n')) {
    if (line.empty() || line.front() == '#') continue;
    if (!header) {
      if (line != kMetricsHeader) throw IoError("unexpected metrics CSV header");
      header = true;
      continue;
    }
    const auto f = io::split(line, ',');
    if (f.size() != 9) throw IoError("metrics CSV row has the wrong width");
    out.push_back({f[0], f[1], io::parse_double(f[2]), io::parse_double(f[3]), std::stoull(f[4]), io::parse_double(f[5]),
                   io::parse_double(f[6]), io::parse_double(f[7]), io::parse_double(f[8])});
  }
  return out;
}

}  // namespace rsbi
