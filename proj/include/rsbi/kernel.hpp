#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "rsbi/types.hpp"

namespace rsbi {

/// Exponentiated-quadratic kernel k(s, s') = exp(-||s - s'||^2 / beta^2).
struct KernelConfig {
  double beta = 1.0;

  void validate() const {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw std::invalid_argument("kernel lengthscale must be positive");
  }
};

namespace detail {

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double diff = a[k] - b[k];
    acc += diff * diff;
  }
  return acc;
}

inline double sum_kernel_self(const StatSet& x, double inv_beta2) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.rows; ++j) acc += std::exp(-squared_distance(x.row(i), x.row(j)) * inv_beta2);
  return acc;
}

inline double sum_kernel_cross(const StatSet& x, const StatSet& y, double inv_beta2) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < y.rows; ++j) acc += std::exp(-squared_distance(x.row(i), y.row(j)) * inv_beta2);
  return acc;
}

inline void require_stats(const StatSet& s, std::size_t p, const char* who) {
  if (s.rows == 0) throw std::invalid_argument(std::string(who) + ": empty statistic set");
  if (s.cols != p) throw std::invalid_argument(std::string(who) + ": statistic dimension mismatch");
}

}  // namespace detail

inline double kernel_eval(std::span<const double> a, std::span<const double> b, const KernelConfig& cfg) {
  if (a.size() != b.size()) throw std::invalid_argument("kernel_eval: dimension mismatch");
  cfg.validate();
  return std::exp(-detail::squared_distance(a, b) / (cfg.beta * cfg.beta));
}

/// beta = sqrt(med / 2), med the lower median of squared distances over all
/// distinct pairs i < j.
/// The pair of rows whose squared distance is the lower median over all
/// distinct pairs. Ties resolve to the lexicographically first pair.
struct MedianPair {
  std::size_t a = 0, b = 0;
  double d2 = 0.0;
};

inline MedianPair median_pair(const StatSet& stats) {
  if (stats.rows < 2) throw std::invalid_argument("median_heuristic: need at least two points");
  std::vector<MedianPair> pairs;
  pairs.reserve(stats.rows * (stats.rows - 1) / 2);
  for (std::size_t i = 0; i < stats.rows; ++i)
    for (std::size_t j = i + 1; j < stats.rows; ++j)
      pairs.push_back({i, j, detail::squared_distance(stats.row(i), stats.row(j))});
  const auto mid = pairs.begin() + static_cast<std::ptrdiff_t>((pairs.size() - 1) / 2);
  std::nth_element(pairs.begin(), mid, pairs.end(), [](const MedianPair& x, const MedianPair& y) {
    return x.d2 != y.d2 ? x.d2 < y.d2 : (x.a != y.a ? x.a < y.a : x.b < y.b);
  });
  return *mid;
}

inline double median_heuristic(const StatSet& stats) {
  const auto mp = median_pair(stats);
  if (!(mp.d2 > 0.0)) throw std::domain_error("median_heuristic: points coincide, bandwidth would be zero");
  return std::sqrt(mp.d2 / 2.0);
}

/// V-statistic MMD^2 between l simulated statistics and one observed
/// statistic, without the constant k(obs, obs) term:
/// (1/l^2) sum_ij k(s_i, s_j) - (2/l) sum_i k(s_i, obs).
inline double mmd_sq_vstat(const StatSet& sim, std::span<const double> obs, const KernelConfig& cfg) {
  detail::require_stats(sim, obs.size(), "mmd_sq_vstat");
  cfg.validate();
  const double inv_b2 = 1.0 / (cfg.beta * cfg.beta);
  const double l = static_cast<double>(sim.rows);
  const StatSet o(1, obs.size(), std::vector<double>(obs.begin(), obs.end()));
  return detail::sum_kernel_self(sim, inv_b2) / (l * l) - 2.0 * detail::sum_kernel_cross(sim, o, inv_b2) / l;
}

/// Full V-statistic MMD^2 between two sample sets. The arguments are put in a
/// canonical order first so swapping them gives a bit-identical value.
inline double mmd_sq_full(const StatSet& x, const StatSet& y, const KernelConfig& cfg) {
  detail::require_stats(x, x.cols, "mmd_sq_full");
  detail::require_stats(y, x.cols, "mmd_sq_full");
  cfg.validate();
  const bool swap = y.rows < x.rows || (y.rows == x.rows && y.values < x.values);
  const StatSet& a = swap ? y : x;
  const StatSet& b = swap ? x : y;
  const double inv_b2 = 1.0 / (cfg.beta * cfg.beta);
  const double la = static_cast<double>(a.rows);
  const double lb = static_cast<double>(b.rows);
  return detail::sum_kernel_self(a, inv_b2) / (la * la) - 2.0 * detail::sum_kernel_cross(a, b, inv_b2) / (la * lb) +
         detail::sum_kernel_self(b, inv_b2) / (lb * lb);
}

struct MmdGradient {
  double value = 0.0;
  Matrix d_sim;         // l x p
  SummaryStat d_obs;    // p
  double beta = 0.0;    // bandwidth the value was computed with
};

/// mmd_sq_vstat together with its exact gradient with respect to every entry
/// of `sim` and `obs`. The bandwidth is held constant.
inline MmdGradient mmd_sq_vstat_grad(const StatSet& sim, std::span<const double> obs, const KernelConfig& cfg) {
  detail::require_stats(sim, obs.size(), "mmd_sq_vstat_grad");
  cfg.validate();
  const std::size_t l = sim.rows, p = sim.cols;
  const double inv_b2 = 1.0 / (cfg.beta * cfg.beta);
  const double ld = static_cast<double>(l);
  MmdGradient g;
  g.d_sim = Matrix(l, p);
  g.d_obs.assign(p, 0.0);

  // Same summation order as mmd_sq_vstat so the values agree bit for bit.
  double self = 0.0;
  const double c_self = -4.0 * inv_b2 / (ld * ld);
  for (std::size_t i = 0; i < l; ++i) {
    for (std::size_t j = 0; j < l; ++j) {
      const double kij = std::exp(-detail::squared_distance(sim.row(i), sim.row(j)) * inv_b2);
      self += kij;
      if (i == j) continue;
      // d/ds_i of the (i,j) and (j,i) terms together; the j side is added when
      // the loop visits (j, i).
      for (std::size_t k = 0; k < p; ++k) g.d_sim(i, k) += c_self * (sim(i, k) - sim(j, k)) * kij;
    }
  }
  double cross = 0.0;
  const double c_cross = 4.0 * inv_b2 / ld;
  for (std::size_t i = 0; i < l; ++i) {
    const double kio = std::exp(-detail::squared_distance(sim.row(i), obs) * inv_b2);
    cross += kio;
    for (std::size_t k = 0; k < p; ++k) {
      const double diff = sim(i, k) - obs[k];
      g.d_sim(i, k) += c_cross * diff * kio;
      g.d_obs[k] -= c_cross * diff * kio;
    }
  }
  g.value = self / (ld * ld) - 2.0 * cross / ld;
  return g;
}

/// mmd_sq_vstat with beta = median_heuristic(sim) recomputed from the inputs,
/// and the gradient taken through beta as well. The value is invariant under a
/// joint rescaling of sim and obs.
inline MmdGradient mmd_sq_vstat_grad_adaptive(const StatSet& sim, std::span<const double> obs) {
  detail::require_stats(sim, obs.size(), "mmd_sq_vstat_grad_adaptive");
  const auto mp = median_pair(sim);
  if (!(mp.d2 > 0.0)) throw std::domain_error("median_heuristic: points coincide, bandwidth would be zero");
  const double beta = std::sqrt(mp.d2 / 2.0);
  auto g = mmd_sq_vstat_grad(sim, obs, KernelConfig{beta});
  g.beta = beta;

  // dV/dbeta, with dk/dbeta = k * 2 d^2 / beta^3.
  const std::size_t l = sim.rows, p = sim.cols;
  const double ld = static_cast<double>(l);
  const double inv_b2 = 1.0 / (beta * beta);
  double dself = 0.0, dcross = 0.0;
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < l; ++j) {
      if (i == j) continue;
      const double d2 = detail::squared_distance(sim.row(i), sim.row(j));
      dself += std::exp(-d2 * inv_b2) * d2;
    }
  for (std::size_t i = 0; i < l; ++i) {
    const double d2 = detail::squared_distance(sim.row(i), obs);
    dcross += std::exp(-d2 * inv_b2) * d2;
  }
  const double dv_dbeta = 2.0 * inv_b2 / beta * (dself / (ld * ld) - 2.0 * dcross / ld);
  // beta = sqrt(d2_ab / 2): dbeta/ds_a = (s_a - s_b) / (2 beta).
  for (std::size_t k = 0; k < p; ++k) {
    const double v = dv_dbeta * (sim(mp.a, k) - sim(mp.b, k)) / (2.0 * beta);
    g.d_sim(mp.a, k) += v;
    g.d_sim(mp.b, k) -= v;
  }
  return g;
}

/// Mean Euclidean distance from each simulated statistic to the observed one.
inline double euclidean_regularizer(const StatSet& sim, std::span<const double> obs) {
  detail::require_stats(sim, obs.size(), "euclidean_regularizer");
  double acc = 0.0;
  for (std::size_t i = 0; i < sim.rows; ++i) acc += std::sqrt(detail::squared_distance(sim.row(i), obs));
  return acc / static_cast<double>(sim.rows);
}

/// Gradient of euclidean_regularizer. Zero-distance rows take the zero
/// subgradient.
inline MmdGradient euclidean_regularizer_grad(const StatSet& sim, std::span<const double> obs) {
  detail::require_stats(sim, obs.size(), "euclidean_regularizer_grad");
  const std::size_t l = sim.rows, p = sim.cols;
  MmdGradient g;
  g.d_sim = Matrix(l, p);
  g.d_obs.assign(p, 0.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < l; ++i) {
    const double dist = std::sqrt(detail::squared_distance(sim.row(i), obs));
    acc += dist;
    if (dist == 0.0) continue;
    for (std::size_t k = 0; k < p; ++k) {
      const double gk = (sim(i, k) - obs[k]) / (dist * static_cast<double>(l));
      g.d_sim(i, k) = gk;
      g.d_obs[k] -= gk;
    }
  }
  g.value = acc / static_cast<double>(l);
  return g;
}

}  // namespace rsbi
