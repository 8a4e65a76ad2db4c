#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rsbi/evaluation.hpp"
#include "rsbi/inference.hpp"
#include "rsbi/kernel.hpp"
#include "rsbi/networks.hpp"
#include "rsbi/rng.hpp"
#include "rsbi/types.hpp"

namespace rsbi {

// ---------------------------------------------------------------------------
// Gaussian mixture density
// ---------------------------------------------------------------------------

struct GmmModel {
  std::vector<double> weights;             // k
  Matrix means;                            // k x p
  std::vector<Eigen::MatrixXd> covariances;  // k of p x p

  std::size_t components() const { return weights.size(); }
  std::size_t dim() const { return means.cols; }

  void validate() const {
    const auto k = weights.size();
    if (k == 0 || means.rows != k || covariances.size() != k) throw std::invalid_argument("GMM shape mismatch");
    double total = 0.0;
    for (const double w : weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("GMM weights must be non-negative");
      total += w;
    }
    if (std::fabs(total - 1.0) > 1e-12) throw std::invalid_argument("GMM weights must sum to 1");
    for (const auto& c : covariances) {
      if (c.rows() != static_cast<Eigen::Index>(dim()) || c.cols() != c.rows())
        throw std::invalid_argument("GMM covariance has the wrong shape");
      if (Eigen::LLT<Eigen::MatrixXd>(c).info() != Eigen::Success)
        throw std::invalid_argument("GMM covariance is not positive definite");
    }
  }
};

namespace detail {

/// Cholesky factors and log-determinants for repeated density evaluation.
struct GmmCache {
  std::vector<Eigen::MatrixXd> chol;  // lower
  std::vector<double> half_log_det;

  explicit GmmCache(const GmmModel& g) {
    for (const auto& c : g.covariances) {
      const Eigen::LLT<Eigen::MatrixXd> llt(c);
      if (llt.info() != Eigen::Success) throw NumericError("GMM covariance is not positive definite");
      chol.push_back(llt.matrixL());
      half_log_det.push_back(chol.back().diagonal().array().log().sum());
    }
  }

  /// log xi_c + log N(s; mu_c, Sigma_c) for every component.
  std::vector<double> log_terms(const GmmModel& g, std::span<const double> s) const {
    const auto k = g.components();
    const auto p = g.dim();
    const double half_p_log_2pi = 0.5 * static_cast<double>(p) * std::log(2.0 * std::numbers::pi);
    std::vector<double> out(k);
    Eigen::VectorXd diff(p);
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t j = 0; j < p; ++j) diff(static_cast<Eigen::Index>(j)) = s[j] - g.means(c, j);
      const Eigen::VectorXd z = chol[c].triangularView<Eigen::Lower>().solve(diff);
      out[c] = std::log(g.weights[c]) - half_p_log_2pi - half_log_det[c] - 0.5 * z.squaredNorm();
    }
    return out;
  }
};

inline Eigen::MatrixXd covariance_about(const StatSet& x, std::span<const double> mean,
                                        std::span<const double> weight) {
  const auto p = x.cols;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));
  double total = 0.0;
  for (std::size_t i = 0; i < x.rows; ++i) {
    const double w = weight.empty() ? 1.0 : weight[i];
    total += w;
    for (std::size_t a = 0; a < p; ++a)
      for (std::size_t b = 0; b < p; ++b)
        cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) += w * (x(i, a) - mean[a]) * (x(i, b) - mean[b]);
  }
  return cov / total;
}

}  // namespace detail

/// log sum_c xi_c N(s; mu_c, Sigma_c); higher means more in-distribution.
inline double gmm_score(const GmmModel& g, std::span<const double> s) {
  if (s.size() != g.dim()) throw std::invalid_argument("gmm_score: dimension mismatch");
  const detail::GmmCache cache(g);
  return detail::log_sum_exp(cache.log_terms(g, s));
}

struct GmmOptions {
  std::size_t max_iterations = 100;
  double tolerance = 1e-6;  // relative log-likelihood change
};

struct GmmFit {
  GmmModel model;
  std::vector<double> log_likelihood;  // total log-likelihood after each EM iteration
  std::vector<std::string> warnings;
};

/// EM for a k-component full-covariance mixture, k-means++ initialization.
/// Covariances are maximum-likelihood (divide by the component mass). A
/// covariance whose Cholesky factorization fails gets 1e-6 * trace / p added
/// to its diagonal and a warning.
inline GmmFit fit_gmm(const StatSet& x, std::size_t k, std::uint64_t seed, const GmmOptions& opt = {}) {
  const std::size_t l = x.rows, p = x.cols;
  if (k < 1 || p < 1) throw std::invalid_argument("fit_gmm: k and p must be >= 1");
  if (l < k * (p + 1)) throw std::invalid_argument("fit_gmm: need at least k * (p + 1) points");
  if (!all_finite(x.values)) throw NumericError("fit_gmm: non-finite statistic");
  GmmFit fit;
  Rng rng(seed);

  // k-means++ seeding.
  std::vector<std::size_t> centres{static_cast<std::size_t>(rng.below(l))};
  std::vector<double> d2(l, std::numeric_limits<double>::infinity());
  while (centres.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < l; ++i) {
      d2[i] = std::min(d2[i], detail::squared_distance(x.row(i), x.row(centres.back())));
      total += d2[i];
    }
    std::size_t pick = l - 1;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (std::size_t i = 0; i < l; ++i) {
        u -= d2[i];
        if (u < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<std::size_t>(rng.below(l));
    }
    centres.push_back(pick);
  }

  // Hard assignment to the seeds gives the starting responsibilities.
  Matrix resp(l, k);
  for (std::size_t i = 0; i < l; ++i) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      const double dd = detail::squared_distance(x.row(i), x.row(centres[c]));
      if (dd < bd) {
        bd = dd;
        best = c;
      }
    }
    resp(i, best) = 1.0;
  }

  auto& g = fit.model;
  std::vector<double> global_mean(p, 0.0);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < p; ++j) global_mean[j] += x(i, j) / static_cast<double>(l);
  const Eigen::MatrixXd global_cov = detail::covariance_about(x, global_mean, {});

  auto m_step = [&]() {
    g.weights.assign(k, 0.0);
    g.means = Matrix(k, p);
    g.covariances.assign(k, Eigen::MatrixXd());
    std::vector<double> w(l);
    for (std::size_t c = 0; c < k; ++c) {
      double mass = 0.0;
      for (std::size_t i = 0; i < l; ++i) mass += resp(i, c);
      g.weights[c] = mass / static_cast<double>(l);
      if (mass > 0.0) {
        for (std::size_t i = 0; i < l; ++i)
          for (std::size_t j = 0; j < p; ++j) g.means(c, j) += resp(i, c) * x(i, j);
        for (std::size_t j = 0; j < p; ++j) g.means(c, j) /= mass;
      } else {
        for (std::size_t j = 0; j < p; ++j) g.means(c, j) = global_mean[j];
      }
      if (mass <= static_cast<double>(p)) {
        // Too little mass for a covariance estimate.
        fit.warnings.push_back("component " + std::to_string(c) + " collapsed; global covariance used");
        g.covariances[c] = global_cov;
      } else {
        for (std::size_t i = 0; i < l; ++i) w[i] = resp(i, c);
        g.covariances[c] = detail::covariance_about(x, g.means.row(c), w);
      }
      auto& cov = g.covariances[c];
      if (Eigen::LLT<Eigen::MatrixXd>(cov).info() != Eigen::Success) {
        const double ridge = 1e-6 * std::max(cov.trace() / static_cast<double>(p), 1e-300);
        cov.diagonal().array() += ridge;
        fit.warnings.push_back("component " + std::to_string(c) + " covariance regularized");
      }
    }
    const double total = std::accumulate(g.weights.begin(), g.weights.end(), 0.0);
    for (auto& v : g.weights) v /= total;
  };

  auto e_step = [&]() {
    const detail::GmmCache cache(g);
    double ll = 0.0;
    for (std::size_t i = 0; i < l; ++i) {
      const auto a = cache.log_terms(g, x.row(i));
      const double lse = detail::log_sum_exp(a);
      ll += lse;
      for (std::size_t c = 0; c < k; ++c) resp(i, c) = std::exp(a[c] - lse);
    }
    return ll;
  };

  m_step();
  double prev = e_step();
  fit.log_likelihood.push_back(prev);
  for (std::size_t it = 1; it < opt.max_iterations; ++it) {
    m_step();
    const double ll = e_step();
    fit.log_likelihood.push_back(ll);
    if (!std::isfinite(ll)) throw NumericError("fit_gmm: log-likelihood is not finite");
    if (std::fabs(ll - prev) <= opt.tolerance * std::fabs(prev)) break;
    prev = ll;
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Distance score
// ---------------------------------------------------------------------------

/// mmd_sq_vstat(stats, s_obs); higher means more out-of-distribution.
inline double mmd_score(const StatSet& stats, std::span<const double> s_obs, const KernelConfig& cfg) {
  return mmd_sq_vstat(stats, s_obs, cfg);
}

/// mmd_score against a fixed statistic set, with the self term computed once.
class MmdScorer {
 public:
  MmdScorer(StatSet stats, KernelConfig cfg) : stats_(std::move(stats)), cfg_(cfg) {
    detail::require_stats(stats_, stats_.cols, "MmdScorer");
    cfg_.validate();
    const double l = static_cast<double>(stats_.rows);
    self_ = detail::sum_kernel_self(stats_, 1.0 / (cfg_.beta * cfg_.beta)) / (l * l);
  }

  double operator()(std::span<const double> s_obs) const {
    if (s_obs.size() != stats_.cols) throw std::invalid_argument("mmd score: dimension mismatch");
    const double inv_b2 = 1.0 / (cfg_.beta * cfg_.beta);
    const double l = static_cast<double>(stats_.rows);
    const StatSet o(1, s_obs.size(), std::vector<double>(s_obs.begin(), s_obs.end()));
    return self_ - 2.0 * detail::sum_kernel_cross(stats_, o, inv_b2) / l;
  }

 private:
  StatSet stats_;
  KernelConfig cfg_;
  double self_ = 0.0;
};

inline double rmse_score(const PosteriorSamples& ps, std::span<const double> theta_true) { return rmse(ps, theta_true); }

// ---------------------------------------------------------------------------
// ROC analysis
// ---------------------------------------------------------------------------

/// Which end of the score scale indicates the positive (misspecified) class.
enum class Polarity { higher_positive, lower_positive };

struct RocResult {
  std::vector<std::pair<double, double>> points;  // (fpr, tpr), fpr non-decreasing
  double auroc = 0.5;
};

/// ROC curve over all distinct thresholds. Tied scores form one diagonal
/// step, so the trapezoidal area equals the midrank (Mann-Whitney) AUROC.
inline RocResult auroc(std::span<const double> scores, std::span<const int> labels, Polarity polarity) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auroc: size mismatch");
  std::size_t n_pos = 0, n_neg = 0;
  for (const int y : labels) (y ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auroc: both classes must be present");
  for (const double s : scores)
    if (std::isnan(s)) throw std::invalid_argument("auroc: NaN score");
  std::vector<double> key(scores.begin(), scores.end());
  if (polarity == Polarity::lower_positive)
    for (auto& v : key) v = -v;
  std::vector<std::size_t> order(key.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key[a] > key[b]; });
  RocResult res;
  res.points.emplace_back(0.0, 0.0);
  std::size_t tp = 0, fp = 0;
  double area = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t dtp = 0, dfp = 0;
    while (j < order.size() && key[order[j]] == key[order[i]]) {
      (labels[order[j]] ? dtp : dfp)++;
      ++j;
    }
    area += static_cast<double>(dfp) * (static_cast<double>(tp) + 0.5 * static_cast<double>(dtp));
    tp += dtp;
    fp += dfp;
    res.points.emplace_back(static_cast<double>(fp) / static_cast<double>(n_neg),
                            static_cast<double>(tp) / static_cast<double>(n_pos));
    i = j;
  }
  res.auroc = area / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
  return res;
}

/// Trapezoidal area under a stored curve.
inline double trapezoid_area(std::span<const std::pair<double, double>> pts) {
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    area += (pts[i].first - pts[i - 1].first) * 0.5 * (pts[i].second + pts[i - 1].second);
  return area;
}

// ---------------------------------------------------------------------------
// Detection experiment
// ---------------------------------------------------------------------------

struct DetectionItem {
  std::size_t id = 0;
  double epsilon = 0.0;
  double score_gmm = 0.0;
  double score_mmd = 0.0;
  double score_rmse = 0.0;
  int label = 0;  // 1 = drawn from the contaminated model
};

struct DetectionConfig {
  std::size_t test_sets = 1000;  // half well-specified, half contaminated
  std::size_t gmm_components = 2;
  std::size_t posterior_samples = 200;  // for the RMSE baseline
};

/// Scores test datasets against the training statistics of a plain NPE
/// checkpoint. Well-specified items are simulated at theta_true, the rest
/// from the epsilon-contaminated model; item i uses stream (seed, i).
inline std::vector<DetectionItem> detection_scores(const Checkpoint& ck, const StatSet& train_stats,
                                                   const ContaminationSpec& spec, std::size_t n,
                                                   const DetectionConfig& cfg, std::uint64_t seed,
                                                   std::vector<std::string>* warnings = nullptr) {
  if (!ck.mdn) throw std::invalid_argument("detection needs a checkpoint with a mixture head");
  const Encoder enc(ck.encoder);
  const Mdn head(*ck.mdn);
  const auto gfit = fit_gmm(train_stats, cfg.gmm_components, stream_seed(seed, "gmm"));
  if (warnings) warnings->insert(warnings->end(), gfit.warnings.begin(), gfit.warnings.end());
  const detail::GmmCache cache(gfit.model);
  const MmdScorer mmd(train_stats, KernelConfig{median_heuristic(train_stats)});
  ContaminationSpec clean = spec;
  clean.epsilon = 0.0;
  std::vector<DetectionItem> out;
  const std::size_t half = cfg.test_sets / 2;
  EncoderTape tape;
  for (std::size_t i = 0; i < cfg.test_sets; ++i) {
    DetectionItem item;
    item.id = i;
    item.epsilon = spec.epsilon;
    item.label = i >= half ? 1 : 0;
    const auto item_seed = stream_seed(seed, i);
    const auto data = contaminate(ck.simulator, item.label ? spec : clean, n, item_seed);
    const auto s = enc.forward(ck.encoder_params.values, data, tape);
    item.score_gmm = detail::log_sum_exp(cache.log_terms(gfit.model, s));
    item.score_mmd = mmd(s);
    PosteriorSamples ps;
    ps.samples = mdn_sample(head.forward(ck.mdn_params.values, s), cfg.posterior_samples, stream_seed(item_seed, "post"));
    item.score_rmse = rmse_score(ps, spec.theta_true.span());
    out.push_back(item);
  }
  return out;
}

struct DetectionSummary {
  double epsilon = 0.0;
  double auroc_gmm = 0.0;
  double auroc_mmd = 0.0;
  double auroc_rmse = 0.0;
};

inline DetectionSummary summarize_detection(std::span<const DetectionItem> items) {
  std::vector<double> g, m, r;
  std::vector<int> y;
  for (const auto& it : items) {
    g.push_back(it.score_gmm);
    m.push_back(it.score_mmd);
    r.push_back(it.score_rmse);
    y.push_back(it.label);
  }
  DetectionSummary s;
  s.epsilon = items.empty() ? 0.0 : items.front().epsilon;
  s.auroc_gmm = auroc(g, y, Polarity::lower_positive).auroc;
  s.auroc_mmd = auroc(m, y, Polarity::higher_positive).auroc;
  s.auroc_rmse = auroc(r, y, Polarity::higher_positive).auroc;
  return s;
}

inline std::string detection_csv(std::span<const DetectionItem> items, std::string_view header_comment = {}) {
  std::string out;
  if (!header_comment.empty()) out += "# " + std::string(header_comment) + "\n";
  out += "id,epsilon,score_gmm,score_mmd,score_rmse,label\n";
  for (const auto& it : items)
    out += std::to_string(it.id) + "," + io::format_double(it.epsilon) + "," + io::format_double(it.score_gmm) + "," +
           io::format_double(it.score_mmd) + "," + io::format_double(it.score_rmse) + "," + std::to_string(it.label) +
           "\n";
  return out;
}

/// One row per (score, epsilon).
inline std::string detection_summary_csv(std::span<const DetectionSummary> rows, std::string_view header_comment = {}) {
  std::string out;
  if (!header_comment.empty()) out += "# " + std::string(header_comment) + "\n";
  out += "score,epsilon,auroc\n";
  for (const auto& r : rows) {
    out += "gmm," + io::format_double(r.epsilon) + "," + io::format_double(r.auroc_gmm) + "\n";
    out += "mmd," + io::format_double(r.epsilon) + "," + io::format_double(r.auroc_mmd) + "\n";
    out += "rmse," + io::format_double(r.epsilon) + "," + io::format_double(r.auroc_rmse) + "\n";
  }
  return out;
}

}  // namespace rsbi
