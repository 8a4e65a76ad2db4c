#pragma once

#include <algorithm>
#include <chrono>
#include <limits>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsbi/io.hpp"
#include "rsbi/kernel.hpp"
#include "rsbi/networks.hpp"
#include "rsbi/rng.hpp"
#include "rsbi/simulators.hpp"
#include "rsbi/types.hpp"

namespace rsbi {

enum class Method { npe, npe_rs, ae, ae_rs };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::npe: return "npe";
    case Method::npe_rs: return "npe-rs";
    case Method::ae: return "ae";
    case Method::ae_rs: return "ae-rs";
  }
  return "unknown";
}

inline Method parse_method(std::string_view s) {
  if (s == "npe") return Method::npe;
  if (s == "npe-rs") return Method::npe_rs;
  if (s == "ae") return Method::ae;
  if (s == "ae-rs") return Method::ae_rs;
  throw std::invalid_argument("unknown training method '" + std::string(s) + "'");
}

inline bool is_regularized(Method m) { return m == Method::npe_rs || m == Method::ae_rs; }
inline bool uses_head(Method m) { return m == Method::npe || m == Method::npe_rs; }

enum class Regularizer { mmd, euclidean, none };

inline std::string_view to_string(Regularizer r) {
  switch (r) {
    case Regularizer::mmd: return "mmd";
    case Regularizer::euclidean: return "euclidean";
    case Regularizer::none: return "none";
  }
  return "unknown";
}

inline Regularizer parse_regularizer(std::string_view s) {
  if (s == "mmd") return Regularizer::mmd;
  if (s == "euclidean") return Regularizer::euclidean;
  if (s == "none") return Regularizer::none;
  throw std::invalid_argument("unknown regularizer '" + std::string(s) + "'");
}

/// median_per_step: beta = median heuristic of the current MMD subset, with
/// the gradient taken through it. median_per_epoch: computed on the first
/// subset of each epoch and held constant.
enum class BandwidthPolicy { median_per_step, median_per_epoch, fixed };

struct TrainConfig {
  double lambda = 0.0;
  Regularizer regularizer = Regularizer::mmd;
  std::size_t l = 200;
  std::size_t batch = 50;
  double learning_rate = 5e-4;
  std::size_t epochs = 200;
  std::size_t patience = 20;  // epochs without improvement of the total loss
  std::uint64_t seed = 0;
  BandwidthPolicy bandwidth = BandwidthPolicy::median_per_step;
  double fixed_beta = 1.0;
  bool record_timing = false;  // wall-clock column; off keeps records byte-stable

  void validate(std::size_t m) const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("lambda must be finite and >= 0");
    if (batch < 1 || batch > m) throw std::invalid_argument("batch size must lie in [1, m]");
    if (l < 2 || l > m) throw std::invalid_argument("MMD subset size l must lie in [2, m]");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (bandwidth == BandwidthPolicy::fixed && !(fixed_beta > 0.0))
      throw std::invalid_argument("fixed bandwidth must be positive");
  }

  bool regularizer_active() const { return lambda > 0.0 && regularizer != Regularizer::none; }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossTerms {
  double standard = 0.0;
  double regularizer = 0.0;  // already multiplied by lambda
  double total = 0.0;
  std::vector<double> grad_encoder;
  std::vector<double> grad_second;  // mixture head or decoder
  double beta = 0.0;                 // bandwidth used by the MMD term, 0 if none
};

/// Everything a loss evaluation needs besides the parameters.
struct LossInputs {
  const TrainingSet* data = nullptr;
  std::span<const std::size_t> batch;   // indices for the standard term
  std::span<const std::size_t> subset;  // indices for the regularizer; may overlap batch
  const Dataset* obs = nullptr;
  double lambda = 0.0;
  Regularizer regularizer = Regularizer::mmd;
  double beta = 1.0;
  bool adaptive_beta = false;  // recompute beta from the subset, differentiably; beta is the fallback
};

namespace detail {

/// Above this many taped activations the encoder is re-run during backward
/// instead of keeping every tape alive.
inline constexpr std::size_t kTapeBudget = std::size_t{64} << 20;

inline void check_loss_inputs(const LossInputs& in, const Encoder& enc) {
  if (!in.data) throw std::invalid_argument("loss: no training data");
  if (in.batch.empty()) throw std::invalid_argument("loss: empty batch");
  for (const auto i : in.batch)
    if (i >= in.data->m()) throw std::invalid_argument("loss: batch index out of range");
  for (const auto i : in.subset)
    if (i >= in.data->m()) throw std::invalid_argument("loss: subset index out of range");
  const bool reg = in.lambda > 0.0 && in.regularizer != Regularizer::none;
  if (reg && !in.obs) throw std::invalid_argument("loss: observed data required when lambda > 0");
  if (reg && in.subset.empty()) throw std::invalid_argument("loss: empty regularizer subset");
  if (reg && in.obs->d != enc.config().d) throw std::invalid_argument("loss: observed data dimension mismatch");
}

/// Shared driver: `standard_term` receives the statistic of each batch item
/// and returns d(loss)/d(statistic) while accumulating its own term and
/// parameter gradients.
template <class StandardTerm>
LossTerms regularized_loss(const Encoder& enc, std::span<const double> psi, const LossInputs& in,
                           std::size_t second_count, StandardTerm&& standard_term) {
  check_loss_inputs(in, enc);
  const auto& ts = *in.data;
  const std::size_t p = enc.config().stat_dim;
  const bool reg = in.lambda > 0.0 && in.regularizer != Regularizer::none;

  // Unique items in first-use order: batch first, then the rest of the subset.
  std::vector<std::size_t> items(in.batch.begin(), in.batch.end());
  std::vector<std::size_t> subset_pos;
  if (reg) {
    subset_pos.reserve(in.subset.size());
    for (const auto idx : in.subset) {
      std::size_t pos = items.size();
      for (std::size_t q = 0; q < items.size(); ++q)
        if (items[q] == idx) {
          pos = q;
          break;
        }
      if (pos == items.size()) items.push_back(idx);
      subset_pos.push_back(pos);
    }
  }
  const std::size_t n_items = items.size();
  std::size_t tape_size = ts.n * ts.d();
  for (const auto& s : enc.shapes()) tape_size += s.size() * ts.n;
  const bool keep_tapes = tape_size * (n_items + 1) <= kTapeBudget;

  std::vector<EncoderTape> tapes(keep_tapes ? n_items : 1);
  StatSet stats(n_items, p);
  for (std::size_t q = 0; q < n_items; ++q) {
    const auto s = enc.forward(psi, ts.data[items[q]], tapes[keep_tapes ? q : 0]);
    std::copy(s.begin(), s.end(), stats.row(q).begin());
  }

  LossTerms out;
  out.grad_encoder.assign(enc.param_count(), 0.0);
  out.grad_second.assign(second_count, 0.0);
  Matrix d_stats(n_items, p);

  out.standard = standard_term(stats, items, d_stats, out.grad_second);

  EncoderTape obs_tape;
  SummaryStat d_obs;
  if (reg) {
    const auto s_obs = enc.forward(psi, *in.obs, obs_tape);
    StatSet sub(subset_pos.size(), p);
    for (std::size_t q = 0; q < subset_pos.size(); ++q)
      std::copy(stats.row(subset_pos[q]).begin(), stats.row(subset_pos[q]).end(), sub.row(q).begin());
    MmdGradient g;
    if (in.regularizer == Regularizer::euclidean) {
      g = euclidean_regularizer_grad(sub, s_obs);
    } else if (in.adaptive_beta) {
      try {
        g = mmd_sq_vstat_grad_adaptive(sub, s_obs);
      } catch (const std::domain_error&) {
        g = mmd_sq_vstat_grad(sub, s_obs, KernelConfig{in.beta});
        g.beta = in.beta;
      }
    } else {
      g = mmd_sq_vstat_grad(sub, s_obs, KernelConfig{in.beta});
      g.beta = in.beta;
    }
    out.beta = in.regularizer == Regularizer::mmd ? g.beta : 0.0;
    out.regularizer = in.lambda * g.value;
    for (std::size_t q = 0; q < subset_pos.size(); ++q)
      for (std::size_t k = 0; k < p; ++k) d_stats(subset_pos[q], k) += in.lambda * g.d_sim(q, k);
    d_obs.resize(p);
    for (std::size_t k = 0; k < p; ++k) d_obs[k] = in.lambda * g.d_obs[k];
  }
  out.total = out.standard + out.regularizer;
  if (!std::isfinite(out.total)) throw NumericError("loss is not finite");

  for (std::size_t q = 0; q < n_items; ++q) {
    if (!keep_tapes) enc.forward(psi, ts.data[items[q]], tapes[0]);
    enc.backward(psi, tapes[keep_tapes ? q : 0], d_stats.row(q), out.grad_encoder);
  }
  if (reg) enc.backward(psi, obs_tape, d_obs, out.grad_encoder);
  return out;
}

}  // namespace detail

/// -(1/B) sum_batch log q(theta_i | eta(x_i)) + lambda * D(subset stats, eta(obs)).
inline LossTerms npe_rs_loss(const Encoder& enc, const Mdn& head, std::span<const double> psi,
                             std::span<const double> phi, const LossInputs& in) {
  if (phi.size() != head.param_count()) throw std::invalid_argument("npe_rs_loss: head parameter count mismatch");
  if (in.data && in.data->prior.size() != head.config().theta_dim)
    throw std::invalid_argument("npe_rs_loss: theta dimension mismatch");
  return detail::regularized_loss(
      enc, psi, in, head.param_count(),
      [&](const StatSet& stats, const std::vector<std::size_t>& items, Matrix& d_stats, std::vector<double>& grad) {
        const double scale = 1.0 / static_cast<double>(in.batch.size());
        double acc = 0.0;
        Mdn::Tape tape;
        std::vector<double> d_raw;
        for (std::size_t b = 0; b < in.batch.size(); ++b) {
          head.forward_raw(phi, stats.row(b), tape);
          acc += head.log_prob_raw_grad(tape, in.data->thetas[items[b]].span(), d_raw);
          for (auto& v : d_raw) v *= -scale;
          const auto ds = head.backward(phi, tape, d_raw, grad);
          for (std::size_t k = 0; k < ds.size(); ++k) d_stats(b, k) += ds[k];
        }
        return -acc * scale;
      });
}

/// (1/B) sum_batch mean_{r,t} (xhat_t - x_{r,t})^2 in standardized units, plus
/// the same regularizer as npe_rs_loss.
inline LossTerms ae_rs_loss(const Encoder& enc, const Decoder& dec, std::span<const double> psi,
                            std::span<const double> psi_d, const LossInputs& in) {
  if (psi_d.size() != dec.param_count()) throw std::invalid_argument("ae_rs_loss: decoder parameter count mismatch");
  const auto& ec = enc.config();
  return detail::regularized_loss(
      enc, psi, in, dec.param_count(),
      [&](const StatSet& stats, const std::vector<std::size_t>& items, Matrix& d_stats, std::vector<double>& grad) {
        const double bscale = 1.0 / static_cast<double>(in.batch.size());
        double acc = 0.0;
        Decoder::Tape tape;
        const double inv_scale = 1.0 / ec.input_scale;
        for (std::size_t b = 0; b < in.batch.size(); ++b) {
          const auto& x = in.data->data[items[b]];
          const auto xhat = dec.forward(psi_d, stats.row(b), tape);
          const double norm = 1.0 / static_cast<double>(x.n * x.d);
          std::vector<double> d_out(x.d, 0.0);
          double se = 0.0;
          for (std::size_t r = 0; r < x.n; ++r) {
            for (std::size_t t = 0; t < x.d; ++t) {
              const double diff = xhat[t] - (x(r, t) - ec.input_shift) * inv_scale;
              se += diff * diff;
              d_out[t] += diff;
            }
          }
          acc += se * norm;
          for (auto& v : d_out) v *= 2.0 * norm * bscale;
          const auto ds = dec.backward(psi_d, tape, d_out, grad);
          for (std::size_t k = 0; k < ds.size(); ++k) d_stats(b, k) += ds[k];
        }
        return acc * bscale;
      });
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<double> m, v;
  std::size_t t = 0;
};

inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: shape mismatch");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state shape mismatch");
  ++state.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double loss_standard = 0.0;
  double loss_regularizer = 0.0;
  double loss_total = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochRecord> records;
  bool diverged = false;
  std::string message;
};

inline std::string records_csv(std::span<const EpochRecord> records, std::string_view header_comment = {}) {
  std::string out;
  if (!header_comment.empty()) out += "# " + std::string(header_comment) + "\n";
  out += "epoch,loss_standard,loss_regularizer,loss_total,seconds\n";
  for (const auto& r : records) {
    out += std::to_string(r.epoch) + "," + io::format_double(r.loss_standard) + "," +
           io::format_double(r.loss_regularizer) + "," + io::format_double(r.loss_total) + "," +
           io::format_double(r.seconds) + "\n";
  }
  return out;
}

/// Mean and standard deviation over every value of every training dataset.
inline std::pair<double, double> input_standardization(const TrainingSet& ts) {
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  for (const auto& ds : ts.data) {
    for (const double v : ds.values) {
      sum += v;
      sq += v * v;
    }
    count += ds.values.size();
  }
  const double mean = sum / static_cast<double>(count);
  const double var = std::max(sq / static_cast<double>(count) - mean * mean, 0.0);
  const double sd = std::sqrt(var);
  return {mean, sd > 0.0 ? sd : 1.0};
}

/// Uniform draw of `extra` indices from [0, m) excluding `taken`, without
/// replacement (partial Fisher-Yates over the complement).
inline std::vector<std::size_t> draw_extra_indices(std::size_t m, std::span<const std::size_t> taken,
                                                   std::size_t extra, Rng& rng) {
  std::vector<bool> used(m, false);
  for (const auto i : taken) used[i] = true;
  std::vector<std::size_t> pool;
  pool.reserve(m - taken.size());
  for (std::size_t i = 0; i < m; ++i)
    if (!used[i]) pool.push_back(i);
  extra = std::min(extra, pool.size());
  for (std::size_t i = 0; i < extra; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  pool.resize(extra);
  return pool;
}

/// Trains encoder + head (npe/npe-rs) or encoder + decoder (ae/ae-rs).
/// Plain methods ignore lambda. On a non-finite loss the last finite
/// parameters are returned with `diverged` set.
inline TrainResult train(Method method, const TrainingSet& ts, const Dataset* obs, TrainConfig cfg,
                         std::optional<EncoderConfig> encoder_cfg = std::nullopt,
                         std::optional<MdnConfig> head_cfg = std::nullopt) {
  if (!is_regularized(method)) cfg.lambda = 0.0;
  cfg.validate(ts.m());
  const bool reg = cfg.regularizer_active();
  if (reg && !obs) throw std::invalid_argument("train: observed data required when lambda > 0");
  if (reg && (obs->d != ts.d())) throw std::invalid_argument("train: observed data dimension mismatch");

  EncoderConfig ec = encoder_cfg ? *encoder_cfg : EncoderConfig::defaults(ts.simulator.model);
  ec.d = ts.d();
  const auto [shift, scale] = input_standardization(ts);
  ec.input_shift = shift;
  ec.input_scale = scale;
  const Encoder enc(ec);

  Checkpoint ck;
  ck.method = std::string(to_string(method));
  ck.simulator = ts.simulator;
  ck.prior = ts.prior;
  ck.encoder = ec;
  ck.encoder_params = enc.init_params(stream_seed(cfg.seed, "encoder-init"));

  std::optional<Mdn> head;
  std::optional<Decoder> dec;
  NetworkParams second;
  if (uses_head(method)) {
    MdnConfig mc = head_cfg ? *head_cfg : MdnConfig::for_prior(ts.prior, ec.stat_dim);
    mc.stat_dim = ec.stat_dim;
    head.emplace(mc);
    ck.mdn = head->config();
    second = head->init_params(stream_seed(cfg.seed, "head-init"));
  } else {
    dec.emplace(ec);
    ck.has_decoder = true;
    second = dec->init_params(stream_seed(cfg.seed, "decoder-init"));
  }

  TrainResult result;
  AdamState opt_a, opt_b;
  Rng shuffle_rng(stream_seed(cfg.seed, "shuffle"));
  Rng subset_rng(stream_seed(cfg.seed, "subset"));
  const std::size_t m = ts.m();
  const std::size_t steps = m / cfg.batch;
  std::vector<std::size_t> order(m);
  for (std::size_t i = 0; i < m; ++i) order[i] = i;
  double beta = cfg.bandwidth == BandwidthPolicy::fixed ? cfg.fixed_beta : 1.0;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::vector<double> backup_a, backup_b;

  for (std::size_t epoch = 1; epoch <= cfg.epochs && !result.diverged; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = m; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t done = 0;
    for (std::size_t s = 0; s < steps; ++s) {
      const std::span<const std::size_t> batch(order.data() + s * cfg.batch, cfg.batch);
      std::vector<std::size_t> subset;
      if (reg) {
        subset.assign(batch.begin(), batch.end());
        const auto extra = draw_extra_indices(m, batch, cfg.l > cfg.batch ? cfg.l - cfg.batch : 0, subset_rng);
        subset.insert(subset.end(), extra.begin(), extra.end());
        if (subset.size() > cfg.l) subset.resize(cfg.l);
        if (s == 0 && cfg.bandwidth == BandwidthPolicy::median_per_epoch && cfg.regularizer == Regularizer::mmd) {
          StatSet first(subset.size(), ec.stat_dim);
          for (std::size_t q = 0; q < subset.size(); ++q) {
            const auto st = enc.encode(ck.encoder_params.values, ts.data[subset[q]]);
            std::copy(st.begin(), st.end(), first.row(q).begin());
          }
          try {
            beta = median_heuristic(first);
          } catch (const std::domain_error&) {
            // keep the previous bandwidth
          }
        }
      }
      LossInputs in{&ts, batch, subset, obs, cfg.lambda, cfg.regularizer, beta,
                    cfg.bandwidth == BandwidthPolicy::median_per_step};
      LossTerms lt;
      try {
        lt = head ? npe_rs_loss(enc, *head, ck.encoder_params.values, second.values, in)
                  : ae_rs_loss(enc, *dec, ck.encoder_params.values, second.values, in);
      } catch (const NumericError& e) {
        result.diverged = true;
        result.message = e.what();
        break;
      }
      backup_a = ck.encoder_params.values;
      backup_b = second.values;
      adam_step(ck.encoder_params.values, lt.grad_encoder, opt_a, cfg.learning_rate);
      adam_step(second.values, lt.grad_second, opt_b, cfg.learning_rate);
      if (!all_finite(ck.encoder_params.values) || !all_finite(second.values)) {
        ck.encoder_params.values = backup_a;
        second.values = backup_b;
        result.diverged = true;
        result.message = "parameters became non-finite";
        break;
      }
      if (lt.beta > 0.0) beta = lt.beta;
      rec.loss_standard += lt.standard;
      rec.loss_regularizer += lt.regularizer;
      ++done;
    }
    if (done == 0) break;
    rec.loss_standard /= static_cast<double>(done);
    rec.loss_regularizer /= static_cast<double>(done);
    rec.loss_total = rec.loss_standard + rec.loss_regularizer;
    if (cfg.record_timing)
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.records.push_back(rec);
    if (rec.loss_total < best) {
      best = rec.loss_total;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }

  if (head) {
    ck.mdn_params = std::move(second);
  } else {
    ck.decoder_params = std::move(second);
  }
  ck.metadata.set("seed", std::to_string(cfg.seed));
  ck.metadata.set("lambda", io::format_double(cfg.lambda));
  ck.metadata.set("regularizer", std::string(to_string(cfg.regularizer)));
  ck.metadata.set("epochs-run", std::to_string(result.records.size()));
  ck.metadata.set("beta", io::format_double(beta));
  ck.metadata.set("m", std::to_string(m));
  ck.metadata.set("n", std::to_string(ts.n));
  ck.metadata.set("diverged", result.diverged ? "1" : "0");
  result.checkpoint = std::move(ck);
  return result;
}

/// Encoder built from a checkpoint's config.
inline Encoder checkpoint_encoder(const Checkpoint& ck) { return Encoder(ck.encoder); }

}  // namespace rsbi
