#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "rsbi/config.hpp"
#include "rsbi/detection.hpp"
#include "rsbi/evaluation.hpp"
#include "rsbi/inference.hpp"
#include "rsbi/io.hpp"
#include "rsbi/simulators.hpp"
#include "rsbi/svg.hpp"
#include "rsbi/training.hpp"

namespace rsbi {

// ---------------------------------------------------------------------------
// In-memory stages
// ---------------------------------------------------------------------------

struct SeedData {
  TrainingSet training;
  Dataset observed;  // enters the regularizer
  Dataset target;    // posterior is conditioned on this; equal to observed unless infer_epsilon differs
};

inline bool separate_target(const ExperimentConfig& cfg) { return cfg.infer_epsilon != cfg.contamination.epsilon; }

inline SeedData make_seed_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedData d{generate_training_set(cfg.simulator, cfg.prior, cfg.m, cfg.n, stream_seed(seed, "training-set")),
             contaminate(cfg.simulator, cfg.contamination, cfg.obs_n, stream_seed(seed, "observed")), {}};
  if (separate_target(cfg)) {
    ContaminationSpec spec = cfg.contamination;
    spec.epsilon = cfg.infer_epsilon;
    d.target = contaminate(cfg.simulator, spec, cfg.obs_n, stream_seed(seed, "observed-infer"));
  } else {
    d.target = d.observed;
  }
  return d;
}

/// Checkpoint name for a method: abc and abc-rs are trained as ae and ae-rs.
inline std::string checkpoint_name(std::string_view method) {
  return std::string(to_string(training_method(method)));
}

/// Training methods needed by cfg.methods, in first-use order.
inline std::vector<std::string> training_methods(const ExperimentConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& m : cfg.methods) {
    auto name = checkpoint_name(m);
    if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(std::move(name));
  }
  return out;
}

inline TrainResult train_method(const ExperimentConfig& cfg, std::string_view method, const SeedData& data,
                                std::uint64_t seed) {
  const Method tm = training_method(method);
  TrainConfig tc = cfg.train;
  tc.seed = stream_seed(seed, "train");
  return train(tm, data.training, &data.observed, tc, cfg.encoder_config(), cfg.head_config());
}

inline PosteriorSamples infer_method(const ExperimentConfig& cfg, std::string_view method, const Checkpoint& ck,
                                     const Dataset& obs, std::uint64_t seed) {
  PosteriorSamples ps;
  if (method == "npe" || method == "npe-rs") {
    ps = npe_posterior(ck, obs, cfg.posterior_samples, stream_seed(seed, "posterior-" + std::string(method)));
  } else if (method == "abc" || method == "abc-rs") {
    const auto res = rejection_abc(ck, cfg.simulator, cfg.prior, obs, cfg.abc, stream_seed(seed, "abc"));
    ps = abc_posterior(res, cfg.abc_adjust);
    for (const auto& [k, v] : ck.metadata.entries())
      if (!ps.metadata.has(k)) ps.metadata.set(k, v);
  } else {
    throw std::invalid_argument("unknown method '" + std::string(method) + "'");
  }
  ps.metadata.set("method", std::string(method));
  ps.metadata.set("model", std::string(to_string(cfg.model)));
  ps.metadata.set("epsilon", io::format_double(cfg.infer_epsilon));
  ps.metadata.set("seed", std::to_string(seed));
  return ps;
}

inline MetricReport evaluate_method(const ExperimentConfig& cfg, std::string_view method, const PosteriorSamples& ps,
                                    const Dataset& obs, std::uint64_t seed, std::vector<std::string>* warnings = nullptr) {
  ps.validate();
  MetricReport r;
  r.method = std::string(method);
  r.model = std::string(to_string(cfg.model));
  r.epsilon = cfg.infer_epsilon;
  r.lambda = is_regularized(training_method(method)) ? cfg.train.lambda : 0.0;
  r.seed = seed;
  const auto has = [&](std::string_view m) { return std::find(cfg.metrics.begin(), cfg.metrics.end(), m) != cfg.metrics.end(); };
  if (has("rmse")) r.rmse = rmse(ps, cfg.contamination.theta_true.span());
  if (has("predictive_mmd"))
    r.predictive_mmd =
        predictive_mmd(ps, cfg.simulator, obs, cfg.predictive, stream_seed(seed, "predictive-" + std::string(method)), warnings);
  if (has("frac_outside_prior")) r.frac_outside_prior = frac_outside_prior(ps, cfg.prior);
  return r;
}

/// Test sets for one epsilon, scored against the plain NPE checkpoint.
inline std::vector<DetectionItem> detect_epsilon(const ExperimentConfig& cfg, const Checkpoint& npe_ck,
                                                 const StatSet& train_stats, std::size_t eps_index, std::uint64_t seed,
                                                 std::vector<std::string>* warnings = nullptr) {
  ContaminationSpec spec = cfg.contamination;
  spec.epsilon = cfg.detect_epsilons.at(eps_index);
  return detection_scores(npe_ck, train_stats, spec, cfg.obs_n, cfg.detect,
                          stream_seed(stream_seed(seed, "detect"), static_cast<std::uint64_t>(eps_index)), warnings);
}

inline StatSet training_stats(const Checkpoint& ck, const TrainingSet& ts) {
  return Encoder(ck.encoder).encode_all(ck.encoder_params.values, ts.data);
}

// ---------------------------------------------------------------------------
// On-disk layout: <out>/<hash>/<stage>/seed-<s>/
// ---------------------------------------------------------------------------

class RunLayout {
 public:
  RunLayout(const ExperimentConfig& cfg, std::filesystem::path out)
      : hash_(config_hash(cfg)), root_(std::move(out) / hash_) {}

  const std::string& hash() const { return hash_; }
  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path stage(std::string_view name) const { return root_ / name; }
  std::filesystem::path seed_dir(std::string_view stage_name, std::uint64_t seed) const {
    return root_ / stage_name / ("seed-" + std::to_string(seed));
  }
  std::string comment() const { return "config-hash " + hash_; }

  io::TextHeader header() const {
    io::TextHeader h;
    h.set("config-hash", hash_);
    return h;
  }

 private:
  std::string hash_;
  std::filesystem::path root_;
};

inline std::string read_artifact(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw IoError("missing upstream artifact: " + p.string());
  return io::read_file(p);
}

inline void write_artifact(const std::filesystem::path& p, std::string_view bytes) {
  std::filesystem::create_directories(p.parent_path());
  io::write_file_atomic(p, bytes);
}

/// Writes config.yaml under the run root.
inline void write_run_config(const ExperimentConfig& cfg, const RunLayout& layout) {
  write_artifact(layout.root() / "config.yaml", "# " + layout.comment() + "\n" + serialize_config(cfg, false));
}

class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

// ---------------------------------------------------------------------------
// File-backed stages, one seed each. Each returns log lines.
// ---------------------------------------------------------------------------

inline std::vector<std::string> stage_simulate(const ExperimentConfig& cfg, const RunLayout& layout, std::uint64_t seed) {
  const auto data = make_seed_data(cfg, seed);
  const auto dir = layout.seed_dir("simulate", seed);
  io::TextHeader extra = layout.header();
  extra.set("seed", std::to_string(seed));
  const auto tbytes = serialize_training_set(data.training, extra);
  extra.set("contaminated-rows", std::to_string(contaminated_count(cfg.contamination.epsilon, cfg.obs_n)));
  const auto obytes = serialize_dataset(data.observed, extra);
  write_artifact(dir / "training.bin", tbytes);
  write_artifact(dir / "observed.bin", obytes);
  std::string line = "seed " + std::to_string(seed) + " training.bin " + io::hex64(fnv1a64(tbytes)) + " observed.bin " +
                     io::hex64(fnv1a64(obytes)) + " contaminated " +
                     std::to_string(contaminated_count(cfg.contamination.epsilon, cfg.obs_n)) + "/" +
                     std::to_string(cfg.obs_n);
  if (separate_target(cfg)) {
    extra.set("contaminated-rows", std::to_string(contaminated_count(cfg.infer_epsilon, cfg.obs_n)));
    const auto ibytes = serialize_dataset(data.target, extra);
    write_artifact(dir / "observed-infer.bin", ibytes);
    line += " observed-infer.bin " + io::hex64(fnv1a64(ibytes));
  }
  return {line};
}

/// Observed data the posterior is conditioned on.
inline std::filesystem::path target_path(const ExperimentConfig& cfg, const RunLayout& layout, std::uint64_t seed) {
  return layout.seed_dir("simulate", seed) / (separate_target(cfg) ? "observed-infer.bin" : "observed.bin");
}

inline SeedData load_seed_data(const ExperimentConfig& cfg, const RunLayout& layout, std::uint64_t seed) {
  const auto dir = layout.seed_dir("simulate", seed);
  SeedData d{parse_training_set(read_artifact(dir / "training.bin")), parse_dataset(read_artifact(dir / "observed.bin")),
             {}};
  d.target = separate_target(cfg) ? parse_dataset(read_artifact(target_path(cfg, layout, seed))) : d.observed;
  return d;
}

inline std::vector<std::string> stage_train(const ExperimentConfig& cfg, const RunLayout& layout, std::uint64_t seed) {
  const auto data = load_seed_data(cfg, layout, seed);
  const auto dir = layout.seed_dir("train", seed);
  std::vector<std::string> log;
  std::string diverged;
  for (const auto& name : training_methods(cfg)) {
    const auto res = train_method(cfg, name, data, seed);
    write_artifact(dir / (name + ".ckpt"), serialize_checkpoint(res.checkpoint, layout.header()));
    write_artifact(dir / (name + "-record.csv"), records_csv(res.records, layout.comment()));
    log.push_back("seed " + std::to_string(seed) + " " + name + " epochs " + std::to_string(res.records.size()) +
                  (res.diverged ? " diverged: " + res.message : ""));
    if (res.diverged && diverged.empty()) diverged = name + " (seed " + std::to_string(seed) + "): " + res.message;
  }
  if (!diverged.empty()) throw DivergenceError("training diverged for " + diverged);
  return log;
}

inline Checkpoint load_checkpoint(const RunLayout& layout, std::uint64_t seed, std::string_view name) {
  return parse_checkpoint(read_artifact(layout.seed_dir("train", seed) / (std::string(name) + ".ckpt")));
}

inline std::vector<std::string> stage_infer(const ExperimentConfig& cfg, const RunLayout& layout, std::uint64_t seed) {
  const auto obs = parse_dataset(read_artifact(target_path(cfg, layout, seed)));
  const auto dir = layout.seed_dir("infer", seed);
  std::vector<std::string> log;
  for (const auto& method : cfg.methods) {
    const auto ck = load_checkpoint(layout, seed, checkpoint_name(method));
    const auto ps = infer_method(cfg, method, ck, obs, seed);
    write_artifact(dir / (method + ".csv"), posterior_csv(ps, layout.comment()));
    write_artifact(dir / (method + ".meta"), posterior_meta(ps, layout.comment()));
    std::string line = "seed " + std::to_string(seed) + " " + method + " samples " + std::to_string(ps.size());
    for (const auto& w : ps.warnings) line += "; warning: " + w;
    log.push_back(line);
  }
  return log;
}

inline std::vector<MetricReport> evaluate_seed(const ExperimentConfig& cfg, const RunLayout& layout, std::uint64_t seed,
                                               std::vector<std::string>& log) {
  const auto obs = parse_dataset(read_artifact(target_path(cfg, layout, seed)));
  std::vector<MetricReport> rows;
  for (const auto& method : cfg.methods) {
    const auto path = layout.seed_dir("infer", seed) / (method + ".csv");
    const auto ps = parse_posterior_csv(read_artifact(path));
    std::vector<std::string> warnings;
    rows.push_back(evaluate_method(cfg, method, ps, obs, seed, &warnings));
    for (const auto& w : warnings) log.push_back("seed " + std::to_string(seed) + " " + method + " warning: " + w);
  }
  write_artifact(layout.seed_dir("evaluate", seed) / "metrics.csv", metrics_csv(rows, layout.comment()));
  return rows;
}

inline std::vector<std::string> stage_detect(const ExperimentConfig& cfg, const RunLayout& layout, std::uint64_t seed) {
  const auto ck = load_checkpoint(layout, seed, "npe");
  const auto ts = parse_training_set(read_artifact(layout.seed_dir("simulate", seed) / "training.bin"));
  const auto stats = training_stats(ck, ts);
  const auto dir = layout.seed_dir("detect", seed);
  std::vector<DetectionSummary> summary;
  std::vector<std::string> log;
  for (std::size_t e = 0; e < cfg.detect_epsilons.size(); ++e) {
    std::vector<std::string> warnings;
    const auto items = detect_epsilon(cfg, ck, stats, e, seed, &warnings);
    write_artifact(dir / ("items-eps-" + io::format_double(cfg.detect_epsilons[e]) + ".csv"),
                   detection_csv(items, layout.comment()));
    summary.push_back(summarize_detection(items));
    const auto& s = summary.back();
    log.push_back("seed " + std::to_string(seed) + " epsilon " + io::format_double(s.epsilon) + " auroc gmm " +
                  io::format_double(s.auroc_gmm) + " mmd " + io::format_double(s.auroc_mmd) + " rmse " +
                  io::format_double(s.auroc_rmse));
    for (const auto& w : warnings) log.push_back("seed " + std::to_string(seed) + " warning: " + w);
  }
  write_artifact(dir / "summary.csv", detection_summary_csv(summary, layout.comment()));
  return log;
}

/// Statistics CSV: kind,s_1..s_p with kind "sim" or "obs".
inline std::string statistics_csv(const StatSet& sim, std::span<const double> obs, std::string_view header_comment = {}) {
  std::string out;
  if (!header_comment.empty()) out += "# " + std::string(header_comment) + "\n";
  out += "kind";
  for (std::size_t j = 0; j < sim.cols; ++j) out += ",s_" + std::to_string(j + 1);
  out += "\n";
  for (std::size_t i = 0; i < sim.rows; ++i) out += "sim," + io::join_doubles(sim.row(i)) + "\n";
  out += "obs," + io::join_doubles(obs) + "\n";
  return out;
}

inline std::pair<StatSet, std::vector<double>> parse_statistics_csv(std::string_view text) {
  std::vector<std::vector<double>> sim;
  std::vector<double> obs;
  bool header = false;
  std::size_t width = 0;
  for (const auto& line : io::split(text, '\n')) {
    if (line.empty() || line.front() == '#') continue;
    if (!header) {
      if (line.rfind("kind,", 0) != 0) throw IoError("unexpected statistics CSV header");
      width = io::split(line, ',').size() - 1;
      header = true;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw IoError("malformed statistics CSV row");
    auto vals = io::parse_doubles(std::string_view(line).substr(comma + 1));
    if (vals.size() != width) throw IoError("statistics CSV row has the wrong width");
    const auto kind = line.substr(0, comma);
    if (kind == "sim") sim.push_back(std::move(vals));
    else if (kind == "obs") obs = std::move(vals);
    else throw IoError("statistics CSV row kind must be sim or obs");
  }
  if (sim.empty() || obs.empty()) throw IoError("statistics CSV needs sim rows and one obs row");
  StatSet s(sim.size(), width);
  for (std::size_t i = 0; i < sim.size(); ++i) std::copy(sim[i].begin(), sim[i].end(), s.row(i).begin());
  return {std::move(s), std::move(obs)};
}

inline std::vector<std::string> stage_plot(const ExperimentConfig& cfg, const RunLayout& layout, std::uint64_t seed) {
  const auto dir = layout.seed_dir("plot", seed);
  std::vector<std::string> log;
  const auto comment = layout.comment();
  for (const auto& method : cfg.methods) {
    const auto ps = parse_posterior_csv(read_artifact(layout.seed_dir("infer", seed) / (method + ".csv")));
    if (ps.dim() < 2) continue;
    const auto title = method + " posterior, " + std::string(to_string(cfg.model)) + ", epsilon " +
                       io::format_double(cfg.contamination.epsilon) + ", seed " + std::to_string(seed);
    write_artifact(dir / ("posterior-" + method + ".svg"),
                   svg::posterior_scatter(ps, cfg.prior, cfg.contamination.theta_true.span(), title, comment));
    log.push_back("seed " + std::to_string(seed) + " posterior-" + method + ".svg");
  }
  const auto data = load_seed_data(cfg, layout, seed);
  for (const auto& name : training_methods(cfg)) {
    const auto ck = load_checkpoint(layout, seed, name);
    const auto stats = training_stats(ck, data.training);
    const auto s_obs = Encoder(ck.encoder).encode(ck.encoder_params.values, data.target);
    write_artifact(dir / ("statistics-" + name + ".csv"), statistics_csv(stats, s_obs, comment));
    if (stats.cols >= 2) {
      write_artifact(dir / ("statistics-" + name + ".svg"),
                     svg::scatter_matrix(stats, s_obs, name + " statistics, seed " + std::to_string(seed), comment));
      log.push_back("seed " + std::to_string(seed) + " statistics-" + name + ".svg");
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// Seed fan-out
// ---------------------------------------------------------------------------

/// Runs fn(seed) for every seed on up to `jobs` threads. Results are
/// returned in seed order; the first exception (in seed order) is rethrown
/// after all workers finish.
template <class Fn>
auto for_each_seed(std::span<const std::uint64_t> seeds, std::size_t jobs, Fn fn)
    -> std::vector<decltype(fn(std::uint64_t{}))> {
  using R = decltype(fn(std::uint64_t{}));
  std::vector<R> results(seeds.size());
  std::vector<std::exception_ptr> errors(seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < seeds.size(); i = next++) {
      try {
        results[i] = fn(seeds[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(seeds.size(), 1));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

/// Concatenates per-seed metrics into <root>/evaluate/metrics.csv.
inline std::vector<std::string> aggregate_evaluation(const RunLayout& layout,
                                                     std::span<const std::vector<MetricReport>> per_seed) {
  std::vector<MetricReport> all;
  for (const auto& rows : per_seed) all.insert(all.end(), rows.begin(), rows.end());
  write_artifact(layout.stage("evaluate") / "metrics.csv", metrics_csv(all, layout.comment()));
  return {"metrics rows " + std::to_string(all.size()) + " -> " + (layout.stage("evaluate") / "metrics.csv").string()};
}

}  // namespace rsbi
