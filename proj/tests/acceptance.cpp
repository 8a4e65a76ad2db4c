// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Trained checkpoints can be cached across runs with --cache.
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>

#include "rsbi/rsbi.hpp"

namespace fs = std::filesystem;
using namespace rsbi;

namespace {

struct Options {
  std::string configs = RSBI_CONFIGS;
  std::string cache;
  std::set<int> only;
  std::size_t seeds = 10;
};

Options opt;

struct Verdict {
  bool pass = false;
  std::string detail;
};

void progress(const std::string& s) { std::cerr << "  .. " << s << std::endl; }

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<std::uint64_t> seed_list(std::size_t n) {
  std::vector<std::uint64_t> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = i;
  return s;
}

ExperimentConfig load(const std::string& name, std::vector<std::string> overrides = {}) {
  return parse_config(io::read_file(opt.configs + "/" + name + ".yaml"), overrides);
}

ExperimentConfig with_epsilon(ExperimentConfig c, double eps) {
  c.contamination.epsilon = eps;
  c.infer_epsilon = eps;
  return c;
}

/// Training depends on the training set, the observed data (regularized
/// methods only) and the train/network settings. Everything else is blanked
/// so the cache key is shared where the result is.
std::string cache_key(ExperimentConfig c, Method m) {
  c.seeds = {0};
  c.methods = {"npe"};
  c.detect_epsilons.clear();
  c.posterior_samples = 1;
  c.predictive = PredictiveConfig{};
  c.abc = AbcConfig{};
  c.out = "";
  if (!is_regularized(m)) {
    c.contamination.epsilon = 0.0;
    c.infer_epsilon = 0.0;
    c.train.lambda = 0.0;
  }
  return config_hash(c);
}

struct Trained {
  Checkpoint ck;
  double final_regularizer = 0.0;
};

Trained train_cached(const ExperimentConfig& cfg, const std::string& method, const SeedData& data, std::uint64_t seed) {
  const Method m = training_method(method);
  fs::path file, side;
  if (!opt.cache.empty()) {
    file = fs::path(opt.cache) / cache_key(cfg, m) / ("seed-" + std::to_string(seed)) /
           (std::string(to_string(m)) + ".ckpt");
    side = fs::path(file).replace_extension(".final");
    if (fs::exists(file) && fs::exists(side))
      return {parse_checkpoint(io::read_file(file.string())), io::parse_double(io::read_file(side.string()))};
  }
  progress(std::string(to_string(cfg.model)) + " " + std::string(to_string(m)) + " lambda " +
           fmt(is_regularized(m) ? cfg.train.lambda : 0.0) + " eps " + fmt(cfg.contamination.epsilon) + " seed " +
           std::to_string(seed));
  const auto res = train_method(cfg, method, data, seed);
  if (res.diverged) throw NumericError("training diverged: " + res.message);
  const double final_reg = res.records.empty() ? 0.0 : res.records.back().loss_regularizer;
  if (!file.empty()) {
    write_artifact(file, serialize_checkpoint(res.checkpoint));
    write_artifact(side, io::format_double(final_reg));
  }
  return {res.checkpoint, final_reg};
}

Checkpoint trained(const ExperimentConfig& cfg, const std::string& method, const SeedData& data, std::uint64_t seed) {
  return train_cached(cfg, method, data, seed).ck;
}

// ---------------------------------------------------------------------------

double k_oracle(std::span<const double> a, std::span<const double> b, double beta) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return std::exp(-d / (beta * beta));
}

Verdict mmd_oracles() {
  Rng rng(20240101);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t l = 1 + rng.below(8), l2 = 1 + rng.below(8), p = 1 + rng.below(5);
    StatSet x(l, p), y(l2, p);
    for (auto& v : x.values) v = rng.normal();
    for (auto& v : y.values) v = rng.normal();
    std::vector<double> o(p);
    for (auto& v : o) v = rng.normal();
    const double beta = 0.2 + 2.0 * rng.uniform();
    double xx = 0.0, xy = 0.0, yy = 0.0, xo = 0.0;
    for (std::size_t i = 0; i < l; ++i) {
      for (std::size_t j = 0; j < l; ++j) xx += k_oracle(x.row(i), x.row(j), beta);
      for (std::size_t j = 0; j < l2; ++j) xy += k_oracle(x.row(i), y.row(j), beta);
      xo += k_oracle(x.row(i), o, beta);
    }
    for (std::size_t i = 0; i < l2; ++i)
      for (std::size_t j = 0; j < l2; ++j) yy += k_oracle(y.row(i), y.row(j), beta);
    const double L = static_cast<double>(l), L2 = static_cast<double>(l2);
    const double v_or = xx / (L * L) - 2.0 * xo / L;
    const double f_or = xx / (L * L) - 2.0 * xy / (L * L2) + yy / (L2 * L2);
    worst = std::max({worst, std::abs(mmd_sq_vstat(x, o, {beta}) - v_or), std::abs(mmd_sq_full(x, y, {beta}) - f_or)});
  }
  return {worst <= 1e-12, "max abs error " + fmt(worst) + " over 100 instances (tol 1e-12)"};
}

Verdict gradient_suite() {
  std::string detail;
  bool ok = true;
  for (const char* name : {"ricker", "oup", "turin"}) {
    auto cfg = load(name);
    const auto ts = generate_training_set(cfg.simulator, cfg.prior, 12, 3, 5);
    const auto obs = contaminate(cfg.simulator, cfg.contamination, 3, 6);
    auto ec = cfg.encoder_config();
    const auto [shift, scale] = input_standardization(ts);
    ec.input_shift = shift;
    ec.input_scale = scale;
    const Encoder enc(ec);
    const Mdn head(cfg.head_config());
    const Decoder dec(ec);
    auto psi = enc.init_params(1).values;
    auto phi = head.init_params(2).values;
    auto psi_d = dec.init_params(3).values;
    const std::vector<std::size_t> batch{0, 3, 5, 8}, subset{1, 3, 6, 7, 10, 11};
    const LossInputs in{&ts, batch, subset, &obs, 2.0, Regularizer::mmd, 1.0, true};

    Rng pick(stream_seed(7, name));
    const double h = 1e-6;
    double worst = 0.0;
    auto probe = [&](std::vector<double>& a, std::vector<double>& b, const std::vector<double>& ga,
                     const std::vector<double>& gb, const std::function<double()>& f) {
      for (int c = 0; c < 50; ++c) {
        const std::size_t k = pick.below(a.size() + b.size());
        double& x = k < a.size() ? a[k] : b[k - a.size()];
        const double g = k < a.size() ? ga[k] : gb[k - a.size()];
        const double keep = x;
        x = keep + h;
        const double up = f();
        x = keep - h;
        const double down = f();
        x = keep;
        const double fd = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(g - fd) / std::max(std::abs(fd), 1e-3));
      }
    };
    const auto npe = npe_rs_loss(enc, head, psi, phi, in);
    probe(psi, phi, npe.grad_encoder, npe.grad_second, [&] { return npe_rs_loss(enc, head, psi, phi, in).total; });
    const auto ae = ae_rs_loss(enc, dec, psi, psi_d, in);
    probe(psi, psi_d, ae.grad_encoder, ae.grad_second, [&] { return ae_rs_loss(enc, dec, psi, psi_d, in).total; });
    ok = ok && worst <= 1e-4;
    detail += std::string(detail.empty() ? "" : ", ") + name + " " + fmt(worst);
  }
  return {ok, "max relative error (scale floor 1e-3, tol 1e-4): " + detail};
}

Verdict exact_ablation() {
  auto cfg = load("ricker", {"train.epochs=3", "train.lambda=0"});
  const auto data = make_seed_data(cfg, 0);
  bool ok = true;
  for (const auto& [plain, reg] : {std::pair{"npe", "npe-rs"}, std::pair{"abc", "abc-rs"}}) {
    progress(std::string("ablation ") + plain + " vs " + reg);
    const auto a = train_method(cfg, plain, data, 0);
    const auto b = train_method(cfg, reg, data, 0);
    ok = ok && a.checkpoint.encoder_params.values == b.checkpoint.encoder_params.values &&
         a.checkpoint.mdn_params.values == b.checkpoint.mdn_params.values &&
         a.checkpoint.decoder_params.values == b.checkpoint.decoder_params.values &&
         records_csv(a.records) == records_csv(b.records);
  }
  return {ok, "m=1000, 3 epochs: parameters and epoch records " + std::string(ok ? "bit-identical" : "differ")};
}

// Criteria 4-6 share one sweep over Ricker and OUP.
struct SweepRow {
  std::map<std::string, MetricReport> at20;  // method -> metrics at the config epsilon
  double rmse_npe0 = 0.0, rmse_rs0 = 0.0;    // well specified
};
std::map<std::string, std::vector<SweepRow>> sweep_cache;

const std::vector<SweepRow>& sweep(const std::string& model) {
  if (auto it = sweep_cache.find(model); it != sweep_cache.end()) return it->second;
  const auto cfg = load(model);
  const auto cfg0 = with_epsilon(cfg, 0.0);
  std::vector<SweepRow> rows;
  for (const auto seed : seed_list(opt.seeds)) {
    SweepRow row;
    const auto data = make_seed_data(cfg, seed);
    for (const std::string method : {"npe", "npe-rs", "abc", "abc-rs"}) {
      const auto ck = trained(cfg, method, data, seed);
      const auto ps = infer_method(cfg, method, ck, data.target, seed);
      row.at20[method] = evaluate_method(cfg, method, ps, data.target, seed);
    }
    const auto data0 = make_seed_data(cfg0, seed);
    for (const std::string method : {"npe", "npe-rs"}) {
      const auto ck = trained(cfg0, method, data0, seed);
      const auto ps = infer_method(cfg0, method, ck, data0.target, seed);
      (method == "npe" ? row.rmse_npe0 : row.rmse_rs0) = rmse(ps, cfg0.contamination.theta_true.span());
    }
    progress(model + " seed " + std::to_string(seed) + " rmse npe " + fmt(row.at20["npe"].rmse) + " npe-rs " +
             fmt(row.at20["npe-rs"].rmse) + " abc " + fmt(row.at20["abc"].rmse) + " abc-rs " +
             fmt(row.at20["abc-rs"].rmse) + " | eps0 npe " + fmt(row.rmse_npe0) + " npe-rs " + fmt(row.rmse_rs0));
    rows.push_back(std::move(row));
  }
  return sweep_cache[model] = std::move(rows);
}

double med(const std::vector<SweepRow>& rows, const std::string& method, double MetricReport::*field) {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(r.at20.at(method).*field);
  return median(v);
}

Verdict robustness_ordering() {
  bool ok = true;
  std::string detail;
  for (const std::string model : {"ricker", "oup"}) {
    const auto& rows = sweep(model);
    for (const auto& [metric, field] : {std::pair{"rmse", &MetricReport::rmse},
                                         std::pair{"mmd", &MetricReport::predictive_mmd}}) {
      for (const auto& [plain, reg] : {std::pair{"npe", "npe-rs"}, std::pair{"abc", "abc-rs"}}) {
        const double a = med(rows, plain, field), b = med(rows, reg, field);
        ok = ok && b < a;
        detail += (detail.empty() ? "" : "; ") + model + " " + metric + " " + reg + " " + fmt(b) + (b < a ? " < " : " >= ") +
                  plain + " " + fmt(a);
      }
    }
  }
  return {ok, "medians: " + detail};
}

Verdict parity() {
  bool ok = true;
  std::string detail;
  for (const std::string model : {"ricker", "oup"}) {
    std::vector<double> a, b;
    for (const auto& r : sweep(model)) {
      a.push_back(r.rmse_npe0);
      b.push_back(r.rmse_rs0);
    }
    const double ma = median(a), mb = median(b);
    ok = ok && mb <= 1.5 * ma;
    detail += (detail.empty() ? "" : "; ") + model + " npe-rs " + fmt(mb) + " vs 1.5 x npe " + fmt(1.5 * ma);
  }
  return {ok, "eps=0 median rmse: " + detail};
}

Verdict out_of_prior() {
  std::size_t wins = 0;
  std::string detail;
  for (const auto& r : sweep("ricker")) {
    const double a = r.at20.at("npe").frac_outside_prior, b = r.at20.at("npe-rs").frac_outside_prior;
    wins += a > b;
    detail += (detail.empty() ? "" : " ") + fmt(a) + "/" + fmt(b);
  }
  return {wins >= 8 * opt.seeds / 10, std::to_string(wins) + " of " + std::to_string(opt.seeds) +
                                          " seeds (need 8 of 10); npe/npe-rs per seed: " + detail};
}

Verdict lambda_endpoints() {
  const auto base = load("ricker");
  const std::size_t n = std::min<std::size_t>(5, opt.seeds);
  std::map<double, std::vector<double>> to_prior, to_npe;
  for (const auto seed : seed_list(n)) {
    const auto data = make_seed_data(base, seed);
    const auto npe = infer_method(base, "npe", trained(base, "npe", data, seed), data.target, seed);
    const auto prior = prior_samples(base.prior, base.posterior_samples, stream_seed(seed, "prior-reference"));
    for (const double lambda : {0.01, 1.0, 10.0, 1000.0}) {
      auto cfg = base;
      cfg.train.lambda = lambda;
      const auto ps = infer_method(cfg, "npe-rs", trained(cfg, "npe-rs", data, seed), data.target, seed);
      to_prior[lambda].push_back(posterior_mmd(ps, prior));
      to_npe[lambda].push_back(posterior_mmd(ps, npe));
    }
  }
  const double p1000 = median(to_prior[1000.0]), p1 = median(to_prior[1.0]);
  const double n001 = median(to_npe[0.01]), n10 = median(to_npe[10.0]);
  return {p1000 < p1 && n001 < n10, "median MMD to prior: lambda 1000 " + fmt(p1000) + ", lambda 1 " + fmt(p1) +
                                        "; to npe: lambda 0.01 " + fmt(n001) + ", lambda 10 " + fmt(n10) + " (" +
                                        std::to_string(n) + " seeds)"};
}

Verdict detection() {
  auto cfg = load("ricker");
  cfg.detect_epsilons = {0.05, 0.1, 0.2, 0.3};
  const std::size_t curve_seeds = std::min<std::size_t>(5, opt.seeds);
  std::vector<double> gmm(4, 0.0), mmd(4, 0.0);
  std::size_t wins = 0;
  for (const auto seed : seed_list(opt.seeds)) {
    const auto data = make_seed_data(cfg, seed);
    const auto ck = trained(cfg, "npe", data, seed);
    const auto stats = training_stats(ck, data.training);
    for (std::size_t e = 0; e < 4; ++e) {
      if (seed >= curve_seeds && e != 2) continue;
      const auto sum = summarize_detection(detect_epsilon(cfg, ck, stats, e, seed));
      if (seed < curve_seeds) {
        gmm[e] += sum.auroc_gmm / static_cast<double>(curve_seeds);
        mmd[e] += sum.auroc_mmd / static_cast<double>(curve_seeds);
      }
      if (e == 2) {
        wins += sum.auroc_gmm >= sum.auroc_rmse;
        progress("detect seed " + std::to_string(seed) + " eps 0.2 gmm " + fmt(sum.auroc_gmm) + " mmd " +
                 fmt(sum.auroc_mmd) + " rmse " + fmt(sum.auroc_rmse));
      }
    }
  }
  const bool mono = std::is_sorted(gmm.begin(), gmm.end()) && std::is_sorted(mmd.begin(), mmd.end());
  std::string curve = "gmm";
  for (const double v : gmm) curve += " " + fmt(v);
  curve += ", mmd";
  for (const double v : mmd) curve += " " + fmt(v);
  return {mono && wins >= 8 * opt.seeds / 10, "seed-averaged AUROC over eps {0.05,0.1,0.2,0.3}: " + curve + (mono ? " (monotone)" : " (not monotone)") +
                                                 "; gmm >= rmse at 0.2 in " + std::to_string(wins) + " of " +
                                                 std::to_string(opt.seeds) + " seeds"};
}

Verdict prior_misspecification() {
  const PriorSpec tail_prior{{PriorDim::lognormal(0.5, 1.0)}};
  std::size_t tail = 0;
  for (const auto& d : sample_prior(tail_prior, 1000000, 0)) tail += d[0] >= 25.0;
  const double frac = static_cast<double>(tail) / 1e6;
  const bool band = std::abs(frac - 0.00372) <= 0.0005;

  const auto cfg = load("ricker-lognormal");
  std::size_t wins = 0;
  std::string detail;
  for (const auto seed : seed_list(opt.seeds)) {
    const auto data = make_seed_data(cfg, seed);
    double mean[2] = {0.0, 0.0};
    for (int k = 0; k < 2; ++k) {
      const std::string method = k ? "npe-rs" : "npe";
      const auto ps = infer_method(cfg, method, trained(cfg, method, data, seed), data.target, seed);
      for (std::size_t i = 0; i < ps.samples.rows; ++i) mean[k] += ps.samples(i, 1);
      mean[k] /= static_cast<double>(ps.samples.rows);
    }
    wins += std::abs(mean[1] - 25.0) < std::abs(mean[0] - 25.0);
    detail += (detail.empty() ? "" : " ") + fmt(mean[0]) + "/" + fmt(mean[1]);
  }
  return {band && wins >= 7 * opt.seeds / 10,
          "P(theta_2 >= 25) = " + fmt(frac) + " (target 0.00372 +- 0.0005, " + (band ? "inside" : "outside") +
              "); npe-rs mean closer to 25 in " + std::to_string(wins) + " of " + std::to_string(opt.seeds) +
              " seeds (need 7 of 10); npe/npe-rs means: " + detail};
}

Verdict abc_count() {
  const auto cfg = load("ricker", {"train.m=50", "train.n=5", "train.l=20", "train.batch=10", "train.epochs=1"});
  const auto data = make_seed_data(cfg, 0);
  const auto ck = train_method(cfg, "abc", data, 0).checkpoint;
  AbcConfig ac;
  ac.draws = 4000;
  ac.quantile = 0.05;
  const auto res = rejection_abc(ck, cfg.simulator, cfg.prior, data.target, ac, 1);
  return {res.indices.size() == 200 && res.thetas.rows == 200,
          "4000 draws at quantile 0.05 accepted " + std::to_string(res.indices.size())};
}

/// Final-epoch regularizer term is non-increasing in lambda.
Verdict regularizer_pressure() {
  const auto base = load("ricker");
  std::size_t holds = 0;
  std::string detail;
  for (const auto seed : seed_list(opt.seeds)) {
    const auto data = make_seed_data(base, seed);
    std::vector<double> reg;
    for (const double lambda : {0.1, 1.0, 10.0, 100.0}) {
      auto cfg = base;
      cfg.train.lambda = lambda;
      reg.push_back(train_cached(cfg, "npe-rs", data, seed).final_regularizer);
    }
    const bool ok = std::is_sorted(reg.rbegin(), reg.rend());
    holds += ok;
    detail += std::string(detail.empty() ? "" : "; ") + fmt(reg[0]) + " " + fmt(reg[1]) + " " + fmt(reg[2]) + " " +
              fmt(reg[3]);
  }
  return {holds >= 8 * opt.seeds / 10, "non-increasing in " + std::to_string(holds) + " of " +
                                           std::to_string(opt.seeds) + " seeds (need 8 of 10); per seed: " + detail};
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = io::read_file(e.path().string());
  return out;
}

Verdict determinism() {
  const auto cfg = load("ricker", {"train.m=200", "train.n=20", "train.l=50", "train.epochs=3", "abc.draws=400",
                                   "evaluate.posterior_samples=200", "evaluate.predictive_thetas=10",
                                   "detect.test_sets=20", "seeds=[0, 1]"});
  const auto root = fs::temp_directory_path() / ("rsbi-acceptance-" + std::to_string(::getpid()));
  std::vector<std::map<std::string, std::string>> trees;
  for (const char* run : {"first", "second"}) {
    progress(std::string("determinism ") + run + " run");
    const RunLayout layout(cfg, root / run);
    write_run_config(cfg, layout);
    std::vector<std::vector<MetricReport>> metrics;
    for (const auto seed : cfg.seeds) {
      stage_simulate(cfg, layout, seed);
      stage_train(cfg, layout, seed);
      stage_infer(cfg, layout, seed);
      std::vector<std::string> log;
      metrics.push_back(evaluate_seed(cfg, layout, seed, log));
    }
    aggregate_evaluation(layout, metrics);
    for (const auto seed : cfg.seeds) {
      stage_detect(cfg, layout, seed);
      stage_plot(cfg, layout, seed);
    }
    trees.push_back(tree(root / run));
  }
  fs::remove_all(root);
  std::size_t csv = 0, ckpt = 0, svg = 0;
  for (const auto& [name, bytes] : trees[0]) {
    const auto ext = fs::path(name).extension();
    csv += ext == ".csv";
    ckpt += ext == ".ckpt";
    svg += ext == ".svg";
  }
  const bool ok = trees[0] == trees[1] && csv > 0 && ckpt > 0 && svg > 0;
  return {ok, std::to_string(trees[0].size()) + " files (" + std::to_string(csv) + " csv, " + std::to_string(ckpt) +
                  " ckpt, " + std::to_string(svg) + " svg) " + (trees[0] == trees[1] ? "byte-identical" : "differ") +
                  " across two runs (reduced Ricker config)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  app.add_option("--configs", opt.configs, "directory holding the bundled YAML configs");
  app.add_option("--cache", opt.cache, "checkpoint cache directory (empty: no cache)");
  app.add_option("--only", opt.only, "criterion numbers to run")->delimiter(',');
  app.add_option("--seeds", opt.seeds, "seed count for the statistical criteria")->check(CLI::Range(1, 100));
  bool pressure = false;
  app.add_flag("--pressure", pressure, "check the regularizer-pressure invariant instead of the criteria");
  CLI11_PARSE(app, argc, argv);

  if (pressure) {
    Verdict v;
    try {
      v = regularizer_pressure();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    std::cout << "invariant " << (v.pass ? "PASS" : "FAIL") << " [monotone regularizer pressure]: " << v.detail
              << std::endl;
    return v.pass ? 0 : 1;
  }

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"MMD oracle equivalence", mmd_oracles},
      {"gradient suite", gradient_suite},
      {"exact ablation", exact_ablation},
      {"robustness ordering", robustness_ordering},
      {"well-specified parity", parity},
      {"out-of-prior pathology", out_of_prior},
      {"lambda endpoints", lambda_endpoints},
      {"detection", detection},
      {"prior misspecification", prior_misspecification},
      {"ABC count contract", abc_count},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!opt.only.empty() && !opt.only.count(id)) continue;
    std::cerr << "criterion " << id << " (" << criteria[i].first << ")" << std::endl;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << "criterion " << id << " " << (v.pass ? "PASS" : "FAIL") << " [" << criteria[i].first
              << "]: " << v.detail << std::endl;
  }
  return failed ? 1 : 0;
}
