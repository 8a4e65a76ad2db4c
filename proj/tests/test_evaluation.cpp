#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "rsbi/evaluation.hpp"

using namespace rsbi;

namespace {

PosteriorSamples from_rows(std::size_t n, std::size_t k, std::vector<double> v) {
  PosteriorSamples ps;
  ps.samples = Matrix(n, k, std::move(v));
  return ps;
}

PosteriorSamples point_mass(std::span<const double> theta, std::size_t n) {
  PosteriorSamples ps;
  ps.samples = Matrix(n, theta.size());
  for (std::size_t i = 0; i < n; ++i) std::copy(theta.begin(), theta.end(), ps.samples.row(i).begin());
  return ps;
}

PosteriorSamples gaussian_cloud(std::size_t n, std::size_t k, std::uint64_t seed, double shift = 0.0) {
  Rng rng(seed);
  PosteriorSamples ps;
  ps.samples = Matrix(n, k);
  for (auto& v : ps.samples.values) v = rng.normal() + shift;
  return ps;
}

}  // namespace

TEST_CASE("rmse: closed forms and loop oracle") {
  const std::vector<double> truth{4.0, 10.0};
  CHECK(rmse(point_mass(truth, 7), truth) == 0.0);
  const double r = 2.5;
  const auto sym = from_rows(2, 2, {4.0 + 0.6 * r, 10.0 + 0.8 * r, 4.0 - 0.6 * r, 10.0 - 0.8 * r});
  CHECK(rmse(sym, truth) == Catch::Approx(r).epsilon(1e-14));

  const auto ps = gaussian_cloud(300, 3, 1, 2.0);
  const std::vector<double> t3{1.0, -0.5, 2.5};
  double acc = 0.0;
  for (std::size_t i = 0; i < 300; ++i)
    for (std::size_t j = 0; j < 3; ++j) acc += (ps.samples(i, j) - t3[j]) * (ps.samples(i, j) - t3[j]);
  CHECK(std::abs(rmse(ps, t3) - std::sqrt(acc / 300.0)) <= 1e-12);

  CHECK_THROWS_AS(rmse(PosteriorSamples{}, truth), std::invalid_argument);
  CHECK_THROWS_AS(rmse(ps, truth), std::invalid_argument);
}

TEST_CASE("rmse: permutation and joint rotation invariance") {
  const auto ps = gaussian_cloud(100, 2, 2, 1.0);
  const std::vector<double> truth{0.3, -0.7};
  const double base = rmse(ps, truth);
  PosteriorSamples rev;
  rev.samples = Matrix(100, 2);
  for (std::size_t i = 0; i < 100; ++i)
    std::copy(ps.row(99 - i).begin(), ps.row(99 - i).end(), rev.samples.row(i).begin());
  CHECK(std::abs(rmse(rev, truth) - base) <= 1e-12 * base);

  const double c = std::cos(0.7), s = std::sin(0.7);
  PosteriorSamples rot;
  rot.samples = Matrix(100, 2);
  for (std::size_t i = 0; i < 100; ++i) {
    rot.samples(i, 0) = c * ps.samples(i, 0) - s * ps.samples(i, 1);
    rot.samples(i, 1) = s * ps.samples(i, 0) + c * ps.samples(i, 1);
  }
  const std::vector<double> rt{c * truth[0] - s * truth[1], s * truth[0] + c * truth[1]};
  CHECK(std::abs(rmse(rot, rt) - base) <= 1e-12 * base);
}

TEST_CASE("frac_outside_prior: box and lognormal supports") {
  const auto prior = ricker_prior();
  CHECK(frac_outside_prior(from_rows(2, 2, {3, 5, 7.9, 19.9}), prior) == 0.0);
  CHECK(frac_outside_prior(from_rows(3, 2, {1, -1, 1, -1, 1, -1}), prior) == 1.0);

  auto ps = gaussian_cloud(1000, 2, 3);
  for (std::size_t i = 0; i < 1000; ++i) {
    ps.samples.values[2 * i] = 5.0 + 4.0 * ps.samples.values[2 * i];
    ps.samples.values[2 * i + 1] = 10.0 + 12.0 * ps.samples.values[2 * i + 1];
  }
  std::size_t outside = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    const double a = ps.samples(i, 0), b = ps.samples(i, 1);
    if (a < 2.0 || a > 8.0 || b < 0.0 || b > 20.0) ++outside;
  }
  CHECK(frac_outside_prior(ps, prior) == static_cast<double>(outside) / 1000.0);

  const PriorSpec lognormal{{PriorDim::uniform(2, 8), PriorDim::lognormal(0.5, 1.0)}};
  CHECK(frac_outside_prior(from_rows(3, 2, {4, 1e6, 4, 1e-9, 4, 0.0}), lognormal) == Catch::Approx(1.0 / 3.0));
}

TEST_CASE("standardized_mmd: identical pools give zero") {
  const auto obs = simulate_ricker({4, 10}, 100, 60, 4);
  const StatSet a(obs.n, obs.d, obs.values);
  CHECK(std::abs(standardized_mmd(a, a, 1.0)) <= 1e-12);
}

TEST_CASE("predictive_mmd: draws at theta_true beat draws at theta_c") {
  const auto sim = Simulator::defaults(ModelTag::ricker);
  const std::vector<double> truth{4, 10}, cont{4, 100};
  PredictiveConfig cfg;
  cfg.max_thetas = 20;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto obs = simulate_ricker({4, 10}, 100, 100, stream_seed(seed, "obs"));
    const double good = predictive_mmd(point_mass(truth, 20), sim, obs, cfg, seed);
    const double bad = predictive_mmd(point_mass(cont, 20), sim, obs, cfg, seed);
    INFO("seed " << seed);
    CHECK(good < bad);
    CHECK(good >= -2.0);
  }
}

TEST_CASE("predictive_mmd: out-of-domain draws are clamped with a warning") {
  const auto sim = Simulator::defaults(ModelTag::ricker);
  const auto obs = simulate_ricker({4, 10}, 100, 20, 1);
  std::vector<std::string> warnings;
  const std::vector<double> bad{4.0, -3.0};
  const double v = predictive_mmd(point_mass(bad, 5), sim, obs, PredictiveConfig{}, 0, &warnings);
  CHECK(std::isfinite(v));
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("5 posterior draws clamped") != std::string::npos);
}

TEST_CASE("posterior_mmd: identity, symmetry, translation and a prior null") {
  const auto a = gaussian_cloud(200, 2, 5);
  const auto b = gaussian_cloud(150, 2, 6, 0.5);
  CHECK(std::abs(posterior_mmd(a, a)) <= 1e-12);
  CHECK(posterior_mmd(a, b) == posterior_mmd(b, a));
  auto a2 = a, b2 = b;
  for (auto& v : a2.samples.values) v += 3.0;
  for (auto& v : b2.samples.values) v += 3.0;
  CHECK(std::abs(posterior_mmd(a2, b2) - posterior_mmd(a, b)) <= 1e-12);

  const auto p1 = prior_samples(ricker_prior(), 500, 7);
  const auto p2 = prior_samples(ricker_prior(), 500, 8);
  CHECK(posterior_mmd(p1, p2) < 0.05);
  CHECK_THROWS_AS(posterior_mmd(a, PosteriorSamples{}), std::invalid_argument);
}

TEST_CASE("metrics CSV: round-trip keeps every column") {
  std::vector<MetricReport> rows{{"npe", "ricker", 0.2, 0.0, 3, 11.25, 0.125, 0.5, 0.0},
                                 {"abc-rs", "oup", 0.0, 10.0, 9, 1.0 / 3.0, -0.01, 0.0, 2.5}};
  const auto text = metrics_csv(rows, "config-hash abc");
  const auto back = parse_metrics_csv(text);
  REQUIRE(back.size() == 2);
  CHECK(metrics_csv(back, "config-hash abc") == text);
  CHECK_THROWS_AS(parse_metrics_csv("method,model\n"), IoError);
}
