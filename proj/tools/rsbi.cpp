#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rsbi/rsbi.hpp"

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  std::size_t jobs = 1;
  std::vector<std::string> inputs;
};

struct Run {
  rsbi::ExperimentConfig cfg;
  rsbi::RunLayout layout;
  std::vector<std::uint64_t> seeds;
  std::size_t jobs;
};

Run open_run(const Options& o) {
  if (o.config.empty()) throw rsbi::ConfigError("--config is required");
  auto cfg = rsbi::parse_config(rsbi::io::read_file(o.config), o.overrides);
  if (!o.out.empty()) cfg.out = o.out;
  std::vector<std::uint64_t> seeds = o.seed ? std::vector<std::uint64_t>{*o.seed} : cfg.seeds;
  rsbi::RunLayout layout(cfg, cfg.out);
  rsbi::write_run_config(cfg, layout);
  return {std::move(cfg), std::move(layout), std::move(seeds), o.jobs};
}

void print(const std::vector<std::vector<std::string>>& logs) {
  for (const auto& lines : logs)
    for (const auto& l : lines) std::cout << l << "\n";
}

template <class Stage>
void per_seed(const Run& r, Stage stage) {
  print(rsbi::for_each_seed(r.seeds, r.jobs, [&](std::uint64_t s) { return stage(r.cfg, r.layout, s); }));
}

void evaluate(const Run& r) {
  auto rows = rsbi::for_each_seed(r.seeds, r.jobs, [&](std::uint64_t s) {
    std::vector<std::string> log;
    auto m = rsbi::evaluate_seed(r.cfg, r.layout, s, log);
    return std::make_pair(std::move(m), std::move(log));
  });
  std::vector<std::vector<rsbi::MetricReport>> metrics;
  for (auto& [m, log] : rows) {
    for (const auto& l : log) std::cout << l << "\n";
    metrics.push_back(std::move(m));
  }
  for (const auto& l : rsbi::aggregate_evaluation(r.layout, metrics)) std::cout << l << "\n";
}

bool wants_detection(const rsbi::ExperimentConfig& cfg) {
  return !cfg.detect_epsilons.empty() &&
         std::find(cfg.methods.begin(), cfg.methods.end(), "npe") != cfg.methods.end();
}

/// Renders standalone CSV inputs. Posterior CSVs need --config for the prior.
void plot_inputs(const Options& o) {
  std::optional<rsbi::ExperimentConfig> cfg;
  if (!o.config.empty()) cfg = rsbi::parse_config(rsbi::io::read_file(o.config), o.overrides);
  for (const auto& in : o.inputs) {
    const auto text = rsbi::io::read_file(in);
    const fs::path dest = (o.out.empty() ? fs::path(in).parent_path() : fs::path(o.out)) /
                          (fs::path(in).stem().string() + ".svg");
    const std::string comment = "source " + rsbi::io::hex64(rsbi::fnv1a64(text));
    std::string body;
    std::string first;
    for (const auto& line : rsbi::io::split(text, '\n'))
      if (!line.empty() && line.front() != '#') {
        first = line;
        break;
      }
    if (first == rsbi::kMetricsHeader) {
      const auto rows = rsbi::parse_metrics_csv(text);
      body = rsbi::svg::lambda_curves(rows, "rmse", "rmse versus lambda", comment);
    } else if (first.rfind("kind,", 0) == 0) {
      const auto [stats, obs] = rsbi::parse_statistics_csv(text);
      body = rsbi::svg::scatter_matrix(stats, obs, "summary statistics", comment);
    } else if (first.rfind("theta_1", 0) == 0) {
      if (!cfg) throw rsbi::ConfigError("plotting a posterior CSV needs --config for the prior");
      const auto ps = rsbi::parse_posterior_csv(text);
      body = rsbi::svg::posterior_scatter(ps, cfg->prior, cfg->contamination.theta_true.span(),
                                          fs::path(in).stem().string(), comment);
    } else {
      throw rsbi::IoError(in + ": unrecognized CSV header");
    }
    rsbi::write_artifact(dest, body);
    std::cout << dest.string() << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust simulation-based inference experiments"};
  app.require_subcommand(1, 1);
  Options o;
  app.add_option("--config", o.config, "experiment config (YAML)");
  app.add_option("--seed", o.seed, "run only this seed");
  app.add_option("--out", o.out, "output directory, overrides the config");
  app.add_option("--override", o.overrides, "key=value, dotted keys, repeatable");
  app.add_option("--jobs", o.jobs, "worker threads for the seed fan-out")->check(CLI::PositiveNumber);

  auto* simulate = app.add_subcommand("simulate", "generate training sets and observed data");
  auto* train = app.add_subcommand("train", "train summary networks and heads");
  auto* infer = app.add_subcommand("infer", "draw posterior samples");
  auto* detect = app.add_subcommand("detect", "misspecification detection sweep");
  auto* eval = app.add_subcommand("evaluate", "compute metrics");
  auto* plot = app.add_subcommand("plot", "render SVG figures");
  auto* all = app.add_subcommand("all", "run every stage in order");
  plot->add_option("--input", o.inputs, "CSV files to render instead of a run directory");
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (plot->parsed() && !o.inputs.empty()) {
      plot_inputs(o);
      return 0;
    }
    const Run r = open_run(o);
    std::cout << "run " << r.layout.root().string() << "\n";
    if (simulate->parsed()) per_seed(r, rsbi::stage_simulate);
    if (train->parsed()) per_seed(r, rsbi::stage_train);
    if (infer->parsed()) per_seed(r, rsbi::stage_infer);
    if (eval->parsed()) evaluate(r);
    if (detect->parsed()) per_seed(r, rsbi::stage_detect);
    if (plot->parsed()) per_seed(r, rsbi::stage_plot);
    if (all->parsed()) {
      per_seed(r, rsbi::stage_simulate);
      per_seed(r, rsbi::stage_train);
      per_seed(r, rsbi::stage_infer);
      evaluate(r);
      if (wants_detection(r.cfg)) per_seed(r, rsbi::stage_detect);
      per_seed(r, rsbi::stage_plot);
    }
    return 0;
  } catch (const rsbi::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const rsbi::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const rsbi::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
