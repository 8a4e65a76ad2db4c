#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "rsbi/detection.hpp"
#include "rsbi/evaluation.hpp"
#include "rsbi/inference.hpp"
#include "rsbi/io.hpp"
#include "rsbi/networks.hpp"
#include "rsbi/simulators.hpp"
#include "rsbi/training.hpp"
#include "rsbi/types.hpp"

namespace rsbi {

/// Everything one experiment needs. Field order here is the canonical
/// serialization order.
struct ExperimentConfig {
  ModelTag model = ModelTag::ricker;
  Simulator simulator = Simulator::defaults(ModelTag::ricker);
  std::size_t obs_n = 100;
  PriorSpec prior;
  ContaminationSpec contamination;
  double infer_epsilon = 0.0;  // observed data for inference; equals epsilon unless set
  std::vector<std::string> methods{"npe", "npe-rs", "abc", "abc-rs"};

  std::size_t m = 1000;
  std::size_t n = 100;
  TrainConfig train;
  std::string layers;  // empty = model default
  std::size_t stat_dim = 4;
  std::size_t components = 5;
  std::size_t hidden = 50;

  AbcConfig abc;
  bool abc_adjust = true;

  std::vector<std::string> metrics{"rmse", "predictive_mmd", "frac_outside_prior"};
  std::size_t posterior_samples = 1000;
  PredictiveConfig predictive;

  std::vector<double> detect_epsilons{0.05, 0.1, 0.2, 0.3};
  DetectionConfig detect;

  std::vector<std::uint64_t> seeds;
  std::string out = "runs";

  EncoderConfig encoder_config() const {
    auto ec = EncoderConfig::defaults(model);
    ec.d = simulator.dim();
    if (!layers.empty()) ec.layers = EncoderConfig::parse_layers(layers);
    ec.stat_dim = stat_dim;
    return ec;
  }

  MdnConfig head_config() const {
    auto mc = MdnConfig::for_prior(prior, stat_dim);
    mc.components = components;
    mc.hidden = hidden;
    return mc;
  }
};

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> v{"npe", "npe-rs", "abc", "abc-rs"};
  return v;
}

inline const std::vector<std::string>& known_metrics() {
  static const std::vector<std::string> v{"rmse", "predictive_mmd", "frac_outside_prior"};
  return v;
}

/// Training method behind a pipeline method tag. Training tags (ae, ae-rs)
/// map to themselves.
inline Method training_method(std::string_view method) {
  if (method == "npe") return Method::npe;
  if (method == "npe-rs") return Method::npe_rs;
  if (method == "abc" || method == "ae") return Method::ae;
  if (method == "abc-rs" || method == "ae-rs") return Method::ae_rs;
  throw ConfigError("unknown method '" + std::string(method) + "'");
}

namespace detail {

inline std::string where(const YAML::Node& node) {
  const auto mark = node.Mark();
  if (mark.line < 0) return "config";
  return "config line " + std::to_string(mark.line + 1);
}

template <class T>
T scalar(const YAML::Node& node, std::string_view key) {
  if (!node.IsScalar()) throw ConfigError(where(node) + ": '" + std::string(key) + "' must be a scalar");
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError(where(node) + ": '" + std::string(key) + "' has an invalid value '" + node.Scalar() + "'");
  }
}

inline double number(const YAML::Node& node, std::string_view key) {
  if (!node.IsScalar()) throw ConfigError(where(node) + ": '" + std::string(key) + "' must be a number");
  try {
    return io::parse_double(node.Scalar());
  } catch (const std::invalid_argument&) {
    throw ConfigError(where(node) + ": '" + std::string(key) + "' must be a number, got '" + node.Scalar() + "'");
  }
}

inline std::size_t count(const YAML::Node& node, std::string_view key) {
  const double v = number(node, key);
  if (!(v >= 0.0) || v != std::floor(v)) throw ConfigError(where(node) + ": '" + std::string(key) + "' must be a count");
  return static_cast<std::size_t>(v);
}

inline std::vector<double> numbers(const YAML::Node& node, std::string_view key) {
  if (!node.IsSequence()) throw ConfigError(where(node) + ": '" + std::string(key) + "' must be a list");
  std::vector<double> out;
  for (const auto& item : node) out.push_back(number(item, key));
  return out;
}

inline std::vector<std::string> strings(const YAML::Node& node, std::string_view key) {
  if (!node.IsSequence()) throw ConfigError(where(node) + ": '" + std::string(key) + "' must be a list");
  std::vector<std::string> out;
  for (const auto& item : node) out.push_back(scalar<std::string>(item, key));
  return out;
}

inline void only_keys(const YAML::Node& map, std::string_view section, const std::set<std::string>& allowed) {
  if (!map.IsMap()) throw ConfigError(where(map) + ": '" + std::string(section) + "' must be a mapping");
  for (const auto& kv : map) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key))
      throw ConfigError(where(kv.first) + ": unknown key '" + (section.empty() ? "" : std::string(section) + ".") + key +
                        "'");
  }
}

template <class F>
void with(const YAML::Node& map, const char* key, F&& f) {
  if (const auto node = map[key]) f(node);
}

/// Sets a dotted key in a YAML tree; the value text is parsed as YAML.
inline void apply_override(YAML::Node root, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
  const auto path = io::split(assignment.substr(0, eq), '.');
  YAML::Node value;
  try {
    value = YAML::Load(std::string(assignment.substr(eq + 1)));
  } catch (const YAML::Exception& e) {
    throw ConfigError("override '" + std::string(assignment) + "': " + e.what());
  }
  std::vector<YAML::Node> chain{root};
  for (std::size_t i = 0; i + 1 < path.size(); ++i) chain.push_back(chain.back()[path[i]]);
  chain.back()[path.back()] = value;
}

}  // namespace detail

/// Parses YAML text into a validated config. Overrides are "a.b=value"
/// assignments applied before validation.
inline ExperimentConfig parse_config(std::string_view text, const std::vector<std::string>& overrides = {}) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(text));
  } catch (const YAML::ParserException& e) {
    throw ConfigError("config line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  if (!root.IsMap()) throw ConfigError("config: top level must be a mapping");
  for (const auto& o : overrides) detail::apply_override(root, o);
  using detail::count;
  using detail::number;
  detail::only_keys(root, "",
                    {"model", "simulator", "prior", "contamination", "methods", "train", "network", "abc", "evaluate",
                     "detect", "seeds", "out"});
  for (const char* key : {"model", "prior", "contamination", "seeds"})
    if (!root[key]) throw ConfigError("config: missing required key '" + std::string(key) + "'");

  ExperimentConfig c;
  try {
    c.model = parse_model_tag(detail::scalar<std::string>(root["model"], "model"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(detail::where(root["model"]) + ": " + e.what());
  }
  c.simulator = Simulator::defaults(c.model);
  detail::with(root, "simulator", [&](const YAML::Node& s) {
    detail::only_keys(s, "simulator",
                      {"length", "realizations", "sigma_e2", "dt", "x0", "noise_scale", "variance", "bandwidth"});
    detail::with(s, "length", [&](const YAML::Node& v) { c.simulator.length = count(v, "simulator.length"); });
    detail::with(s, "realizations", [&](const YAML::Node& v) { c.obs_n = count(v, "simulator.realizations"); });
    detail::with(s, "sigma_e2", [&](const YAML::Node& v) { c.simulator.ricker.sigma_e2 = number(v, "sigma_e2"); });
    detail::with(s, "dt", [&](const YAML::Node& v) { c.simulator.oup.dt = number(v, "dt"); });
    detail::with(s, "x0", [&](const YAML::Node& v) { c.simulator.oup.x0 = number(v, "x0"); });
    detail::with(s, "noise_scale", [&](const YAML::Node& v) { c.simulator.oup.noise_scale = number(v, "noise_scale"); });
    detail::with(s, "variance", [&](const YAML::Node& v) { c.simulator.gaussian.variance = number(v, "variance"); });
    detail::with(s, "bandwidth", [&](const YAML::Node& v) { c.simulator.turin.bandwidth = number(v, "bandwidth"); });
  });
  if (c.simulator.length < 1 || c.obs_n < 1) throw ConfigError("config: simulator length and realizations must be >= 1");

  const auto prior = root["prior"];
  try {
    if (prior.IsScalar() && prior.Scalar() == "default") {
      c.prior = default_prior(c.model);
    } else {
      for (const auto& s : detail::strings(prior, "prior")) c.prior.dims.push_back(PriorDim::parse(s));
      c.prior.validate();
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(detail::where(prior) + ": " + e.what());
  }
  if (c.prior.size() != param_count(c.model))
    throw ConfigError(detail::where(prior) + ": prior has " + std::to_string(c.prior.size()) + " dimensions, model needs " +
                      std::to_string(param_count(c.model)));

  const auto cont = root["contamination"];
  detail::only_keys(cont, "contamination", {"epsilon", "theta_true", "theta_c", "infer_epsilon"});
  for (const char* key : {"epsilon", "theta_true", "theta_c"})
    if (!cont[key]) throw ConfigError(detail::where(cont) + ": missing required key 'contamination." + key + "'");
  c.contamination.epsilon = number(cont["epsilon"], "contamination.epsilon");
  c.contamination.theta_true = ParamVector(detail::numbers(cont["theta_true"], "contamination.theta_true"));
  c.contamination.theta_c = ParamVector(detail::numbers(cont["theta_c"], "contamination.theta_c"));
  c.infer_epsilon = c.contamination.epsilon;
  detail::with(cont, "infer_epsilon", [&](const YAML::Node& v) {
    c.infer_epsilon = number(v, "contamination.infer_epsilon");
    if (!(c.infer_epsilon >= 0.0 && c.infer_epsilon <= 1.0))
      throw ConfigError(detail::where(v) + ": contamination.infer_epsilon must lie in [0, 1]");
  });
  try {
    c.contamination.validate();
    c.simulator.validate(c.contamination.theta_true);
    c.simulator.validate(c.contamination.theta_c);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(detail::where(cont) + ": " + e.what());
  }

  detail::with(root, "methods", [&](const YAML::Node& v) {
    c.methods = detail::strings(v, "methods");
    for (const auto& mth : c.methods)
      if (std::find(known_methods().begin(), known_methods().end(), mth) == known_methods().end())
        throw ConfigError(detail::where(v) + ": unknown method '" + mth + "'");
  });

  detail::with(root, "train", [&](const YAML::Node& t) {
    detail::only_keys(t, "train",
                      {"m", "n", "l", "batch", "learning_rate", "epochs", "patience", "lambda", "regularizer",
                       "bandwidth", "record_timing"});
    detail::with(t, "m", [&](const YAML::Node& v) { c.m = count(v, "train.m"); });
    detail::with(t, "n", [&](const YAML::Node& v) { c.n = count(v, "train.n"); });
    detail::with(t, "l", [&](const YAML::Node& v) { c.train.l = count(v, "train.l"); });
    detail::with(t, "batch", [&](const YAML::Node& v) { c.train.batch = count(v, "train.batch"); });
    detail::with(t, "learning_rate", [&](const YAML::Node& v) { c.train.learning_rate = number(v, "train.learning_rate"); });
    detail::with(t, "epochs", [&](const YAML::Node& v) { c.train.epochs = count(v, "train.epochs"); });
    detail::with(t, "patience", [&](const YAML::Node& v) { c.train.patience = count(v, "train.patience"); });
    detail::with(t, "lambda", [&](const YAML::Node& v) { c.train.lambda = number(v, "train.lambda"); });
    detail::with(t, "regularizer", [&](const YAML::Node& v) {
      try {
        c.train.regularizer = parse_regularizer(detail::scalar<std::string>(v, "train.regularizer"));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(detail::where(v) + ": " + e.what());
      }
    });
    detail::with(t, "bandwidth", [&](const YAML::Node& v) {
      if (v.IsScalar() && v.Scalar() == "median") {
        c.train.bandwidth = BandwidthPolicy::median_per_step;
      } else if (v.IsScalar() && v.Scalar() == "median-epoch") {
        c.train.bandwidth = BandwidthPolicy::median_per_epoch;
      } else {
        c.train.bandwidth = BandwidthPolicy::fixed;
        c.train.fixed_beta = number(v, "train.bandwidth");
      }
    });
    detail::with(t, "record_timing", [&](const YAML::Node& v) { c.train.record_timing = detail::scalar<bool>(v, "train.record_timing"); });
  });
  try {
    c.train.validate(c.m);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config: train: " + std::string(e.what()));
  }
  if (c.n < 1) throw ConfigError("config: train.n must be >= 1");

  detail::with(root, "network", [&](const YAML::Node& nw) {
    detail::only_keys(nw, "network", {"layers", "stat_dim", "components", "hidden"});
    detail::with(nw, "layers", [&](const YAML::Node& v) { c.layers = detail::scalar<std::string>(v, "network.layers"); });
    detail::with(nw, "stat_dim", [&](const YAML::Node& v) { c.stat_dim = count(v, "network.stat_dim"); });
    detail::with(nw, "components", [&](const YAML::Node& v) { c.components = count(v, "network.components"); });
    detail::with(nw, "hidden", [&](const YAML::Node& v) { c.hidden = count(v, "network.hidden"); });
  });
  try {
    const Encoder probe(c.encoder_config());
    const Mdn head(c.head_config());
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config: network: " + std::string(e.what()));
  }

  detail::with(root, "abc", [&](const YAML::Node& a) {
    detail::only_keys(a, "abc", {"draws", "quantile", "adjust"});
    detail::with(a, "draws", [&](const YAML::Node& v) { c.abc.draws = count(v, "abc.draws"); });
    detail::with(a, "quantile", [&](const YAML::Node& v) { c.abc.quantile = number(v, "abc.quantile"); });
    detail::with(a, "adjust", [&](const YAML::Node& v) { c.abc_adjust = detail::scalar<bool>(v, "abc.adjust"); });
  });
  try {
    c.abc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config: abc: " + std::string(e.what()));
  }

  detail::with(root, "evaluate", [&](const YAML::Node& e) {
    detail::only_keys(e, "evaluate",
                      {"metrics", "posterior_samples", "predictive_thetas", "predictive_realizations", "predictive_beta"});
    detail::with(e, "metrics", [&](const YAML::Node& v) {
      c.metrics = detail::strings(v, "evaluate.metrics");
      for (const auto& mt : c.metrics)
        if (std::find(known_metrics().begin(), known_metrics().end(), mt) == known_metrics().end())
          throw ConfigError(detail::where(v) + ": unknown metric '" + mt + "'");
    });
    detail::with(e, "posterior_samples", [&](const YAML::Node& v) { c.posterior_samples = count(v, "evaluate.posterior_samples"); });
    detail::with(e, "predictive_thetas", [&](const YAML::Node& v) { c.predictive.max_thetas = count(v, "evaluate.predictive_thetas"); });
    detail::with(e, "predictive_realizations", [&](const YAML::Node& v) { c.predictive.n_sim = count(v, "evaluate.predictive_realizations"); });
    detail::with(e, "predictive_beta", [&](const YAML::Node& v) { c.predictive.beta = number(v, "evaluate.predictive_beta"); });
  });
  if (c.posterior_samples < 1) throw ConfigError("config: evaluate.posterior_samples must be >= 1");

  detail::with(root, "detect", [&](const YAML::Node& d) {
    detail::only_keys(d, "detect", {"epsilons", "test_sets", "gmm_components", "posterior_samples"});
    detail::with(d, "epsilons", [&](const YAML::Node& v) { c.detect_epsilons = detail::numbers(v, "detect.epsilons"); });
    detail::with(d, "test_sets", [&](const YAML::Node& v) { c.detect.test_sets = count(v, "detect.test_sets"); });
    detail::with(d, "gmm_components", [&](const YAML::Node& v) { c.detect.gmm_components = count(v, "detect.gmm_components"); });
    detail::with(d, "posterior_samples", [&](const YAML::Node& v) { c.detect.posterior_samples = count(v, "detect.posterior_samples"); });
  });
  for (const double e : c.detect_epsilons)
    if (!(e >= 0.0 && e <= 1.0)) throw ConfigError("config: detect.epsilons must lie in [0, 1]");
  if (c.detect.test_sets < 2) throw ConfigError("config: detect.test_sets must be >= 2");

  const auto seeds = root["seeds"];
  for (const double s : detail::numbers(seeds, "seeds")) {
    if (!(s >= 0.0) || s != std::floor(s)) throw ConfigError(detail::where(seeds) + ": seeds must be non-negative integers");
    c.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  if (c.seeds.empty()) throw ConfigError(detail::where(seeds) + ": seeds must not be empty");
  detail::with(root, "out", [&](const YAML::Node& v) { c.out = detail::scalar<std::string>(v, "out"); });
  return c;
}

namespace detail {

inline std::string yaml_list(std::span<const double> v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += io::format_double(v[i]);
  }
  return out + "]";
}

inline std::string yaml_list(std::span<const std::string> v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += v[i];
  }
  return out + "]";
}

}  // namespace detail

/// Canonical text: fixed key order, every field written, shortest
/// round-trip numbers. parse_config(serialize_config(c)) == c.
inline std::string serialize_config(const ExperimentConfig& c, bool include_out = true) {
  using io::format_double;
  std::string s;
  s += "model: " + std::string(to_string(c.model)) + "\n";
  s += "simulator:\n";
  s += "  length: " + std::to_string(c.simulator.length) + "\n";
  s += "  realizations: " + std::to_string(c.obs_n) + "\n";
  s += "  sigma_e2: " + format_double(c.simulator.ricker.sigma_e2) + "\n";
  s += "  dt: " + format_double(c.simulator.oup.dt) + "\n";
  s += "  x0: " + format_double(c.simulator.oup.x0) + "\n";
  s += "  noise_scale: " + format_double(c.simulator.oup.noise_scale) + "\n";
  s += "  variance: " + format_double(c.simulator.gaussian.variance) + "\n";
  s += "  bandwidth: " + format_double(c.simulator.turin.bandwidth) + "\n";
  s += "prior:\n";
  for (const auto& d : c.prior.dims) s += "  - \"" + d.to_string() + "\"\n";
  s += "contamination:\n";
  s += "  epsilon: " + format_double(c.contamination.epsilon) + "\n";
  s += "  theta_true: " + detail::yaml_list(c.contamination.theta_true.values) + "\n";
  s += "  theta_c: " + detail::yaml_list(c.contamination.theta_c.values) + "\n";
  s += "  infer_epsilon: " + format_double(c.infer_epsilon) + "\n";
  s += "methods: " + detail::yaml_list(c.methods) + "\n";
  s += "train:\n";
  s += "  m: " + std::to_string(c.m) + "\n";
  s += "  n: " + std::to_string(c.n) + "\n";
  s += "  l: " + std::to_string(c.train.l) + "\n";
  s += "  batch: " + std::to_string(c.train.batch) + "\n";
  s += "  learning_rate: " + format_double(c.train.learning_rate) + "\n";
  s += "  epochs: " + std::to_string(c.train.epochs) + "\n";
  s += "  patience: " + std::to_string(c.train.patience) + "\n";
  s += "  lambda: " + format_double(c.train.lambda) + "\n";
  s += "  regularizer: " + std::string(to_string(c.train.regularizer)) + "\n";
  switch (c.train.bandwidth) {
    case BandwidthPolicy::median_per_step: s += "  bandwidth: median\n"; break;
    case BandwidthPolicy::median_per_epoch: s += "  bandwidth: median-epoch\n"; break;
    case BandwidthPolicy::fixed: s += "  bandwidth: " + format_double(c.train.fixed_beta) + "\n"; break;
  }
  s += std::string("  record_timing: ") + (c.train.record_timing ? "true" : "false") + "\n";
  s += "network:\n";
  s += "  layers: \"" + c.layers + "\"\n";
  s += "  stat_dim: " + std::to_string(c.stat_dim) + "\n";
  s += "  components: " + std::to_string(c.components) + "\n";
  s += "  hidden: " + std::to_string(c.hidden) + "\n";
  s += "abc:\n";
  s += "  draws: " + std::to_string(c.abc.draws) + "\n";
  s += "  quantile: " + format_double(c.abc.quantile) + "\n";
  s += std::string("  adjust: ") + (c.abc_adjust ? "true" : "false") + "\n";
  s += "evaluate:\n";
  s += "  metrics: " + detail::yaml_list(c.metrics) + "\n";
  s += "  posterior_samples: " + std::to_string(c.posterior_samples) + "\n";
  s += "  predictive_thetas: " + std::to_string(c.predictive.max_thetas) + "\n";
  s += "  predictive_realizations: " + std::to_string(c.predictive.n_sim) + "\n";
  s += "  predictive_beta: " + format_double(c.predictive.beta) + "\n";
  s += "detect:\n";
  s += "  epsilons: " + detail::yaml_list(c.detect_epsilons) + "\n";
  s += "  test_sets: " + std::to_string(c.detect.test_sets) + "\n";
  s += "  gmm_components: " + std::to_string(c.detect.gmm_components) + "\n";
  s += "  posterior_samples: " + std::to_string(c.detect.posterior_samples) + "\n";
  std::string seed_list = "[";
  for (std::size_t i = 0; i < c.seeds.size(); ++i) seed_list += (i ? ", " : "") + std::to_string(c.seeds[i]);
  s += "seeds: " + seed_list + "]\n";
  if (include_out) s += "out: \"" + c.out + "\"\n";
  return s;
}

/// Hash of the canonical text without the output directory.
inline std::string config_hash(const ExperimentConfig& c) { return io::hex64(fnv1a64(serialize_config(c, false))); }

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return serialize_config(a) == serialize_config(b);
}

}  // namespace rsbi
