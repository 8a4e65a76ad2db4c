#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rsbi/evaluation.hpp"
#include "rsbi/inference.hpp"
#include "rsbi/simulators.hpp"
#include "rsbi/types.hpp"

namespace rsbi::svg {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string label_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct Range {
  double lo = 0.0;
  double hi = 1.0;

  void include(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void pad() {
    if (hi <= lo) {
      lo -= 0.5;
      hi += 0.5;
    }
    const double m = 0.05 * (hi - lo);
    lo -= m;
    hi += m;
  }
};

inline Range range_of(std::span<const double> v) {
  Range r{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const double x : v) r.include(x);
  if (!(r.lo <= r.hi)) r = {0.0, 1.0};
  return r;
}

/// One square panel with axes, in document coordinates.
class Panel {
 public:
  Panel(double x, double y, double size, Range rx, Range ry) : x_(x), y_(y), s_(size), rx_(rx), ry_(ry) {}

  double px(double v) const { return x_ + (v - rx_.lo) / (rx_.hi - rx_.lo) * s_; }
  double py(double v) const { return y_ + s_ - (v - ry_.lo) / (ry_.hi - ry_.lo) * s_; }

  std::string frame(std::string_view xlabel, std::string_view ylabel) const {
    std::string o;
    o += "<rect x=\"" + num(x_) + "\" y=\"" + num(y_) + "\" width=\"" + num(s_) + "\" height=\"" + num(s_) +
         "\" fill=\"none\" stroke=\"black\"/>\n";
    o += "<text x=\"" + num(x_ + s_ / 2) + "\" y=\"" + num(y_ + s_ + 28) + "\" text-anchor=\"middle\">" +
         std::string(xlabel) + "</text>\n";
    o += "<text x=\"" + num(x_ - 30) + "\" y=\"" + num(y_ + s_ / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 " +
         num(x_ - 30) + " " + num(y_ + s_ / 2) + ")\">" + std::string(ylabel) + "</text>\n";
    o += tick_text(x_, y_ + s_ + 12, label_num(rx_.lo), "start");
    o += tick_text(x_ + s_, y_ + s_ + 12, label_num(rx_.hi), "end");
    o += tick_text(x_ - 4, y_ + s_, label_num(ry_.lo), "end");
    o += tick_text(x_ - 4, y_ + 10, label_num(ry_.hi), "end");
    return o;
  }

  std::string dot(double vx, double vy, std::string_view colour, double r = 1.5) const {
    if (!inside(vx, vy)) return {};
    return "<circle cx=\"" + num(px(vx)) + "\" cy=\"" + num(py(vy)) + "\" r=\"" + num(r) + "\" fill=\"" +
           std::string(colour) + "\" fill-opacity=\"0.5\"/>\n";
  }

  std::string dashed_box(double x0, double x1, double y0, double y1) const {
    auto cx = [&](double v) { return std::clamp(px(v), x_, x_ + s_); };
    auto cy = [&](double v) { return std::clamp(py(v), y_, y_ + s_); };
    return "<rect x=\"" + num(cx(x0)) + "\" y=\"" + num(cy(y1)) + "\" width=\"" + num(cx(x1) - cx(x0)) +
           "\" height=\"" + num(cy(y0) - cy(y1)) + "\" fill=\"none\" stroke=\"grey\" stroke-dasharray=\"6 4\"/>\n";
  }

  std::string polyline(std::span<const std::pair<double, double>> pts, std::string_view colour) const {
    std::string o = "<polyline fill=\"none\" stroke=\"" + std::string(colour) + "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (i) o += ' ';
      o += num(px(pts[i].first)) + "," + num(py(pts[i].second));
    }
    return o + "\"/>\n";
  }

 private:
  bool inside(double vx, double vy) const {
    return std::isfinite(vx) && std::isfinite(vy) && vx >= rx_.lo && vx <= rx_.hi && vy >= ry_.lo && vy <= ry_.hi;
  }
  static std::string tick_text(double x, double y, const std::string& s, std::string_view anchor) {
    return "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" font-size=\"10\" text-anchor=\"" + std::string(anchor) +
           "\">" + s + "</text>\n";
  }

  double x_, y_, s_;
  Range rx_, ry_;
};

inline std::string document(double w, double h, std::string_view comment, const std::string& body) {
  std::string o = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  if (!comment.empty()) o += "<!-- " + std::string(comment) + " -->\n";
  o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" + num(h) + "\" viewBox=\"0 0 " +
       num(w) + " " + num(h) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o += body;
  o += "</svg>\n";
  return o;
}

inline constexpr double kPanel = 220.0;
inline constexpr double kGap = 70.0;

/// One scatter per parameter pair with the prior support drawn dashed.
inline std::string posterior_scatter(const PosteriorSamples& ps, const PriorSpec& prior,
                                     std::span<const double> theta_true, std::string_view title,
                                     std::string_view comment = {}) {
  const std::size_t k = ps.dim();
  if (k < 2) throw std::invalid_argument("posterior_scatter: need at least two parameters");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = a + 1; b < k; ++b) pairs.emplace_back(a, b);
  const std::size_t cols = std::min<std::size_t>(pairs.size(), 3);
  const std::size_t rows = (pairs.size() + cols - 1) / cols;
  std::vector<Range> ranges(k);
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<double> col(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) col[i] = ps.samples(i, j);
    ranges[j] = range_of(col);
    const auto& d = prior.dims[j];
    if (d.kind == PriorDim::Kind::uniform) {
      ranges[j].include(d.a);
      ranges[j].include(d.b);
    }
    if (j < theta_true.size()) ranges[j].include(theta_true[j]);
    ranges[j].pad();
  }
  std::string body = "<text x=\"10\" y=\"20\" font-size=\"14\">" + std::string(title) + "</text>\n";
  for (std::size_t q = 0; q < pairs.size(); ++q) {
    const auto [a, b] = pairs[q];
    const double x = kGap + static_cast<double>(q % cols) * (kPanel + kGap);
    const double y = 40.0 + static_cast<double>(q / cols) * (kPanel + kGap);
    const Panel p(x, y, kPanel, ranges[a], ranges[b]);
    body += p.frame("theta_" + std::to_string(a + 1), "theta_" + std::to_string(b + 1));
    const auto& da = prior.dims[a];
    const auto& db = prior.dims[b];
    const double xlo = da.kind == PriorDim::Kind::uniform ? da.a : 0.0;
    const double xhi = da.kind == PriorDim::Kind::uniform ? da.b : ranges[a].hi;
    const double ylo = db.kind == PriorDim::Kind::uniform ? db.a : 0.0;
    const double yhi = db.kind == PriorDim::Kind::uniform ? db.b : ranges[b].hi;
    body += p.dashed_box(xlo, xhi, ylo, yhi);
    for (std::size_t i = 0; i < ps.size(); ++i) body += p.dot(ps.samples(i, a), ps.samples(i, b), "steelblue");
    if (theta_true.size() > std::max(a, b)) body += p.dot(theta_true[a], theta_true[b], "red", 4.0);
  }
  const double w = 2 * kGap + static_cast<double>(cols) * (kPanel + kGap);
  const double h = 60.0 + static_cast<double>(rows) * (kPanel + kGap);
  return document(w, h, comment, body);
}

/// Pairwise scatter matrix of simulated statistics with the observed
/// statistic overlaid.
inline std::string scatter_matrix(const StatSet& sim, std::span<const double> obs, std::string_view title,
                                  std::string_view comment = {}) {
  const std::size_t p = sim.cols;
  if (obs.size() != p) throw std::invalid_argument("scatter_matrix: dimension mismatch");
  std::vector<Range> ranges(p);
  for (std::size_t j = 0; j < p; ++j) {
    std::vector<double> col(sim.rows);
    for (std::size_t i = 0; i < sim.rows; ++i) col[i] = sim(i, j);
    ranges[j] = range_of(col);
    ranges[j].include(obs[j]);
    ranges[j].pad();
  }
  const double cell = 160.0, gap = 50.0;
  std::string body = "<text x=\"10\" y=\"20\" font-size=\"14\">" + std::string(title) + "</text>\n";
  for (std::size_t a = 0; a < p; ++a) {
    for (std::size_t b = 0; b < p; ++b) {
      if (a == b) continue;
      const double x = gap + static_cast<double>(b) * (cell + gap);
      const double y = 40.0 + static_cast<double>(a) * (cell + gap);
      const Panel pan(x, y, cell, ranges[b], ranges[a]);
      body += pan.frame("s_" + std::to_string(b + 1), "s_" + std::to_string(a + 1));
      for (std::size_t i = 0; i < sim.rows; ++i) body += pan.dot(sim(i, b), sim(i, a), "steelblue", 1.2);
      body += pan.dot(obs[b], obs[a], "red", 4.0);
    }
  }
  const double size = gap + static_cast<double>(p) * (cell + gap);
  return document(size, size + 40.0, comment, body);
}

/// Metric against log10(lambda), one curve per method.
inline std::string lambda_curves(std::span<const MetricReport> rows, std::string_view metric, std::string_view title,
                                 std::string_view comment = {}) {
  auto value = [&](const MetricReport& r) {
    if (metric == "rmse") return r.rmse;
    if (metric == "predictive_mmd") return r.predictive_mmd;
    if (metric == "frac_outside_prior") return r.frac_outside_prior;
    throw std::invalid_argument("lambda_curves: unknown metric '" + std::string(metric) + "'");
  };
  // method -> lambda -> values, averaged per lambda
  std::map<std::string, std::map<double, std::vector<double>>> groups;
  for (const auto& r : rows)
    if (r.lambda > 0.0) groups[r.method][r.lambda].push_back(value(r));
  Range rx{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()}, ry = rx;
  std::map<std::string, std::vector<std::pair<double, double>>> curves;
  for (const auto& [method, byl] : groups) {
    for (const auto& [lam, vals] : byl) {
      double mean = 0.0;
      for (const double v : vals) mean += v / static_cast<double>(vals.size());
      curves[method].emplace_back(std::log10(lam), mean);
      rx.include(std::log10(lam));
      ry.include(mean);
    }
  }
  if (!(rx.lo <= rx.hi)) rx = {0.0, 1.0};
  if (!(ry.lo <= ry.hi)) ry = {0.0, 1.0};
  rx.pad();
  ry.pad();
  const Panel pan(80.0, 40.0, 360.0, rx, ry);
  static constexpr std::string_view palette[] = {"steelblue", "darkorange", "seagreen", "crimson", "purple"};
  std::string body = "<text x=\"10\" y=\"20\" font-size=\"14\">" + std::string(title) + "</text>\n";
  body += pan.frame("log10 lambda", metric);
  std::size_t ci = 0;
  for (const auto& [method, pts] : curves) {
    const auto colour = palette[ci % std::size(palette)];
    body += pan.polyline(pts, colour);
    for (const auto& [x, y] : pts) body += pan.dot(x, y, colour, 3.0);
    body += "<text x=\"460\" y=\"" + num(60.0 + 18.0 * static_cast<double>(ci)) + "\" fill=\"" + std::string(colour) +
            "\">" + method + "</text>\n";
    ++ci;
  }
  return document(560.0, 460.0, comment, body);
}

}  // namespace rsbi::svg
