#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rsbi {

/// Raised when a computation produces NaN or infinity.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for malformed configuration input (CLI exit code 1).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for unreadable, unwritable or malformed files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ModelTag { ricker, oup, gaussian_linear, turin };

inline std::string_view to_string(ModelTag tag) {
  switch (tag) {
    case ModelTag::ricker: return "ricker";
    case ModelTag::oup: return "oup";
    case ModelTag::gaussian_linear: return "gaussian-linear";
    case ModelTag::turin: return "turin";
  }
  return "unknown";
}

inline ModelTag parse_model_tag(std::string_view s) {
  if (s == "ricker") return ModelTag::ricker;
  if (s == "oup") return ModelTag::oup;
  if (s == "gaussian-linear" || s == "gaussian_linear") return ModelTag::gaussian_linear;
  if (s == "turin") return ModelTag::turin;
  throw std::invalid_argument("unknown model tag '" + std::string(s) + "'");
}

inline std::size_t param_count(ModelTag tag) {
  switch (tag) {
    case ModelTag::ricker:
    case ModelTag::oup: return 2;
    case ModelTag::gaussian_linear: return 10;
    case ModelTag::turin: return 4;
  }
  return 0;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Model parameter vector theta.
struct ParamVector {
  std::vector<double> values;

  ParamVector() = default;
  explicit ParamVector(std::vector<double> v) : values(std::move(v)) {}
  ParamVector(std::initializer_list<double> v) : values(v) {}

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
  double& operator[](std::size_t i) { return values[i]; }
  std::span<const double> span() const { return values; }
  bool operator==(const ParamVector&) const = default;
};

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> v) : rows(r), cols(c), values(std::move(v)) {
    if (values.size() != r * c) throw std::invalid_argument("Matrix: value count does not match shape");
  }

  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
  std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }
  bool operator==(const Matrix&) const = default;
};

/// l statistics of dimension p, one per row.
using StatSet = Matrix;

/// One p-dimensional summary statistic.
using SummaryStat = std::vector<double>;

/// n realizations of a d-dimensional model output, row-major n x d.
struct Dataset {
  ModelTag model = ModelTag::ricker;
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<double> values;

  Dataset() = default;
  Dataset(ModelTag tag, std::size_t n_, std::size_t d_) : model(tag), n(n_), d(d_), values(n_ * d_, 0.0) {}

  double operator()(std::size_t r, std::size_t c) const { return values[r * d + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values[r * d + c]; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * d, d}; }
  std::span<double> row(std::size_t r) { return {values.data() + r * d, d}; }
  bool operator==(const Dataset&) const = default;
};

}  // namespace rsbi
