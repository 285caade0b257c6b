#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "hadapt/error.hpp"

namespace hadapt {

struct Confusion {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
};

inline void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": length mismatch " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

template <typename T>
double accuracy(std::span<const T> predictions, std::span<const T> labels) {
  require_same_length(predictions.size(), labels.size(), "accuracy");
  if (labels.empty()) throw ConfigError("accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Binary confusion counts with 1 as the positive class.
inline Confusion confusion(std::span<const int> predictions, std::span<const int> labels) {
  require_same_length(predictions.size(), labels.size(), "confusion");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool p = predictions[i] == 1, y = labels[i] == 1;
    if (p && y) ++c.tp;
    else if (!p && !y) ++c.tn;
    else if (p) ++c.fp;
    else ++c.fn;
  }
  return c;
}

/// Matthews correlation; 0 when any marginal is empty.
inline double mcc(const Confusion& c) {
  const double tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (denom == 0.0) return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(denom);
}

inline double mcc(std::span<const int> predictions, std::span<const int> labels) {
  return mcc(confusion(predictions, labels));
}

/// Sample Pearson correlation (two-pass). Throws on fewer than two points or
/// zero variance in either input.
template <typename T>
T pearson(std::span<const T> x, std::span<const T> y) {
  require_same_length(x.size(), y.size(), "pearson");
  if (x.size() < 2) throw ConfigError("pearson: needs at least two points");
  const T n = static_cast<T>(x.size());
  T mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  T sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0 || syy == 0) throw NumericError("pearson: zero variance input");
  T r = sxy / std::sqrt(sxx * syy);
  if (r > 1) r = 1;
  if (r < -1) r = -1;
  return r;
}

}  // namespace hadapt
