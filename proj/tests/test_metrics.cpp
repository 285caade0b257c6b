#include <doctest.h>

#include <cmath>
#include <vector>

#include "hadapt/analysis.hpp"
#include "hadapt/metrics.hpp"
#include "hadapt/rng.hpp"

using namespace hadapt;

namespace {

// Brute-force references in extended precision.
double mcc_reference(const std::vector<int>& p, const std::vector<int>& y) {
  long double tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 1 && y[i] == 1) tp += 1;
    if (p[i] != 1 && y[i] != 1) tn += 1;
    if (p[i] == 1 && y[i] != 1) fp += 1;
    if (p[i] != 1 && y[i] == 1) fn += 1;
  }
  const long double d = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  return d == 0 ? 0.0 : static_cast<double>((tp * tn - fp * fn) / std::sqrt(d));
}

double pearson_reference(const std::vector<double>& x, const std::vector<double>& y) {
  const long double n = static_cast<long double>(x.size());
  long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const long double mx = sx / n, my = sy / n;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  return static_cast<double>(sxy / std::sqrt(sxx * syy));
}

double characteristic_reference(const std::vector<std::vector<double>>& a) {
  double total = 0;
  for (const auto& row : a) {
    double s = 0;
    for (double v : row) s += v;
    total += s / static_cast<double>(row.size());
  }
  return total / static_cast<double>(a.size());
}

}  // namespace

TEST_CASE("mcc against brute force") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(60);
    std::vector<int> p(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.bernoulli(0.5);
      y[i] = rng.bernoulli(0.4);
    }
    CHECK(std::abs(mcc(p, y) - mcc_reference(p, y)) < 1e-12);
  }
  const std::vector<int> ones{1, 1, 1}, mixed{1, 0, 1};
  CHECK(mcc(ones, mixed) == 0.0);
  CHECK(mcc(mixed, mixed) == doctest::Approx(1.0));
  const std::vector<int> flipped{0, 1, 0};
  CHECK(mcc(flipped, mixed) == doctest::Approx(-1.0));
}

TEST_CASE("pearson against brute force") {
  Rng rng(22);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(60);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = 0.3 * x[i] + rng.normal();
    }
    CHECK(std::abs(pearson<double>(x, y) - pearson_reference(x, y)) < 1e-12);
  }
}

TEST_CASE("pearson is invariant to positive affine maps and bounded") {
  Rng rng(23);
  std::vector<double> x(40), y(40), z(40);
  for (std::size_t i = 0; i < 40; ++i) {
    x[i] = rng.normal();
    y[i] = x[i] + 0.5 * rng.normal();
    z[i] = 3.0 * y[i] - 2.0;
  }
  CHECK(pearson<double>(x, y) == doctest::Approx(pearson<double>(x, z)).epsilon(1e-12));
  CHECK(pearson<double>(x, x) == 1.0);
  const std::vector<double> c(40, 1.0);
  CHECK_THROWS_AS(pearson<double>(x, c), NumericError);
  CHECK_THROWS_AS(pearson<double>(std::vector<double>{1.0}, std::vector<double>{1.0}), ConfigError);
  CHECK_THROWS_AS(pearson<double>(x, std::vector<double>{1.0, 2.0}), ShapeError);
}

TEST_CASE("accuracy") {
  const std::vector<int> p{1, 0, 1, 1}, y{1, 1, 1, 0};
  CHECK(accuracy<int>(p, y) == 0.5);
  CHECK_THROWS_AS(accuracy<int>(std::vector<int>{}, std::vector<int>{}), ConfigError);
}

TEST_CASE("characteristic values against a naive loop") {
  Rng rng(24);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng.below(20), cols = 1 + rng.below(16);
    Eigen::MatrixXd a(rows, cols);
    std::vector<std::vector<double>> nested(rows, std::vector<double>(cols));
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) nested[i][j] = a(i, j) = rng.normal();
    CHECK(std::abs(characteristic_value(a) - characteristic_reference(nested)) < 1e-12);
    const Eigen::VectorXd avg = token_averages(a);
    double s = 0;
    for (double v : nested[0]) s += v;
    CHECK(std::abs(avg(0) - s / static_cast<double>(cols)) < 1e-12);
  }
}

TEST_CASE("cosine and box statistics") {
  const std::vector<double> a{1, 0, 0}, b{1, 1, 0}, z{0, 0, 0};
  CHECK(*cosine(a, b) == doctest::Approx(std::sqrt(0.5)));
  CHECK_FALSE(cosine(a, z).has_value());
  const BoxStats s = BoxStats::of({4, 1, 3, 2, 5});
  CHECK(s.min == 1);
  CHECK(s.q1 == 2);
  CHECK(s.median == 3);
  CHECK(s.q3 == 4);
  CHECK(s.max == 5);
  CHECK(s.mean == 3);
  const BoxStats e = BoxStats::of({1, 2, 3, 4});
  CHECK(e.median == 2.5);
  CHECK(e.q1 == doctest::Approx(1.75));
}

TEST_CASE("format_double round-trips") {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 123456789.0}) CHECK(std::stod(format_double(v)) == v);
}
