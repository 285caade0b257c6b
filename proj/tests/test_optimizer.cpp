#include <doctest.h>

#include <cmath>

#include "hadapt/error.hpp"
#include "hadapt/optimizer.hpp"

using namespace hadapt;

namespace {

ParameterStore store_with(std::vector<double> matrix, std::vector<double> vec) {
  ParameterStore s;
  s.add(ParameterInfo{"m", {2, 2}, ModuleTag::FFN, 0, true}, Tensor({2, 2}, std::move(matrix)));
  s.add(ParameterInfo{"v", {2}, ModuleTag::ADAPTER_W, 0, true}, Tensor({2}, std::move(vec)));
  s.add(ParameterInfo{"frozen", {2}, ModuleTag::EMB, -1, false}, Tensor({2}, 5.0));
  return s;
}

}  // namespace

TEST_CASE("two AdamW steps against a hand computation") {
  ParameterStore s = store_with({1, -2, 3, 0.5}, {0.25, -1});
  const AdamWConfig cfg{.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.01};
  AdamW opt(cfg);
  const std::vector<std::vector<double>> grads{{0.5, -1, 2, 0}, {-0.3, 0.2, 0.1, 4}};
  const std::vector<std::vector<double>> vgrads{{1, -2}, {0.5, 0.5}};

  std::vector<double> w{1, -2, 3, 0.5}, v{0.25, -1};
  std::vector<double> m1(4, 0), m2(4, 0), n1(2, 0), n2(2, 0);
  for (int t = 1; t <= 2; ++t) {
    s.zero_grads();
    for (std::size_t i = 0; i < 4; ++i) s.at("m").value.mutable_grad()[i] = grads[t - 1][i];
    for (std::size_t i = 0; i < 2; ++i) s.at("v").value.mutable_grad()[i] = vgrads[t - 1][i];
    opt.step(s);
    const double c1 = 1 - std::pow(0.9, t), c2 = 1 - std::pow(0.999, t);
    for (std::size_t i = 0; i < 4; ++i) {
      const double g = grads[t - 1][i];
      m1[i] = 0.9 * m1[i] + 0.1 * g;
      m2[i] = 0.999 * m2[i] + 0.001 * g * g;
      w[i] = w[i] * (1 - 0.1 * 0.01) - 0.1 * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + 1e-8);
    }
    for (std::size_t i = 0; i < 2; ++i) {
      const double g = vgrads[t - 1][i];
      n1[i] = 0.9 * n1[i] + 0.1 * g;
      n2[i] = 0.999 * n2[i] + 0.001 * g * g;
      v[i] = v[i] - 0.1 * (n1[i] / c1) / (std::sqrt(n2[i] / c2) + 1e-8);  // vectors are not decayed
    }
  }
  for (std::size_t i = 0; i < 4; ++i) CHECK(s.at("m").value[i] == doctest::Approx(w[i]).epsilon(1e-14));
  for (std::size_t i = 0; i < 2; ++i) CHECK(s.at("v").value[i] == doctest::Approx(v[i]).epsilon(1e-14));
  CHECK(opt.steps() == 2);
}

TEST_CASE("frozen tensors are never touched") {
  ParameterStore s = store_with({1, 2, 3, 4}, {1, 1});
  for (auto& p : s.entries()) p.value.mutable_grad()[0] = 1.0;
  AdamW opt({});
  opt.step(s);
  CHECK(s.at("frozen").value[0] == 5.0);
  CHECK(s.at("frozen").value[1] == 5.0);
  CHECK_FALSE(opt.has_state("frozen"));
  CHECK(opt.has_state("m"));
}

TEST_CASE("missing gradient on a trainable tensor is an error") {
  ParameterStore s = store_with({1, 2, 3, 4}, {1, 1});
  s.at("m").value.mutable_grad();
  AdamW opt({});
  CHECK_THROWS_AS(opt.step(s), UsageError);
}

TEST_CASE("decay policy") {
  const ParameterInfo matrix{"w", {2, 2}, ModuleTag::FFN, 0, true};
  const ParameterInfo vec{"b", {2}, ModuleTag::FFN, 0, true};
  CHECK(decays(matrix, {}));
  CHECK_FALSE(decays(vec, {}));
  CHECK(decays(vec, {.decay_vectors = true}));
  CHECK_FALSE(decays(matrix, {.weight_decay = 0.0}));
}

TEST_CASE("zero gradient and zero learning rate keep parameters bit-identical") {
  ParameterStore s = store_with({1, -0.0, 3, 4}, {1, 1});
  s.zero_grads();
  for (auto& p : s.entries()) p.value.mutable_grad();
  AdamW opt({.lr = 0.0});
  opt.step(s);
  CHECK(std::signbit(s.at("m").value[1]));
  CHECK(s.at("m").value[0] == 1.0);
}
