#include "hadapt/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

#include "hadapt/error.hpp"

namespace hadapt {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

ConstMatMap as_matrix(std::span<const double> v, std::size_t rows, std::size_t cols) {
  return ConstMatMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MatMap as_matrix(std::span<double> v, std::size_t rows, std::size_t cols) {
  return MatMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

bool wants_grad(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape.recording()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor finish(Tape& tape, Tensor out, const char* op) {
  out.set_producer(op);
  tape.verify(out, op);
  return out;
}

void require(bool cond, const char* op, const std::string& what) {
  if (!cond) throw ShapeError(std::string(op) + ": " + what);
}

void require_vector(const Tensor& v, std::size_t n, const char* op, const char* name) {
  require(v.rank() == 1 && v.extent(0) == n, op,
          std::string(name) + " must be 1-d of length " + std::to_string(n) + ", got " + to_string(v.shape()));
}

Shape with_last(Shape s, std::size_t last) {
  s.back() = last;
  return s;
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b, bool transpose_b) {
  constexpr const char* op = "matmul";
  require(a.rank() >= 1 && b.rank() == 2, op, "expects (..., K) and a 2-d right operand");
  const std::size_t k = a.last_extent();
  const std::size_t m = transpose_b ? b.extent(0) : b.extent(1);
  require((transpose_b ? b.extent(1) : b.extent(0)) == k, op,
          "inner extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t rows = a.size() / k;

  Tensor out(with_last(a.shape(), m));
  auto av = as_matrix(a.values(), rows, k);
  auto ov = as_matrix(out.mutable_values(), rows, m);
  if (transpose_b) {
    ov.noalias() = av * as_matrix(b.values(), m, k).transpose();
  } else {
    ov.noalias() = av * as_matrix(b.values(), k, m);
  }
  out = finish(tape, std::move(out), op);

  if (wants_grad(tape, {&a, &b})) {
    tape.record(op, {a, b}, out, [a, b, out, rows, k, m, transpose_b]() mutable {
      auto g = as_matrix(out.grad(), rows, m);
      if (a.requires_grad()) {
        auto ga = as_matrix(a.mutable_grad(), rows, k);
        if (transpose_b) {
          ga.noalias() += g * as_matrix(b.values(), m, k);
        } else {
          ga.noalias() += g * as_matrix(b.values(), k, m).transpose();
        }
      }
      if (b.requires_grad()) {
        if (transpose_b) {
          as_matrix(b.mutable_grad(), m, k).noalias() += g.transpose() * as_matrix(a.values(), rows, k);
        } else {
          as_matrix(b.mutable_grad(), k, m).noalias() += as_matrix(a.values(), rows, k).transpose() * g;
        }
      }
    });
  }
  return out;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  constexpr const char* op = "linear";
  require(x.rank() >= 1 && weight.rank() == 2, op, "expects (..., K) input and (K, M) weight");
  const std::size_t k = x.last_extent();
  const std::size_t m = weight.extent(1);
  require(weight.extent(0) == k, op, "weight " + to_string(weight.shape()) + " does not match input " + to_string(x.shape()));
  require_vector(bias, m, op, "bias");
  const std::size_t rows = x.size() / k;

  Tensor out(with_last(x.shape(), m));
  auto ov = as_matrix(out.mutable_values(), rows, m);
  ov.noalias() = as_matrix(x.values(), rows, k) * as_matrix(weight.values(), k, m);
  ov.rowwise() += as_matrix(bias.values(), 1, m).row(0);
  out = finish(tape, std::move(out), op);

  if (wants_grad(tape, {&x, &weight, &bias})) {
    tape.record(op, {x, weight, bias}, out, [x, weight, bias, out, rows, k, m]() mutable {
      auto g = as_matrix(out.grad(), rows, m);
      if (x.requires_grad()) {
        as_matrix(x.mutable_grad(), rows, k).noalias() += g * as_matrix(weight.values(), k, m).transpose();
      }
      if (weight.requires_grad()) {
        as_matrix(weight.mutable_grad(), k, m).noalias() += as_matrix(x.values(), rows, k).transpose() * g;
      }
      if (bias.requires_grad()) {
        as_matrix(bias.mutable_grad(), 1, m) += g.colwise().sum();
      }
    });
  }
  return out;
}

Tensor batched_matmul(Tape& tape, const Tensor& a, const Tensor& b, bool transpose_b) {
  constexpr const char* op = "batched_matmul";
  require(a.rank() == 3 && b.rank() == 3 && a.extent(0) == b.extent(0), op,
          "expects (G, N, K) and (G, K, M), got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t groups = a.extent(0), n = a.extent(1), k = a.extent(2);
  const std::size_t m = transpose_b ? b.extent(1) : b.extent(2);
  require((transpose_b ? b.extent(2) : b.extent(1)) == k, op, "inner extents differ");

  Tensor out(Shape{groups, n, m});
  for (std::size_t g = 0; g < groups; ++g) {
    auto av = as_matrix(a.values().subspan(g * n * k, n * k), n, k);
    auto bv = b.values().subspan(g * k * m, k * m);
    auto ov = as_matrix(out.mutable_values().subspan(g * n * m, n * m), n, m);
    if (transpose_b) {
      ov.noalias() = av * as_matrix(bv, m, k).transpose();
    } else {
      ov.noalias() = av * as_matrix(bv, k, m);
    }
  }
  out = finish(tape, std::move(out), op);

  if (wants_grad(tape, {&a, &b})) {
    tape.record(op, {a, b}, out, [a, b, out, groups, n, k, m, transpose_b]() mutable {
      for (std::size_t g = 0; g < groups; ++g) {
        auto go = as_matrix(out.grad().subspan(g * n * m, n * m), n, m);
        auto av = as_matrix(a.values().subspan(g * n * k, n * k), n, k);
        auto bv = b.values().subspan(g * k * m, k * m);
        if (a.requires_grad()) {
          auto ga = as_matrix(a.mutable_grad().subspan(g * n * k, n * k), n, k);
          if (transpose_b) {
            ga.noalias() += go * as_matrix(bv, m, k);
          } else {
            ga.noalias() += go * as_matrix(bv, k, m).transpose();
          }
        }
        if (b.requires_grad()) {
          auto gb = b.mutable_grad().subspan(g * k * m, k * m);
          if (transpose_b) {
            as_matrix(gb, m, k).noalias() += go.transpose() * av;
          } else {
            as_matrix(gb, k, m).noalias() += av.transpose() * go;
          }
        }
      }
    });
  }
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  constexpr const char* op = "add";
  require(a.shape() == b.shape(), op, "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor out(a.shape());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
  out = finish(tape, std::move(out), op);
  if (wants_grad(tape, {&a, &b})) {
    tape.record(op, {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto gt = t->mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  constexpr const char* op = "mul";
  require(a.shape() == b.shape(), op, "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor out(a.shape());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  out = finish(tape, std::move(out), op);
  if (wants_grad(tape, {&a, &b})) {
    tape.record(op, {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
  constexpr const char* op = "scale";
  Tensor out(x.shape());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  out = finish(tape, std::move(out), op);
  if (wants_grad(tape, {&x})) {
    tape.record(op, {x}, out, [x, out, factor]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor scale_shift_lastdim(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  constexpr const char* op = "scale_shift_lastdim";
  require(x.rank() >= 1, op, "input must have at least one extent");
  const std::size_t h = x.last_extent();
  require_vector(w, h, op, "weight");
  require_vector(b, h, op, "bias");
  const std::size_t rows = x.size() / h;

  Tensor out(x.shape());
  auto o = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < h; ++j) o[r * h + j] = w[j] * x[r * h + j] + b[j];
  }
  out = finish(tape, std::move(out), op);

  if (wants_grad(tape, {&x, &w, &b})) {
    tape.record(op, {x, w, b}, out, [x, w, b, out, rows, h]() mutable {
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < h; ++j) gx[r * h + j] += g[r * h + j] * w[j];
      }
      if (w.requires_grad()) {
        auto gw = w.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < h; ++j) gw[j] += g[r * h + j] * x[r * h + j];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < h; ++j) gb[j] += g[r * h + j];
      }
    });
  }
  return out;
}

Tensor poly_lastdim(Tape& tape, const Tensor& x, std::span<const Tensor> coeffs) {
  constexpr const char* op = "poly_lastdim";
  require(x.rank() >= 1, op, "input must have at least one extent");
  require(!coeffs.empty(), op, "needs at least one coefficient vector");
  const std::size_t h = x.last_extent();
  for (const auto& c : coeffs) require_vector(c, h, op, "coefficient");
  const std::size_t rows = x.size() / h;
  const std::size_t order = coeffs.size() - 1;

  Tensor out(x.shape());
  auto o = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < h; ++j) {
      const double v = x[r * h + j];
      // Horner, highest order first.
      double acc = coeffs[order][j];
      for (std::size_t m = order; m-- > 0;) acc = acc * v + coeffs[m][j];
      o[r * h + j] = acc;
    }
  }
  out = finish(tape, std::move(out), op);

  bool any = x.requires_grad();
  for (const auto& c : coeffs) any = any || c.requires_grad();
  if (tape.recording() && any) {
    std::vector<Tensor> inputs{x};
    inputs.insert(inputs.end(), coeffs.begin(), coeffs.end());
    std::vector<Tensor> cs(coeffs.begin(), coeffs.end());
    tape.record(op, std::move(inputs), out, [x, cs, out, rows, h, order]() mutable {
      auto g = out.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < h; ++j) {
          const double v = x[r * h + j];
          const double gr = g[r * h + j];
          double power = 1.0;
          for (std::size_t m = 0; m <= order; ++m) {
            if (cs[m].requires_grad()) cs[m].mutable_grad()[j] += gr * power;
            power *= v;
          }
        }
      }
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < h; ++j) {
            const double v = x[r * h + j];
            double deriv = 0.0;
            double power = 1.0;
            for (std::size_t m = 1; m <= order; ++m) {
              deriv += static_cast<double>(m) * cs[m][j] * power;
              power *= v;
            }
            gx[r * h + j] += g[r * h + j] * deriv;
          }
        }
      }
    });
  }
  return out;
}

Tensor softmax_lastdim(Tape& tape, const Tensor& x) {
  constexpr const char* op = "softmax_lastdim";
  require(x.rank() >= 1 && x.last_extent() >= 1, op, "last extent must be at least 1");
  if (!all_finite(x.values())) {
    throw NumericError(std::string(op) + ": non-finite input produced by '" + x.producer() + "'");
  }
  const std::size_t n = x.last_extent();
  const std::size_t rows = x.size() / n;

  Tensor out(x.shape());
  auto o = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * n;
    double* y = o.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(in[j] - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= total;
  }
  out = finish(tape, std::move(out), op);

  if (wants_grad(tape, {&x})) {
    tape.record(op, {x}, out, [x, out, rows, n]() mutable {
      auto g = out.grad();
      auto y = out.values();
      auto gx = x.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  constexpr const char* op = "layer_norm";
  require(x.rank() >= 1, op, "input must have at least one extent");
  const std::size_t h = x.last_extent();
  require_vector(gamma, h, op, "gamma");
  require_vector(beta, h, op, "beta");
  const std::size_t rows = x.size() / h;

  Tensor out(x.shape());
  std::vector<double> xhat(x.size());
  std::vector<double> rstd(rows);
  auto o = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * h;
    double mu = 0.0;
    for (std::size_t j = 0; j < h; ++j) mu += in[j];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(h);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < h; ++j) {
      xhat[r * h + j] = (in[j] - mu) * rstd[r];
      o[r * h + j] = xhat[r * h + j] * gamma[j] + beta[j];
    }
  }
  out = finish(tape, std::move(out), op);

  if (wants_grad(tape, {&x, &gamma, &beta})) {
    tape.record(op, {x, gamma, beta},
                out, [x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, h]() mutable {
                  auto g = out.grad();
                  if (gamma.requires_grad()) {
                    auto gg = gamma.mutable_grad();
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < h; ++j) gg[j] += g[r * h + j] * xhat[r * h + j];
                  }
                  if (beta.requires_grad()) {
                    auto gb = beta.mutable_grad();
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < h; ++j) gb[j] += g[r * h + j];
                  }
                  if (x.requires_grad()) {
                    auto gx = x.mutable_grad();
                    const double inv_h = 1.0 / static_cast<double>(h);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double mean_d = 0.0, mean_dx = 0.0;
                      for (std::size_t j = 0; j < h; ++j) {
                        const double d = g[r * h + j] * gamma[j];
                        mean_d += d;
                        mean_dx += d * xhat[r * h + j];
                      }
                      mean_d *= inv_h;
                      mean_dx *= inv_h;
                      for (std::size_t j = 0; j < h; ++j) {
                        const double d = g[r * h + j] * gamma[j];
                        gx[r * h + j] += rstd[r] * (d - mean_d - xhat[r * h + j] * mean_dx);
                      }
                    }
                  }
                });
  }
  return out;
}

Tensor gelu(Tape& tape, const Tensor& x) {
  constexpr const char* op = "gelu";
  constexpr double kSqrt2OverPi = 0.7978845608028654;
  constexpr double kCubic = 0.044715;
  Tensor out(x.shape());
  std::vector<double> t(x.size());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double v = x[i];
    t[i] = std::tanh(kSqrt2OverPi * (v + kCubic * v * v * v));
    o[i] = 0.5 * v * (1.0 + t[i]);
  }
  out = finish(tape, std::move(out), op);
  if (wants_grad(tape, {&x})) {
    tape.record(op, {x}, out, [x, out, t = std::move(t)]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = x[i];
        const double du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * v * v);
        gx[i] += g[i] * (0.5 * (1.0 + t[i]) + 0.5 * v * (1.0 - t[i] * t[i]) * du);
      }
    });
  }
  return out;
}

Tensor tanh(Tape& tape, const Tensor& x) {
  constexpr const char* op = "tanh";
  Tensor out(x.shape());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(x[i]);
  out = finish(tape, std::move(out), op);
  if (wants_grad(tape, {&x})) {
    tape.record(op, {x}, out, [x, out]() mutable {
      auto g = out.grad();
      auto y = out.values();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
    });
  }
  return out;
}

Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> ids, const Shape& out_prefix) {
  constexpr const char* op = "embedding";
  require(table.rank() == 2, op, "table must be 2-d");
  require(numel(out_prefix) == ids.size(), op, "id count does not match output prefix " + to_string(out_prefix));
  const std::size_t vocab = table.extent(0), h = table.extent(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ShapeError(std::string(op) + ": id " + std::to_string(id) + " outside [0, " + std::to_string(vocab) + ")");
    }
  }
  Shape shape = out_prefix;
  shape.push_back(h);
  Tensor out(shape);
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table.values().data() + static_cast<std::size_t>(ids[i]) * h, h, o.data() + i * h);
  }
  out = finish(tape, std::move(out), op);
  if (wants_grad(tape, {&table})) {
    std::vector<int> idx(ids.begin(), ids.end());
    tape.record(op, {table}, out, [table, out, idx = std::move(idx), h]() mutable {
      auto g = out.grad();
      auto gt = table.mutable_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const std::size_t row = static_cast<std::size_t>(idx[i]) * h;
        for (std::size_t j = 0; j < h; ++j) gt[row + j] += g[i * h + j];
      }
    });
  }
  return out;
}

Tensor split_heads(Tape& tape, const Tensor& x, std::size_t heads) {
  constexpr const char* op = "split_heads";
  require(x.rank() == 3 && heads >= 1 && x.extent(2) % heads == 0, op,
          "expects (B, S, H) with H divisible by heads, got " + to_string(x.shape()));
  const std::size_t b = x.extent(0), s = x.extent(1), h = x.extent(2), d = h / heads;
  Tensor out(Shape{b * heads, s, d});
  auto o = out.mutable_values();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t si = 0; si < s; ++si)
      for (std::size_t t = 0; t < heads; ++t)
        std::copy_n(x.values().data() + (bi * s + si) * h + t * d, d, o.data() + ((bi * heads + t) * s + si) * d);
  out = finish(tape, std::move(out), op);
  if (wants_grad(tape, {&x})) {
    tape.record(op, {x}, out, [x, out, b, s, h, d, heads]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t si = 0; si < s; ++si)
          for (std::size_t t = 0; t < heads; ++t)
            for (std::size_t j = 0; j < d; ++j)
              gx[(bi * s + si) * h + t * d + j] += g[((bi * heads + t) * s + si) * d + j];
    });
  }
  return out;
}

Tensor merge_heads(Tape& tape, const Tensor& x, std::size_t heads) {
  constexpr const char* op = "merge_heads";
  require(x.rank() == 3 && heads >= 1 && x.extent(0) % heads == 0, op,
          "expects (B * heads, S, d), got " + to_string(x.shape()));
  const std::size_t b = x.extent(0) / heads, s = x.extent(1), d = x.extent(2), h = d * heads;
  Tensor out(Shape{b, s, h});
  auto o = out.mutable_values();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t t = 0; t < heads; ++t)
      for (std::size_t si = 0; si < s; ++si)
        std::copy_n(x.values().data() + ((bi * heads + t) * s + si) * d, d, o.data() + (bi * s + si) * h + t * d);
  out = finish(tape, std::move(out), op);
  if (wants_grad(tape, {&x})) {
    tape.record(op, {x}, out, [x, out, b, s, h, d, heads]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t t = 0; t < heads; ++t)
          for (std::size_t si = 0; si < s; ++si)
            for (std::size_t j = 0; j < d; ++j)
              gx[((bi * heads + t) * s + si) * d + j] += g[(bi * s + si) * h + t * d + j];
    });
  }
  return out;
}

Tensor add_key_mask(Tape& tape, const Tensor& scores, std::span<const int> mask, std::size_t heads) {
  constexpr const char* op = "add_key_mask";
  constexpr double kMasked = -10000.0;
  require(scores.rank() == 3 && scores.extent(1) == scores.extent(2) && scores.extent(0) % heads == 0, op,
          "expects (B * heads, S, S), got " + to_string(scores.shape()));
  const std::size_t s = scores.extent(1), groups = scores.extent(0), b = groups / heads;
  require(mask.size() == b * s, op, "mask must be (B, S)");
  Tensor out(scores.shape());
  auto o = out.mutable_values();
  for (std::size_t g = 0; g < groups; ++g) {
    const int* m = mask.data() + (g / heads) * s;
    for (std::size_t q = 0; q < s; ++q)
      for (std::size_t k = 0; k < s; ++k) {
        const std::size_t i = (g * s + q) * s + k;
        o[i] = scores[i] + (m[k] ? 0.0 : kMasked);
      }
  }
  out = finish(tape, std::move(out), op);
  if (wants_grad(tape, {&scores})) {
    tape.record(op, {scores}, out, [scores, out]() mutable {
      auto g = out.grad();
      auto gs = scores.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
    });
  }
  return out;
}

Tensor select_position(Tape& tape, const Tensor& x, std::size_t pos) {
  constexpr const char* op = "select_position";
  require(x.rank() == 3 && pos < x.extent(1), op, "position out of range for " + to_string(x.shape()));
  const std::size_t b = x.extent(0), s = x.extent(1), h = x.extent(2);
  Tensor out(Shape{b, h});
  auto o = out.mutable_values();
  for (std::size_t bi = 0; bi < b; ++bi) std::copy_n(x.values().data() + (bi * s + pos) * h, h, o.data() + bi * h);
  out = finish(tape, std::move(out), op);
  if (wants_grad(tape, {&x})) {
    tape.record(op, {x}, out, [x, out, b, s, h, pos]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t j = 0; j < h; ++j) gx[(bi * s + pos) * h + j] += g[bi * h + j];
    });
  }
  return out;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  constexpr const char* op = "reshape";
  require(numel(shape) == x.size(), op, "cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  Tensor out(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()));
  out = finish(tape, std::move(out), op);
  if (wants_grad(tape, {&x})) {
    tape.record(op, {x}, out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  constexpr const char* op = "sum";
  double total = 0.0;
  for (double v : x.values()) total += v;
  Tensor out = finish(tape, Tensor::scalar(total), op);
  if (wants_grad(tape, {&x})) {
    tape.record(op, {x}, out, [x, out]() mutable {
      const double g = out.grad()[0];
      for (double& v : x.mutable_grad()) v += g;
    });
  }
  return out;
}

Tensor mean(Tape& tape, const Tensor& x) {
  require(x.size() > 0, "mean", "empty tensor");
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.size()));
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels) {
  constexpr const char* op = "cross_entropy";
  require(logits.rank() == 2 && logits.extent(0) == labels.size(), op,
          "logits " + to_string(logits.shape()) + " do not match " + std::to_string(labels.size()) + " labels");
  const std::size_t n = logits.extent(0), c = logits.extent(1);
  std::vector<double> probs(n * c, 0.0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0) continue;
    require(static_cast<std::size_t>(labels[r]) < c, op, "label " + std::to_string(labels[r]) + " out of range");
    const double* z = logits.values().data() + r * c;
    const double mx = *std::max_element(z, z + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[r * c + j] = std::exp(z[j] - mx);
      s += probs[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= s;
    total += (mx + std::log(s)) - z[labels[r]];
    ++count;
  }
  const double denom = count ? static_cast<double>(count) : 1.0;
  Tensor out = finish(tape, Tensor::scalar(total / denom), op);
  if (wants_grad(tape, {&logits})) {
    std::vector<int> y(labels.begin(), labels.end());
    tape.record(op, {logits}, out, [logits, out, probs = std::move(probs), y = std::move(y), n, c, denom]() mutable {
      const double g = out.grad()[0] / denom;
      auto gl = logits.mutable_grad();
      for (std::size_t r = 0; r < n; ++r) {
        if (y[r] < 0) continue;
        for (std::size_t j = 0; j < c; ++j) gl[r * c + j] += g * probs[r * c + j];
        gl[r * c + static_cast<std::size_t>(y[r])] -= g;
      }
    });
  }
  return out;
}

Tensor mse(Tape& tape, const Tensor& predictions, std::span<const double> targets) {
  constexpr const char* op = "mse";
  require(predictions.size() == targets.size() && !targets.empty(), op,
          "predictions " + to_string(predictions.shape()) + " do not match " + std::to_string(targets.size()) + " targets");
  const std::size_t n = targets.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += (predictions[i] - targets[i]) * (predictions[i] - targets[i]);
  Tensor out = finish(tape, Tensor::scalar(total / static_cast<double>(n)), op);
  if (wants_grad(tape, {&predictions})) {
    std::vector<double> t(targets.begin(), targets.end());
    tape.record(op, {predictions}, out, [predictions, out, t = std::move(t), n]() mutable {
      const double g = out.grad()[0] * 2.0 / static_cast<double>(n);
      auto gp = predictions.mutable_grad();
      for (std::size_t i = 0; i < n; ++i) gp[i] += g * (predictions[i] - t[i]);
    });
  }
  return out;
}

}  // namespace hadapt
