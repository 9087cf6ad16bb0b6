#pragma once
// Test-only reference implementations. Nothing here calls into the tensor
// kernels except to read values, so they stay independent of the code they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "retroseq/rng.hpp"
#include "retroseq/tensor.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(const retroseq::Tensor& t) {
  Matrix m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline Matrix random_matrix(std::size_t n, std::size_t m, retroseq::Rng& rng, double scale = 1.0) {
  Matrix out(n, std::vector<double>(m));
  for (auto& row : out)
    for (auto& x : row) x = rng.uniform(-scale, scale);
  return out;
}

inline retroseq::Tensor to_tensor(const Matrix& m, bool trainable = false,
                                  retroseq::DType dtype = retroseq::default_dtype()) {
  std::vector<double> flat;
  for (const auto& row : m) flat.insert(flat.end(), row.begin(), row.end());
  const retroseq::Shape shape{m.size(), m.front().size()};
  return trainable ? retroseq::parameter(shape, flat, dtype)
                   : retroseq::from_values(shape, flat, dtype);
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.size(), std::vector<double>(b.front().size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.front().size(); ++j) {
      double acc = 0;
      for (std::size_t p = 0; p < b.size(); ++p) acc += a[i][p] * b[p][j];
      c[i][j] = acc;
    }
  return c;
}

inline Matrix softmax_rows(const Matrix& a) {
  Matrix out = a;
  for (auto& row : out) {
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0;
    for (auto& x : row) total += (x = std::exp(x - mx));
    for (auto& x : row) x /= total;
  }
  return out;
}

inline Matrix rms_norm(const Matrix& x, const std::vector<double>& gain, double eps = 1e-6) {
  Matrix out = x;
  for (auto& row : out) {
    double ss = 0;
    for (double v : row) ss += v * v;
    const double r = std::sqrt(ss / static_cast<double>(row.size()) + eps);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = gain[j] * row[j] / r;
  }
  return out;
}

/// Per-position loop multi-head attention: for each query row and head,
/// score every visible key, normalize, mix values, then project.
inline Matrix attention(const Matrix& qsrc, const Matrix& kvsrc, const Matrix& wq, const Matrix& wk,
                        const Matrix& wv, const Matrix& wo, std::size_t heads, bool causal,
                        bool rotary) {
  Matrix q = matmul(qsrc, wq), k = matmul(kvsrc, wk), v = matmul(kvsrc, wv);
  const std::size_t d = wq.size(), dh = d / heads;
  auto rotate = [&](Matrix& x) {
    for (std::size_t pos = 0; pos < x.size(); ++pos)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < dh / 2; ++j) {
          const double th = static_cast<double>(pos) * std::pow(10000.0, -2.0 * j / dh);
          double& a = x[pos][h * dh + 2 * j];
          double& b = x[pos][h * dh + 2 * j + 1];
          const double a0 = a, b0 = b;
          a = a0 * std::cos(th) - b0 * std::sin(th);
          b = a0 * std::sin(th) + b0 * std::cos(th);
        }
  };
  if (rotary) {
    rotate(q);
    rotate(k);
  }
  Matrix concat(qsrc.size(), std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < qsrc.size(); ++i)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t visible = causal ? i + 1 : k.size();
      std::vector<double> w(visible);
      double mx = -1e300;
      for (std::size_t j = 0; j < visible; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i][h * dh + c] * k[j][h * dh + c];
        w[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, w[j]);
      }
      double total = 0;
      for (auto& x : w) total += (x = std::exp(x - mx));
      for (std::size_t j = 0; j < visible; ++j)
        for (std::size_t c = 0; c < dh; ++c) concat[i][h * dh + c] += w[j] / total * v[j][h * dh + c];
    }
  return matmul(concat, wo);
}

inline double max_rel_diff(const Matrix& a, const Matrix& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) {
      const double denom = std::max({std::abs(a[i][j]), std::abs(b[i][j]), 1e-12});
      worst = std::max(worst, std::abs(a[i][j] - b[i][j]) / denom);
    }
  return worst;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j)
      worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
  return worst;
}

/// Worst per-tensor relative error ||analytic - numeric|| / max(||analytic||, ||numeric||)
/// between taped gradients and central differences with step `h`. `loss` must
/// rebuild its graph from the current parameter values on every call.
inline double gradcheck(const std::function<retroseq::Tensor()>& loss,
                        std::vector<retroseq::Tensor> params, double h = 1e-5,
                        std::string* worst_name = nullptr,
                        const std::vector<std::string>& names = {}) {
  const retroseq::Gradients analytic = retroseq::grad(loss());
  double worst = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    retroseq::Tensor& param = params[p];
    const retroseq::Tensor g = analytic.get(param);
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < param.numel(); ++i) {
      const double original = param.at(i);
      double plus, minus;
      {
        retroseq::NoGradGuard guard;
        param.mutable_buffer().set(i, original + h);
        plus = loss().item();
        param.mutable_buffer().set(i, original - h);
        minus = loss().item();
        param.mutable_buffer().set(i, original);
      }
      const double numeric = (plus - minus) / (2 * h);
      const double a = g.at(i);
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-10});
    const double rel = std::sqrt(diff2) / denom;
    if (rel > worst) {
      worst = rel;
      if (worst_name) *worst_name = p < names.size() ? names[p] : std::to_string(p);
    }
  }
  return worst;
}

/// Deterministic random projection of a tensor to a scalar, so gradient
/// checks exercise every output coordinate with distinct weights.
inline retroseq::Tensor random_readout(const retroseq::Tensor& y, std::uint64_t seed) {
  retroseq::Rng rng(seed);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return retroseq::sum(retroseq::mul(y, retroseq::from_values(y.shape(), w, y.dtype())));
}

}  // namespace oracle
