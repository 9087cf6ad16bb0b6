#include "retroseq/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "retroseq/rng.hpp"

namespace retroseq {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
std::atomic<DType> g_default_dtype{DType::f32};
std::atomic<bool> g_checked{false};
thread_local bool t_grad_enabled = true;

template <class F>
decltype(auto) dispatch(DType dtype, F&& f) {
  if (dtype == DType::f32) return f.template operator()<float>();
  return f.template operator()<double>();
}

using detail::BackwardFn;
using detail::Node;

Tensor wrap(const char* op, Shape shape, Buffer value, std::initializer_list<const Tensor*> parents,
            BackwardFn backward) {
  if (g_checked.load(std::memory_order_relaxed) && !value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
  auto node = std::make_shared<Node>();
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (t_grad_enabled) {
    for (const Tensor* p : parents) needs = needs || p->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const Tensor* p : parents) node->parents.push_back(p->node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Tensor wrap_many(const char* op, Shape shape, Buffer value, std::span<const Tensor> parents,
                 BackwardFn backward) {
  if (g_checked.load(std::memory_order_relaxed) && !value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
  auto node = std::make_shared<Node>();
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (t_grad_enabled) {
    for (const Tensor& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

void require(bool cond, const std::string& message) {
  if (!cond) throw ShapeError(message);
}

void require_rank2(const Tensor& a, const char* op) {
  require(a.defined() && a.rank() == 2,
          std::string(op) + ": expected rank-2 tensor, got " +
              (a.defined() ? shape_str(a.shape()) : std::string("undefined")));
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) throw ShapeError(std::string(op) + ": dtype mismatch");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_same_dtype(a, b, op);
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

template <class T>
std::span<T> grad_of(std::span<Buffer*> pg, std::size_t i) {
  return pg[i] ? pg[i]->span<T>() : std::span<T>();
}

template <class T>
std::span<const T> val(const Node& self, std::size_t parent) {
  return self.parents[parent]->value.span<const T>();
}

// c[n,m] += a[n,k] * b[k,m]. Every c element accumulates over p in the same
// order in each clone (no FMA contraction), so results do not depend on the
// selected instruction set.
template <class T>
inline void gemm_kernel(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    T* crow = c + i * m;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      const T* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
    }
  }
}

__attribute__((target_clones("avx2", "default"))) void gemm_f32(const float* a, const float* b, float* c,
                                                                 std::size_t n, std::size_t k,
                                                                 std::size_t m) {
  gemm_kernel(a, b, c, n, k, m);
}

__attribute__((target_clones("avx2", "default"))) void gemm_f64(const double* a, const double* b,
                                                                 double* c, std::size_t n,
                                                                 std::size_t k, std::size_t m) {
  gemm_kernel(a, b, c, n, k, m);
}

template <class T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  if constexpr (std::is_same_v<T, float>)
    gemm_f32(a, b, c, n, k, m);
  else
    gemm_f64(a, b, c, n, k, m);
}

template <class T>
std::vector<T> transposed(std::span<const T> a, std::size_t n, std::size_t m) {
  std::vector<T> t(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) t[j * n + i] = a[i * m + j];
  return t;
}

template <class T, class F>
Tensor unary(const char* op, const Tensor& a, F f, BackwardFn bw) {
  Buffer out(a.dtype(), a.numel());
  auto A = a.data<T>();
  auto O = out.span<T>();
  for (std::size_t i = 0; i < A.size(); ++i) O[i] = f(A[i]);
  return wrap(op, a.shape(), std::move(out), {&a}, std::move(bw));
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

DType default_dtype() { return g_default_dtype.load(); }
void set_default_dtype(DType dtype) { g_default_dtype.store(dtype); }

PrecisionScope::PrecisionScope(DType dtype) : previous_(default_dtype()) {
  set_default_dtype(dtype);
}
PrecisionScope::~PrecisionScope() { set_default_dtype(previous_); }

bool checked_mode() { return g_checked.load(); }
void set_checked_mode(bool on) { g_checked.store(on); }

bool grad_enabled() { return t_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

// ---------------------------------------------------------------- Buffer

Buffer::Buffer(DType dtype, std::size_t n) {
  if (dtype == DType::f32)
    data_ = std::vector<float>(n, 0.0f);
  else
    data_ = std::vector<double>(n, 0.0);
}

std::size_t Buffer::size() const {
  return std::visit([](const auto& v) { return v.size(); }, data_);
}

double Buffer::get(std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v.at(i)); }, data_);
}

void Buffer::set(std::size_t i, double x) {
  std::visit([i, x](auto& v) { v.at(i) = static_cast<typename std::decay_t<decltype(v)>::value_type>(x); },
             data_);
}

void Buffer::fill(double x) {
  std::visit(
      [x](auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        std::fill(v.begin(), v.end(), static_cast<T>(x));
      },
      data_);
}

bool Buffer::all_finite() const {
  return std::visit(
      [](const auto& v) {
        for (auto x : v)
          if (!std::isfinite(x)) return false;
        return true;
      },
      data_);
}

// ---------------------------------------------------------------- Tensor

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = at(i);
  return out;
}

Buffer& Tensor::mutable_buffer() {
  if (node_->backward) throw std::logic_error("mutable_buffer() on a non-leaf tensor");
  return node_->value;
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<Node>();
  node->id = g_next_id.fetch_add(1);
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

Tensor from_buffer(const Shape& shape, Buffer values) {
  require(!shape.empty(), "tensor shape must have at least one axis");
  for (auto e : shape) require(e > 0, "tensor extents must be positive, got " + shape_str(shape));
  require(shape_numel(shape) == values.size(),
          "value count " + std::to_string(values.size()) + " does not match shape " +
              shape_str(shape));
  auto node = std::make_shared<Node>();
  node->id = g_next_id.fetch_add(1);
  node->shape = shape;
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor zeros(const Shape& shape, DType dtype) {
  return from_buffer(shape, Buffer(dtype, shape_numel(shape)));
}

Tensor full(const Shape& shape, double value, DType dtype) {
  Buffer b(dtype, shape_numel(shape));
  b.fill(value);
  return from_buffer(shape, std::move(b));
}

Tensor from_values(const Shape& shape, std::span<const double> values, DType dtype) {
  Buffer b(dtype, values.size());
  for (std::size_t i = 0; i < values.size(); ++i) b.set(i, values[i]);
  return from_buffer(shape, std::move(b));
}

Tensor from_values(const Shape& shape, std::initializer_list<double> values, DType dtype) {
  return from_values(shape, std::span<const double>(values.begin(), values.size()), dtype);
}

Tensor parameter(const Shape& shape, Buffer values) {
  Tensor t = from_buffer(shape, std::move(values));
  t.node()->requires_grad = true;
  return t;
}

Tensor parameter(const Shape& shape, std::span<const double> values, DType dtype) {
  Tensor t = from_values(shape, values, dtype);
  t.node()->requires_grad = true;
  return t;
}

// ---------------------------------------------------------------- ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  require_same_dtype(a, b, "matmul");
  require(a.cols() == b.rows(),
          "matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Buffer out(a.dtype(), n * m);
  dispatch(a.dtype(), [&]<class T>() {
    gemm_acc<T>(a.data<T>().data(), b.data<T>().data(), out.span<T>().data(), n, k, m);
  });
  return wrap("matmul", {n, m}, std::move(out), {&a, &b},
              [n, k, m](const Node& self, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  if (pg[0]) {
                    auto bt = transposed<T>(val<T>(self, 1), k, m);
                    gemm_acc<T>(G.data(), bt.data(), pg[0]->span<T>().data(), n, m, k);
                  }
                  if (pg[1]) {
                    auto at = transposed<T>(val<T>(self, 0), n, k);
                    gemm_acc<T>(at.data(), G.data(), pg[1]->span<T>().data(), k, n, m);
                  }
                });
              });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t n = a.rows(), m = a.cols();
  Buffer out(a.dtype(), n * m);
  dispatch(a.dtype(), [&]<class T>() {
    auto t = transposed<T>(a.data<T>(), n, m);
    std::copy(t.begin(), t.end(), out.span<T>().begin());
  });
  return wrap("transpose", {m, n}, std::move(out), {&a},
              [n, m](const Node&, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  auto D = pg[0]->span<T>();
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) D[i * m + j] += G[j * n + i];
                });
              });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Buffer out(a.dtype(), a.numel());
  dispatch(a.dtype(), [&]<class T>() {
    auto A = a.data<T>();
    auto B = b.data<T>();
    auto O = out.span<T>();
    for (std::size_t i = 0; i < O.size(); ++i) O[i] = A[i] + B[i];
  });
  return wrap("add", a.shape(), std::move(out), {&a, &b},
              [](const Node&, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  for (int p = 0; p < 2; ++p) {
                    if (!pg[p]) continue;
                    auto D = pg[p]->span<T>();
                    for (std::size_t i = 0; i < G.size(); ++i) D[i] += G[i];
                  }
                });
              });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Buffer out(a.dtype(), a.numel());
  dispatch(a.dtype(), [&]<class T>() {
    auto A = a.data<T>();
    auto B = b.data<T>();
    auto O = out.span<T>();
    for (std::size_t i = 0; i < O.size(); ++i) O[i] = A[i] - B[i];
  });
  return wrap("sub", a.shape(), std::move(out), {&a, &b},
              [](const Node&, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  if (pg[0]) {
                    auto D = pg[0]->span<T>();
                    for (std::size_t i = 0; i < G.size(); ++i) D[i] += G[i];
                  }
                  if (pg[1]) {
                    auto D = pg[1]->span<T>();
                    for (std::size_t i = 0; i < G.size(); ++i) D[i] -= G[i];
                  }
                });
              });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Buffer out(a.dtype(), a.numel());
  dispatch(a.dtype(), [&]<class T>() {
    auto A = a.data<T>();
    auto B = b.data<T>();
    auto O = out.span<T>();
    for (std::size_t i = 0; i < O.size(); ++i) O[i] = A[i] * B[i];
  });
  return wrap("mul", a.shape(), std::move(out), {&a, &b},
              [](const Node& self, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  auto A = val<T>(self, 0);
                  auto B = val<T>(self, 1);
                  if (pg[0]) {
                    auto D = pg[0]->span<T>();
                    for (std::size_t i = 0; i < G.size(); ++i) D[i] += G[i] * B[i];
                  }
                  if (pg[1]) {
                    auto D = pg[1]->span<T>();
                    for (std::size_t i = 0; i < G.size(); ++i) D[i] += G[i] * A[i];
                  }
                });
              });
}

Tensor scale(const Tensor& a, double s) {
  return dispatch(a.dtype(), [&]<class T>() {
    const T st = static_cast<T>(s);
    return unary<T>("scale", a, [st](T x) { return x * st; },
                    [s](const Node&, const Buffer& g, std::span<Buffer*> pg) {
                      dispatch(g.dtype(), [&]<class U>() {
                        const U su = static_cast<U>(s);
                        auto G = g.span<const U>();
                        auto D = pg[0]->span<U>();
                        for (std::size_t i = 0; i < G.size(); ++i) D[i] += G[i] * su;
                      });
                    });
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  return dispatch(a.dtype(), [&]<class T>() {
    const T st = static_cast<T>(s);
    return unary<T>("add_scalar", a, [st](T x) { return x + st; },
                    [](const Node&, const Buffer& g, std::span<Buffer*> pg) {
                      dispatch(g.dtype(), [&]<class U>() {
                        auto G = g.span<const U>();
                        auto D = pg[0]->span<U>();
                        for (std::size_t i = 0; i < G.size(); ++i) D[i] += G[i];
                      });
                    });
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_rank2(a, "add_row");
  require_same_dtype(a, row, "add_row");
  require(row.numel() == a.cols(), "add_row: row of shape " + shape_str(row.shape()) +
                                       " does not broadcast over " + shape_str(a.shape()));
  const std::size_t n = a.rows(), m = a.cols();
  Buffer out(a.dtype(), n * m);
  dispatch(a.dtype(), [&]<class T>() {
    auto A = a.data<T>();
    auto R = row.data<T>();
    auto O = out.span<T>();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) O[i * m + j] = A[i * m + j] + R[j];
  });
  return wrap("add_row", a.shape(), std::move(out), {&a, &row},
              [n, m](const Node&, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  if (pg[0]) {
                    auto D = pg[0]->span<T>();
                    for (std::size_t i = 0; i < G.size(); ++i) D[i] += G[i];
                  }
                  if (pg[1]) {
                    auto D = pg[1]->span<T>();
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < m; ++j) D[j] += G[i * m + j];
                  }
                });
              });
}

Tensor mul_col(const Tensor& a, const Tensor& col) {
  require_rank2(a, "mul_col");
  require_same_dtype(a, col, "mul_col");
  require(col.numel() == a.rows(), "mul_col: column of shape " + shape_str(col.shape()) +
                                       " does not broadcast over " + shape_str(a.shape()));
  const std::size_t n = a.rows(), m = a.cols();
  Buffer out(a.dtype(), n * m);
  dispatch(a.dtype(), [&]<class T>() {
    auto A = a.data<T>();
    auto C = col.data<T>();
    auto O = out.span<T>();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) O[i * m + j] = A[i * m + j] * C[i];
  });
  return wrap("mul_col", a.shape(), std::move(out), {&a, &col},
              [n, m](const Node& self, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  auto A = val<T>(self, 0);
                  auto C = val<T>(self, 1);
                  if (pg[0]) {
                    auto D = pg[0]->span<T>();
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < m; ++j) D[i * m + j] += G[i * m + j] * C[i];
                  }
                  if (pg[1]) {
                    auto D = pg[1]->span<T>();
                    for (std::size_t i = 0; i < n; ++i) {
                      T acc = 0;
                      for (std::size_t j = 0; j < m; ++j) acc += G[i * m + j] * A[i * m + j];
                      D[i] += acc;
                    }
                  }
                });
              });
}

Tensor sum(const Tensor& a) {
  Buffer out(a.dtype(), 1);
  dispatch(a.dtype(), [&]<class T>() {
    double acc = 0;
    for (auto x : a.data<T>()) acc += x;
    out.span<T>()[0] = static_cast<T>(acc);
  });
  return wrap("sum", {1}, std::move(out), {&a},
              [](const Node&, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  const T g0 = g.span<const T>()[0];
                  for (auto& d : pg[0]->span<T>()) d += g0;
                });
              });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor softmax(const Tensor& a) {
  const std::size_t m = a.cols();
  const std::size_t n = a.numel() / m;
  Buffer out(a.dtype(), a.numel());
  dispatch(a.dtype(), [&]<class T>() {
    auto A = a.data<T>();
    auto O = out.span<T>();
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = A.data() + i * m;
      T* orow = O.data() + i * m;
      T mx = row[0];
      for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
      T total = 0;
      for (std::size_t j = 0; j < m; ++j) {
        orow[j] = std::exp(row[j] - mx);
        total += orow[j];
      }
      for (std::size_t j = 0; j < m; ++j) orow[j] /= total;
    }
  });
  return wrap("softmax", a.shape(), std::move(out), {&a},
              [n, m](const Node& self, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  auto Y = self.value.span<const T>();
                  auto D = pg[0]->span<T>();
                  for (std::size_t i = 0; i < n; ++i) {
                    T dot = 0;
                    for (std::size_t j = 0; j < m; ++j) dot += G[i * m + j] * Y[i * m + j];
                    for (std::size_t j = 0; j < m; ++j)
                      D[i * m + j] += Y[i * m + j] * (G[i * m + j] - dot);
                  }
                });
              });
}

Tensor log(const Tensor& a) {
  return dispatch(a.dtype(), [&]<class T>() {
    return unary<T>("log", a, [](T x) { return std::log(x); },
                    [](const Node& self, const Buffer& g, std::span<Buffer*> pg) {
                      dispatch(g.dtype(), [&]<class U>() {
                        auto G = g.span<const U>();
                        auto X = val<U>(self, 0);
                        auto D = pg[0]->span<U>();
                        for (std::size_t i = 0; i < G.size(); ++i) D[i] += G[i] / X[i];
                      });
                    });
  });
}

Tensor exp(const Tensor& a) {
  return dispatch(a.dtype(), [&]<class T>() {
    return unary<T>("exp", a, [](T x) { return std::exp(x); },
                    [](const Node& self, const Buffer& g, std::span<Buffer*> pg) {
                      dispatch(g.dtype(), [&]<class U>() {
                        auto G = g.span<const U>();
                        auto Y = self.value.span<const U>();
                        auto D = pg[0]->span<U>();
                        for (std::size_t i = 0; i < G.size(); ++i) D[i] += G[i] * Y[i];
                      });
                    });
  });
}

Tensor sigmoid(const Tensor& a) {
  return dispatch(a.dtype(), [&]<class T>() {
    return unary<T>("sigmoid", a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
                    [](const Node& self, const Buffer& g, std::span<Buffer*> pg) {
                      dispatch(g.dtype(), [&]<class U>() {
                        auto G = g.span<const U>();
                        auto Y = self.value.span<const U>();
                        auto D = pg[0]->span<U>();
                        for (std::size_t i = 0; i < G.size(); ++i)
                          D[i] += G[i] * Y[i] * (U(1) - Y[i]);
                      });
                    });
  });
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return dispatch(a.dtype(), [&]<class T>() {
    return unary<T>(
        "gelu", a,
        [](T x) { return T(0.5) * x * (T(1) + std::tanh(T(kC) * (x + T(kA) * x * x * x))); },
        [](const Node& self, const Buffer& g, std::span<Buffer*> pg) {
          dispatch(g.dtype(), [&]<class U>() {
            auto G = g.span<const U>();
            auto X = val<U>(self, 0);
            auto D = pg[0]->span<U>();
            for (std::size_t i = 0; i < G.size(); ++i) {
              const U x = X[i];
              const U t = std::tanh(U(kC) * (x + U(kA) * x * x * x));
              const U dt = (U(1) - t * t) * U(kC) * (U(1) + U(3 * kA) * x * x);
              D[i] += G[i] * (U(0.5) * (U(1) + t) + U(0.5) * x * dt);
            }
          });
        });
  });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
  Buffer out = a.buffer();
  return wrap("reshape", shape, std::move(out), {&a},
              [](const Node&, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  auto D = pg[0]->span<T>();
                  for (std::size_t i = 0; i < G.size(); ++i) D[i] += G[i];
                });
              });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t m = parts[0].cols();
  std::size_t n = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    require_same_dtype(p, parts[0], "concat_rows");
    require(p.cols() == m, "concat_rows: column mismatch " + shape_str(p.shape()));
    offsets.push_back(n);
    n += p.rows();
  }
  Buffer out(parts[0].dtype(), n * m);
  dispatch(out.dtype(), [&]<class T>() {
    auto O = out.span<T>();
    for (std::size_t i = 0; i < parts.size(); ++i) {
      auto P = parts[i].data<T>();
      std::copy(P.begin(), P.end(), O.begin() + static_cast<std::ptrdiff_t>(offsets[i] * m));
    }
  });
  return wrap_many("concat_rows", {n, m}, std::move(out), parts,
                   [offsets, m](const Node& self, const Buffer& g, std::span<Buffer*> pg) {
                     dispatch(g.dtype(), [&]<class T>() {
                       auto G = g.span<const T>();
                       for (std::size_t i = 0; i < pg.size(); ++i) {
                         if (!pg[i]) continue;
                         auto D = pg[i]->span<T>();
                         const std::size_t base = offsets[i] * m;
                         for (std::size_t j = 0; j < D.size(); ++j) D[j] += G[base + j];
                       }
                       (void)self;
                     });
                   });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::size_t m = 0;
  std::vector<std::size_t> offsets, widths;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    require_same_dtype(p, parts[0], "concat_cols");
    require(p.rows() == n, "concat_cols: row mismatch " + shape_str(p.shape()));
    offsets.push_back(m);
    widths.push_back(p.cols());
    m += p.cols();
  }
  Buffer out(parts[0].dtype(), n * m);
  dispatch(out.dtype(), [&]<class T>() {
    auto O = out.span<T>();
    for (std::size_t k = 0; k < parts.size(); ++k) {
      auto P = parts[k].data<T>();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < widths[k]; ++j)
          O[i * m + offsets[k] + j] = P[i * widths[k] + j];
    }
  });
  return wrap_many("concat_cols", {n, m}, std::move(out), parts,
                   [offsets, widths, n, m](const Node&, const Buffer& g, std::span<Buffer*> pg) {
                     dispatch(g.dtype(), [&]<class T>() {
                       auto G = g.span<const T>();
                       for (std::size_t k = 0; k < pg.size(); ++k) {
                         if (!pg[k]) continue;
                         auto D = pg[k]->span<T>();
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < widths[k]; ++j)
                             D[i * widths[k] + j] += G[i * m + offsets[k] + j];
                       }
                     });
                   });
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  require_rank2(a, "slice_rows");
  require(count > 0 && start + count <= a.rows(),
          "slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
              ") out of range for " + shape_str(a.shape()));
  const std::size_t m = a.cols();
  Buffer out(a.dtype(), count * m);
  dispatch(a.dtype(), [&]<class T>() {
    auto A = a.data<T>();
    std::copy(A.begin() + static_cast<std::ptrdiff_t>(start * m),
              A.begin() + static_cast<std::ptrdiff_t>((start + count) * m), out.span<T>().begin());
  });
  return wrap("slice_rows", {count, m}, std::move(out), {&a},
              [start, m](const Node&, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  auto D = pg[0]->span<T>();
                  for (std::size_t j = 0; j < G.size(); ++j) D[start * m + j] += G[j];
                });
              });
}

Tensor gather_rows(const Tensor& table, std::span<const std::uint32_t> ids) {
  require_rank2(table, "gather_rows");
  require(!ids.empty(), "gather_rows: empty id list");
  const std::size_t vocab = table.rows(), d = table.cols();
  for (auto id : ids)
    if (id >= vocab)
      throw std::out_of_range("gather_rows: id " + std::to_string(id) + " >= table rows " +
                              std::to_string(vocab));
  std::vector<std::uint32_t> idx(ids.begin(), ids.end());
  Buffer out(table.dtype(), idx.size() * d);
  dispatch(table.dtype(), [&]<class T>() {
    auto W = table.data<T>();
    auto O = out.span<T>();
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(W.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                  O.begin() + static_cast<std::ptrdiff_t>(i * d));
  });
  const Shape shape{idx.size(), d};
  return wrap("gather_rows", shape, std::move(out), {&table},
              [idx = std::move(idx), d](const Node&, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  auto D = pg[0]->span<T>();
                  for (std::size_t i = 0; i < idx.size(); ++i)
                    for (std::size_t j = 0; j < d; ++j) D[idx[i] * d + j] += G[i * d + j];
                });
              });
}

Tensor pick(const Tensor& a, std::span<const std::uint32_t> cols) {
  require_rank2(a, "pick");
  require(cols.size() == a.rows(), "pick: need one column per row of " + shape_str(a.shape()));
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<std::uint32_t> idx(cols.begin(), cols.end());
  for (auto c : idx) require(c < m, "pick: column " + std::to_string(c) + " out of range");
  Buffer out(a.dtype(), n);
  dispatch(a.dtype(), [&]<class T>() {
    auto A = a.data<T>();
    auto O = out.span<T>();
    for (std::size_t i = 0; i < n; ++i) O[i] = A[i * m + idx[i]];
  });
  return wrap("pick", {n, 1}, std::move(out), {&a},
              [idx = std::move(idx), m](const Node&, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  auto D = pg[0]->span<T>();
                  for (std::size_t i = 0; i < idx.size(); ++i) D[i * m + idx[i]] += G[i];
                });
              });
}

Tensor scatter_cols(const Tensor& a, std::span<const std::uint32_t> index, std::size_t width) {
  require_rank2(a, "scatter_cols");
  require(index.size() == a.cols(), "scatter_cols: need one target per column of " +
                                        shape_str(a.shape()));
  const std::size_t n = a.rows(), s = a.cols();
  std::vector<std::uint32_t> idx(index.begin(), index.end());
  for (auto c : idx) require(c < width, "scatter_cols: target " + std::to_string(c) + " >= width");
  Buffer out(a.dtype(), n * width);
  dispatch(a.dtype(), [&]<class T>() {
    auto A = a.data<T>();
    auto O = out.span<T>();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < s; ++j) O[i * width + idx[j]] += A[i * s + j];
  });
  return wrap("scatter_cols", {n, width}, std::move(out), {&a},
              [idx = std::move(idx), n, s, width](const Node&, const Buffer& g,
                                                   std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  auto D = pg[0]->span<T>();
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < s; ++j) D[i * s + j] += G[i * width + idx[j]];
                });
              });
}

Tensor dropout(const Tensor& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<std::uint8_t> keep(a.numel());
  for (auto& k : keep) k = rng.uniform() >= rate ? 1 : 0;
  Buffer out(a.dtype(), a.numel());
  dispatch(a.dtype(), [&]<class T>() {
    auto A = a.data<T>();
    auto O = out.span<T>();
    const T s = static_cast<T>(keep_scale);
    for (std::size_t i = 0; i < O.size(); ++i) O[i] = keep[i] ? A[i] * s : T(0);
  });
  return wrap("dropout", a.shape(), std::move(out), {&a},
              [keep = std::move(keep), keep_scale](const Node&, const Buffer& g,
                                                    std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  auto D = pg[0]->span<T>();
                  const T s = static_cast<T>(keep_scale);
                  for (std::size_t i = 0; i < G.size(); ++i)
                    if (keep[i]) D[i] += G[i] * s;
                });
              });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  require_rank2(x, "rms_norm");
  require_same_dtype(x, gain, "rms_norm");
  require(gain.numel() == x.cols(), "rms_norm: gain of shape " + shape_str(gain.shape()) +
                                        " does not match last axis of " + shape_str(x.shape()));
  const std::size_t n = x.rows(), d = x.cols();
  Buffer out(x.dtype(), n * d);
  dispatch(x.dtype(), [&]<class T>() {
    auto X = x.data<T>();
    auto Gn = gain.data<T>();
    auto O = out.span<T>();
    for (std::size_t i = 0; i < n; ++i) {
      T ss = 0;
      for (std::size_t j = 0; j < d; ++j) ss += X[i * d + j] * X[i * d + j];
      const T inv = T(1) / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(eps));
      for (std::size_t j = 0; j < d; ++j) O[i * d + j] = Gn[j] * X[i * d + j] * inv;
    }
  });
  return wrap("rms_norm", x.shape(), std::move(out), {&x, &gain},
              [n, d, eps](const Node& self, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  auto X = val<T>(self, 0);
                  auto Gn = val<T>(self, 1);
                  for (std::size_t i = 0; i < n; ++i) {
                    const T* xr = X.data() + i * d;
                    const T* gr = G.data() + i * d;
                    T ss = 0;
                    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
                    const T inv = T(1) / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(eps));
                    if (pg[1]) {
                      auto DG = pg[1]->span<T>();
                      for (std::size_t j = 0; j < d; ++j) DG[j] += gr[j] * xr[j] * inv;
                    }
                    if (pg[0]) {
                      auto DX = pg[0]->span<T>();
                      T dot = 0;
                      for (std::size_t j = 0; j < d; ++j) dot += gr[j] * Gn[j] * xr[j];
                      const T c = dot * inv * inv * inv / static_cast<T>(d);
                      for (std::size_t j = 0; j < d; ++j)
                        DX[i * d + j] += gr[j] * Gn[j] * inv - xr[j] * c;
                    }
                  }
                });
              });
}

Tensor rotary(const Tensor& x, std::span<const std::size_t> positions, std::size_t heads,
              double base) {
  require_rank2(x, "rotary");
  require(positions.size() == x.rows(), "rotary: one position per row required");
  require(heads > 0 && x.cols() % heads == 0, "rotary: width not divisible by head count");
  const std::size_t n = x.rows(), d = x.cols(), dh = d / heads;
  require(dh % 2 == 0, "rotary: per-head width " + std::to_string(dh) + " is odd");
  // Angle table shared by forward and backward.
  std::vector<double> cosv(n * dh / 2), sinv(n * dh / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dh / 2; ++j) {
      const double theta = static_cast<double>(positions[i]) *
                           std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(dh));
      cosv[i * dh / 2 + j] = std::cos(theta);
      sinv[i * dh / 2 + j] = std::sin(theta);
    }
  auto rotate = [n, d, dh, heads](auto src, auto dst, const std::vector<double>& c,
                                  const std::vector<double>& s, double sign, bool accumulate) {
    using T = std::remove_const_t<typename decltype(src)::element_type>;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < dh / 2; ++j) {
          const std::size_t c0 = i * d + h * dh + 2 * j;
          const T cs = static_cast<T>(c[i * dh / 2 + j]);
          const T sn = static_cast<T>(sign * s[i * dh / 2 + j]);
          const T a = src[c0], b = src[c0 + 1];
          const T y0 = a * cs - b * sn;
          const T y1 = a * sn + b * cs;
          if (accumulate) {
            dst[c0] += y0;
            dst[c0 + 1] += y1;
          } else {
            dst[c0] = y0;
            dst[c0 + 1] = y1;
          }
        }
  };
  Buffer out(x.dtype(), n * d);
  dispatch(x.dtype(), [&]<class T>() { rotate(x.data<T>(), out.span<T>(), cosv, sinv, 1.0, false); });
  return wrap("rotary", x.shape(), std::move(out), {&x},
              [rotate, cosv = std::move(cosv), sinv = std::move(sinv)](
                  const Node&, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  rotate(g.span<const T>(), pg[0]->span<T>(), cosv, sinv, -1.0, true);
                });
              });
}

Tensor attention_scores(const Tensor& q, const Tensor& k, std::size_t heads, bool causal) {
  require_rank2(q, "attention_scores");
  require_rank2(k, "attention_scores");
  require_same_dtype(q, k, "attention_scores");
  require(q.cols() == k.cols(), "attention_scores: width mismatch " + shape_str(q.shape()) +
                                    " vs " + shape_str(k.shape()));
  require(heads > 0 && q.cols() % heads == 0, "attention_scores: width not divisible by heads");
  const std::size_t lq = q.rows(), lk = k.rows(), d = q.cols(), dh = d / heads;
  if (causal) require(lq <= lk, "attention_scores: causal mask needs Lq <= Lk");
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
  Buffer out(q.dtype(), heads * lq * lk);
  dispatch(q.dtype(), [&]<class T>() {
    auto Q = q.data<T>();
    auto K = k.data<T>();
    auto P = out.span<T>();
    const T sc = static_cast<T>(scale_factor);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < lq; ++i) {
        T* prow = P.data() + (h * lq + i) * lk;
        const std::size_t visible = causal ? i + 1 : lk;
        const T* qr = Q.data() + i * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < visible; ++j) {
          const T* kr = K.data() + j * d + h * dh;
          T dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += qr[c] * kr[c];
          prow[j] = dot * sc;
          mx = std::max(mx, prow[j]);
        }
        T total = 0;
        for (std::size_t j = 0; j < visible; ++j) {
          prow[j] = std::exp(prow[j] - mx);
          total += prow[j];
        }
        for (std::size_t j = 0; j < visible; ++j) prow[j] /= total;
      }
  });
  return wrap(
      "attention_scores", {heads * lq, lk}, std::move(out), {&q, &k},
      [heads, lq, lk, d, dh, causal, scale_factor](const Node& self, const Buffer& g,
                                                    std::span<Buffer*> pg) {
        dispatch(g.dtype(), [&]<class T>() {
          auto G = g.span<const T>();
          auto P = self.value.span<const T>();
          auto Q = val<T>(self, 0);
          auto K = val<T>(self, 1);
          auto DQ = grad_of<T>(pg, 0);
          auto DK = grad_of<T>(pg, 1);
          const T sc = static_cast<T>(scale_factor);
          std::vector<T> ds(lk);
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < lq; ++i) {
              const std::size_t row = (h * lq + i) * lk;
              const std::size_t visible = causal ? i + 1 : lk;
              T dot = 0;
              for (std::size_t j = 0; j < visible; ++j) dot += G[row + j] * P[row + j];
              for (std::size_t j = 0; j < visible; ++j)
                ds[j] = P[row + j] * (G[row + j] - dot) * sc;
              if (!DQ.empty()) {
                T* dq = DQ.data() + i * d + h * dh;
                for (std::size_t j = 0; j < visible; ++j) {
                  const T* kr = K.data() + j * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dq[c] += ds[j] * kr[c];
                }
              }
              if (!DK.empty()) {
                const T* qr = Q.data() + i * d + h * dh;
                for (std::size_t j = 0; j < visible; ++j) {
                  T* dk = DK.data() + j * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dk[c] += ds[j] * qr[c];
                }
              }
            }
        });
      });
}

Tensor attention_apply(const Tensor& probs, const Tensor& v, std::size_t heads) {
  require_rank2(probs, "attention_apply");
  require_rank2(v, "attention_apply");
  require_same_dtype(probs, v, "attention_apply");
  require(heads > 0 && probs.rows() % heads == 0 && v.cols() % heads == 0,
          "attention_apply: head count does not divide inputs");
  require(probs.cols() == v.rows(), "attention_apply: probabilities " + shape_str(probs.shape()) +
                                        " vs values " + shape_str(v.shape()));
  const std::size_t lq = probs.rows() / heads, lk = v.rows(), d = v.cols(), dh = d / heads;
  Buffer out(v.dtype(), lq * d);
  dispatch(v.dtype(), [&]<class T>() {
    auto P = probs.data<T>();
    auto V = v.data<T>();
    auto O = out.span<T>();
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < lq; ++i) {
        T* orow = O.data() + i * d + h * dh;
        const T* prow = P.data() + (h * lq + i) * lk;
        for (std::size_t j = 0; j < lk; ++j) {
          const T w = prow[j];
          const T* vr = V.data() + j * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) orow[c] += w * vr[c];
        }
      }
  });
  return wrap("attention_apply", {lq, d}, std::move(out), {&probs, &v},
              [heads, lq, lk, d, dh](const Node& self, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  auto P = val<T>(self, 0);
                  auto V = val<T>(self, 1);
                  auto DP = grad_of<T>(pg, 0);
                  auto DV = grad_of<T>(pg, 1);
                  for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t i = 0; i < lq; ++i) {
                      const T* gr = G.data() + i * d + h * dh;
                      const std::size_t row = (h * lq + i) * lk;
                      for (std::size_t j = 0; j < lk; ++j) {
                        if (!DP.empty()) {
                          const T* vr = V.data() + j * d + h * dh;
                          T dot = 0;
                          for (std::size_t c = 0; c < dh; ++c) dot += gr[c] * vr[c];
                          DP[row + j] += dot;
                        }
                        if (!DV.empty()) {
                          T* dv = DV.data() + j * d + h * dh;
                          const T w = P[row + j];
                          for (std::size_t c = 0; c < dh; ++c) dv[c] += w * gr[c];
                        }
                      }
                    }
                });
              });
}

Tensor head_mean(const Tensor& probs, std::size_t heads) {
  require_rank2(probs, "head_mean");
  require(heads > 0 && probs.rows() % heads == 0, "head_mean: head count does not divide rows");
  const std::size_t lq = probs.rows() / heads, lk = probs.cols();
  Buffer out(probs.dtype(), lq * lk);
  dispatch(probs.dtype(), [&]<class T>() {
    auto P = probs.data<T>();
    auto O = out.span<T>();
    const T inv = T(1) / static_cast<T>(heads);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < lq * lk; ++i) O[i] += P[h * lq * lk + i];
    for (auto& o : O) o *= inv;
  });
  return wrap("head_mean", {lq, lk}, std::move(out), {&probs},
              [heads, lq, lk](const Node&, const Buffer& g, std::span<Buffer*> pg) {
                dispatch(g.dtype(), [&]<class T>() {
                  auto G = g.span<const T>();
                  auto D = pg[0]->span<T>();
                  const T inv = T(1) / static_cast<T>(heads);
                  for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t i = 0; i < lq * lk; ++i) D[h * lq * lk + i] += G[i] * inv;
                });
              });
}

// ---------------------------------------------------------------- backward

Tensor Gradients::get(const Tensor& param) const {
  auto it = grads_.find(param.id());
  if (it == grads_.end()) return zeros(param.shape(), param.dtype());
  return from_buffer(param.shape(), it->second);
}

void Gradients::accumulate(const Gradients& other) {
  for (const auto& [id, buf] : other.grads_) {
    auto it = grads_.find(id);
    if (it == grads_.end()) {
      grads_.emplace(id, buf);
      continue;
    }
    if (it->second.size() != buf.size() || it->second.dtype() != buf.dtype())
      throw ShapeError("Gradients::accumulate: incompatible buffers");
    dispatch(buf.dtype(), [&]<class T>() {
      auto D = it->second.span<T>();
      auto S = buf.span<const T>();
      for (std::size_t i = 0; i < D.size(); ++i) D[i] += S[i];
    });
  }
}

void Gradients::scale(double s) {
  for (auto& [id, buf] : grads_) {
    dispatch(buf.dtype(), [&]<class T>() {
      for (auto& x : buf.span<T>()) x = static_cast<T>(x * s);
    });
  }
}

Gradients grad(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("grad: loss must be a scalar, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  Gradients result;
  if (!loss.requires_grad()) return result;

  // Iterative post-order DFS over the recorded graph.
  std::vector<Node*> order;
  std::unordered_map<const Node*, std::size_t> index;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  index.emplace(loss.node().get(), static_cast<std::size_t>(-1));
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && index.emplace(parent, static_cast<std::size_t>(-1)).second)
        stack.emplace_back(parent, 0);
      continue;
    }
    index[node] = order.size();
    order.push_back(node);
    stack.pop_back();
  }

  std::vector<Buffer> grads(order.size());
  const std::size_t root = index[loss.node().get()];
  grads[root] = Buffer(loss.dtype(), 1);
  grads[root].fill(1.0);

  std::vector<Buffer*> parent_grads;
  for (std::size_t pos = order.size(); pos-- > 0;) {
    Node* node = order[pos];
    if (grads[pos].size() == 0) grads[pos] = Buffer(node->value.dtype(), node->value.size());
    if (!node->backward) {
      result.raw()[node->id] = std::move(grads[pos]);
      continue;
    }
    parent_grads.assign(node->parents.size(), nullptr);
    for (std::size_t p = 0; p < node->parents.size(); ++p) {
      Node* parent = node->parents[p].get();
      if (!parent->requires_grad) continue;
      Buffer& pg = grads[index.at(parent)];
      if (pg.size() == 0) pg = Buffer(parent->value.dtype(), parent->value.size());
      parent_grads[p] = &pg;
    }
    node->backward(*node, grads[pos], std::span<Buffer*>(parent_grads));
    grads[pos] = Buffer();
  }
  return result;
}

}  // namespace retroseq
