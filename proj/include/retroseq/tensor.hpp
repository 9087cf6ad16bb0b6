#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <variant>
#include <vector>

namespace retroseq {

class Rng;

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { f32, f64 };

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Process-wide numeric knobs. The default dtype applies to tensors created
// without an explicit dtype; f64 is meant for gradient checking only.
DType default_dtype();
void set_default_dtype(DType dtype);

class PrecisionScope {
 public:
  explicit PrecisionScope(DType dtype);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  DType previous_;
};

/// When on, every op verifies its output is finite and throws NumericError.
bool checked_mode();
void set_checked_mode(bool on);

/// Tape recording is per thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Buffer {
 public:
  Buffer() = default;
  Buffer(DType dtype, std::size_t n);

  DType dtype() const { return data_.index() == 0 ? DType::f32 : DType::f64; }
  std::size_t size() const;

  template <class T>
  std::span<T> span() {
    return std::span<T>(std::get<std::vector<std::remove_const_t<T>>>(data_));
  }
  template <class T>
  std::span<const std::remove_const_t<T>> span() const {
    return std::span<const std::remove_const_t<T>>(
        std::get<std::vector<std::remove_const_t<T>>>(data_));
  }

  double get(std::size_t i) const;
  void set(std::size_t i, double v);
  void fill(double v);
  bool all_finite() const;

  bool operator==(const Buffer& other) const { return data_ == other.data_; }

 private:
  std::variant<std::vector<float>, std::vector<double>> data_{std::vector<float>{}};
};

namespace detail {

struct Node;
using BackwardFn =
    std::function<void(const Node& self, const Buffer& grad_out, std::span<Buffer*> parent_grads)>;

struct Node {
  std::uint64_t id = 0;
  Shape shape;
  Buffer value;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rows() const { return node_->shape.front(); }
  std::size_t cols() const { return node_->shape.back(); }
  std::size_t numel() const { return node_->value.size(); }
  DType dtype() const { return node_->value.dtype(); }
  bool requires_grad() const { return node_->requires_grad; }
  std::uint64_t id() const { return node_->id; }
  const char* op() const { return node_->op; }

  double item() const;
  double at(std::size_t flat) const { return node_->value.get(flat); }
  double at(std::size_t r, std::size_t c) const { return node_->value.get(r * cols() + c); }
  std::vector<double> to_vector() const;

  template <class T>
  std::span<const T> data() const {
    return node_->value.span<T>();
  }
  const Buffer& buffer() const { return node_->value; }

  /// In-place access to a leaf's storage (initialization, optimizer steps).
  Buffer& mutable_buffer();

  /// Same values, no tape history.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Construction.
Tensor zeros(const Shape& shape, DType dtype = default_dtype());
Tensor full(const Shape& shape, double value, DType dtype = default_dtype());
Tensor from_values(const Shape& shape, std::span<const double> values,
                   DType dtype = default_dtype());
Tensor from_values(const Shape& shape, std::initializer_list<double> values,
                   DType dtype = default_dtype());
Tensor from_buffer(const Shape& shape, Buffer values);
/// Trainable leaf.
Tensor parameter(const Shape& shape, Buffer values);
Tensor parameter(const Shape& shape, std::span<const double> values,
                 DType dtype = default_dtype());

// Arithmetic. Every op records itself on the tape when an input requires
// gradients and recording is enabled on this thread.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
/// a[n,m] + row[m] broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& row);
/// a[n,m] * col[n,1] broadcast over columns.
Tensor mul_col(const Tensor& a, const Tensor& col);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Softmax along the last axis.
Tensor softmax(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sigmoid(const Tensor& a);
/// tanh-approximated GELU.
Tensor gelu(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
/// Row lookup: out[i] = table[ids[i]].
Tensor gather_rows(const Tensor& table, std::span<const std::uint32_t> ids);
/// out[i,0] = a[i, cols[i]].
Tensor pick(const Tensor& a, std::span<const std::uint32_t> cols);
/// out[i, index[j]] += a[i, j]; output has `width` columns.
Tensor scatter_cols(const Tensor& a, std::span<const std::uint32_t> index, std::size_t width);
/// Inverted dropout on every element with the given drop rate.
Tensor dropout(const Tensor& a, double rate, Rng& rng);

// Fused transformer kernels.
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6);
/// Rotates consecutive coordinate pairs of each head by pos * base^(-2j/d_head).
Tensor rotary(const Tensor& x, std::span<const std::size_t> positions, std::size_t heads,
              double base = 10000.0);
/// Per-head attention probabilities softmax(Q_h K_h^T / sqrt(d_head)), stacked
/// head-major into a [heads*Lq, Lk] matrix. With `causal`, query i sees keys <= i.
Tensor attention_scores(const Tensor& q, const Tensor& k, std::size_t heads, bool causal);
/// Weighted sum of value rows per head; heads are concatenated along columns.
Tensor attention_apply(const Tensor& probs, const Tensor& v, std::size_t heads);
/// Average of the per-head probability blocks, [Lq, Lk].
Tensor head_mean(const Tensor& probs, std::size_t heads);

class Gradients {
 public:
  /// Gradient for `param`; zeros when the parameter was unreachable from the loss.
  Tensor get(const Tensor& param) const;
  bool contains(const Tensor& param) const { return grads_.count(param.id()) != 0; }
  std::size_t size() const { return grads_.size(); }
  /// Elementwise sum with another gradient map (mini-batch accumulation).
  void accumulate(const Gradients& other);
  void scale(double s);

  std::unordered_map<std::uint64_t, Buffer>& raw() { return grads_; }
  const std::unordered_map<std::uint64_t, Buffer>& raw() const { return grads_; }

 private:
  std::unordered_map<std::uint64_t, Buffer> grads_;
};

/// Reverse-mode sweep from a scalar loss; returns gradients of every trainable
/// leaf reachable from it.
Gradients grad(const Tensor& loss);

}  // namespace retroseq
