#pragma once

// Dense float64 tensors with tape-free reverse-mode differentiation. Every
// result of an op on a grad-requiring operand keeps shared pointers to its
// inputs plus a closure that pushes its gradient back into them; backward()
// walks that DAG in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mixunlearn {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad; // empty until first written
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward; // null on leaves

  bool is_leaf() const { return !backward; }
  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

} // namespace detail

class Tensor {
public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  /// Writable view of a leaf's storage (parameter updates, test fixtures).
  std::span<double> mutable_values();
  double item() const;
  double operator[](std::size_t i) const { return values()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  /// Multiplies the stored gradient by s (no-op without a gradient).
  void scale_grad(double s);

  /// Reverse pass from a scalar root. Leaf gradients accumulate across calls
  /// until zero_grad(); interior gradients are recomputed every call.
  void backward() const;

  /// Same values, no graph linkage, no grad.
  Tensor detach() const;
  /// Deep copy of the values as a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_mode_enabled();

enum class Padding { valid, same };

// Elementwise; operands must have identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

/// x of shape [N, ...] plus b whose shape equals x's trailing dims.
Tensor add_bias(const Tensor& x, const Tensor& b);
/// Scales row n of x ([N, ...]) by the constant w[n].
Tensor scale_rows(const Tensor& x, std::span<const double> w);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Rows [begin, end) along axis 0.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor l2_norm(const Tensor& a);

// Row-wise ops treat a tensor as [N, L] with L the last dimension.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
Tensor sum_rows(const Tensor& a);
Tensor norm_rows(const Tensor& a);
/// Numerically stable log(sum(exp(row))), max-subtracted.
Tensor logsumexp_rows(const Tensor& a);

/// NCHW convolution, stride 1. `same` requires odd kernel sizes.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Padding padding);
/// Non-overlapping max pooling with a square window.
Tensor max_pool2d(const Tensor& x, std::size_t window);

inline constexpr double kNormEpsilon = 1e-12;

/// a.b / ((|a| + eps)(|b| + eps)) for two equal-length vectors.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
/// Row-wise cosine similarity of two [N, L] tensors, result [N].
Tensor cosine_rows(const Tensor& a, const Tensor& b);

/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Per-sample cross-entropy, no graph.
std::vector<double> cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels);
/// mean((a - b)^2) over all elements.
Tensor mse(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

} // namespace mixunlearn
