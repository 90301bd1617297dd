#include "mixunlearn/tensor.hpp"

#include "mixunlearn/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace mixunlearn {

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local int no_grad_depth = 0;

Tensor make_op(Shape shape, std::vector<double> value,
               std::vector<std::shared_ptr<Node>> inputs,
               std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  const bool track = grad_mode_enabled() &&
                     std::any_of(inputs.begin(), inputs.end(),
                                 [](const auto& n) { return n->requires_grad; });
  if (track) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

const Node& req(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor operand");
  return *t.node();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (req(a, op).shape != req(b, op).shape) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

// Splits a shape into (rows, row length) over the last axis.
std::pair<std::size_t, std::size_t> rows_of(const Shape& s, const char* op) {
  if (s.empty()) throw DimensionError(std::string(op) + ": needs rank >= 1, got scalar");
  const std::size_t len = s.back();
  if (len == 0) throw DimensionError(std::string(op) + ": empty last dimension");
  return {shape_numel(s) / len, len};
}

Shape leading_shape(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& a, const char* name, Fwd fwd, Bwd bwd) {
  const Node& na = req(a, name);
  std::vector<double> out(na.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(na.value[i]);
  return make_op(na.shape, std::move(out), {a.node()}, [bwd](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bwd(in.value[i], self.value[i]);
  });
}

} // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const { return req(*this, "shape").shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("dim: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return req(*this, "numel").value.size(); }

std::span<const double> Tensor::values() const { return req(*this, "values").value; }

std::span<double> Tensor::mutable_values() {
  if (!req(*this, "mutable_values").is_leaf()) throw ContractError("mutable_values: tensor is not a leaf");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

bool Tensor::requires_grad() const { return req(*this, "requires_grad").requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!req(*this, "set_requires_grad").is_leaf()) throw ContractError("set_requires_grad: tensor is not a leaf");
  node_->requires_grad = on;
}

bool Tensor::is_leaf() const { return req(*this, "is_leaf").is_leaf(); }

bool Tensor::has_grad() const { return defined() && node_->grad.size() == node_->value.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("grad: no gradient populated");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (defined()) node_->grad.clear();
}

void Tensor::scale_grad(double s) {
  if (!defined()) return;
  for (double& g : node_->grad) g *= s;
}

void Tensor::backward() const {
  const Node& root = req(*this, "backward");
  if (root.value.size() != 1) {
    throw ContractError("backward: root must be scalar, got shape " + shape_str(root.shape));
  }
  if (!root.requires_grad) return;

  // Iterative post-order DFS: inputs land before the nodes that consume them.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order)
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf()) (*it)->backward(**it);
}

Tensor Tensor::detach() const {
  const Node& n = req(*this, "detach");
  return Tensor(n.shape, n.value, false);
}

Tensor Tensor::clone(bool requires_grad) const {
  const Node& n = req(*this, "clone");
  return Tensor(n.shape, n.value, requires_grad);
}

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }
bool grad_mode_enabled() { return no_grad_depth == 0; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.value[i];
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.value[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  return make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / y.value[i];
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] -= self.grad[i] * x.value[i] / (y.value[i] * y.value[i]);
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor square(const Tensor& a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
  return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  const Node& nx = req(x, "add_bias");
  const Node& nb = req(b, "add_bias");
  if (nx.shape.size() != nb.shape.size() + 1 ||
      !std::equal(nb.shape.begin(), nb.shape.end(), nx.shape.begin() + 1)) {
    throw DimensionError("add_bias: bias shape " + shape_str(nb.shape) +
                         " does not match trailing dims of " + shape_str(nx.shape));
  }
  const std::size_t row = nb.value.size();
  std::vector<double> out(nx.value);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += nb.value[i % row];
  return make_op(nx.shape, std::move(out), {x.node(), b.node()}, [row](Node& self) {
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % row] += self.grad[i];
    }
  });
}

Tensor scale_rows(const Tensor& x, std::span<const double> w) {
  const Node& nx = req(x, "scale_rows");
  if (nx.shape.empty() || nx.shape[0] != w.size()) {
    throw DimensionError("scale_rows: " + std::to_string(w.size()) + " weights for shape " +
                         shape_str(nx.shape));
  }
  const std::size_t row = w.empty() ? 0 : nx.value.size() / w.size();
  std::vector<double> weights(w.begin(), w.end());
  std::vector<double> out(nx.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = nx.value[i] * weights[i / row];
  return make_op(nx.shape, std::move(out), {x.node()}, [row, weights = std::move(weights)](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * weights[i / row];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and reshaping

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Node& na = req(a, "matmul");
  const Node& nb = req(b, "matmul");
  if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(na.shape) + " and " +
                         shape_str(nb.shape));
  }
  const auto m = static_cast<Eigen::Index>(na.shape[0]);
  const auto k = static_cast<Eigen::Index>(na.shape[1]);
  const auto n = static_cast<Eigen::Index>(nb.shape[1]);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), m, n).noalias() = ConstMap(na.value.data(), m, k) * ConstMap(nb.value.data(), k, n);
  return make_op({na.shape[0], nb.shape[1]}, std::move(out), {a.node(), b.node()},
                 [m, k, n](Node& self) {
                   Node& x = *self.inputs[0];
                   Node& y = *self.inputs[1];
                   ConstMap g(self.grad.data(), m, n);
                   if (x.requires_grad)
                     MutMap(x.grad_buffer().data(), m, k).noalias() += g * ConstMap(y.value.data(), k, n).transpose();
                   if (y.requires_grad)
                     MutMap(y.grad_buffer().data(), k, n).noalias() += ConstMap(x.value.data(), m, k).transpose() * g;
                 });
}

Tensor transpose(const Tensor& a) {
  const Node& na = req(a, "transpose");
  if (na.shape.size() != 2) throw DimensionError("transpose: needs rank 2, got " + shape_str(na.shape));
  const std::size_t r = na.shape[0], c = na.shape[1];
  std::vector<double> out(na.value.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = na.value[i * c + j];
  return make_op({c, r}, std::move(out), {a.node()}, [r, c](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  const Node& na = req(a, "reshape");
  if (shape_numel(shape) != na.value.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(na.shape) + " as " + shape_str(shape));
  }
  return make_op(std::move(shape), na.value, {a.node()}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw InputError("concat: no operands");
  const Shape& first = req(parts[0], "concat").shape;
  if (axis >= first.size()) throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = req(p, "concat").shape;
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d)
      if (d != axis && s[d] != first[d]) ok = false;
    if (!ok) throw DimensionError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = shape_numel(Shape(first.begin(), first.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t trailing = shape_numel(Shape(first.begin() + static_cast<std::ptrdiff_t>(axis) + 1, first.end()));
  std::vector<std::size_t> widths;
  std::vector<std::shared_ptr<Node>> inputs;
  for (const auto& p : parts) {
    widths.push_back(p.shape()[axis] * trailing);
    inputs.push_back(p.node());
  }
  const std::size_t total = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
  std::vector<double> out(outer * total);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = o * total;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto v = parts[k].values();
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k], out.begin() + static_cast<std::ptrdiff_t>(off));
      off += widths[k];
    }
  }
  return make_op(std::move(out_shape), std::move(out), std::move(inputs),
                 [outer, total, widths](Node& self) {
                   std::size_t col = 0;
                   for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                     Node& in = *self.inputs[k];
                     if (in.requires_grad) {
                       auto& g = in.grad_buffer();
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t i = 0; i < widths[k]; ++i) g[o * widths[k] + i] += self.grad[o * total + col + i];
                     }
                     col += widths[k];
                   }
                 });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  const Node& na = req(a, "slice_rows");
  if (na.shape.empty() || begin > end || end > na.shape[0]) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for " + shape_str(na.shape));
  }
  const std::size_t row = na.shape[0] ? na.value.size() / na.shape[0] : 0;
  Shape s = na.shape;
  s[0] = end - begin;
  std::vector<double> out(na.value.begin() + static_cast<std::ptrdiff_t>(begin * row),
                          na.value.begin() + static_cast<std::ptrdiff_t>(end * row));
  return make_op(std::move(s), std::move(out), {a.node()}, [off = begin * row](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  const Node& na = req(a, "sum");
  double s = 0.0;
  for (double v : na.value) s += v;
  return make_op({}, {s}, {a.node()}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (double& gi : g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const std::size_t n = a.numel();
  if (n == 0) throw InputError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Tensor l2_norm(const Tensor& a) {
  const Node& na = req(a, "l2_norm");
  double s = 0.0;
  for (double v : na.value) s += v * v;
  const double norm = std::sqrt(s);
  return make_op({}, {norm}, {a.node()}, [](Node& self) {
    Node& in = *self.inputs[0];
    if (self.value[0] == 0.0) return;
    auto& g = in.grad_buffer();
    const double k = self.grad[0] / self.value[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * in.value[i];
  });
}

Tensor softmax(const Tensor& a) {
  const Node& na = req(a, "softmax");
  const auto [rows, len] = rows_of(na.shape, "softmax");
  std::vector<double> out(na.value.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = &na.value[r * len];
    double* y = &out[r * len];
    const double mx = *std::max_element(x, x + len);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) z += (y[i] = std::exp(x[i] - mx));
    for (std::size_t i = 0; i < len; ++i) y[i] /= z;
  }
  return make_op(na.shape, std::move(out), {a.node()}, [rows, len](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = &self.value[r * len];
      const double* gy = &self.grad[r * len];
      double dot = 0.0;
      for (std::size_t i = 0; i < len; ++i) dot += gy[i] * y[i];
      for (std::size_t i = 0; i < len; ++i) g[r * len + i] += y[i] * (gy[i] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& a) {
  const Node& na = req(a, "log_softmax");
  const auto [rows, len] = rows_of(na.shape, "log_softmax");
  std::vector<double> out(na.value.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = &na.value[r * len];
    const double mx = *std::max_element(x, x + len);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) z += std::exp(x[i] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t i = 0; i < len; ++i) out[r * len + i] = x[i] - lse;
  }
  return make_op(na.shape, std::move(out), {a.node()}, [rows, len](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t i = 0; i < len; ++i) gs += self.grad[r * len + i];
      for (std::size_t i = 0; i < len; ++i)
        g[r * len + i] += self.grad[r * len + i] - std::exp(self.value[r * len + i]) * gs;
    }
  });
}

Tensor sum_rows(const Tensor& a) {
  const Node& na = req(a, "sum_rows");
  const auto [rows, len] = rows_of(na.shape, "sum_rows");
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < len; ++i) out[r] += na.value[r * len + i];
  return make_op(leading_shape(na.shape), std::move(out), {a.node()}, [len](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i / len];
  });
}

Tensor norm_rows(const Tensor& a) {
  const Node& na = req(a, "norm_rows");
  const auto [rows, len] = rows_of(na.shape, "norm_rows");
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < len; ++i) s += na.value[r * len + i] * na.value[r * len + i];
    out[r] = std::sqrt(s);
  }
  return make_op(leading_shape(na.shape), std::move(out), {a.node()}, [len](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double n = self.value[i / len];
      if (n > 0.0) g[i] += self.grad[i / len] * in.value[i] / n;
    }
  });
}

Tensor logsumexp_rows(const Tensor& a) {
  const Node& na = req(a, "logsumexp_rows");
  const auto [rows, len] = rows_of(na.shape, "logsumexp_rows");
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = &na.value[r * len];
    const double mx = *std::max_element(x, x + len);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) z += std::exp(x[i] - mx);
    out[r] = mx + std::log(z);
  }
  return make_op(leading_shape(na.shape), std::move(out), {a.node()}, [len](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i / len] * std::exp(in.value[i] - self.value[i / len]);
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Padding padding) {
  const Node& nx = req(x, "conv2d");
  const Node& nw = req(weight, "conv2d");
  const Node& nb = req(bias, "conv2d");
  if (nx.shape.size() != 4 || nw.shape.size() != 4 || nx.shape[1] != nw.shape[1] ||
      nb.shape != Shape{nw.shape[0]}) {
    throw DimensionError("conv2d: input " + shape_str(nx.shape) + ", weight " + shape_str(nw.shape) +
                         ", bias " + shape_str(nb.shape) + " are incompatible");
  }
  const std::size_t N = nx.shape[0], C = nx.shape[1], H = nx.shape[2], W = nx.shape[3];
  const std::size_t K = nw.shape[0], KH = nw.shape[2], KW = nw.shape[3];
  std::size_t pad_h = 0, pad_w = 0;
  if (padding == Padding::same) {
    if (KH % 2 == 0 || KW % 2 == 0) throw DimensionError("conv2d: same padding needs odd kernel, got " + shape_str(nw.shape));
    pad_h = (KH - 1) / 2;
    pad_w = (KW - 1) / 2;
  }
  if (H + 2 * pad_h < KH || W + 2 * pad_w < KW) {
    throw DimensionError("conv2d: kernel " + shape_str(nw.shape) + " larger than input " + shape_str(nx.shape));
  }
  const std::size_t OH = H + 2 * pad_h - KH + 1, OW = W + 2 * pad_w - KW + 1;
  const std::size_t patch = C * KH * KW, plane = OH * OW;

  const bool track = grad_mode_enabled() && (nx.requires_grad || nw.requires_grad || nb.requires_grad);
  std::vector<double> cols(track ? N * patch * plane : patch * plane);
  std::vector<double> out(N * K * plane);
  ConstMap wmat(nw.value.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(patch));

  for (std::size_t n = 0; n < N; ++n) {
    double* col = track ? &cols[n * patch * plane] : cols.data();
    const double* img = &nx.value[n * C * H * W];
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < KH; ++i)
        for (std::size_t j = 0; j < KW; ++j) {
          double* row = col + ((c * KH + i) * KW + j) * plane;
          for (std::size_t oy = 0; oy < OH; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + i) - static_cast<std::ptrdiff_t>(pad_h);
            for (std::size_t ox = 0; ox < OW; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + j) - static_cast<std::ptrdiff_t>(pad_w);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(H) && ix < static_cast<std::ptrdiff_t>(W);
              row[oy * OW + ox] = inside ? img[(c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)] : 0.0;
            }
          }
        }
    MutMap o(&out[n * K * plane], static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(plane));
    o.noalias() = wmat * ConstMap(col, static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(plane));
    for (std::size_t k = 0; k < K; ++k) o.row(static_cast<Eigen::Index>(k)).array() += nb.value[k];
  }
  if (!track) cols.clear();

  return make_op(
      {N, K, OH, OW}, std::move(out), {x.node(), weight.node(), bias.node()},
      [=, cols = std::move(cols)](Node& self) {
        Node& in = *self.inputs[0];
        Node& w = *self.inputs[1];
        Node& b = *self.inputs[2];
        const auto eK = static_cast<Eigen::Index>(K), eP = static_cast<Eigen::Index>(patch),
                   eL = static_cast<Eigen::Index>(plane);
        std::vector<double> dcol(in.requires_grad ? patch * plane : 0);
        for (std::size_t n = 0; n < N; ++n) {
          ConstMap g(&self.grad[n * K * plane], eK, eL);
          ConstMap col(&cols[n * patch * plane], eP, eL);
          if (w.requires_grad) MutMap(w.grad_buffer().data(), eK, eP).noalias() += g * col.transpose();
          if (b.requires_grad) {
            auto& gb = b.grad_buffer();
            for (std::size_t k = 0; k < K; ++k) gb[k] += g.row(static_cast<Eigen::Index>(k)).sum();
          }
          if (in.requires_grad) {
            MutMap(dcol.data(), eP, eL).noalias() = ConstMap(w.value.data(), eK, eP).transpose() * g;
            auto& gx = in.grad_buffer();
            double* gimg = &gx[n * C * H * W];
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t i = 0; i < KH; ++i)
                for (std::size_t j = 0; j < KW; ++j) {
                  const double* row = &dcol[((c * KH + i) * KW + j) * plane];
                  for (std::size_t oy = 0; oy < OH; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + i) - static_cast<std::ptrdiff_t>(pad_h);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t ox = 0; ox < OW; ++ox) {
                      const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + j) - static_cast<std::ptrdiff_t>(pad_w);
                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                      gimg[(c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)] += row[oy * OW + ox];
                    }
                  }
                }
          }
        }
      });
}

Tensor max_pool2d(const Tensor& x, std::size_t window) {
  const Node& nx = req(x, "max_pool2d");
  if (nx.shape.size() != 4 || window == 0 || nx.shape[2] < window || nx.shape[3] < window) {
    throw DimensionError("max_pool2d: window " + std::to_string(window) + " invalid for " + shape_str(nx.shape));
  }
  const std::size_t N = nx.shape[0], C = nx.shape[1], H = nx.shape[2], W = nx.shape[3];
  const std::size_t OH = H / window, OW = W / window;
  std::vector<double> out(N * C * OH * OW);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        std::size_t best = nc * H * W + oy * window * W + ox * window;
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = nc * H * W + (oy * window + i) * W + ox * window + j;
            if (nx.value[idx] > nx.value[best]) best = idx;
          }
        const std::size_t o = (nc * OH + oy) * OW + ox;
        out[o] = nx.value[best];
        arg[o] = best;
      }
  return make_op({N, C, OH, OW}, std::move(out), {x.node()}, [arg = std::move(arg)](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
  });
}

// ---------------------------------------------------------------------------
// Composite kernels

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (req(a, "cosine_similarity").shape.size() != 1) {
    throw DimensionError("cosine_similarity: expects vectors, got " + shape_str(a.shape()));
  }
  require_same_shape(a, b, "cosine_similarity");
  const Tensor dot = sum(mul(a, b));
  const Tensor denom = mul(add_scalar(l2_norm(a), kNormEpsilon), add_scalar(l2_norm(b), kNormEpsilon));
  return div(dot, denom);
}

Tensor cosine_rows(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "cosine_rows");
  const Tensor dot = sum_rows(mul(a, b));
  const Tensor denom = mul(add_scalar(norm_rows(a), kNormEpsilon), add_scalar(norm_rows(b), kNormEpsilon));
  return div(dot, denom);
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const Node& nl = req(logits, "cross_entropy");
  if (nl.shape.size() != 2 || nl.shape[0] != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(nl.shape) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t rows = nl.shape[0], len = nl.shape[1];
  if (rows == 0) throw InputError("cross_entropy: empty batch");
  std::vector<double> probs(nl.value.size());
  std::vector<int> lab(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (lab[r] < 0 || static_cast<std::size_t>(lab[r]) >= len) {
      throw InputError("cross_entropy: label " + std::to_string(lab[r]) + " outside [0, " + std::to_string(len) + ")");
    }
    const double* x = &nl.value[r * len];
    const double mx = *std::max_element(x, x + len);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) z += (probs[r * len + i] = std::exp(x[i] - mx));
    for (std::size_t i = 0; i < len; ++i) probs[r * len + i] /= z;
    total += mx + std::log(z) - x[lab[r]];
  }
  const double inv = 1.0 / static_cast<double>(rows);
  return make_op({}, {total * inv}, {logits.node()},
                 [probs = std::move(probs), lab = std::move(lab), len, inv](Node& self) {
                   auto& g = self.inputs[0]->grad_buffer();
                   const double k = self.grad[0] * inv;
                   for (std::size_t i = 0; i < g.size(); ++i) {
                     const double target = (static_cast<int>(i % len) == lab[i / len]) ? 1.0 : 0.0;
                     g[i] += k * (probs[i] - target);
                   }
                 });
}

std::vector<double> cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels) {
  const Node& nl = req(logits, "cross_entropy_per_sample");
  if (nl.shape.size() != 2 || nl.shape[0] != labels.size()) {
    throw DimensionError("cross_entropy_per_sample: logits " + shape_str(nl.shape) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t rows = nl.shape[0], len = nl.shape[1];
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= len) {
      throw InputError("cross_entropy_per_sample: label " + std::to_string(labels[r]) + " out of range");
    }
    const double* x = &nl.value[r * len];
    const double mx = *std::max_element(x, x + len);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) z += std::exp(x[i] - mx);
    out[r] = mx + std::log(z) - x[labels[r]];
  }
  return out;
}

Tensor mse(const Tensor& a, const Tensor& b) { return mean(square(sub(a, b))); }

} // namespace mixunlearn
