#include "metricforge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include <Eigen/Core>

#include "metricforge/errors.hpp"

namespace metricforge {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
  bool input_needs_grad(std::size_t i) const { return inputs[i]->requires_grad; }
  Node& in(std::size_t i) { return *inputs[i]; }
};

struct Access {
  static Node& node(const Tensor& t) {
    if (!t.node_) throw ContractError("operation on an undefined tensor");
    return *t.node_;
  }
  static const std::shared_ptr<Node>& ptr(const Tensor& t) {
    node(t);
    return t.node_;
  }
  static Tensor wrap(std::shared_ptr<Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }
};

}  // namespace detail

using detail::Access;
using detail::Node;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

// Builds the result node; the backward closure is attached only when some
// input participates in a gradient graph.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  bool any = false;
  for (const auto& t : inputs) any = any || Access::node(t).requires_grad;
  if (any) {
    node->requires_grad = true;
    node->leaf = false;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(Access::ptr(t));
    node->backward = std::move(backward);
  }
  return Access::wrap(std::move(node));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_to_string(a.shape()));
  }
}

template <typename F>
Tensor unary_map(const Tensor& a, F&& forward, std::function<void(Node&)> backward) {
  const auto in = a.values();
  std::vector<double> out(in.size());
  std::transform(in.begin(), in.end(), out.begin(), std::forward<F>(forward));
  return make_result(a.shape(), std::move(out), {a}, std::move(backward));
}

}  // namespace

// -- Tensor -----------------------------------------------------------------

Tensor::Tensor(Shape shape, bool requires_grad) {
  node_ = std::make_shared<Node>();
  node_->value.assign(shape_numel(shape), 0.0);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                     shape_to_string(shape));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

const Shape& Tensor::shape() const { return Access::node(*this).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("dim: axis out of range for " + shape_to_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return Access::node(*this).value.size(); }

std::span<const double> Tensor::values() const { return Access::node(*this).value; }

std::span<double> Tensor::mutable_values() {
  auto& n = Access::node(*this);
  if (!n.leaf) throw ContractError("mutable_values: only leaf tensors are writable");
  return n.value;
}

double Tensor::item() const {
  const auto& n = Access::node(*this);
  if (n.value.size() != 1) throw ShapeError("item: tensor is not a scalar " + shape_to_string(n.shape));
  return n.value[0];
}

double Tensor::at(std::size_t flat_index) const {
  const auto& v = Access::node(*this).value;
  if (flat_index >= v.size()) throw ShapeError("at: index out of range");
  return v[flat_index];
}

bool Tensor::requires_grad() const { return Access::node(*this).requires_grad; }
bool Tensor::is_leaf() const { return Access::node(*this).leaf; }
bool Tensor::has_grad() const { return !Access::node(*this).grad.empty(); }

std::span<const double> Tensor::grad() const {
  const auto& n = Access::node(*this);
  if (n.grad.empty()) throw ContractError("grad: no gradient has been populated");
  return n.grad;
}

void Tensor::zero_grad() { Access::node(*this).grad.clear(); }

Tensor Tensor::detach(bool requires_grad) const {
  const auto& n = Access::node(*this);
  return Tensor(n.shape, n.value, requires_grad);
}

void Tensor::backward() {
  auto& root = Access::node(*this);
  if (root.value.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got " + shape_to_string(root.shape));
  }
  if (root.consumed) throw ContractError("backward: graph already consumed");
  if (!root.requires_grad) throw ContractError("backward: loss is not connected to any gradient leaf");

  // Iterative post-order DFS yields inputs before consumers.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{&root, 0}};
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) {
        if (child->consumed) throw ContractError("backward: graph already consumed");
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->leaf) {
      n->grad_buffer();
      continue;
    }
    n->grad_buffer();
    n->backward(*n);
  }

  for (Node* n : order) {
    if (n->leaf) continue;
    n->consumed = true;
    n->backward = nullptr;
    n->inputs.clear();
    if (n != &root) std::vector<double>().swap(n->grad);
  }
}

// -- elementwise ----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto x = a.values(), y = b.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!self.input_needs_grad(k)) continue;
      auto& g = self.in(k).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto x = a.values(), y = b.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (self.input_needs_grad(0)) {
      auto& g = self.in(0).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.input_needs_grad(1)) {
      auto& g = self.in(1).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.values(), y = b.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& x = self.in(0).value;
    const auto& y = self.in(1).value;
    if (self.input_needs_grad(0)) {
      auto& g = self.in(0).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (self.input_needs_grad(1)) {
      auto& g = self.in(1).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary_map(
      a, [factor](double v) { return v * factor; },
      [factor](Node& self) {
        auto& g = self.in(0).grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
      });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary_map(
      a, [offset](double v) { return v + offset; },
      [](Node& self) {
        auto& g = self.in(0).grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      });
}

Tensor square(const Tensor& a) {
  return unary_map(
      a, [](double v) { return v * v; },
      [](Node& self) {
        const auto& x = self.in(0).value;
        auto& g = self.in(0).grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * x[i] * self.grad[i];
      });
}

// -- reductions -----------------------------------------------------------------

Tensor sum(const Tensor& a) {
  const auto x = a.values();
  double total = 0.0;
  for (double v : x) total += v;
  return make_result(Shape{}, {total}, {a}, [](Node& self) {
    auto& g = self.in(0).grad_buffer();
    const double up = self.grad[0];
    for (double& v : g) v += up;
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor row_sum(const Tensor& a) {
  require_rank(a, 2, "row_sum");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto x = a.values();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x[i * n + j];
    out[i] = s;
  }
  return make_result(Shape{m}, std::move(out), {a}, [m, n](Node& self) {
    auto& g = self.in(0).grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i];
  });
}

// -- activations ----------------------------------------------------------------

// Subgradient at exactly zero is 0 (inactive side).
Tensor relu(const Tensor& x) {
  return unary_map(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](Node& self) {
        const auto& in = self.in(0).value;
        auto& g = self.in(0).grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (in[i] > 0.0) g[i] += self.grad[i];
      });
}

Tensor sigmoid(const Tensor& x) {
  auto sig = [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  };
  return unary_map(x, sig, [](Node& self) {
    const auto& y = self.value;
    auto& g = self.in(0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i] * (1.0 - y[i]);
  });
}

Tensor prelu(const Tensor& x, const Tensor& slope) {
  if (x.rank() == 0) throw ShapeError("prelu: input needs a channel axis");
  const std::size_t channels = x.dim(0);
  if (slope.rank() != 1 || slope.dim(0) != channels) {
    throw ShapeError("prelu: slope " + shape_to_string(slope.shape()) + " does not match " +
                     std::to_string(channels) + " channels");
  }
  const std::size_t plane = x.numel() / channels;
  const auto in = x.values();
  const auto a = slope.values();
  std::vector<double> out(in.size());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      const double v = in[c * plane + i];
      out[c * plane + i] = v > 0.0 ? v : a[c] * v;
    }
  return make_result(x.shape(), std::move(out), {x, slope}, [channels, plane](Node& self) {
    const auto& in = self.in(0).value;
    const auto& a = self.in(1).value;
    if (self.input_needs_grad(0)) {
      auto& g = self.in(0).grad_buffer();
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t k = c * plane + i;
          g[k] += in[k] > 0.0 ? self.grad[k] : a[c] * self.grad[k];
        }
    }
    if (self.input_needs_grad(1)) {
      auto& g = self.in(1).grad_buffer();
      for (std::size_t c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t k = c * plane + i;
          if (in[k] <= 0.0) acc += in[k] * self.grad[k];
        }
        g[c] += acc;
      }
    }
  });
}

Tensor activation(const Tensor& x, ActivationKind kind, const Tensor& prelu_slope) {
  switch (kind) {
    case ActivationKind::relu:
      return relu(x);
    case ActivationKind::sigmoid:
      return sigmoid(x);
    case ActivationKind::prelu:
      if (!prelu_slope.defined()) throw ContractError("activation: prelu needs a slope tensor");
      return prelu(x, prelu_slope);
  }
  throw ContractError("activation: unknown kind");
}

// -- linear algebra ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_to_string(a.shape()) + " . " +
                     shape_to_string(b.shape()));
  }
  const auto x = a.values(), y = b.values();
  std::vector<double> out(m * n, 0.0);
  // Plain i-k-j loop: every output element sums its k terms in ascending order.
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = x[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * y[p * n + j];
    }
  return make_result(Shape{m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const auto& x = self.in(0).value;
    const auto& y = self.in(1).value;
    const auto& up = self.grad;
    if (self.input_needs_grad(0)) {
      auto& g = self.in(0).grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += up[i * n + j] * y[p * n + j];
          g[i * k + p] += acc;
        }
    }
    if (self.input_needs_grad(1)) {
      auto& g = self.in(1).grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = x[i * k + p];
          for (std::size_t j = 0; j < n; ++j) g[p * n + j] += av * up[i * n + j];
        }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto x = a.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return make_result(Shape{n, m}, std::move(out), {a}, [m, n](Node& self) {
    auto& g = self.in(0).grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                     shape_to_string(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
    auto& g = self.in(0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no rows");
  const std::size_t n = rows.front().numel();
  std::vector<double> out;
  out.reserve(rows.size() * n);
  for (const auto& r : rows) {
    if (r.rank() > 1 && !(r.rank() == 2 && r.dim(0) == 1)) {
      throw ShapeError("stack_rows: row must be a vector, got " + shape_to_string(r.shape()));
    }
    if (r.numel() != n) throw ShapeError("stack_rows: rows differ in length");
    out.insert(out.end(), r.values().begin(), r.values().end());
  }
  return make_result(Shape{rows.size(), n}, std::move(out), std::vector<Tensor>(rows.begin(), rows.end()),
                     [n](Node& self) {
                       for (std::size_t r = 0; r < self.inputs.size(); ++r) {
                         if (!self.input_needs_grad(r)) continue;
                         auto& g = self.in(r).grad_buffer();
                         for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
                       }
                     });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank(x, 2, "gather_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  for (auto r : rows)
    if (r >= m) throw ShapeError("gather_rows: row index " + std::to_string(r) + " out of range");
  const auto in = x.values();
  std::vector<double> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(rows[i] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(i * n));
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result(Shape{rows.size(), n}, std::move(out), {x}, [idx = std::move(idx), n](Node& self) {
    auto& g = self.in(0).grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += self.grad[i * n + j];
  });
}

Tensor l2_normalize_rows(const Tensor& x) {
  require_rank(x, 2, "l2_normalize_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const auto in = x.values();
  std::vector<double> out(in.size());
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += in[i * n + j] * in[i * n + j];
    norms[i] = std::max(std::sqrt(ss), 1e-12);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = in[i * n + j] / norms[i];
  }
  return make_result(x.shape(), std::move(out), {x}, [m, n, norms = std::move(norms)](Node& self) {
    const auto& y = self.value;
    auto& g = self.in(0).grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        g[i * n + j] += (self.grad[i * n + j] - y[i * n + j] * dot) / norms[i];
    }
  });
}

// -- convolution ----------------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t c_in, h, w, c_out, kh, kw, stride, pad, h_out, w_out;
  std::size_t patch() const { return c_in * kh * kw; }
  std::size_t positions() const { return h_out * w_out; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t p_count = g.positions();
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * p_count;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.w_out;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill_n(dst, g.w_out, 0.0);
            continue;
          }
          const double* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* dx) {
  const std::size_t p_count = g.positions();
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * p_count;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = dx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.w_out;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
}

std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, const char* axis) {
  if (k > in + 2 * pad) {
    throw ShapeError(std::string("conv2d: kernel larger than padded ") + axis + " extent");
  }
  const std::size_t span = in + 2 * pad - k;
  if (span % stride != 0) {
    throw ShapeError(std::string("conv2d: non-integral output ") + axis + " (" + std::to_string(in) +
                     " + 2*" + std::to_string(pad) + " - " + std::to_string(k) + ") / " +
                     std::to_string(stride));
  }
  return span / stride + 1;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  require_rank(input, 3, "conv2d");
  require_rank(kernel, 4, "conv2d");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (kernel.dim(1) != input.dim(0)) {
    throw ShapeError("conv2d: kernel " + shape_to_string(kernel.shape()) + " expects " +
                     std::to_string(kernel.dim(1)) + " input channels, input is " +
                     shape_to_string(input.shape()));
  }
  ConvGeometry g{};
  g.c_in = input.dim(0);
  g.h = input.dim(1);
  g.w = input.dim(2);
  g.c_out = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  g.pad = padding;
  g.h_out = conv_extent(g.h, g.kh, stride, padding, "height");
  g.w_out = conv_extent(g.w, g.kw, stride, padding, "width");

  auto cols = std::make_shared<std::vector<double>>();
  const double* col_ptr = input.values().data();
  if (!g.pointwise()) {
    cols->resize(g.patch() * g.positions());
    im2col(input.values().data(), g, cols->data());
    col_ptr = cols->data();
  }

  std::vector<double> out(g.c_out * g.positions());
  MatMap(out.data(), static_cast<Eigen::Index>(g.c_out), static_cast<Eigen::Index>(g.positions())).noalias() =
      ConstMatMap(kernel.values().data(), static_cast<Eigen::Index>(g.c_out), static_cast<Eigen::Index>(g.patch())) *
      ConstMatMap(col_ptr, static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.positions()));

  return make_result(Shape{g.c_out, g.h_out, g.w_out}, std::move(out), {input, kernel}, [g, cols](Node& self) {
    const auto rows_k = static_cast<Eigen::Index>(g.patch());
    const auto rows_o = static_cast<Eigen::Index>(g.c_out);
    const auto n_pos = static_cast<Eigen::Index>(g.positions());
    ConstMatMap up(self.grad.data(), rows_o, n_pos);
    const double* col_ptr = g.pointwise() ? self.in(0).value.data() : cols->data();
    if (self.input_needs_grad(1)) {
      auto& gk = self.in(1).grad_buffer();
      MatMap(gk.data(), rows_o, rows_k).noalias() += up * ConstMatMap(col_ptr, rows_k, n_pos).transpose();
    }
    if (self.input_needs_grad(0)) {
      ConstMatMap k(self.in(1).value.data(), rows_o, rows_k);
      auto& gx = self.in(0).grad_buffer();
      if (g.pointwise()) {
        MatMap(gx.data(), rows_k, n_pos).noalias() += k.transpose() * up;
      } else {
        std::vector<double> dcols(g.patch() * g.positions());
        MatMap(dcols.data(), rows_k, n_pos).noalias() = k.transpose() * up;
        col2im_add(dcols.data(), g, gx.data());
      }
    }
  });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() == 0) throw ShapeError("add_channel_bias: input needs a channel axis");
  const std::size_t channels = x.dim(0);
  if (bias.rank() != 1 || bias.dim(0) != channels) {
    throw ShapeError("add_channel_bias: bias " + shape_to_string(bias.shape()) + " vs " +
                     std::to_string(channels) + " channels");
  }
  const std::size_t plane = x.numel() / channels;
  const auto in = x.values();
  const auto b = bias.values();
  std::vector<double> out(in.size());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = in[c * plane + i] + b[c];
  return make_result(x.shape(), std::move(out), {x, bias}, [channels, plane](Node& self) {
    if (self.input_needs_grad(0)) {
      auto& g = self.in(0).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.input_needs_grad(1)) {
      auto& g = self.in(1).grad_buffer();
      for (std::size_t c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc += self.grad[c * plane + i];
        g[c] += acc;
      }
    }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 3, "global_avg_pool");
  const std::size_t channels = x.dim(0);
  const std::size_t plane = x.dim(1) * x.dim(2);
  if (plane == 0) throw ShapeError("global_avg_pool: empty spatial map");
  const auto in = x.values();
  std::vector<double> out(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += in[c * plane + i];
    out[c] = s / static_cast<double>(plane);
  }
  return make_result(Shape{channels}, std::move(out), {x}, [channels, plane](Node& self) {
    auto& g = self.in(0).grad_buffer();
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t c = 0; c < channels; ++c) {
      const double up = self.grad[c] * inv;
      for (std::size_t i = 0; i < plane; ++i) g[c * plane + i] += up;
    }
  });
}

// -- softmax family ---------------------------------------------------------------

Tensor nll_softmax(const Tensor& scores, std::span<const std::size_t> targets) {
  require_rank(scores, 2, "nll_softmax");
  const std::size_t m = scores.dim(0), n = scores.dim(1);
  if (targets.size() != m) throw ShapeError("nll_softmax: one target per row required");
  for (auto t : targets)
    if (t >= n) throw ContractError("nll_softmax: target " + std::to_string(t) + " out of range");
  const auto s = scores.values();
  std::vector<double> out(m);
  // Row-wise probabilities kept for the backward pass.
  auto probs = std::make_shared<std::vector<double>>(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = s.data() + i * n;
    const std::size_t t = targets[i];
    double shift = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != t) shift = std::max(shift, row[j] - row[t]);
    double z = std::exp(-shift);
    for (std::size_t j = 0; j < n; ++j)
      if (j != t) z += std::exp(row[j] - row[t] - shift);
    out[i] = shift + std::log(z);
    double* p = probs->data() + i * n;
    for (std::size_t j = 0; j < n; ++j) p[j] = (j == t ? std::exp(-shift) : std::exp(row[j] - row[t] - shift)) / z;
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return make_result(Shape{m}, std::move(out), {scores}, [m, n, probs, tgt = std::move(tgt)](Node& self) {
    auto& g = self.in(0).grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      const double up = self.grad[i];
      const double* p = probs->data() + i * n;
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += up * (p[j] - (j == tgt[i] ? 1.0 : 0.0));
    }
  });
}

}  // namespace metricforge
