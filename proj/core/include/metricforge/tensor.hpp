#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace metricforge {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {
struct Node;
struct Access;
}  // namespace detail

// Dense row-major float64 array with an optional place in a reverse-mode
// gradient graph. Tensors are cheap handles: copies share the same node.
//
// Operations record themselves on the result when any input requires a
// gradient. backward() on a scalar replays the recorded graph once in reverse
// topological order and then releases it; calling it again on the same graph
// is an error. Leaf gradients accumulate across graphs until zero_grad().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);
  // Brace lists are always values; without this `{x}` would bind to requires_grad.
  Tensor(Shape shape, std::initializer_list<double> values, bool requires_grad = false)
      : Tensor(std::move(shape), std::vector<double>(values), requires_grad) {}

  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  // Writable access is only granted on leaves; interior values feed recorded
  // backward closures and must not change underneath them.
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t flat_index) const;

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  void backward();

  // New leaf holding a copy of the values, outside any graph.
  Tensor detach(bool requires_grad = false) const;

 private:
  friend struct detail::Access;
  std::shared_ptr<detail::Node> node_;
};

// -- elementwise and reductions ---------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor square(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// [m x n] -> [m]
Tensor row_sum(const Tensor& a);

// -- activations ------------------------------------------------------------

enum class ActivationKind { relu, prelu, sigmoid };

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// x has the channel axis first; slope holds one trainable value per channel.
Tensor prelu(const Tensor& x, const Tensor& slope);
Tensor activation(const Tensor& x, ActivationKind kind, const Tensor& prelu_slope = {});

// -- linear algebra and layout ----------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& x, Shape shape);
// Rows of equal length n -> [rows x n].
Tensor stack_rows(std::span<const Tensor> rows);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
// Rows scaled to unit L2 norm.
Tensor l2_normalize_rows(const Tensor& x);

// -- convolutional ------------------------------------------------------------

// Cross-correlation of input [C_in x H x W] with kernel [C_out x C_in x kh x kw].
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding);
// Adds bias[c] to every element of channel c of x [C x ...].
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
// [C x H x W] -> [C]
Tensor global_avg_pool(const Tensor& x);

// -- softmax family -----------------------------------------------------------

// For each row r of scores [m x n]: log(1 + sum_{j != t_r} exp(s_rj - s_rt_r)),
// which is also -log softmax(s_r)[t_r]. Non-target terms are summed in
// ascending column order. Result is [m].
Tensor nll_softmax(const Tensor& scores, std::span<const std::size_t> targets);

}  // namespace metricforge
