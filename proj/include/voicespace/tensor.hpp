// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major float64 tensors with tape-free reverse-mode differentiation.
//
// Every operation result remembers its inputs and a closure that pushes the
// result's gradient back into them. backward() linearizes that DAG into a
// Graph (topological order) and walks it once in reverse. Results of
// operations whose inputs do not require gradients carry no history.
//
// Broadcasting is limited to scalar-times-tensor and row-wise bias addition.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace voicespace {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl&)> backward;

  std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  // A scalar zero.
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  // Matrix accessors; a rank-1 tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return impl_->data; }
  double at(std::size_t i) const { return impl_->data.at(i); }
  double at(std::size_t r, std::size_t c) const;
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->inputs.empty(); }
  const std::string& op() const { return impl_->op; }

  // Gradient accumulated by backward(); empty span when none has flowed.
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad();

  // In-place value update. Only leaves may be mutated (optimizer steps).
  std::span<double> mutable_data();
  void assign(std::span<const double> values);

  // Same values, no history, no gradient requirement.
  Tensor detach() const;
  // Deep copy as a fresh leaf.
  Tensor clone(bool requires_grad) const;
  Tensor reshaped(Shape shape) const;

  const detail::TensorImpl* id() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl);
  std::shared_ptr<detail::TensorImpl> impl_;

  friend class Graph;
  friend Tensor make_result(
      Shape shape, std::vector<double> data, std::string op,
      std::vector<Tensor> inputs,
      std::function<void(detail::TensorImpl&)> backward);
  friend detail::TensorImpl& impl_of(const Tensor& t);
};

// Builds an operation result. `backward` is dropped when no input requires
// gradients.
Tensor make_result(Shape shape, std::vector<double> data, std::string op,
                   std::vector<Tensor> inputs,
                   std::function<void(detail::TensorImpl&)> backward);
detail::TensorImpl& impl_of(const Tensor& t);

// While alive, operation results on this thread record no history, so
// inference through trainable parameters builds no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

struct GraphNode {
  std::string op;
  std::vector<std::size_t> inputs;
  std::size_t output = 0;
};

// Topologically ordered view of everything that contributes gradient to a
// root tensor. Node ids index tensor().
class Graph {
 public:
  static Graph trace(const Tensor& root);

  const std::vector<GraphNode>& nodes() const { return nodes_; }
  const std::vector<std::size_t>& leaves() const { return leaves_; }
  const Tensor& tensor(std::size_t id) const { return tensors_.at(id); }
  std::size_t size() const { return tensors_.size(); }
  std::size_t root() const { return root_; }

 private:
  std::vector<Tensor> tensors_;
  std::vector<GraphNode> nodes_;
  std::vector<std::size_t> leaves_;
  std::size_t root_ = 0;
};

// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
// calls until zero_grad(); intermediate gradients are reset each call.
void backward(const Tensor& loss);
void backward(const Tensor& loss, const Graph& graph);

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// a[m x n] + bias[n] on every row.
Tensor add_bias(const Tensor& a, const Tensor& bias);
Tensor scale(const Tensor& a, double factor);
// a * s and a / s for a scalar tensor s.
Tensor mul_scalar(const Tensor& a, const Tensor& s);
Tensor div_scalar(const Tensor& a, const Tensor& s);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor silu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Column means of a matrix: [m x n] -> [n].
Tensor mean_rows(const Tensor& a);
// Per-row sums: [m x n] -> [m].
Tensor row_sums(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);

Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);

inline constexpr double kKlFloor = 1e-12;
// Mean over rows of KL(p_i || q_i). q entries are floored at kKlFloor and
// 0 * log 0 counts as 0. Both arguments must be row-stochastic.
Tensor kl_rows(const Tensor& p, const Tensor& q);

// dot(a, b) / (|a| |b|) for two vectors of equal length.
Tensor cosine_sim(const Tensor& a, const Tensor& b);

// [N x N] -> [N x (N-1)], dropping entry (i, i) from each row.
Tensor drop_diagonal(const Tensor& a);
// [N x N] -> [N].
Tensor diagonal(const Tensor& a);

Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
// Row i of the result is row index[i] of a.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);
Tensor reshape(const Tensor& a, Shape shape);

// Each row divided by its Euclidean norm.
Tensor l2_normalize_rows(const Tensor& a);

// Per-row normalization to zero mean and unit variance, then gain and bias.
Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-5);

// ---- verification ---------------------------------------------------------

// Central differences of f around x, one coordinate at a time.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h = 1e-5);

// Largest violation ratio of |analytic - numeric| against
// max(rel * max(|analytic|, |numeric|), abs). Values <= 1 pass.
double grad_violation(std::span<const double> analytic,
                      std::span<const double> numeric, double rel = 1e-4,
                      double abs_tol = 1e-7);
// Largest |a - n| / max(|a|, |n|, floor) over the two gradients.
double max_relative_error(std::span<const double> analytic,
                          std::span<const double> numeric,
                          double floor = 1e-7);

}  // namespace voicespace
